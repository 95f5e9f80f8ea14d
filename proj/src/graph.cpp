#include "concatlab/graph.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace concatlab::ad {

namespace {

void check_finite(const std::string& op, const Tensor& t) {
  if (!t.all_finite()) throw NumericError("non-finite values produced by op '" + op + "'");
}

Value make_node(Tensor value, std::string op, std::vector<Value> parents, std::function<void(Node&)> backprop) {
  check_finite(op, value);
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->op = std::move(op);
  bool rq = false;
  for (const auto& p : parents) rq = rq || p->requires_grad;
  n->requires_grad = rq;
  n->parents = std::move(parents);
  if (rq) n->backprop = std::move(backprop);
  return n;
}

void ensure_grad(Node& n) {
  if (!n.grad_allocated()) n.grad = Tensor(n.value.shape());
}

void accum(Value& p, const Tensor& g) {
  if (!p->requires_grad) return;
  ensure_grad(*p);
  for (std::int64_t i = 0; i < g.size(); ++i) p->grad.at(i) += g.at(i);
}

// Effective 2D view for broadcasting: size-1 tensors become [1,1]; rank-1 [n]
// becomes [1,n]; rank-2 stays. Higher rank requires exact shape match.
struct View2 {
  std::int64_t r, c;
};

bool as2d(const Tensor& t, View2& v) {
  if (t.size() == 1) {
    v = {1, 1};
    return true;
  }
  if (t.rank() == 1) {
    v = {1, t.shape()[0]};
    return true;
  }
  if (t.rank() == 2) {
    v = {t.shape()[0], t.shape()[1]};
    return true;
  }
  return false;
}

struct BinPlan {
  bool same_shape;
  View2 a, b, out;
  Shape out_shape;
};

BinPlan plan_binary(const std::string& op, const Tensor& a, const Tensor& b) {
  BinPlan p{};
  if (a.same_shape(b)) {
    p.same_shape = true;
    p.out_shape = a.shape();
    return p;
  }
  View2 va{}, vb{};
  if (!as2d(a, va) || !as2d(b, vb)) {
    throw ShapeError("op '" + op + "': incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  auto merge = [&](std::int64_t x, std::int64_t y) -> std::int64_t {
    if (x == y) return x;
    if (x == 1) return y;
    if (y == 1) return x;
    throw ShapeError("op '" + op + "': incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  };
  p.same_shape = false;
  p.a = va;
  p.b = vb;
  p.out = {merge(va.r, vb.r), merge(va.c, vb.c)};
  p.out_shape = {p.out.r, p.out.c};
  return p;
}

// Reduce a gradient over the broadcast output back to the parent's shape.
Tensor reduce_to(const Tensor& g, const View2& gv, const Tensor& parent_value, const View2& pv) {
  Tensor out(parent_value.shape());
  for (std::int64_t i = 0; i < gv.r; ++i) {
    const std::int64_t pi = (pv.r == 1) ? 0 : i;
    for (std::int64_t j = 0; j < gv.c; ++j) {
      const std::int64_t pj = (pv.c == 1) ? 0 : j;
      out.at(pi * pv.c + pj) += g.at(i * gv.c + j);
    }
  }
  return out;
}

template <class FwdFn, class BwdFn>
Value binary_op(const std::string& name, const Value& a, const Value& b, FwdFn fwd, BwdFn bwd) {
  // fwd(x, y) -> double; bwd(x, y, out, g, &dx, &dy)
  BinPlan plan = plan_binary(name, a->value, b->value);
  Tensor out(plan.out_shape);
  if (plan.same_shape) {
    for (std::int64_t i = 0; i < out.size(); ++i) out.at(i) = fwd(a->value.at(i), b->value.at(i));
  } else {
    for (std::int64_t i = 0; i < plan.out.r; ++i) {
      for (std::int64_t j = 0; j < plan.out.c; ++j) {
        const double x = a->value.at(((plan.a.r == 1) ? 0 : i) * plan.a.c + ((plan.a.c == 1) ? 0 : j));
        const double y = b->value.at(((plan.b.r == 1) ? 0 : i) * plan.b.c + ((plan.b.c == 1) ? 0 : j));
        out.at(i * plan.out.c + j) = fwd(x, y);
      }
    }
  }
  return make_node(std::move(out), name, {a, b}, [plan, bwd](Node& n) {
    Value pa = n.parents[0], pb = n.parents[1];
    if (plan.same_shape) {
      if (pa->requires_grad) ensure_grad(*pa);
      if (pb->requires_grad) ensure_grad(*pb);
      for (std::int64_t i = 0; i < n.value.size(); ++i) {
        double dx = 0, dy = 0;
        bwd(pa->value.at(i), pb->value.at(i), n.value.at(i), n.grad.at(i), &dx, &dy);
        if (pa->requires_grad) pa->grad.at(i) += dx;
        if (pb->requires_grad) pb->grad.at(i) += dy;
      }
    } else {
      if (pa->requires_grad) ensure_grad(*pa);
      if (pb->requires_grad) ensure_grad(*pb);
      for (std::int64_t i = 0; i < plan.out.r; ++i) {
        for (std::int64_t j = 0; j < plan.out.c; ++j) {
          const std::int64_t ai = ((plan.a.r == 1) ? 0 : i) * plan.a.c + ((plan.a.c == 1) ? 0 : j);
          const std::int64_t bi = ((plan.b.r == 1) ? 0 : i) * plan.b.c + ((plan.b.c == 1) ? 0 : j);
          double dx = 0, dy = 0;
          bwd(pa->value.at(ai), pb->value.at(bi), n.value.at(i * plan.out.c + j), n.grad.at(i * plan.out.c + j), &dx, &dy);
          if (pa->requires_grad) pa->grad.at(ai) += dx;
          if (pb->requires_grad) pb->grad.at(bi) += dy;
        }
      }
    }
  });
}

template <class FwdFn, class BwdFn>
Value unary_op(const std::string& name, const Value& a, FwdFn fwd, BwdFn bwd) {
  // fwd(x) -> double; bwd(x, out, g) -> double (gradient contribution)
  Tensor out(a->value.shape());
  for (std::int64_t i = 0; i < out.size(); ++i) out.at(i) = fwd(a->value.at(i));
  return make_node(std::move(out), name, {a}, [bwd](Node& n) {
    Value p = n.parents[0];
    if (!p->requires_grad) return;
    ensure_grad(*p);
    for (std::int64_t i = 0; i < n.value.size(); ++i) {
      p->grad.at(i) += bwd(p->value.at(i), n.value.at(i), n.grad.at(i));
    }
  });
}

void require_2d(const std::string& op, const Tensor& t) {
  if (t.rank() != 2) throw ShapeError("op '" + op + "' requires rank-2 input, got shape " + shape_str(t.shape()));
}

}  // namespace

Value leaf(Tensor t, bool requires_grad) {
  check_finite("leaf", t);
  auto n = std::make_shared<Node>();
  n->value = std::move(t);
  n->op = "leaf";
  n->requires_grad = requires_grad;
  return n;
}

const Tensor& evaluate(const Value& root) { return root->value; }

void backward(const Value& root) {
  if (!root) throw ContractError("backward: null root");
  if (root->value.size() != 1) {
    throw ContractError("backward requires a scalar root, got shape " + shape_str(root->value.shape()));
  }
  // Iterative topological order over the reachable subgraph.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.push_back({root.get(), 0});
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node* p = node->parents[idx].get();
      ++idx;
      if (!visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  // Zero all reachable grads, then seed the root.
  for (Node* n : order) {
    if (!n->requires_grad) continue;
    if (n->grad_allocated()) {
      for (std::int64_t i = 0; i < n->grad.size(); ++i) n->grad.at(i) = 0.0;
    } else {
      n->grad = Tensor(n->value.shape());
    }
  }
  if (!root->requires_grad) return;  // nothing trainable upstream
  root->grad.at(0) = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->requires_grad && n->backprop) n->backprop(*n);
  }
}

Value add(const Value& a, const Value& b) {
  return binary_op("add", a, b, [](double x, double y) { return x + y; },
                   [](double, double, double, double g, double* dx, double* dy) {
                     *dx = g;
                     *dy = g;
                   });
}

Value sub(const Value& a, const Value& b) {
  return binary_op("sub", a, b, [](double x, double y) { return x - y; },
                   [](double, double, double, double g, double* dx, double* dy) {
                     *dx = g;
                     *dy = -g;
                   });
}

Value mul(const Value& a, const Value& b) {
  return binary_op("mul", a, b, [](double x, double y) { return x * y; },
                   [](double x, double y, double, double g, double* dx, double* dy) {
                     *dx = g * y;
                     *dy = g * x;
                   });
}

Value div(const Value& a, const Value& b) {
  return binary_op("div", a, b, [](double x, double y) { return x / y; },
                   [](double x, double y, double, double g, double* dx, double* dy) {
                     *dx = g / y;
                     *dy = -g * x / (y * y);
                   });
}

Value add_scalar(const Value& a, double s) {
  return unary_op("add_scalar", a, [s](double x) { return x + s; },
                  [](double, double, double g) { return g; });
}

Value mul_scalar(const Value& a, double s) {
  return unary_op("mul_scalar", a, [s](double x) { return x * s; },
                  [s](double, double, double g) { return g * s; });
}

Value pow_scalar(const Value& a, double p) {
  return unary_op("pow_scalar", a, [p](double x) { return std::pow(x, p); },
                  [p](double x, double y, double g) {
                    if (p == 0.0) return 0.0;
                    // y = x^p, dy/dx = p*x^(p-1); reuse y where safe
                    if (x != 0.0) return g * p * y / x;
                    return g * p * std::pow(x, p - 1.0);
                  });
}

Value neg(const Value& a) { return mul_scalar(a, -1.0); }

Value clamp(const Value& a, double lo, double hi) {
  if (!(lo < hi)) throw ContractError("clamp: lo must be < hi");
  return unary_op("clamp", a, [lo, hi](double x) { return std::min(hi, std::max(lo, x)); },
                  [lo, hi](double x, double, double g) { return (x > lo && x < hi) ? g : 0.0; });
}

Value sigmoid(const Value& a) {
  return unary_op("sigmoid", a,
                  [](double x) {
                    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
                    const double e = std::exp(x);
                    return e / (1.0 + e);
                  },
                  [](double, double y, double g) { return g * y * (1.0 - y); });
}

Value log_(const Value& a) {
  for (std::int64_t i = 0; i < a->value.size(); ++i) {
    if (a->value.at(i) <= 0.0) throw NumericError("log of non-positive value");
  }
  return unary_op("log", a, [](double x) { return std::log(x); },
                  [](double x, double, double g) { return g / x; });
}

Value exp_(const Value& a) {
  return unary_op("exp", a, [](double x) { return std::exp(x); },
                  [](double, double y, double g) { return g * y; });
}

Value leaky_relu(const Value& a, double slope) {
  return unary_op("leaky_relu", a, [slope](double x) { return x >= 0 ? x : slope * x; },
                  [slope](double x, double, double g) { return x >= 0 ? g : slope * g; });
}

Value matmul(const Value& a, const Value& b) {
  require_2d("matmul", a->value);
  require_2d("matmul", b->value);
  const std::int64_t m = a->value.rows(), k = a->value.cols(), k2 = b->value.rows(), n = b->value.cols();
  if (k != k2) {
    throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a->value.shape()) + " vs " + shape_str(b->value.shape()));
  }
  Tensor out({m, n});
  const double* A = a->value.data();
  const double* B = b->value.data();
  double* O = out.data();
  for (std::int64_t i = 0; i < m; ++i) {
    for (std::int64_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      if (av == 0.0) continue;
      const double* brow = B + p * n;
      double* orow = O + i * n;
      for (std::int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return make_node(std::move(out), "matmul", {a, b}, [m, k, n](Node& node) {
    Value pa = node.parents[0], pb = node.parents[1];
    const double* G = node.grad.data();
    if (pa->requires_grad) {
      ensure_grad(*pa);
      const double* B = pb->value.data();
      double* DA = pa->grad.data();
      for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t j = 0; j < n; ++j) {
          const double g = G[i * n + j];
          if (g == 0.0) continue;
          const double* brow = B + 0;
          for (std::int64_t p = 0; p < k; ++p) DA[i * k + p] += g * brow[p * n + j];
        }
      }
    }
    if (pb->requires_grad) {
      ensure_grad(*pb);
      const double* A = pa->value.data();
      double* DB = pb->grad.data();
      for (std::int64_t p = 0; p < k; ++p) {
        for (std::int64_t i = 0; i < m; ++i) {
          const double av = A[i * k + p];
          if (av == 0.0) continue;
          const double* grow = G + i * n;
          double* drow = DB + p * n;
          for (std::int64_t j = 0; j < n; ++j) drow[j] += av * grow[j];
        }
      }
    }
  });
}

Value transpose(const Value& a) {
  require_2d("transpose", a->value);
  const std::int64_t m = a->value.rows(), n = a->value.cols();
  Tensor out({n, m});
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j) out.at2(j, i) = a->value.at2(i, j);
  return make_node(std::move(out), "transpose", {a}, [m, n](Node& node) {
    Value p = node.parents[0];
    if (!p->requires_grad) return;
    ensure_grad(*p);
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t j = 0; j < n; ++j) p->grad.at(i * n + j) += node.grad.at(j * m + i);
  });
}

Value softmax(const Value& a, int axis) {
  require_2d("softmax", a->value);
  if (axis != 0 && axis != 1) throw ContractError("softmax: axis must be 0 or 1");
  const std::int64_t m = a->value.rows(), n = a->value.cols();
  const std::int64_t slices = (axis == 1) ? m : n;
  const std::int64_t len = (axis == 1) ? n : m;
  auto idx = [axis, n](std::int64_t s, std::int64_t t) { return (axis == 1) ? s * n + t : t * n + s; };
  Tensor out({m, n});
  for (std::int64_t s = 0; s < slices; ++s) {
    double mx = -1e300;
    for (std::int64_t t = 0; t < len; ++t) mx = std::max(mx, a->value.at(idx(s, t)));
    double z = 0.0;
    for (std::int64_t t = 0; t < len; ++t) z += std::exp(a->value.at(idx(s, t)) - mx);
    for (std::int64_t t = 0; t < len; ++t) out.at(idx(s, t)) = std::exp(a->value.at(idx(s, t)) - mx) / z;
  }
  return make_node(std::move(out), "softmax", {a}, [slices, len, idx](Node& node) {
    Value p = node.parents[0];
    if (!p->requires_grad) return;
    ensure_grad(*p);
    for (std::int64_t s = 0; s < slices; ++s) {
      double dot = 0.0;
      for (std::int64_t t = 0; t < len; ++t) dot += node.grad.at(idx(s, t)) * node.value.at(idx(s, t));
      for (std::int64_t t = 0; t < len; ++t) {
        const double y = node.value.at(idx(s, t));
        p->grad.at(idx(s, t)) += y * (node.grad.at(idx(s, t)) - dot);
      }
    }
  });
}

Value l2_normalize_rows(const Value& a) {
  require_2d("l2_normalize_rows", a->value);
  const std::int64_t m = a->value.rows(), n = a->value.cols();
  Tensor out({m, n});
  std::vector<double> norms(static_cast<std::size_t>(m));
  for (std::int64_t i = 0; i < m; ++i) {
    double ss = 0.0;
    for (std::int64_t j = 0; j < n; ++j) ss += a->value.at2(i, j) * a->value.at2(i, j);
    const double norm = std::sqrt(ss);
    norms[static_cast<std::size_t>(i)] = norm;
    const double scale = (norm > 1e-12) ? 1.0 / norm : 1.0;
    for (std::int64_t j = 0; j < n; ++j) out.at2(i, j) = a->value.at2(i, j) * scale;
  }
  return make_node(std::move(out), "l2_normalize_rows", {a}, [m, n, norms](Node& node) {
    Value p = node.parents[0];
    if (!p->requires_grad) return;
    ensure_grad(*p);
    for (std::int64_t i = 0; i < m; ++i) {
      const double norm = norms[static_cast<std::size_t>(i)];
      if (norm > 1e-12) {
        double dot = 0.0;
        for (std::int64_t j = 0; j < n; ++j) dot += node.grad.at(i * n + j) * node.value.at(i * n + j);
        for (std::int64_t j = 0; j < n; ++j) {
          p->grad.at(i * n + j) += (node.grad.at(i * n + j) - node.value.at(i * n + j) * dot) / norm;
        }
      } else {
        for (std::int64_t j = 0; j < n; ++j) p->grad.at(i * n + j) += node.grad.at(i * n + j);
      }
    }
  });
}

Value sum_all(const Value& a) {
  double s = 0.0;
  for (std::int64_t i = 0; i < a->value.size(); ++i) s += a->value.at(i);
  return make_node(Tensor::scalar(s), "sum_all", {a}, [](Node& node) {
    Value p = node.parents[0];
    if (!p->requires_grad) return;
    ensure_grad(*p);
    const double g = node.grad.at(0);
    for (std::int64_t i = 0; i < p->grad.size(); ++i) p->grad.at(i) += g;
  });
}

Value mean_all(const Value& a) {
  if (a->value.size() == 0) throw ShapeError("mean_all of empty tensor");
  return mul_scalar(sum_all(a), 1.0 / static_cast<double>(a->value.size()));
}

Value sum_axis(const Value& a, int axis) {
  require_2d("sum_axis", a->value);
  if (axis != 0 && axis != 1) throw ContractError("sum_axis: axis must be 0 or 1");
  const std::int64_t m = a->value.rows(), n = a->value.cols();
  Tensor out(axis == 0 ? Shape{1, n} : Shape{m, 1});
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j) out.at(axis == 0 ? j : i) += a->value.at2(i, j);
  return make_node(std::move(out), "sum_axis", {a}, [m, n, axis](Node& node) {
    Value p = node.parents[0];
    if (!p->requires_grad) return;
    ensure_grad(*p);
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t j = 0; j < n; ++j) p->grad.at(i * n + j) += node.grad.at(axis == 0 ? j : i);
  });
}

Value mean_axis(const Value& a, int axis) {
  require_2d("mean_axis", a->value);
  const double denom = static_cast<double>(axis == 0 ? a->value.rows() : a->value.cols());
  if (denom == 0) throw ShapeError("mean_axis over empty axis");
  return mul_scalar(sum_axis(a, axis), 1.0 / denom);
}

Value concat(const std::vector<Value>& parts, int axis) {
  if (parts.empty()) throw ContractError("concat of zero tensors");
  if (axis != 0 && axis != 1) throw ContractError("concat: axis must be 0 or 1");
  for (const auto& p : parts) require_2d("concat", p->value);
  std::int64_t rows = parts[0]->value.rows(), cols = parts[0]->value.cols();
  std::int64_t total = 0;
  for (const auto& p : parts) {
    if (axis == 0) {
      if (p->value.cols() != cols)
        throw ShapeError("concat axis 0: column mismatch " + shape_str(p->value.shape()) + " vs " + shape_str(parts[0]->value.shape()));
      total += p->value.rows();
    } else {
      if (p->value.rows() != rows)
        throw ShapeError("concat axis 1: row mismatch " + shape_str(p->value.shape()) + " vs " + shape_str(parts[0]->value.shape()));
      total += p->value.cols();
    }
  }
  Tensor out(axis == 0 ? Shape{total, cols} : Shape{rows, total});
  std::vector<std::int64_t> offsets;
  std::int64_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    if (axis == 0) {
      const std::int64_t r = p->value.rows();
      for (std::int64_t i = 0; i < r; ++i)
        for (std::int64_t j = 0; j < cols; ++j) out.at2(off + i, j) = p->value.at2(i, j);
      off += r;
    } else {
      const std::int64_t c = p->value.cols();
      for (std::int64_t i = 0; i < rows; ++i)
        for (std::int64_t j = 0; j < c; ++j) out.at2(i, off + j) = p->value.at2(i, j);
      off += c;
    }
  }
  return make_node(std::move(out), "concat", parts, [axis, offsets](Node& node) {
    for (std::size_t k = 0; k < node.parents.size(); ++k) {
      Value p = node.parents[k];
      if (!p->requires_grad) continue;
      ensure_grad(*p);
      const std::int64_t off = offsets[k];
      const std::int64_t r = p->value.rows(), c = p->value.cols();
      for (std::int64_t i = 0; i < r; ++i)
        for (std::int64_t j = 0; j < c; ++j)
          p->grad.at(i * c + j) += (axis == 0) ? node.grad.at2(off + i, j) : node.grad.at2(i, off + j);
    }
  });
}

Value gather_rows(const Value& a, std::vector<std::int64_t> indices) {
  require_2d("gather_rows", a->value);
  const std::int64_t m = a->value.rows(), n = a->value.cols();
  for (auto i : indices) {
    if (i < 0 || i >= m) throw ShapeError("gather_rows: index " + std::to_string(i) + " out of range for shape " + shape_str(a->value.shape()));
  }
  Tensor out({static_cast<std::int64_t>(indices.size()), n});
  for (std::size_t r = 0; r < indices.size(); ++r)
    for (std::int64_t j = 0; j < n; ++j) out.at2(static_cast<std::int64_t>(r), j) = a->value.at2(indices[r], j);
  return make_node(std::move(out), "gather_rows", {a}, [indices, n](Node& node) {
    Value p = node.parents[0];
    if (!p->requires_grad) return;
    ensure_grad(*p);
    for (std::size_t r = 0; r < indices.size(); ++r)
      for (std::int64_t j = 0; j < n; ++j)
        p->grad.at(indices[r] * n + j) += node.grad.at2(static_cast<std::int64_t>(r), j);
  });
}

Value affine(const Value& x, const Value& w, const Value& b) {
  return add(matmul(x, w), b);
}

BatchNormState BatchNormState::init(std::int64_t features) {
  BatchNormState s;
  s.running_mean = Tensor({1, features});
  s.running_var = Tensor::ones({1, features});
  return s;
}

Value batch_norm(const Value& x, const Value& gamma, const Value& beta, BatchNormState& state, bool training) {
  require_2d("batch_norm", x->value);
  const std::int64_t b = x->value.rows(), f = x->value.cols();
  if (gamma->value.size() != f || beta->value.size() != f) {
    throw ShapeError("batch_norm: gamma/beta must have " + std::to_string(f) + " features, got " +
                     shape_str(gamma->value.shape()) + " and " + shape_str(beta->value.shape()));
  }
  if (state.running_mean.size() != f || state.running_var.size() != f) {
    throw ShapeError("batch_norm: state sized for " + std::to_string(state.running_mean.size()) + " features, input has " + std::to_string(f));
  }
  const bool use_batch_stats = training && b >= 2;
  Tensor mean({1, f}), var({1, f});
  if (use_batch_stats) {
    for (std::int64_t j = 0; j < f; ++j) {
      double m = 0.0;
      for (std::int64_t i = 0; i < b; ++i) m += x->value.at2(i, j);
      m /= static_cast<double>(b);
      double v = 0.0;
      for (std::int64_t i = 0; i < b; ++i) {
        const double d = x->value.at2(i, j) - m;
        v += d * d;
      }
      v /= static_cast<double>(b);  // biased, used for normalization
      mean.at(j) = m;
      var.at(j) = v;
    }
    const double mom = state.momentum;
    for (std::int64_t j = 0; j < f; ++j) {
      const double unbiased = var.at(j) * static_cast<double>(b) / static_cast<double>(b - 1);
      state.running_mean.at(j) = (1.0 - mom) * state.running_mean.at(j) + mom * mean.at(j);
      state.running_var.at(j) = (1.0 - mom) * state.running_var.at(j) + mom * unbiased;
    }
    state.batches_seen += 1;
  } else {
    mean = state.running_mean;
    var = state.running_var;
  }
  Tensor xhat({b, f});
  std::vector<double> inv_std(static_cast<std::size_t>(f));
  for (std::int64_t j = 0; j < f; ++j) inv_std[static_cast<std::size_t>(j)] = 1.0 / std::sqrt(var.at(j) + state.eps);
  for (std::int64_t i = 0; i < b; ++i)
    for (std::int64_t j = 0; j < f; ++j) xhat.at2(i, j) = (x->value.at2(i, j) - mean.at(j)) * inv_std[static_cast<std::size_t>(j)];
  Tensor out({b, f});
  for (std::int64_t i = 0; i < b; ++i)
    for (std::int64_t j = 0; j < f; ++j) out.at2(i, j) = gamma->value.at(j) * xhat.at2(i, j) + beta->value.at(j);
  return make_node(std::move(out), "batch_norm", {x, gamma, beta},
                   [b, f, xhat, inv_std, use_batch_stats](Node& node) {
                     Value px = node.parents[0], pg = node.parents[1], pb = node.parents[2];
                     // dgamma / dbeta
                     if (pg->requires_grad) {
                       ensure_grad(*pg);
                       for (std::int64_t j = 0; j < f; ++j) {
                         double s = 0.0;
                         for (std::int64_t i = 0; i < b; ++i) s += node.grad.at2(i, j) * xhat.at2(i, j);
                         pg->grad.at(j) += s;
                       }
                     }
                     if (pb->requires_grad) {
                       ensure_grad(*pb);
                       for (std::int64_t j = 0; j < f; ++j) {
                         double s = 0.0;
                         for (std::int64_t i = 0; i < b; ++i) s += node.grad.at2(i, j);
                         pb->grad.at(j) += s;
                       }
                     }
                     if (!px->requires_grad) return;
                     ensure_grad(*px);
                     if (use_batch_stats) {
                       for (std::int64_t j = 0; j < f; ++j) {
                         const double g = pg->value.at(j);
                         double sum_dy = 0.0, sum_dy_xhat = 0.0;
                         for (std::int64_t i = 0; i < b; ++i) {
                           sum_dy += node.grad.at2(i, j);
                           sum_dy_xhat += node.grad.at2(i, j) * xhat.at2(i, j);
                         }
                         const double nb = static_cast<double>(b);
                         for (std::int64_t i = 0; i < b; ++i) {
                           const double dy = node.grad.at2(i, j);
                           px->grad.at(i * f + j) +=
                               g * inv_std[static_cast<std::size_t>(j)] * (dy - sum_dy / nb - xhat.at2(i, j) * sum_dy_xhat / nb);
                         }
                       }
                     } else {
                       for (std::int64_t i = 0; i < b; ++i)
                         for (std::int64_t j = 0; j < f; ++j)
                           px->grad.at(i * f + j) += node.grad.at2(i, j) * pg->value.at(j) * inv_std[static_cast<std::size_t>(j)];
                     }
                   });
}

}  // namespace concatlab::ad
