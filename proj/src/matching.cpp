#include "concatlab/matching.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace concatlab {

namespace {

constexpr double kProbEps = 1e-7;

double clamp_prob(double p) { return std::min(1.0 - kProbEps, std::max(kProbEps, p)); }

double focal_term(double p, double y, double alpha, double gamma) {
  p = clamp_prob(p);
  return -alpha * std::pow(1.0 - p, gamma) * y * std::log(p) -
         (1.0 - alpha) * std::pow(p, gamma) * (1.0 - y) * std::log(1.0 - p);
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

double focal_loss(const Tensor& prob, const Tensor& target, double alpha, double gamma) {
  if (!prob.same_shape(target)) {
    throw ShapeError("focal_loss: prob shape " + shape_str(prob.shape()) + " vs target shape " + shape_str(target.shape()));
  }
  if (prob.size() == 0) throw ShapeError("focal_loss of empty tensor");
  double s = 0.0;
  for (std::int64_t i = 0; i < prob.size(); ++i) s += focal_term(prob.at(i), target.at(i), alpha, gamma);
  return s / static_cast<double>(prob.size());
}

ad::Value focal_loss(const ad::Value& prob, const Tensor& target, double alpha, double gamma) {
  using namespace ad;
  if (!prob->value.same_shape(target)) {
    throw ShapeError("focal_loss: prob shape " + shape_str(prob->value.shape()) + " vs target shape " + shape_str(target.shape()));
  }
  auto p = clamp(prob, kProbEps, 1.0 - kProbEps);
  auto y = constant(target);
  Tensor ones_t = Tensor::ones(target.shape());
  auto one = constant(ones_t);
  Tensor ycomp(target.shape());
  for (std::int64_t i = 0; i < target.size(); ++i) ycomp.at(i) = 1.0 - target.at(i);
  auto pos = mul_scalar(mul(mul(pow_scalar(sub(one, p), gamma), y), log_(p)), -alpha);
  auto negt = mul_scalar(mul(mul(pow_scalar(p, gamma), constant(ycomp)), log_(sub(one, p))), -(1.0 - alpha));
  return mean_all(add(pos, negt));
}

double mask_loss(const Tensor& mask_logits, const Tensor& gt_mask, double bce_weight, double dice_weight) {
  if (!mask_logits.same_shape(gt_mask)) {
    throw ShapeError("mask_loss: logits shape " + shape_str(mask_logits.shape()) + " vs mask shape " + shape_str(gt_mask.shape()));
  }
  if (mask_logits.size() == 0) throw ShapeError("mask_loss of empty tensor");
  double bce = 0.0, inter = 0.0, psum = 0.0, gsum = 0.0;
  for (std::int64_t i = 0; i < mask_logits.size(); ++i) {
    const double p = clamp_prob(stable_sigmoid(mask_logits.at(i)));
    const double y = gt_mask.at(i);
    bce += -y * std::log(p) - (1.0 - y) * std::log(1.0 - p);
    inter += p * y;
    psum += p;
    gsum += y;
  }
  bce /= static_cast<double>(mask_logits.size());
  const double dice = 1.0 - (2.0 * inter + 1.0) / (psum + gsum + 1.0);
  return bce_weight * bce + dice_weight * dice;
}

ad::Value mask_loss(const ad::Value& mask_logits, const Tensor& gt_mask, double bce_weight, double dice_weight) {
  using namespace ad;
  if (!mask_logits->value.same_shape(gt_mask)) {
    throw ShapeError("mask_loss: logits shape " + shape_str(mask_logits->value.shape()) + " vs mask shape " + shape_str(gt_mask.shape()));
  }
  auto p = clamp(sigmoid(mask_logits), kProbEps, 1.0 - kProbEps);
  auto y = constant(gt_mask);
  auto one = constant(Tensor::ones(gt_mask.shape()));
  Tensor ycomp(gt_mask.shape());
  double gsum = 0.0;
  for (std::int64_t i = 0; i < gt_mask.size(); ++i) {
    ycomp.at(i) = 1.0 - gt_mask.at(i);
    gsum += gt_mask.at(i);
  }
  auto bce = neg(mean_all(add(mul(y, log_(p)), mul(constant(ycomp), log_(sub(one, p))))));
  auto inter = sum_all(mul(p, y));
  auto num = add_scalar(mul_scalar(inter, 2.0), 1.0);
  auto den = add_scalar(sum_all(p), gsum + 1.0);
  auto dice = sub(constant(Tensor::scalar(1.0)), div(num, den));
  return add(mul_scalar(bce, bce_weight), mul_scalar(dice, dice_weight));
}

Tensor match_cost_matrix(const Tensor& class_probs, const std::vector<std::int64_t>& gt_seen_index,
                         const Tensor& pred_mask_logits, const std::vector<Tensor>& gt_masks,
                         const LossWeights& w, const Tensor& mask_costs) {
  const std::int64_t k = class_probs.rows();
  const std::int64_t ns = class_probs.cols();
  const std::int64_t o = static_cast<std::int64_t>(gt_seen_index.size());
  if (static_cast<std::int64_t>(gt_masks.size()) != o && mask_costs.size() == 0) {
    throw ShapeError("match_cost_matrix: " + std::to_string(gt_seen_index.size()) + " labels vs " + std::to_string(gt_masks.size()) + " masks");
  }
  if (o > k) {
    throw ContractError("match_cost_matrix: " + std::to_string(o) + " segments cannot be matched onto " +
                        std::to_string(k) + " queries");
  }
  const bool cached = mask_costs.size() > 0;
  if (cached && (mask_costs.rank() != 2 || mask_costs.rows() != k || mask_costs.cols() != o)) {
    throw ShapeError("match_cost_matrix: cached mask costs shape " + shape_str(mask_costs.shape()) + ", expected [" + std::to_string(k) + "x" + std::to_string(o) + "]");
  }
  Tensor cost({k, o});
  for (std::int64_t oi = 0; oi < o; ++oi) {
    const std::int64_t label = gt_seen_index[oi];
    if (label < 0 || label >= ns) {
      throw ContractError("match_cost_matrix: seen label index " + std::to_string(label) + " out of range [0," + std::to_string(ns) + ")");
    }
    for (std::int64_t ki = 0; ki < k; ++ki) {
      double focal = 0.0;
      for (std::int64_t c = 0; c < ns; ++c) {
        focal += focal_term(class_probs.at2(ki, c), c == label ? 1.0 : 0.0, w.alpha_focal, w.gamma_focal);
      }
      focal /= static_cast<double>(ns);
      const double mc = cached ? mask_costs.at2(ki, oi)
                               : mask_loss(slice_first(pred_mask_logits, ki), gt_masks[static_cast<std::size_t>(oi)], w.bce_weight, w.dice_weight);
      cost.at2(ki, oi) = focal + mc;
    }
  }
  return cost;
}

namespace {

// Shortest-augmenting-path assignment on an n x m cost matrix, n <= m;
// returns the minimal total cost and (optionally) the column of each row.
double km_min_cost(const std::vector<std::vector<double>>& a, std::vector<int>* row_to_col) {
  const int n = static_cast<int>(a.size());
  if (n == 0) {
    if (row_to_col) row_to_col->clear();
    return 0.0;
  }
  const int m = static_cast<int>(a[0].size());
  const double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<std::size_t>(n) + 1, 0.0), v(static_cast<std::size_t>(m) + 1, 0.0);
  std::vector<int> p(static_cast<std::size_t>(m) + 1, 0), way(static_cast<std::size_t>(m) + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(m) + 1, kInf);
    std::vector<bool> used(static_cast<std::size_t>(m) + 1, false);
    do {
      used[static_cast<std::size_t>(j0)] = true;
      const int i0 = p[static_cast<std::size_t>(j0)];
      int j1 = -1;
      double delta = kInf;
      for (int j = 1; j <= m; ++j) {
        if (used[static_cast<std::size_t>(j)]) continue;
        const double cur = a[static_cast<std::size_t>(i0 - 1)][static_cast<std::size_t>(j - 1)] - u[static_cast<std::size_t>(i0)] - v[static_cast<std::size_t>(j)];
        if (cur < minv[static_cast<std::size_t>(j)]) {
          minv[static_cast<std::size_t>(j)] = cur;
          way[static_cast<std::size_t>(j)] = j0;
        }
        if (minv[static_cast<std::size_t>(j)] < delta) {
          delta = minv[static_cast<std::size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[static_cast<std::size_t>(j)]) {
          u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
          v[static_cast<std::size_t>(j)] -= delta;
        } else {
          minv[static_cast<std::size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<std::size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<std::size_t>(j0)];
      p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0);
  }
  if (row_to_col) {
    row_to_col->assign(static_cast<std::size_t>(n), -1);
    for (int j = 1; j <= m; ++j) {
      if (p[static_cast<std::size_t>(j)] > 0) (*row_to_col)[static_cast<std::size_t>(p[static_cast<std::size_t>(j)] - 1)] = j - 1;
    }
  }
  double total = 0.0;
  std::vector<int> rc;
  if (!row_to_col) {
    row_to_col = &rc;
    row_to_col->assign(static_cast<std::size_t>(n), -1);
    for (int j = 1; j <= m; ++j) {
      if (p[static_cast<std::size_t>(j)] > 0) (*row_to_col)[static_cast<std::size_t>(p[static_cast<std::size_t>(j)] - 1)] = j - 1;
    }
  }
  for (int i = 0; i < n; ++i) total += a[static_cast<std::size_t>(i)][static_cast<std::size_t>((*row_to_col)[static_cast<std::size_t>(i)])];
  return total;
}

std::vector<std::vector<double>> subcost(const Tensor& cost, const std::vector<std::int64_t>& segs, const std::vector<std::int64_t>& queries) {
  std::vector<std::vector<double>> a(segs.size(), std::vector<double>(queries.size()));
  for (std::size_t i = 0; i < segs.size(); ++i)
    for (std::size_t j = 0; j < queries.size(); ++j) a[i][j] = cost.at2(queries[j], segs[i]);
  return a;
}

}  // namespace

Assignment hungarian(const Tensor& cost) {
  if (cost.rank() != 2) throw ShapeError("hungarian: cost must be rank-2, got shape " + shape_str(cost.shape()));
  const std::int64_t k = cost.shape()[0], o = cost.shape()[1];
  if (o > k) {
    throw ContractError("hungarian: infeasible assignment, " + std::to_string(o) + " segments > " + std::to_string(k) + " queries");
  }
  if (!cost.all_finite()) throw NumericError("hungarian: non-finite cost entry");
  Assignment out;
  out.query_to_segment.assign(static_cast<std::size_t>(k), -1);
  out.segment_to_query.assign(static_cast<std::size_t>(o), -1);
  if (o == 0) return out;

  std::vector<std::int64_t> segs(static_cast<std::size_t>(o)), queries(static_cast<std::size_t>(k));
  for (std::int64_t i = 0; i < o; ++i) segs[static_cast<std::size_t>(i)] = i;
  for (std::int64_t i = 0; i < k; ++i) queries[static_cast<std::size_t>(i)] = i;

  // Optimal value, then a lexicographic refinement: segments in ascending
  // order each take the lowest-index query that still admits an optimal
  // completion (fp tolerance guards reordered additions).
  double best = km_min_cost(subcost(cost, segs, queries), nullptr);
  for (std::int64_t level = 0; level < o; ++level) {
    const std::int64_t seg = segs.front();
    std::vector<std::int64_t> rest_segs(segs.begin() + 1, segs.end());
    bool fixed = false;
    for (std::size_t qi = 0; qi < queries.size() && !fixed; ++qi) {
      const std::int64_t q = queries[qi];
      std::vector<std::int64_t> rest_queries;
      rest_queries.reserve(queries.size() - 1);
      for (std::size_t t = 0; t < queries.size(); ++t) {
        if (t != qi) rest_queries.push_back(queries[t]);
      }
      const double remainder = km_min_cost(subcost(cost, rest_segs, rest_queries), nullptr);
      const double t = cost.at2(q, seg) + remainder;
      if (t <= best + 1e-9 * std::max(1.0, std::abs(best))) {
        out.segment_to_query[static_cast<std::size_t>(seg)] = q;
        out.query_to_segment[static_cast<std::size_t>(q)] = seg;
        segs = std::move(rest_segs);
        queries = std::move(rest_queries);
        best = remainder;
        fixed = true;
      }
    }
    if (!fixed) throw ContractError("hungarian: internal refinement failure");
  }
  out.total_cost = 0.0;
  for (std::int64_t s = 0; s < o; ++s) out.total_cost += cost.at2(out.segment_to_query[static_cast<std::size_t>(s)], s);
  return out;
}

}  // namespace concatlab
