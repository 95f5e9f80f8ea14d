#include "concatlab/optim.hpp"

#include <cmath>

namespace concatlab {

ad::Value ParamSet::add(const std::string& name, Tensor init, bool trainable) {
  if (index_.count(name)) throw ContractError("duplicate parameter name '" + name + "'");
  auto node = ad::leaf(std::move(init), trainable);
  index_[name] = entries_.size();
  entries_.push_back({name, node});
  return node;
}

ad::Value ParamSet::find(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("unknown parameter '" + name + "'");
  return entries_[it->second].node;
}

bool ParamSet::contains(const std::string& name) const { return index_.count(name) > 0; }

void ParamSet::set_trainable(bool trainable) {
  for (auto& e : entries_) e.node->requires_grad = trainable;
}

void ParamSet::clear_grads() {
  for (auto& e : entries_) e.node->grad = Tensor();
}

std::int64_t ParamSet::total_size() const {
  std::int64_t n = 0;
  for (const auto& e : entries_) n += e.node->value.size();
  return n;
}

void ParamSet::merge_from(ParamSet& other) {
  for (auto& e : other.entries_) {
    if (index_.count(e.name)) throw ContractError("duplicate parameter name '" + e.name + "' in merge");
    index_[e.name] = entries_.size();
    entries_.push_back(e);
  }
}

std::map<std::string, Tensor> ParamSet::gradients() const {
  std::map<std::string, Tensor> out;
  for (const auto& e : entries_) {
    if (e.node->grad_allocated()) {
      out[e.name] = e.node->grad;
    } else {
      out[e.name] = Tensor(e.node->value.shape());
    }
  }
  return out;
}

void Adam::step(ParamSet& params) {
  step_count_ += 1;
  const double t = static_cast<double>(step_count_);
  const double bc1 = 1.0 - std::pow(cfg_.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg_.beta2, t);
  for (auto& e : params.entries()) {
    if (!e.node->requires_grad) continue;
    auto& [m, v] = moments_[e.name];
    if (m.size() != e.node->value.size()) {
      m = Tensor(e.node->value.shape());
      v = Tensor(e.node->value.shape());
    }
    const bool has_grad = e.node->grad_allocated();
    const bool is_bias = e.name.size() >= 5 && e.name.compare(e.name.size() - 5, 5, ".bias") == 0;
    const double decay = (has_grad && !is_bias) ? cfg_.lr * cfg_.weight_decay : 0.0;
    for (std::int64_t i = 0; i < e.node->value.size(); ++i) {
      const double g = has_grad ? e.node->grad.at(i) : 0.0;
      m.at(i) = cfg_.beta1 * m.at(i) + (1.0 - cfg_.beta1) * g;
      v.at(i) = cfg_.beta2 * v.at(i) + (1.0 - cfg_.beta2) * g * g;
      const double mhat = m.at(i) / bc1;
      const double vhat = v.at(i) / bc2;
      e.node->value.at(i) -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps) + decay * e.node->value.at(i);
    }
  }
}

GradCheckResult gradcheck(const std::function<ad::Value()>& loss_builder, ParamSet& params, double h, double tol) {
  GradCheckResult result;
  params.clear_grads();
  auto root = loss_builder();
  ad::backward(root);
  // Snapshot analytic gradients before perturbing anything.
  std::vector<Tensor> analytic;
  for (const auto& e : params.entries()) {
    analytic.push_back(e.node->grad_allocated() ? e.node->grad : Tensor(e.node->value.shape()));
  }
  for (std::size_t pi = 0; pi < params.entries().size(); ++pi) {
    auto& e = params.entries()[pi];
    if (!e.node->requires_grad) continue;
    GradCheckResult::PerParam pp;
    pp.name = e.name;
    for (std::int64_t i = 0; i < e.node->value.size(); ++i) {
      const double orig = e.node->value.at(i);
      e.node->value.at(i) = orig + h;
      const double lp = ad::evaluate(loss_builder()).item();
      e.node->value.at(i) = orig - h;
      const double lm = ad::evaluate(loss_builder()).item();
      e.node->value.at(i) = orig;
      const double fd = (lp - lm) / (2.0 * h);
      const double adg = analytic[pi].at(i);
      const double rel = std::abs(fd - adg) / std::max({std::abs(fd), std::abs(adg), 1.0});
      if (rel > pp.max_rel_err) {
        pp.max_rel_err = rel;
        pp.worst_index = i;
      }
    }
    pp.pass = pp.max_rel_err <= tol;
    if (pp.max_rel_err > result.max_rel_err) {
      result.max_rel_err = pp.max_rel_err;
      result.worst_param = pp.name;
    }
    result.pass = result.pass && pp.pass;
    result.params.push_back(pp);
  }
  return result;
}

}  // namespace concatlab
