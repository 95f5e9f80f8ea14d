#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "concatlab/graph.hpp"

namespace concatlab {

// Named collection of long-lived leaf parameters. Insertion order is the
// deterministic iteration order used by the optimizer and checkpoints.
class ParamSet {
 public:
  struct Entry {
    std::string name;
    ad::Value node;
  };

  ad::Value add(const std::string& name, Tensor init, bool trainable = true);
  ad::Value find(const std::string& name) const;  // throws if absent
  bool contains(const std::string& name) const;
  void set_trainable(bool trainable);
  void clear_grads();  // call before each backward pass so stale grads never leak into a step
  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }
  std::int64_t total_size() const;
  void merge_from(ParamSet& other);  // shares nodes, keeps names

  // Gradient map over leaf parameters after a backward pass; parameters
  // without an accumulated gradient map to zero tensors.
  std::map<std::string, Tensor> gradients() const;

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Decoupled weight decay (AdamW-style): value -= lr * weight_decay * value,
  // applied to gradient-bearing weight matrices only — never to biases (names
  // ending in ".bias"), so suppression offsets stay unpenalized.
  double weight_decay = 0.0;
};

// Bias-corrected Adam. Parameters with absent/zero gradient are unchanged by
// a step (from fresh state); the step counter always advances by exactly 1.
class Adam {
 public:
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}
  void step(ParamSet& params);
  std::int64_t step_count() const { return step_count_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  AdamConfig cfg_;
  std::int64_t step_count_ = 0;
  std::map<std::string, std::pair<Tensor, Tensor>> moments_;  // name -> (m, v)
};

struct GradCheckResult {
  struct PerParam {
    std::string name;
    double max_rel_err = 0.0;
    std::int64_t worst_index = -1;
    bool pass = true;
  };
  std::vector<PerParam> params;
  double max_rel_err = 0.0;
  bool pass = true;
  std::string worst_param;
};

// Central finite differences against the backward gradient, elementwise over
// every trainable parameter. Relative error uses a unit floor:
//   |fd - ad| / max(|fd|, |ad|, 1).
// loss_builder must rebuild the scalar loss from the current parameter
// values on every call (and be side-effect free across calls).
GradCheckResult gradcheck(const std::function<ad::Value()>& loss_builder, ParamSet& params,
                          double h = 1e-5, double tol = 1e-4);

}  // namespace concatlab
