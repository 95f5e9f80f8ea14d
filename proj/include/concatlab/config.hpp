#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "concatlab/dataset.hpp"
#include "concatlab/matching.hpp"
#include "concatlab/models.hpp"

namespace concatlab {

// Inductive training touches neither unseen embeddings nor unseen images;
// transductive training may read unseen embeddings (never unseen images).
enum class Mode { kInductive, kTransductive };
std::string mode_name(Mode m);
Mode mode_from_name(const std::string& name);

std::string conditioning_name(Conditioning c);
Conditioning conditioning_from_name(const std::string& name);

struct StageConfig {
  std::int64_t epochs = 0;
  std::int64_t batch_size = 8;
  double lr_scale = 1.0;  // multiplies the base learning rate
};

struct InferenceConfig {
  double segment_threshold = 0.1;       // drop queries whose max class prob is below
  double unseen_logit_increment = 1.0;  // added to unseen logits in inductive mode
  double mask_prob_floor = 0.5;         // pixels whose winning mask prob is below stay void
};

struct RunConfig {
  int schema_version = 1;
  std::uint64_t seed = 1;
  Mode mode = Mode::kTransductive;
  std::string output_dir = "runs/out";
  DatasetSpec dataset;
  LossWeights losses;
  double base_lr = 1e-3;
  double weight_decay = 0.01;  // decoupled decay on weight matrices (biases exempt)
  StageConfig stage1{30, 8, 1.0};
  StageConfig stage2{20, 8, 10.0};
  StageConfig stage3{10, 8, 0.1};
  std::int64_t pseudo_per_step = 16;   // pseudo-unseen queries decoded per stage-3 step
  std::int64_t generator_hidden = 0;   // 0 -> max(d_vision, c_semantic)
  Conditioning conditioning = Conditioning::kAdd;
  InferenceConfig inference;

  void validate() const;  // throws ContractError naming the offending field
  std::string to_json_string(int indent = 2) const;
  static RunConfig from_json_string(const std::string& text);
  static RunConfig load(const std::string& path);
};

// Applies dotted-path overrides ("losses.lambda_r=0") on top of a config's
// JSON form; the path must name an existing field. Values parse as JSON
// literals, falling back to strings.
RunConfig apply_overrides(const RunConfig& base, const std::vector<std::string>& sets);

}  // namespace concatlab
