#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "concatlab/rng.hpp"
#include "concatlab/tensor.hpp"

namespace concatlab {

struct DatasetSpec {
  std::int64_t n_seen = 8;
  std::int64_t n_unseen = 4;
  std::int64_t d_vision = 32;
  std::int64_t c_semantic = 16;
  std::int64_t k_queries = 12;
  std::int64_t grid_h = 32;
  std::int64_t grid_w = 32;
  std::int64_t n_train = 400;
  std::int64_t n_test = 100;
  std::int64_t segments_min = 1;
  std::int64_t segments_max = 4;
  double sigma_vision = 0.1;
  double sigma_cls = 0.05;
  double mask_flip_rate = 0.02;
  std::uint64_t seed = 1234;

  std::int64_t n_categories() const { return n_seen + n_unseen; }
  void validate() const;  // throws ContractError with the offending field
};

// Category embedding table; rows are unit-norm. Row reads are counted so
// tests can assert that training in the restricted regime never touches
// held-out rows.
struct SemanticEmbeddingTable {
  Tensor embeddings;  // N x C
  std::vector<std::int64_t> seen_ids;
  std::vector<std::int64_t> unseen_ids;
  mutable std::vector<std::uint64_t> access_counts;

  Tensor rows(const std::vector<std::int64_t>& ids) const;
  bool is_seen(std::int64_t category) const;
  void reset_access_counts() const;
};

struct GtSegment {
  std::int64_t category_id = -1;
  std::int64_t segment_id = -1;  // unique within the image, starting at 1
  Tensor mask;                   // H x W binary
};

struct ImageSample {
  Tensor vision_queries;    // K x D
  Tensor pred_mask_logits;  // K x H x W (frozen mask head output)
  std::vector<GtSegment> gt_segments;
  Tensor global_cls;   // 1 x C
  Tensor segment_cls;  // O x C, row o for gt_segments[o]
};

struct SyntheticDataset {
  DatasetSpec spec;
  Tensor prototypes;  // N x D unit rows
  SemanticEmbeddingTable table;
  std::vector<ImageSample> train;  // seen categories only
  std::vector<ImageSample> test;   // mixed seen/unseen
  std::uint64_t content_digest() const;
};

struct SurrogateCls {
  Tensor token;  // 1 x C
  bool degenerate = false;
};

// l2-normalized mean of the listed category embeddings plus Gaussian noise,
// re-normalized. A zero-norm mean (antipodal degeneracy) returns the
// unnormalized mean, flagged.
SurrogateCls surrogate_cls(const std::vector<std::int64_t>& category_ids, const SemanticEmbeddingTable& table,
                           double sigma_cls, Rng& rng);

SyntheticDataset generate_dataset(const DatasetSpec& spec);

// Checkpoint-format tensors plus a JSON sidecar (spec + content digest).
void save_dataset(const SyntheticDataset& ds, const std::string& base_path);
SyntheticDataset load_dataset(const std::string& base_path);

}  // namespace concatlab
