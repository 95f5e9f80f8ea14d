#pragma once

#include <functional>
#include <string>
#include <vector>

#include "concatlab/config.hpp"
#include "concatlab/dataset.hpp"
#include "concatlab/losses.hpp"
#include "concatlab/metrics.hpp"
#include "concatlab/models.hpp"

namespace concatlab {

// Receives one serialized JSON object per training iteration (and one per
// stage-3 epoch evaluation). Pass an empty function to discard.
using LogSink = std::function<void(const std::string& json_line)>;

struct StageArtifacts {
  std::vector<StageLossReport> iterations;
};

// Stage 1: train the semantic projector on the seen-only training split with
// global/instance alignment plus matched focal and mask terms. Reads only
// seen embedding rows.
SemanticProjector train_stage1(const SyntheticDataset& ds, const RunConfig& cfg, const LogSink& log = {},
                               StageArtifacts* artifacts = nullptr);

// Stage 2: train the conditional VAE on real matched queries with the
// projector frozen (its parameters receive no gradient and do not move).
QueryGenerator train_stage2(const SyntheticDataset& ds, const SemanticProjector& projector, const RunConfig& cfg,
                            const LogSink& log = {}, StageArtifacts* artifacts = nullptr);

struct Stage3Result {
  SemanticProjector final_projector;
  SemanticProjector best_projector;      // highest test hPQ epoch (earliest on ties)
  std::vector<MetricsReport> per_epoch;  // test metrics after each epoch
  std::int64_t best_epoch = -1;          // index into per_epoch, -1 when no epochs ran
};

// Stage 3: finetune the projector on real seen queries (matching recomputed
// every step) plus pseudo-unseen queries decoded from the frozen generator.
// Requires transductive mode and a non-empty unseen set.
Stage3Result union_finetune(const SyntheticDataset& ds, const QueryGenerator& generator,
                            const SemanticProjector& start, const RunConfig& cfg, const LogSink& log = {},
                            StageArtifacts* artifacts = nullptr);

// Class scores over the full table (inductive mode adds the configured
// increment to unseen logits before the sigmoid); queries below the segment
// threshold are dropped; surviving masks merge by per-pixel argmax of
// (max class prob x mask prob), a pixel staying void unless the winning
// query's mask probability reaches the floor; empty segments are removed.
PanopticPrediction infer_panoptic(const ImageSample& sample, const SemanticProjector& projector,
                                  const SemanticEmbeddingTable& table, Mode mode, const InferenceConfig& inf);

// Parallel over images (CONCAT_LAB_THREADS caps the worker count); tallies
// merge associatively in image order, so results are thread-count invariant.
MetricsReport evaluate_split(const std::vector<ImageSample>& images, const SemanticProjector& projector,
                             const SemanticEmbeddingTable& table, Mode mode, const InferenceConfig& inf);

// Worker count for evaluate_split: hardware concurrency capped by the
// CONCAT_LAB_THREADS environment variable and the image count, at least 1.
std::int64_t evaluation_threads(std::int64_t n_images);

// Deep copies (fresh nodes, same values), with trainability set as given.
SemanticProjector clone_projector(const SemanticProjector& p, bool trainable);
QueryGenerator clone_generator(const QueryGenerator& g, bool trainable);

// Fraction of `samples_per_category` decoded queries whose projected nearest
// embedding (cosine, over the full table) is the conditioning category;
// one entry per seen category, in seen_ids order.
std::vector<double> generator_category_fidelity(const QueryGenerator& generator, const SemanticProjector& projector,
                                                const SemanticEmbeddingTable& table,
                                                std::int64_t samples_per_category, Rng& rng);

}  // namespace concatlab
