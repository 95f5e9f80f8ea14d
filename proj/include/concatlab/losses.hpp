#pragma once

#include <deque>
#include <map>
#include <string>
#include <vector>

#include "concatlab/graph.hpp"
#include "concatlab/matching.hpp"

namespace concatlab {

// FIFO bank of gradient-free alignment targets used as extra negatives.
class TokenBank {
 public:
  explicit TokenBank(std::int64_t capacity) : capacity_(capacity) {
    if (capacity < 0) throw ContractError("TokenBank capacity must be >= 0");
  }
  void push(const Tensor& token);  // 1 x C rows; evicts oldest beyond capacity
  std::int64_t size() const { return static_cast<std::int64_t>(tokens_.size()); }
  std::int64_t capacity() const { return capacity_; }
  // Stacked bank contents, size x C (empty tensor when empty).
  Tensor stacked() const;

 private:
  std::int64_t capacity_;
  std::deque<Tensor> tokens_;
};

// P(S, A) = sigmoid(S A^T): per-query category probabilities.
ad::Value classification_logits(const ad::Value& semantic_queries, const Tensor& embeddings);

// Softmax over queries of cosine(s_k, cls) * (gamma * matched_k + 1).
// Rows with zero norm contribute similarity 0. Returns K x 1.
ad::Value conditional_weights(const ad::Value& semantic_queries, const Tensor& cls_token,
                              const std::vector<bool>& matched, double gamma);

// Weighted pooling: W^T S -> 1 x C.
ad::Value reconstruct_cls(const ad::Value& weights, const ad::Value& semantic_queries);

// Rows of the matched queries ordered by segment index.
ad::Value select_matched(const ad::Value& semantic_queries, const Assignment& assignment);

struct LossTerm {
  ad::Value value;
  bool skipped = false;  // no pairs -> zero loss, flagged
};

// InfoNCE between reconstructed and real global tokens; negatives are the
// other in-batch targets plus bank entries; all similarities on l2-normalized
// vectors, temperature inside the exponent. The bank is updated FIFO with the
// batch targets after the loss is computed and never contributes gradient.
LossTerm cga_loss(const ad::Value& recon, const Tensor& targets, TokenBank& bank, double tau);

// InfoNCE between matched semantic queries and per-segment tokens pooled
// across the batch; negatives are all other pooled segment tokens.
LossTerm cia_loss(const ad::Value& matched_queries, const Tensor& segment_tokens, double tau);

// Multi-bandwidth Gaussian-kernel MMD (biased estimator, summed over
// bandwidths): k(a,b) = exp(-||a-b||^2 / (2 lambda^2)). Gradients flow to the
// generated side only; the real side enters as data.
ad::Value mmd_loss(const Tensor& real, const ad::Value& generated, const std::vector<double>& bandwidths);

// InfoNCE anchored at generated queries: positive = the matched real query,
// negatives = the other matched reals (switchable) plus all unmatched
// queries; reals are gradient-free.
LossTerm query_contrast_loss(const ad::Value& generated, const Tensor& matched_real, const Tensor& unmatched_real,
                             double tau_r, bool include_matched_negatives = true);

// Mean over rows of 0.5 * sum(exp(logvar) + mu^2 - 1 - logvar).
ad::Value kl_loss(const ad::Value& mu, const ad::Value& logvar);

struct StageLossReport {
  int stage = 0;
  std::map<std::string, double> components;      // unweighted values
  std::map<std::string, double> weights;
  double total = 0.0;
};

struct ComposedLoss {
  ad::Value root;
  StageLossReport report;
};

// Weighted sum per stage; required component names:
//   stage 1: cga, cia, match_focal, match_mask
//   stage 2: mmd, kl, qc, sup_focal
//   stage 3: seen_focal, pseudo_focal
// Missing components raise a ContractError naming the component.
ComposedLoss compose_stage_loss(int stage, const std::map<std::string, ad::Value>& components, const LossWeights& w);

}  // namespace concatlab
