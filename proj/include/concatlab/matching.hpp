#pragma once

#include <cstdint>
#include <vector>

#include "concatlab/graph.hpp"
#include "concatlab/tensor.hpp"

namespace concatlab {

// Weights and knobs shared across the loss stack. Defaults follow the
// method's published operating point.
struct LossWeights {
  double alpha_focal = 0.25;
  double gamma_focal = 2.0;
  double bce_weight = 1.0;
  double dice_weight = 1.0;
  double gamma = 2.0;   // matched-query emphasis in conditional weighting
  double tau = 0.07;    // alignment temperature
  double tau_r = 0.07;  // query-contrast temperature
  std::vector<double> bandwidths = {2, 5, 10, 20, 40, 60};
  double lambda_cga = 1.0;  // global alignment weight (1 = on)
  double lambda_c = 1.0;    // instance alignment weight
  double lambda_r = 0.1;    // query contrast weight
  double lambda_f = 0.01;   // vision-semantic supervision weight
  double beta_kl = 1.0;     // KL weight
  double noobj_weight = 0.1;  // down-weight on the unmatched-query focal term
  double lambda_span = 0.0;   // penalty on projected-feature energy outside the seen-embedding span
  std::int64_t bank_size = 32;
  bool qc_include_matched_negatives = true;
  bool stage3_seen_term = true;  // ablation switch for the union seen focal
};

// Focal loss, mean over elements of
//   -alpha*(1-p)^gamma * y*log(p) - (1-alpha)*p^gamma * (1-y)*log(1-p)
// with probabilities clamped to [1e-7, 1-1e-7].
double focal_loss(const Tensor& prob, const Tensor& target, double alpha, double gamma);
ad::Value focal_loss(const ad::Value& prob, const Tensor& target, double alpha, double gamma);

// Mask loss on logits vs a binary mask: sigmoid BCE mean plus dice loss with
// +1 smoothing on numerator and denominator, weighted sum (defaults 1, 1).
double mask_loss(const Tensor& mask_logits, const Tensor& gt_mask, double bce_weight = 1.0, double dice_weight = 1.0);
ad::Value mask_loss(const ad::Value& mask_logits, const Tensor& gt_mask, double bce_weight = 1.0, double dice_weight = 1.0);

// Pairing cost between K queries and O ground-truth segments:
//   cost[k][o] = focal classification cost of query k against segment o's
//   one-hot seen label + mask loss between query k's mask and segment o's.
// class_probs: K x n_seen (probabilities); gt_seen_index[o] indexes into the
// seen label axis; mask_costs may be precomputed (K x O) since masks are
// frozen data - pass an empty tensor to compute from the logits.
Tensor match_cost_matrix(const Tensor& class_probs, const std::vector<std::int64_t>& gt_seen_index,
                         const Tensor& pred_mask_logits, const std::vector<Tensor>& gt_masks,
                         const LossWeights& w, const Tensor& mask_costs = Tensor());

struct Assignment {
  std::vector<std::int64_t> query_to_segment;  // length K, -1 when unmatched
  std::vector<std::int64_t> segment_to_query;  // length O
  double total_cost = 0.0;
};

// Exact rectangular assignment (Kuhn-Munkres / shortest augmenting path) of
// O segments to K >= O queries, minimizing total cost. Among cost-optimal
// assignments, returns the lexicographically smallest one: scanning segments
// by ascending index, each takes the lowest-index query consistent with
// optimality. Throws on non-finite costs or O > K.
Assignment hungarian(const Tensor& cost /* K x O */);

}  // namespace concatlab
