#include "concatlab/losses.hpp"

#include <cmath>

namespace concatlab {

namespace {

Tensor normalize_rows_plain(const Tensor& t) {
  Tensor out = t;
  const std::int64_t m = t.rows(), n = t.cols();
  for (std::int64_t i = 0; i < m; ++i) {
    double ss = 0.0;
    for (std::int64_t j = 0; j < n; ++j) ss += t.at2(i, j) * t.at2(i, j);
    const double norm = std::sqrt(ss);
    if (norm > 1e-12) {
      for (std::int64_t j = 0; j < n; ++j) out.at2(i, j) = t.at2(i, j) / norm;
    }
  }
  return out;
}

// -pos/tau + log(sum of exp(sim/tau) over the given similarity blocks),
// mean over anchors. pos is Bx1; each block is B x n_j.
ad::Value info_nce(const ad::Value& pos, const std::vector<ad::Value>& sim_blocks, double tau) {
  using namespace ad;
  if (tau <= 0.0) throw ContractError("InfoNCE temperature must be > 0");
  ad::Value denom;  // B x 1 accumulated sums of exponentials
  for (const auto& block : sim_blocks) {
    auto e = sum_axis(exp_(mul_scalar(block, 1.0 / tau)), 1);
    denom = denom ? add(denom, e) : e;
  }
  auto losses = sub(log_(denom), mul_scalar(pos, 1.0 / tau));
  return mean_all(losses);
}

}  // namespace

void TokenBank::push(const Tensor& token) {
  if (capacity_ == 0) return;
  if (token.rank() != 2 || token.rows() != 1) {
    throw ShapeError("TokenBank::push expects a 1 x C row, got shape " + shape_str(token.shape()));
  }
  if (!tokens_.empty() && tokens_.front().cols() != token.cols()) {
    throw ShapeError("TokenBank::push width " + std::to_string(token.cols()) + " != bank width " + std::to_string(tokens_.front().cols()));
  }
  tokens_.push_back(token);
  while (static_cast<std::int64_t>(tokens_.size()) > capacity_) tokens_.pop_front();
}

Tensor TokenBank::stacked() const {
  if (tokens_.empty()) return Tensor();
  const std::int64_t c = tokens_.front().cols();
  Tensor out({static_cast<std::int64_t>(tokens_.size()), c});
  for (std::size_t i = 0; i < tokens_.size(); ++i)
    for (std::int64_t j = 0; j < c; ++j) out.at2(static_cast<std::int64_t>(i), j) = tokens_[i].at2(0, j);
  return out;
}

ad::Value classification_logits(const ad::Value& semantic_queries, const Tensor& embeddings) {
  using namespace ad;
  if (semantic_queries->value.cols() != embeddings.cols()) {
    throw ShapeError("classification_logits: query width " + shape_str(semantic_queries->value.shape()) +
                     " vs embedding width " + shape_str(embeddings.shape()));
  }
  return sigmoid(matmul(semantic_queries, transpose(constant(embeddings))));
}

ad::Value conditional_weights(const ad::Value& semantic_queries, const Tensor& cls_token,
                              const std::vector<bool>& matched, double gamma) {
  using namespace ad;
  const std::int64_t k = semantic_queries->value.rows();
  if (static_cast<std::int64_t>(matched.size()) != k) {
    throw ShapeError("conditional_weights: " + std::to_string(matched.size()) + " matched flags for " + std::to_string(k) + " queries");
  }
  if (cls_token.size() != semantic_queries->value.cols()) {
    throw ShapeError("conditional_weights: token shape " + shape_str(cls_token.shape()) + " vs query shape " + shape_str(semantic_queries->value.shape()));
  }
  Tensor token2({1, semantic_queries->value.cols()});
  for (std::int64_t j = 0; j < token2.cols(); ++j) token2.at(j) = cls_token.at(j);
  auto sn = l2_normalize_rows(semantic_queries);
  auto cn = constant(normalize_rows_plain(token2));
  auto sims = matmul(sn, transpose(cn));  // K x 1
  Tensor scale({k, 1});
  for (std::int64_t i = 0; i < k; ++i) scale.at(i) = gamma * (matched[static_cast<std::size_t>(i)] ? 1.0 : 0.0) + 1.0;
  return softmax(mul(sims, constant(scale)), 0);
}

ad::Value reconstruct_cls(const ad::Value& weights, const ad::Value& semantic_queries) {
  using namespace ad;
  return matmul(transpose(weights), semantic_queries);
}

ad::Value select_matched(const ad::Value& semantic_queries, const Assignment& assignment) {
  std::vector<std::int64_t> rows;
  rows.reserve(assignment.segment_to_query.size());
  for (auto q : assignment.segment_to_query) {
    if (q < 0) throw ContractError("select_matched: unassigned segment in assignment");
    rows.push_back(q);
  }
  return ad::gather_rows(semantic_queries, rows);
}

LossTerm cga_loss(const ad::Value& recon, const Tensor& targets, TokenBank& bank, double tau) {
  using namespace ad;
  if (!recon->value.same_shape(targets)) {
    throw ShapeError("cga_loss: recon shape " + shape_str(recon->value.shape()) + " vs targets shape " + shape_str(targets.shape()));
  }
  const std::int64_t b = targets.rows();
  if (b == 0) throw ContractError("cga_loss: empty batch");
  auto anchors = l2_normalize_rows(recon);
  const Tensor tn = normalize_rows_plain(targets);
  auto pos = sum_axis(mul(anchors, constant(tn)), 1);  // B x 1
  std::vector<ad::Value> blocks;
  blocks.push_back(matmul(anchors, transpose(constant(tn))));  // B x B, includes positive once
  const Tensor bank_rows = bank.stacked();
  if (bank_rows.size() > 0) {
    blocks.push_back(matmul(anchors, transpose(constant(normalize_rows_plain(bank_rows)))));
  }
  auto loss = info_nce(pos, blocks, tau);
  for (std::int64_t i = 0; i < b; ++i) {
    Tensor row({1, targets.cols()});
    for (std::int64_t j = 0; j < targets.cols(); ++j) row.at(j) = targets.at2(i, j);
    bank.push(row);
  }
  return {loss, false};
}

LossTerm cia_loss(const ad::Value& matched_queries, const Tensor& segment_tokens, double tau) {
  using namespace ad;
  const std::int64_t b = matched_queries->value.rank() == 2 ? matched_queries->value.rows() : 0;
  if (b == 0) return {constant(Tensor::scalar(0.0)), true};
  if (!matched_queries->value.same_shape(segment_tokens)) {
    throw ShapeError("cia_loss: query shape " + shape_str(matched_queries->value.shape()) + " vs token shape " + shape_str(segment_tokens.shape()));
  }
  auto anchors = l2_normalize_rows(matched_queries);
  const Tensor tn = normalize_rows_plain(segment_tokens);
  auto pos = sum_axis(mul(anchors, constant(tn)), 1);
  auto loss = info_nce(pos, {matmul(anchors, transpose(constant(tn)))}, tau);
  return {loss, false};
}

ad::Value mmd_loss(const Tensor& real, const ad::Value& generated, const std::vector<double>& bandwidths) {
  using namespace ad;
  if (real.rank() != 2 || generated->value.rank() != 2 || real.cols() != generated->value.cols()) {
    throw ShapeError("mmd_loss: real shape " + shape_str(real.shape()) + " vs generated shape " + shape_str(generated->value.shape()));
  }
  if (real.rows() == 0 || generated->value.rows() == 0) throw ContractError("mmd_loss: empty set");
  if (bandwidths.empty()) throw ContractError("mmd_loss: no bandwidths");
  const std::int64_t n = real.rows(), d = real.cols();
  // Row squared norms of the real set, accumulation order matching sum_axis.
  Tensor xs({n, 1});
  for (std::int64_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::int64_t j = 0; j < d; ++j) s += real.at2(i, j) * real.at2(i, j);
    xs.at(i) = s;
  }
  // Real-real squared distances, plain (constant w.r.t. the generator) but
  // accumulated in the same order as the graph route so identical sets give
  // an exactly cancelling estimate.
  Tensor sq_xx({n, n});
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t j = 0; j < n; ++j) {
      double dot = 0.0;
      for (std::int64_t p = 0; p < d; ++p) dot += real.at2(i, p) * real.at2(j, p);
      sq_xx.at2(i, j) = (-2.0 * dot + xs.at(i)) + xs.at(j);
    }
  }
  auto xsq = constant(xs);
  auto ys = sum_axis(mul(generated, generated), 1);  // m x 1
  auto cross = matmul(constant(real), transpose(generated));
  auto sq_xy = add(add(mul_scalar(cross, -2.0), xsq), transpose(ys));
  auto yy = matmul(generated, transpose(generated));
  auto sq_yy = add(add(mul_scalar(yy, -2.0), ys), transpose(ys));
  auto sq_xx_c = constant(sq_xx);
  ad::Value total;
  for (double bw : bandwidths) {
    if (bw <= 0.0) throw ContractError("mmd_loss: bandwidth must be > 0");
    const double s = -1.0 / (2.0 * bw * bw);
    auto term = add(mean_all(exp_(mul_scalar(sq_xx_c, s))),
                    sub(mean_all(exp_(mul_scalar(sq_yy, s))), mul_scalar(mean_all(exp_(mul_scalar(sq_xy, s))), 2.0)));
    total = total ? add(total, term) : term;
  }
  return total;
}

LossTerm query_contrast_loss(const ad::Value& generated, const Tensor& matched_real, const Tensor& unmatched_real,
                             double tau_r, bool include_matched_negatives) {
  using namespace ad;
  const std::int64_t o = generated->value.rank() == 2 ? generated->value.rows() : 0;
  if (o == 0) return {constant(Tensor::scalar(0.0)), true};
  if (!generated->value.same_shape(matched_real)) {
    throw ShapeError("query_contrast_loss: generated shape " + shape_str(generated->value.shape()) + " vs matched shape " + shape_str(matched_real.shape()));
  }
  auto anchors = l2_normalize_rows(generated);
  const Tensor rn = normalize_rows_plain(matched_real);
  auto pos = sum_axis(mul(anchors, constant(rn)), 1);
  std::vector<ad::Value> blocks;
  if (include_matched_negatives) {
    blocks.push_back(matmul(anchors, transpose(constant(rn))));
  } else {
    blocks.push_back(pos);  // positive term only
  }
  if (unmatched_real.size() > 0) {
    if (unmatched_real.cols() != matched_real.cols()) {
      throw ShapeError("query_contrast_loss: unmatched width " + shape_str(unmatched_real.shape()) + " vs matched " + shape_str(matched_real.shape()));
    }
    blocks.push_back(matmul(anchors, transpose(constant(normalize_rows_plain(unmatched_real)))));
  }
  return {info_nce(pos, blocks, tau_r), false};
}

ad::Value kl_loss(const ad::Value& mu, const ad::Value& logvar) {
  using namespace ad;
  if (!mu->value.same_shape(logvar->value)) {
    throw ShapeError("kl_loss: mu shape " + shape_str(mu->value.shape()) + " vs logvar shape " + shape_str(logvar->value.shape()));
  }
  const std::int64_t rows = mu->value.rows();
  if (rows == 0) throw ContractError("kl_loss: empty input");
  auto inner = add(add(exp_(logvar), mul(mu, mu)), add_scalar(neg(logvar), -1.0));
  return mul_scalar(sum_all(inner), 0.5 / static_cast<double>(rows));
}

ComposedLoss compose_stage_loss(int stage, const std::map<std::string, ad::Value>& components, const LossWeights& w) {
  using namespace ad;
  std::vector<std::pair<std::string, double>> plan;
  if (stage == 1) {
    plan = {{"cga", w.lambda_cga}, {"cia", w.lambda_c}, {"match_focal", 1.0}, {"match_mask", 1.0}};
    if (w.lambda_span > 0.0) plan.emplace_back("span", w.lambda_span);
  } else if (stage == 2) {
    plan = {{"mmd", 1.0}, {"kl", w.beta_kl}, {"qc", w.lambda_r}, {"sup_focal", w.lambda_f}};
  } else if (stage == 3) {
    plan = {{"seen_focal", w.stage3_seen_term ? 1.0 : 0.0}, {"pseudo_focal", 1.0}};
  } else {
    throw ContractError("compose_stage_loss: stage must be 1, 2, or 3");
  }
  for (const auto& [name, _] : components) {
    bool known = false;
    for (const auto& [pname, pw] : plan) known = known || pname == name;
    if (!known) throw ContractError("stage " + std::to_string(stage) + " loss has unknown component '" + name + "'");
  }
  ComposedLoss out;
  out.report.stage = stage;
  ad::Value root;
  for (const auto& [name, weight] : plan) {
    auto it = components.find(name);
    if (it == components.end()) throw ContractError("stage " + std::to_string(stage) + " loss missing component '" + name + "'");
    if (it->second->value.size() != 1) {
      throw ShapeError("stage loss component '" + name + "' must be scalar, got shape " + shape_str(it->second->value.shape()));
    }
    out.report.components[name] = it->second->value.item();
    out.report.weights[name] = weight;
    auto weighted = mul_scalar(it->second, weight);
    root = root ? add(root, weighted) : weighted;
  }
  out.root = root;
  out.report.total = root->value.item();
  return out;
}

}  // namespace concatlab
