#include "concatlab/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <map>
#include <thread>

#include "concatlab/matching.hpp"
#include "json.hpp"

namespace concatlab {

namespace {

using nlohmann::ordered_json;

// rng stream tags (run seed -> independent substreams)
constexpr std::uint64_t kStreamProjectorInit = 101;
constexpr std::uint64_t kStreamGeneratorInit = 102;
constexpr std::uint64_t kStreamStage1Order = 111;
constexpr std::uint64_t kStreamStage2 = 112;
constexpr std::uint64_t kStreamStage3Order = 113;
constexpr std::uint64_t kStreamStage3Pseudo = 114;

std::vector<std::int64_t> shuffled(std::int64_t n, Rng& rng) {
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  for (std::int64_t i = n - 1; i > 0; --i) {
    const std::int64_t j = rng.uniform_int(0, i);
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
  }
  return order;
}

std::map<std::int64_t, std::int64_t> seen_index_of(const SemanticEmbeddingTable& table) {
  std::map<std::int64_t, std::int64_t> m;
  for (std::size_t i = 0; i < table.seen_ids.size(); ++i) m[table.seen_ids[i]] = static_cast<std::int64_t>(i);
  return m;
}

struct MatchInputs {
  std::vector<std::int64_t> gt_seen_index;  // per segment, index into the seen label axis
  std::vector<Tensor> gt_masks;
  Tensor mask_costs;  // K x O, constant across training (masks are frozen data)
};

MatchInputs build_match_inputs(const ImageSample& img, const std::map<std::int64_t, std::int64_t>& seen_idx,
                               const LossWeights& w) {
  MatchInputs mi;
  const std::int64_t k = img.vision_queries.rows();
  const std::int64_t o = static_cast<std::int64_t>(img.gt_segments.size());
  for (const auto& seg : img.gt_segments) {
    auto it = seen_idx.find(seg.category_id);
    if (it == seen_idx.end()) {
      throw ContractError("training image contains category " + std::to_string(seg.category_id) +
                          " outside the seen set");
    }
    mi.gt_seen_index.push_back(it->second);
    mi.gt_masks.push_back(seg.mask);
  }
  mi.mask_costs = Tensor({k, o});
  for (std::int64_t q = 0; q < k; ++q) {
    const Tensor mask_q = slice_first(img.pred_mask_logits, q);
    for (std::int64_t s = 0; s < o; ++s) {
      mi.mask_costs.at2(q, s) = mask_loss(mask_q, mi.gt_masks[static_cast<std::size_t>(s)], w.bce_weight, w.dice_weight);
    }
  }
  return mi;
}

// Split one image's classification focal into a matched-row term and a
// no-object term. Unmatched rows outnumber matched ones roughly 10:1, so a
// single mean over all rows lets the optimizer park matched confidences at
// mediocre values for a negligible total-loss price; keeping the two means
// separate (the no-object one down-weighted by noobj_weight at composition)
// preserves pressure toward confident matched predictions.
void split_focal_terms(const ad::Value& probs, const Assignment& assign,
                       const std::vector<std::int64_t>& labels, std::int64_t n_cols, const LossWeights& w,
                       std::vector<ad::Value>& matched_terms, std::vector<ad::Value>& noobj_terms) {
  std::vector<std::int64_t> pos, neg;
  const std::int64_t k = static_cast<std::int64_t>(assign.query_to_segment.size());
  for (std::int64_t q = 0; q < k; ++q) {
    (assign.query_to_segment[static_cast<std::size_t>(q)] >= 0 ? pos : neg).push_back(q);
  }
  if (!pos.empty()) {
    Tensor onehot({static_cast<std::int64_t>(pos.size()), n_cols});
    for (std::size_t i = 0; i < pos.size(); ++i) {
      const std::int64_t seg = assign.query_to_segment[static_cast<std::size_t>(pos[i])];
      onehot.at2(static_cast<std::int64_t>(i), labels[static_cast<std::size_t>(seg)]) = 1.0;
    }
    matched_terms.push_back(focal_loss(ad::gather_rows(probs, pos), onehot, w.alpha_focal, w.gamma_focal));
  }
  if (!neg.empty()) {
    const Tensor zeros({static_cast<std::int64_t>(neg.size()), n_cols});
    noobj_terms.push_back(focal_loss(ad::gather_rows(probs, neg), zeros, w.alpha_focal, w.gamma_focal));
  }
}

ad::Value mean_of(const std::vector<ad::Value>& terms) {
  if (terms.empty()) return ad::constant(Tensor::scalar(0.0));
  ad::Value sum = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) sum = ad::add(sum, terms[i]);
  return ad::mul_scalar(sum, 1.0 / static_cast<double>(terms.size()));
}

void emit_iteration(const LogSink& log, StageArtifacts* artifacts, const StageLossReport& report,
                    std::int64_t epoch, std::int64_t iteration, double lr) {
  if (artifacts) artifacts->iterations.push_back(report);
  if (!log) return;
  ordered_json j;
  j["stage"] = report.stage;
  j["epoch"] = epoch;
  j["iteration"] = iteration;
  j["lr"] = lr;
  j["total"] = report.total;
  j["components"] = report.components;
  j["weights"] = report.weights;
  log(j.dump());
}

Tensor stack_rows(const std::vector<const Tensor*>& rows, std::int64_t cols) {
  Tensor out({static_cast<std::int64_t>(rows.size()), cols});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::int64_t c = 0; c < cols; ++c) out.at2(static_cast<std::int64_t>(r), c) = rows[r]->at(c);
  }
  return out;
}

// C x C matrix projecting onto the orthogonal complement of the row span of
// `rows_mat` (modified Gram-Schmidt; near-dependent rows are skipped). Used to
// penalize projected-feature energy outside the seen-embedding span: the
// training losses only observe that subspace (classification logits are dot
// products with seen rows, the alignment terms are norm-invariant), so energy
// in the complement is free during training but leaks into novel-category
// logits at inference as label noise.
Tensor span_complement_matrix(const Tensor& rows_mat) {
  const std::int64_t n = rows_mat.rows();
  const std::int64_t c = rows_mat.cols();
  std::vector<std::vector<double>> basis;
  for (std::int64_t r = 0; r < n; ++r) {
    std::vector<double> v(static_cast<std::size_t>(c));
    for (std::int64_t j = 0; j < c; ++j) v[static_cast<std::size_t>(j)] = rows_mat.at2(r, j);
    for (const auto& b : basis) {
      double dot = 0.0;
      for (std::int64_t j = 0; j < c; ++j) dot += v[static_cast<std::size_t>(j)] * b[static_cast<std::size_t>(j)];
      for (std::int64_t j = 0; j < c; ++j) v[static_cast<std::size_t>(j)] -= dot * b[static_cast<std::size_t>(j)];
    }
    double norm = 0.0;
    for (std::int64_t j = 0; j < c; ++j) norm += v[static_cast<std::size_t>(j)] * v[static_cast<std::size_t>(j)];
    norm = std::sqrt(norm);
    if (norm < 1e-9) continue;
    for (std::int64_t j = 0; j < c; ++j) v[static_cast<std::size_t>(j)] /= norm;
    basis.push_back(std::move(v));
  }
  Tensor out({c, c});
  for (std::int64_t i = 0; i < c; ++i) {
    for (std::int64_t j = 0; j < c; ++j) {
      double p = i == j ? 1.0 : 0.0;
      for (const auto& b : basis) p -= b[static_cast<std::size_t>(i)] * b[static_cast<std::size_t>(j)];
      out.at2(i, j) = p;
    }
  }
  return out;
}

double cosine(const double* a, const double* b, std::int64_t n) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::sqrt(na) * std::sqrt(nb);
  return denom <= 1e-24 ? 0.0 : dot / denom;
}

}  // namespace

SemanticProjector train_stage1(const SyntheticDataset& ds, const RunConfig& cfg, const LogSink& log,
                               StageArtifacts* artifacts) {
  cfg.validate();
  const LossWeights& w = cfg.losses;
  Rng init_rng(derive_seed(cfg.seed, kStreamProjectorInit));
  SemanticProjector projector = SemanticProjector::init(ds.spec.d_vision, ds.spec.c_semantic, init_rng);
  TokenBank bank(w.bank_size);
  const Tensor a_seen = ds.table.rows(ds.table.seen_ids);
  const auto seen_idx = seen_index_of(ds.table);
  const ad::Value span_comp = ad::constant(span_complement_matrix(a_seen));

  const std::int64_t n_images = static_cast<std::int64_t>(ds.train.size());
  std::vector<MatchInputs> match_inputs;
  match_inputs.reserve(static_cast<std::size_t>(n_images));
  for (const auto& img : ds.train) match_inputs.push_back(build_match_inputs(img, seen_idx, w));

  Adam adam(AdamConfig{cfg.base_lr * cfg.stage1.lr_scale, 0.9, 0.999, 1e-8, cfg.weight_decay});
  Rng order_rng(derive_seed(cfg.seed, kStreamStage1Order));
  std::int64_t iteration = 0;
  for (std::int64_t epoch = 0; epoch < cfg.stage1.epochs; ++epoch) {
    const auto order = shuffled(n_images, order_rng);
    for (std::int64_t start = 0; start < n_images; start += cfg.stage1.batch_size) {
      const std::int64_t stop = std::min(n_images, start + cfg.stage1.batch_size);
      std::vector<ad::Value> recon_rows, matched_rows, focal_matched_terms, focal_noobj_terms, span_terms;
      std::vector<const Tensor*> cga_targets;
      std::vector<const Tensor*> segment_token_rows;
      std::vector<Tensor> segment_token_storage;
      double mask_sum = 0.0;
      std::int64_t mask_count = 0;
      for (std::int64_t b = start; b < stop; ++b) {
        const ImageSample& img = ds.train[static_cast<std::size_t>(order[static_cast<std::size_t>(b)])];
        const MatchInputs& mi = match_inputs[static_cast<std::size_t>(order[static_cast<std::size_t>(b)])];
        const std::int64_t k = img.vision_queries.rows();
        const std::int64_t o = static_cast<std::int64_t>(img.gt_segments.size());

        const ad::Value s = projector.project(ad::constant(img.vision_queries));
        const ad::Value probs = classification_logits(s, a_seen);
        const Tensor cost = match_cost_matrix(probs->value, mi.gt_seen_index, img.pred_mask_logits, mi.gt_masks, w,
                                              mi.mask_costs);
        const Assignment assign = hungarian(cost);

        split_focal_terms(probs, assign, mi.gt_seen_index, a_seen.rows(), w, focal_matched_terms,
                          focal_noobj_terms);
        if (w.lambda_span > 0.0) {
          const ad::Value resid = ad::matmul(s, span_comp);
          span_terms.push_back(ad::mean_all(ad::sum_axis(ad::mul(resid, resid), 1)));
        }
        for (std::int64_t seg = 0; seg < o; ++seg) {
          mask_sum += mi.mask_costs.at2(assign.segment_to_query[static_cast<std::size_t>(seg)], seg);
          mask_count += 1;
        }

        std::vector<bool> matched(static_cast<std::size_t>(k), false);
        for (std::int64_t q = 0; q < k; ++q) matched[static_cast<std::size_t>(q)] = assign.query_to_segment[static_cast<std::size_t>(q)] >= 0;
        const ad::Value weights = conditional_weights(s, img.global_cls, matched, w.gamma);
        recon_rows.push_back(reconstruct_cls(weights, s));
        cga_targets.push_back(&img.global_cls);

        if (o > 0) {
          matched_rows.push_back(select_matched(s, assign));
          for (std::int64_t seg = 0; seg < o; ++seg) {
            segment_token_storage.push_back(Tensor({1, ds.spec.c_semantic}));
            for (std::int64_t c = 0; c < ds.spec.c_semantic; ++c) segment_token_storage.back().at(c) = img.segment_cls.at2(seg, c);
          }
        }
      }
      for (const auto& t : segment_token_storage) segment_token_rows.push_back(&t);

      const Tensor cga_target_mat = stack_rows(cga_targets, ds.spec.c_semantic);
      const LossTerm cga = cga_loss(ad::concat(recon_rows, 0), cga_target_mat, bank, w.tau);
      const Tensor pooled_tokens = segment_token_rows.empty()
                                       ? Tensor({0, ds.spec.c_semantic})
                                       : stack_rows(segment_token_rows, ds.spec.c_semantic);
      const LossTerm cia = matched_rows.empty()
                               ? LossTerm{ad::constant(Tensor::scalar(0.0)), true}
                               : cia_loss(ad::concat(matched_rows, 0), pooled_tokens, w.tau);

      std::map<std::string, ad::Value> components;
      components["cga"] = cga.value;
      components["cia"] = cia.value;
      components["match_focal"] =
          ad::add(mean_of(focal_matched_terms), ad::mul_scalar(mean_of(focal_noobj_terms), w.noobj_weight));
      components["match_mask"] =
          ad::constant(Tensor::scalar(mask_count == 0 ? 0.0 : mask_sum / static_cast<double>(mask_count)));
      if (w.lambda_span > 0.0) components["span"] = mean_of(span_terms);
      ComposedLoss composed = compose_stage_loss(1, components, w);

      projector.params.clear_grads();
      ad::backward(composed.root);
      adam.step(projector.params);
      emit_iteration(log, artifacts, composed.report, epoch, iteration, adam.config().lr);
      iteration += 1;
    }
  }
  projector.params.clear_grads();
  return projector;
}

QueryGenerator train_stage2(const SyntheticDataset& ds, const SemanticProjector& projector, const RunConfig& cfg,
                            const LogSink& log, StageArtifacts* artifacts) {
  cfg.validate();
  const LossWeights& w = cfg.losses;
  SemanticProjector frozen = clone_projector(projector, /*trainable=*/false);
  Rng init_rng(derive_seed(cfg.seed, kStreamGeneratorInit));
  QueryGenerator gen = QueryGenerator::init(
      GeneratorConfig{ds.spec.d_vision, ds.spec.c_semantic, cfg.generator_hidden, cfg.conditioning}, init_rng);
  const Tensor a_seen = ds.table.rows(ds.table.seen_ids);
  const auto seen_idx = seen_index_of(ds.table);
  const std::int64_t d = ds.spec.d_vision, c = ds.spec.c_semantic;
  const std::int64_t n_seen = a_seen.rows();

  // The projector is frozen, so the assignment of queries to segments is a
  // constant of the stage: compute it once per image.
  struct ImageData {
    Tensor matched_real;    // O x D
    Tensor unmatched_real;  // (K-O) x D
    Tensor conditions;      // O x C
    Tensor labels;          // O x n_seen one-hot
  };
  std::vector<ImageData> data;
  for (const auto& img : ds.train) {
    const MatchInputs mi = build_match_inputs(img, seen_idx, w);
    const Tensor s = frozen.project_plain(img.vision_queries);
    const Tensor probs = ad::evaluate(classification_logits(ad::constant(s), a_seen));
    const Assignment assign =
        hungarian(match_cost_matrix(probs, mi.gt_seen_index, img.pred_mask_logits, mi.gt_masks, w, mi.mask_costs));
    const std::int64_t k = img.vision_queries.rows();
    const std::int64_t o = static_cast<std::int64_t>(img.gt_segments.size());
    ImageData id;
    id.matched_real = Tensor({o, d});
    id.unmatched_real = Tensor({k - o, d});
    id.conditions = Tensor({o, c});
    id.labels = Tensor({o, n_seen});
    std::vector<std::int64_t> cats;
    for (std::int64_t seg = 0; seg < o; ++seg) {
      const std::int64_t q = assign.segment_to_query[static_cast<std::size_t>(seg)];
      for (std::int64_t j = 0; j < d; ++j) id.matched_real.at2(seg, j) = img.vision_queries.at2(q, j);
      cats.push_back(img.gt_segments[static_cast<std::size_t>(seg)].category_id);
      id.labels.at2(seg, mi.gt_seen_index[static_cast<std::size_t>(seg)]) = 1.0;
    }
    const Tensor cond = ds.table.rows(cats);
    for (std::int64_t i = 0; i < cond.size(); ++i) id.conditions.at(i) = cond.at(i);
    std::int64_t row = 0;
    for (std::int64_t q = 0; q < k; ++q) {
      if (assign.query_to_segment[static_cast<std::size_t>(q)] >= 0) continue;
      for (std::int64_t j = 0; j < d; ++j) id.unmatched_real.at2(row, j) = img.vision_queries.at2(q, j);
      row += 1;
    }
    data.push_back(std::move(id));
  }

  Adam adam(AdamConfig{cfg.base_lr * cfg.stage2.lr_scale, 0.9, 0.999, 1e-8, cfg.weight_decay});
  Rng rng(derive_seed(cfg.seed, kStreamStage2));
  const std::int64_t n_images = static_cast<std::int64_t>(ds.train.size());
  std::int64_t iteration = 0;
  for (std::int64_t epoch = 0; epoch < cfg.stage2.epochs; ++epoch) {
    const auto order = shuffled(n_images, rng);
    for (std::int64_t start = 0; start < n_images; start += cfg.stage2.batch_size) {
      const std::int64_t stop = std::min(n_images, start + cfg.stage2.batch_size);
      std::int64_t m = 0, n_unmatched = 0;
      for (std::int64_t b = start; b < stop; ++b) {
        m += data[static_cast<std::size_t>(order[static_cast<std::size_t>(b)])].matched_real.rows();
        n_unmatched += data[static_cast<std::size_t>(order[static_cast<std::size_t>(b)])].unmatched_real.rows();
      }
      Tensor real({m, d}), conditions({m, c}), labels({m, n_seen}), unmatched({n_unmatched, d});
      std::int64_t row = 0, urow = 0;
      for (std::int64_t b = start; b < stop; ++b) {
        const ImageData& id = data[static_cast<std::size_t>(order[static_cast<std::size_t>(b)])];
        for (std::int64_t r = 0; r < id.matched_real.rows(); ++r, ++row) {
          for (std::int64_t j = 0; j < d; ++j) real.at2(row, j) = id.matched_real.at2(r, j);
          for (std::int64_t j = 0; j < c; ++j) conditions.at2(row, j) = id.conditions.at2(r, j);
          for (std::int64_t j = 0; j < n_seen; ++j) labels.at2(row, j) = id.labels.at2(r, j);
        }
        for (std::int64_t r = 0; r < id.unmatched_real.rows(); ++r, ++urow) {
          for (std::int64_t j = 0; j < d; ++j) unmatched.at2(urow, j) = id.unmatched_real.at2(r, j);
        }
      }

      auto [mu, logvar] = gen.encode(ad::constant(real), /*training=*/true);
      Tensor eps({m, c});
      for (std::int64_t i = 0; i < eps.size(); ++i) eps.at(i) = rng.normal();
      const ad::Value z = QueryGenerator::reparameterize(mu, logvar, eps);
      const ad::Value generated = gen.decode(z, ad::constant(conditions), /*training=*/true);

      std::map<std::string, ad::Value> components;
      components["mmd"] = mmd_loss(real, generated, w.bandwidths);
      components["kl"] = kl_loss(mu, logvar);
      components["qc"] = query_contrast_loss(generated, real, unmatched, w.tau_r, w.qc_include_matched_negatives).value;
      const ad::Value sup_probs = classification_logits(frozen.project(generated), a_seen);
      components["sup_focal"] = focal_loss(sup_probs, labels, w.alpha_focal, w.gamma_focal);
      ComposedLoss composed = compose_stage_loss(2, components, w);

      gen.params.clear_grads();
      frozen.params.clear_grads();
      ad::backward(composed.root);
      adam.step(gen.params);
      emit_iteration(log, artifacts, composed.report, epoch, iteration, adam.config().lr);
      iteration += 1;
    }
  }
  gen.params.clear_grads();
  return gen;
}

Stage3Result union_finetune(const SyntheticDataset& ds, const QueryGenerator& generator,
                            const SemanticProjector& start, const RunConfig& cfg, const LogSink& log,
                            StageArtifacts* artifacts) {
  cfg.validate();
  if (cfg.mode != Mode::kTransductive) {
    throw ContractError("union finetuning requires transductive mode (unseen embeddings available)");
  }
  if (ds.table.unseen_ids.empty()) throw ContractError("union finetuning requires a non-empty unseen set");
  const LossWeights& w = cfg.losses;
  SemanticProjector projector = clone_projector(start, /*trainable=*/true);
  QueryGenerator frozen_gen = clone_generator(generator, /*trainable=*/false);
  const Tensor a_seen = ds.table.rows(ds.table.seen_ids);
  std::vector<std::int64_t> all_ids;
  for (std::int64_t i = 0; i < ds.table.embeddings.rows(); ++i) all_ids.push_back(i);
  const Tensor a_full = ds.table.rows(all_ids);
  const auto seen_idx = seen_index_of(ds.table);

  const std::int64_t n_images = static_cast<std::int64_t>(ds.train.size());
  std::vector<MatchInputs> match_inputs;
  match_inputs.reserve(static_cast<std::size_t>(n_images));
  for (const auto& img : ds.train) match_inputs.push_back(build_match_inputs(img, seen_idx, w));

  Adam adam(AdamConfig{cfg.base_lr * cfg.stage3.lr_scale, 0.9, 0.999, 1e-8, cfg.weight_decay});
  Rng order_rng(derive_seed(cfg.seed, kStreamStage3Order));
  Rng pseudo_rng(derive_seed(cfg.seed, kStreamStage3Pseudo));

  Stage3Result result;
  double best_hpq = -1.0;
  std::int64_t iteration = 0;
  for (std::int64_t epoch = 0; epoch < cfg.stage3.epochs; ++epoch) {
    const auto order = shuffled(n_images, order_rng);
    for (std::int64_t b0 = 0; b0 < n_images; b0 += cfg.stage3.batch_size) {
      const std::int64_t stop = std::min(n_images, b0 + cfg.stage3.batch_size);
      std::vector<ad::Value> focal_matched_terms, focal_noobj_terms;
      for (std::int64_t b = b0; b < stop; ++b) {
        const ImageSample& img = ds.train[static_cast<std::size_t>(order[static_cast<std::size_t>(b)])];
        const MatchInputs& mi = match_inputs[static_cast<std::size_t>(order[static_cast<std::size_t>(b)])];
        const ad::Value s = projector.project(ad::constant(img.vision_queries));
        const ad::Value probs = classification_logits(s, a_seen);
        const Assignment assign = hungarian(
            match_cost_matrix(probs->value, mi.gt_seen_index, img.pred_mask_logits, mi.gt_masks, w, mi.mask_costs));
        split_focal_terms(probs, assign, mi.gt_seen_index, a_seen.rows(), w, focal_matched_terms,
                          focal_noobj_terms);
      }
      std::map<std::string, ad::Value> components;
      components["seen_focal"] =
          ad::add(mean_of(focal_matched_terms), ad::mul_scalar(mean_of(focal_noobj_terms), w.noobj_weight));

      const auto pseudo = frozen_gen.sample_pseudo_unseen(ds.table, cfg.pseudo_per_step, pseudo_rng);
      if (pseudo.queries.rows() > 0) {
        Tensor targets({pseudo.queries.rows(), a_full.rows()});
        for (std::int64_t i = 0; i < pseudo.queries.rows(); ++i) {
          targets.at2(i, pseudo.labels[static_cast<std::size_t>(i)]) = 1.0;
        }
        const ad::Value pseudo_probs = classification_logits(projector.project(ad::constant(pseudo.queries)), a_full);
        components["pseudo_focal"] = focal_loss(pseudo_probs, targets, w.alpha_focal, w.gamma_focal);
      } else {
        components["pseudo_focal"] = ad::constant(Tensor::scalar(0.0));
      }
      ComposedLoss composed = compose_stage_loss(3, components, w);

      projector.params.clear_grads();
      ad::backward(composed.root);
      adam.step(projector.params);
      emit_iteration(log, artifacts, composed.report, epoch, iteration, adam.config().lr);
      iteration += 1;
    }

    const MetricsReport report = evaluate_split(ds.test, projector, ds.table, cfg.mode, cfg.inference);
    result.per_epoch.push_back(report);
    if (report.hpq > best_hpq) {
      best_hpq = report.hpq;
      result.best_epoch = epoch;
      result.best_projector = clone_projector(projector, /*trainable=*/true);
    }
    if (log) {
      ordered_json j;
      j["stage"] = 3;
      j["epoch"] = epoch;
      j["event"] = "eval";
      j["metrics"] = ordered_json::parse(report.to_json(-1));
      log(j.dump());
    }
  }
  result.final_projector = clone_projector(projector, /*trainable=*/true);
  if (result.best_epoch < 0) result.best_projector = clone_projector(projector, /*trainable=*/true);
  return result;
}

PanopticPrediction infer_panoptic(const ImageSample& sample, const SemanticProjector& projector,
                                  const SemanticEmbeddingTable& table, Mode mode, const InferenceConfig& inf) {
  const std::int64_t k = sample.vision_queries.rows();
  const std::int64_t n = table.embeddings.rows();
  const std::int64_t c = table.embeddings.cols();
  const std::int64_t h = sample.pred_mask_logits.shape()[1];
  const std::int64_t wdt = sample.pred_mask_logits.shape()[2];
  std::vector<bool> seen(static_cast<std::size_t>(n), false);
  for (auto id : table.seen_ids) seen[static_cast<std::size_t>(id)] = true;

  const Tensor s = projector.project_plain(sample.vision_queries);  // k x c

  std::vector<double> max_prob(static_cast<std::size_t>(k), 0.0);
  std::vector<std::int64_t> best_cat(static_cast<std::size_t>(k), -1);
  for (std::int64_t q = 0; q < k; ++q) {
    for (std::int64_t cat = 0; cat < n; ++cat) {
      double logit = 0.0;
      for (std::int64_t j = 0; j < c; ++j) logit += s.at2(q, j) * table.embeddings.at2(cat, j);
      if (mode == Mode::kInductive && !seen[static_cast<std::size_t>(cat)]) logit += inf.unseen_logit_increment;
      const double prob = 1.0 / (1.0 + std::exp(-logit));
      if (prob > max_prob[static_cast<std::size_t>(q)]) {
        max_prob[static_cast<std::size_t>(q)] = prob;
        best_cat[static_cast<std::size_t>(q)] = cat;
      }
    }
  }

  std::vector<std::int64_t> kept;
  for (std::int64_t q = 0; q < k; ++q) {
    if (max_prob[static_cast<std::size_t>(q)] >= inf.segment_threshold && best_cat[static_cast<std::size_t>(q)] >= 0) {
      kept.push_back(q);
    }
  }

  PanopticPrediction pred;
  pred.grid_h = h;
  pred.grid_w = wdt;
  if (kept.empty()) return pred;

  std::vector<Tensor> masks;
  for (std::size_t i = 0; i < kept.size(); ++i) masks.push_back(Tensor({h, wdt}));
  for (std::int64_t px = 0; px < h * wdt; ++px) {
    double best_score = -1.0;
    std::int64_t winner = -1;
    double winner_mask_prob = 0.0;
    for (std::size_t i = 0; i < kept.size(); ++i) {
      const std::int64_t q = kept[i];
      const double mask_prob = 1.0 / (1.0 + std::exp(-sample.pred_mask_logits.at(q * h * wdt + px)));
      const double score = max_prob[static_cast<std::size_t>(q)] * mask_prob;
      if (score > best_score) {
        best_score = score;
        winner = static_cast<std::int64_t>(i);
        winner_mask_prob = mask_prob;
      }
    }
    if (winner >= 0 && winner_mask_prob >= inf.mask_prob_floor) masks[static_cast<std::size_t>(winner)].at(px) = 1.0;
  }
  for (std::size_t i = 0; i < kept.size(); ++i) {
    std::int64_t pixels = 0;
    for (std::int64_t px = 0; px < h * wdt; ++px) pixels += masks[i].at(px) > 0.5 ? 1 : 0;
    if (pixels == 0) continue;
    PredSegment seg;
    seg.category_id = best_cat[static_cast<std::size_t>(kept[i])];
    seg.mask = masks[i];
    pred.segments.push_back(std::move(seg));
  }
  return pred;
}

std::int64_t evaluation_threads(std::int64_t n_images) {
  std::int64_t threads = static_cast<std::int64_t>(std::thread::hardware_concurrency());
  if (threads < 1) threads = 1;
  if (const char* env = std::getenv("CONCAT_LAB_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v >= 1) threads = std::min<std::int64_t>(threads, v);
  }
  return std::max<std::int64_t>(1, std::min(threads, std::max<std::int64_t>(1, n_images)));
}

MetricsReport evaluate_split(const std::vector<ImageSample>& images, const SemanticProjector& projector,
                             const SemanticEmbeddingTable& table, Mode mode, const InferenceConfig& inf) {
  const std::int64_t n = static_cast<std::int64_t>(images.size());
  const std::int64_t workers = evaluation_threads(n);
  // One accumulator per image, merged in image order afterwards: the result
  // is bitwise identical for any worker count.
  std::vector<MetricsAccumulator> per_image(static_cast<std::size_t>(std::max<std::int64_t>(n, 0)));
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));

  auto run_range = [&](std::int64_t wi, std::int64_t lo, std::int64_t hi) {
    try {
      for (std::int64_t i = lo; i < hi; ++i) {
        const PanopticPrediction pred = infer_panoptic(images[static_cast<std::size_t>(i)], projector, table, mode, inf);
        per_image[static_cast<std::size_t>(i)].add_image(pred, images[static_cast<std::size_t>(i)].gt_segments);
      }
    } catch (...) {
      errors[static_cast<std::size_t>(wi)] = std::current_exception();
    }
  };

  if (workers <= 1) {
    run_range(0, 0, n);
  } else {
    std::vector<std::thread> pool;
    const std::int64_t chunk = (n + workers - 1) / workers;
    for (std::int64_t wi = 0; wi < workers; ++wi) {
      const std::int64_t lo = std::min(n, wi * chunk);
      const std::int64_t hi = std::min(n, lo + chunk);
      pool.emplace_back(run_range, wi, lo, hi);
    }
    for (auto& t : pool) t.join();
  }
  for (auto& err : errors) {
    if (err) std::rethrow_exception(err);
  }

  MetricsAccumulator acc;
  for (const auto& p : per_image) acc.merge(p);
  return build_report(acc, table.seen_ids, table.unseen_ids);
}

SemanticProjector clone_projector(const SemanticProjector& p, bool trainable) {
  Rng dummy(0);
  SemanticProjector out = SemanticProjector::init(p.d_vision, p.c_semantic, dummy);
  out.restore(p.snapshot());
  out.params.set_trainable(trainable);
  return out;
}

QueryGenerator clone_generator(const QueryGenerator& g, bool trainable) {
  Rng dummy(0);
  QueryGenerator out = QueryGenerator::init(g.cfg, dummy);
  out.restore(g.snapshot());
  out.params.set_trainable(trainable);
  return out;
}

std::vector<double> generator_category_fidelity(const QueryGenerator& generator, const SemanticProjector& projector,
                                                const SemanticEmbeddingTable& table,
                                                std::int64_t samples_per_category, Rng& rng) {
  if (samples_per_category < 1) throw ContractError("fidelity probe needs samples_per_category >= 1");
  QueryGenerator gen = clone_generator(generator, /*trainable=*/false);
  const std::int64_t c = table.embeddings.cols();
  const std::int64_t n = table.embeddings.rows();
  std::vector<double> out;
  for (const std::int64_t cat : table.seen_ids) {
    Tensor eps({samples_per_category, c});
    for (std::int64_t i = 0; i < eps.size(); ++i) eps.at(i) = rng.normal();
    Tensor conditions({samples_per_category, c});
    for (std::int64_t r = 0; r < samples_per_category; ++r) {
      for (std::int64_t j = 0; j < c; ++j) conditions.at2(r, j) = table.embeddings.at2(cat, j);
    }
    const Tensor decoded =
        ad::evaluate(gen.decode(ad::constant(eps), ad::constant(conditions), /*training=*/false));
    const Tensor s = projector.project_plain(decoded);
    std::int64_t hits = 0;
    for (std::int64_t r = 0; r < samples_per_category; ++r) {
      double best = -2.0;
      std::int64_t best_cat = -1;
      for (std::int64_t j = 0; j < n; ++j) {
        const double sim = cosine(s.data() + r * s.cols(), table.embeddings.data() + j * c, c);
        if (sim > best) {
          best = sim;
          best_cat = j;
        }
      }
      hits += best_cat == cat ? 1 : 0;
    }
    out.push_back(static_cast<double>(hits) / static_cast<double>(samples_per_category));
  }
  return out;
}

}  // namespace concatlab
