#include "concatlab/models.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace concatlab {

namespace {

constexpr double kLeakySlope = 0.01;

Tensor he_weights(std::int64_t fan_in, std::int64_t fan_out, Rng& rng, double gain = 1.0) {
  Tensor w({fan_in, fan_out});
  const double scale = gain * std::sqrt(2.0 / static_cast<double>(fan_in));
  for (std::int64_t i = 0; i < w.size(); ++i) w.at(i) = scale * rng.normal();
  return w;
}

void add_linear(ParamSet& params, const std::string& prefix, std::int64_t fan_in, std::int64_t fan_out, Rng& rng,
                double gain = 1.0) {
  params.add(prefix + ".weight", he_weights(fan_in, fan_out, rng, gain));
  params.add(prefix + ".bias", Tensor({1, fan_out}));
}

// Classification logits are raw dot products against unit-norm embedding
// rows, so the useful operating range starts near |logit| ~ a few. Unit-gain
// init leaves them ~0.3, deep inside a regime where the alignment losses'
// rotational pull (~1/tau per unit cosine) dominates the focal gradient and
// training stalls at small output scale for a seed-dependent number of
// epochs. Starting the projector at a larger output scale removes that
// barrier; the focal no-object term cleans up the initially random logits
// within a few epochs.
constexpr double kProjectorInitGain = 2.0;

void add_block(ParamSet& params, const std::string& prefix, std::int64_t fan_in, std::int64_t fan_out, Rng& rng) {
  add_linear(params, prefix, fan_in, fan_out, rng);
  params.add(prefix + ".bn_gamma", Tensor::ones({1, fan_out}));
  params.add(prefix + ".bn_beta", Tensor({1, fan_out}));
}

ad::Value run_block(const ParamSet& params, const std::string& prefix, const ad::Value& x,
                    ad::BatchNormState& bn, bool training) {
  ad::Value h = ad::affine(x, params.find(prefix + ".weight"), params.find(prefix + ".bias"));
  h = ad::batch_norm(h, params.find(prefix + ".bn_gamma"), params.find(prefix + ".bn_beta"), bn, training);
  return ad::leaky_relu(h, kLeakySlope);
}

void restore_into(ParamSet& params, const std::map<std::string, const Tensor*>& by_name) {
  for (auto& entry : params.entries()) {
    auto it = by_name.find(entry.name);
    if (it == by_name.end()) throw ContractError("checkpoint missing parameter '" + entry.name + "'");
    if (it->second->shape() != entry.node->value.shape()) {
      throw ShapeError("checkpoint parameter '" + entry.name + "' has shape " + shape_str(it->second->shape()) +
                       ", model expects " + shape_str(entry.node->value.shape()));
    }
    entry.node->value = *it->second;
  }
}

std::map<std::string, const Tensor*> index_entries(const NamedTensors& entries) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : entries) by_name[name] = &t;
  return by_name;
}

void snapshot_bn(NamedTensors& out, const std::string& prefix, const std::vector<ad::BatchNormState>& states) {
  for (std::size_t i = 0; i < states.size(); ++i) {
    const std::string p = prefix + ".b" + std::to_string(i);
    out.emplace_back(p + ".bn_running_mean", states[i].running_mean);
    out.emplace_back(p + ".bn_running_var", states[i].running_var);
    out.emplace_back(p + ".bn_batches_seen", Tensor::scalar(static_cast<double>(states[i].batches_seen)));
  }
}

void restore_bn(const std::map<std::string, const Tensor*>& by_name, const std::string& prefix,
                std::vector<ad::BatchNormState>& states) {
  for (std::size_t i = 0; i < states.size(); ++i) {
    const std::string p = prefix + ".b" + std::to_string(i);
    auto need = [&](const std::string& name) -> const Tensor& {
      auto it = by_name.find(name);
      if (it == by_name.end()) throw ContractError("checkpoint missing state '" + name + "'");
      return *it->second;
    };
    states[i].running_mean = need(p + ".bn_running_mean");
    states[i].running_var = need(p + ".bn_running_var");
    states[i].batches_seen = static_cast<std::int64_t>(need(p + ".bn_batches_seen").item());
  }
}

}  // namespace

SemanticProjector SemanticProjector::init(std::int64_t d_vision, std::int64_t c_semantic, Rng& rng) {
  if (d_vision < 1 || c_semantic < 1) throw ContractError("projector dimensions must be >= 1");
  SemanticProjector p;
  p.d_vision = d_vision;
  p.c_semantic = c_semantic;
  add_linear(p.params, "projector.l1", d_vision, d_vision, rng, kProjectorInitGain);
  add_linear(p.params, "projector.l2", d_vision, c_semantic, rng, kProjectorInitGain);
  return p;
}

ad::Value SemanticProjector::project(const ad::Value& vision_queries) const {
  if (vision_queries->value.cols() != d_vision) {
    throw ShapeError("project: input has " + std::to_string(vision_queries->value.cols()) +
                     " columns, projector expects " + std::to_string(d_vision));
  }
  ad::Value h = ad::affine(vision_queries, params.find("projector.l1.weight"), params.find("projector.l1.bias"));
  h = ad::leaky_relu(h, kLeakySlope);
  return ad::affine(h, params.find("projector.l2.weight"), params.find("projector.l2.bias"));
}

Tensor SemanticProjector::project_plain(const Tensor& vision_queries) const {
  return ad::evaluate(project(ad::constant(vision_queries)));
}

NamedTensors SemanticProjector::snapshot() const {
  NamedTensors out;
  for (const auto& entry : params.entries()) out.emplace_back(entry.name, entry.node->value);
  return out;
}

void SemanticProjector::restore(const NamedTensors& entries) { restore_into(params, index_entries(entries)); }

QueryGenerator QueryGenerator::init(GeneratorConfig cfg, Rng& rng) {
  if (cfg.d_vision < 1 || cfg.c_semantic < 1) throw ContractError("generator dimensions must be >= 1");
  QueryGenerator g;
  g.cfg = cfg;
  const std::int64_t h = cfg.hidden_width();
  add_block(g.params, "cvae.encoder.b0", cfg.d_vision, h, rng);
  add_block(g.params, "cvae.encoder.b1", h, h, rng);
  add_block(g.params, "cvae.encoder.b2", h, h, rng);
  add_block(g.params, "cvae.encoder.b3", h, h, rng);
  add_linear(g.params, "cvae.encoder.mu", h, cfg.c_semantic, rng);
  add_linear(g.params, "cvae.encoder.logvar", h, cfg.c_semantic, rng);
  add_block(g.params, "cvae.decoder.b0", cfg.decoder_input(), h, rng);
  add_block(g.params, "cvae.decoder.b1", h, h, rng);
  add_block(g.params, "cvae.decoder.b2", h, h, rng);
  add_block(g.params, "cvae.decoder.b3", h, h, rng);
  add_linear(g.params, "cvae.decoder.out", h, cfg.d_vision, rng);
  for (int i = 0; i < 4; ++i) {
    g.encoder_bn.push_back(ad::BatchNormState::init(h));
    g.decoder_bn.push_back(ad::BatchNormState::init(h));
  }
  return g;
}

std::pair<ad::Value, ad::Value> QueryGenerator::encode(const ad::Value& real_queries, bool training) {
  if (real_queries->value.cols() != cfg.d_vision) {
    throw ShapeError("encode: input has " + std::to_string(real_queries->value.cols()) +
                     " columns, encoder expects " + std::to_string(cfg.d_vision));
  }
  ad::Value h = real_queries;
  for (int i = 0; i < 4; ++i) {
    h = run_block(params, "cvae.encoder.b" + std::to_string(i), h, encoder_bn[static_cast<std::size_t>(i)], training);
  }
  ad::Value mu = ad::affine(h, params.find("cvae.encoder.mu.weight"), params.find("cvae.encoder.mu.bias"));
  ad::Value logvar = ad::affine(h, params.find("cvae.encoder.logvar.weight"), params.find("cvae.encoder.logvar.bias"));
  return {mu, logvar};
}

ad::Value QueryGenerator::reparameterize(const ad::Value& mu, const ad::Value& logvar, const Tensor& eps) {
  if (eps.shape() != mu->value.shape()) {
    throw ShapeError("reparameterize: eps shape " + shape_str(eps.shape()) + " does not match mu shape " +
                     shape_str(mu->value.shape()));
  }
  ad::Value std_dev = ad::exp_(ad::mul_scalar(logvar, 0.5));
  return ad::add(mu, ad::mul(std_dev, ad::constant(eps)));
}

ad::Value QueryGenerator::decode(const ad::Value& latent, const ad::Value& conditions, bool training) {
  if (latent->value.shape() != conditions->value.shape()) {
    throw ShapeError("decode: latent shape " + shape_str(latent->value.shape()) +
                     " does not match condition shape " + shape_str(conditions->value.shape()));
  }
  if (latent->value.cols() != cfg.c_semantic) {
    throw ShapeError("decode: latent has " + std::to_string(latent->value.cols()) + " columns, expected " +
                     std::to_string(cfg.c_semantic));
  }
  ad::Value z = cfg.conditioning == Conditioning::kAdd ? ad::add(latent, conditions)
                                                       : ad::concat({latent, conditions}, 1);
  ad::Value h = z;
  for (int i = 0; i < 4; ++i) {
    h = run_block(params, "cvae.decoder.b" + std::to_string(i), h, decoder_bn[static_cast<std::size_t>(i)], training);
  }
  return ad::affine(h, params.find("cvae.decoder.out.weight"), params.find("cvae.decoder.out.bias"));
}

QueryGenerator::PseudoQueries QueryGenerator::sample_pseudo_unseen(const SemanticEmbeddingTable& table,
                                                                   std::int64_t count, Rng& rng) {
  if (table.unseen_ids.empty()) throw ContractError("sample_pseudo_unseen: unseen category set is empty");
  if (count < 0) throw ContractError("sample_pseudo_unseen: count must be >= 0");
  PseudoQueries out;
  out.queries = Tensor({count, cfg.d_vision});
  if (count == 0) return out;
  Tensor latents({count, cfg.c_semantic});
  for (std::int64_t i = 0; i < latents.size(); ++i) latents.at(i) = rng.normal();
  for (std::int64_t i = 0; i < count; ++i) {
    const std::int64_t pick = rng.uniform_int(0, static_cast<std::int64_t>(table.unseen_ids.size()) - 1);
    out.labels.push_back(table.unseen_ids[static_cast<std::size_t>(pick)]);
  }
  const Tensor conditions = table.rows(out.labels);
  out.queries = ad::evaluate(decode(ad::constant(latents), ad::constant(conditions), /*training=*/false));
  return out;
}

NamedTensors QueryGenerator::snapshot() const {
  NamedTensors out;
  for (const auto& entry : params.entries()) out.emplace_back(entry.name, entry.node->value);
  snapshot_bn(out, "cvae.encoder", encoder_bn);
  snapshot_bn(out, "cvae.decoder", decoder_bn);
  return out;
}

void QueryGenerator::restore(const NamedTensors& entries) {
  const auto by_name = index_entries(entries);
  restore_into(params, by_name);
  restore_bn(by_name, "cvae.encoder", encoder_bn);
  restore_bn(by_name, "cvae.decoder", decoder_bn);
}

}  // namespace concatlab
