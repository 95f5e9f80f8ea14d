#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "concatlab/checkpoint.hpp"
#include "concatlab/dataset.hpp"
#include "concatlab/optim.hpp"
#include "concatlab/rng.hpp"

namespace concatlab {

// Two affine layers with a leaky rectifier between, R^D -> R^D -> R^C.
// Parameters are registered as projector.l1.{weight,bias}, projector.l2.{...}.
struct SemanticProjector {
  std::int64_t d_vision = 0;
  std::int64_t c_semantic = 0;
  ParamSet params;

  static SemanticProjector init(std::int64_t d_vision, std::int64_t c_semantic, Rng& rng);

  ad::Value project(const ad::Value& vision_queries) const;  // K x D -> K x C
  Tensor project_plain(const Tensor& vision_queries) const;  // graph-free forward

  NamedTensors snapshot() const;
  void restore(const NamedTensors& entries);
};

// How the condition embedding enters the decoder: added to the latent
// (latent dimension = C) or concatenated with it (decoder input 2C).
enum class Conditioning { kAdd, kConcat };

struct GeneratorConfig {
  std::int64_t d_vision = 0;
  std::int64_t c_semantic = 0;
  std::int64_t hidden = 0;  // 0 -> max(d_vision, c_semantic)
  Conditioning conditioning = Conditioning::kAdd;

  std::int64_t hidden_width() const { return hidden > 0 ? hidden : std::max(d_vision, c_semantic); }
  std::int64_t decoder_input() const {
    return conditioning == Conditioning::kAdd ? c_semantic : 2 * c_semantic;
  }
};

// Conditional VAE over vision queries. Encoder: four affine+batchnorm+leaky
// blocks D -> hidden, then bare affine heads for (mu, logvar) in R^C each.
// Decoder: four such blocks from the conditioned latent, then a bare affine
// head back to R^D. Parameters are registered under cvae.encoder.* and
// cvae.decoder.*; batch-norm running statistics ride along in snapshots.
struct QueryGenerator {
  GeneratorConfig cfg;
  ParamSet params;
  std::vector<ad::BatchNormState> encoder_bn;  // 4 states
  std::vector<ad::BatchNormState> decoder_bn;  // 4 states

  static QueryGenerator init(GeneratorConfig cfg, Rng& rng);

  // O x D -> (mu, logvar), each O x C.
  std::pair<ad::Value, ad::Value> encode(const ad::Value& real_queries, bool training);
  // z = mu + exp(logvar / 2) * eps, elementwise.
  static ad::Value reparameterize(const ad::Value& mu, const ad::Value& logvar, const Tensor& eps);
  // Conditioned decode: decode(z + a) or decode([z, a]) per cfg.conditioning.
  ad::Value decode(const ad::Value& latent, const ad::Value& conditions, bool training);

  struct PseudoQueries {
    Tensor queries;                   // U x D
    std::vector<std::int64_t> labels;  // full-table category indices, all unseen
  };
  // Draws `count` standard-normal latents and `count` unseen categories
  // uniformly with replacement, then decodes in eval mode.
  PseudoQueries sample_pseudo_unseen(const SemanticEmbeddingTable& table, std::int64_t count, Rng& rng);

  NamedTensors snapshot() const;
  void restore(const NamedTensors& entries);
};

}  // namespace concatlab
