#include "concatlab/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "concatlab/checkpoint.hpp"
#include "json.hpp"

namespace concatlab {

namespace {

using nlohmann::ordered_json;

// Internal generation constants: logit magnitude of the frozen mask head and
// the perturbation applied to the prototype->semantic linear map.
constexpr double kMaskLogitMagnitude = 6.0;
constexpr double kSemanticMapNoise = 0.05;

// rng stream tags
constexpr std::uint64_t kStreamPrototypes = 1;
constexpr std::uint64_t kStreamSemanticMap = 2;
constexpr std::uint64_t kStreamTrain = 3;
constexpr std::uint64_t kStreamTest = 4;

void normalize_row(double* p, std::int64_t n) {
  double ss = 0.0;
  for (std::int64_t i = 0; i < n; ++i) ss += p[i] * p[i];
  const double norm = std::sqrt(ss);
  if (norm > 1e-12) {
    for (std::int64_t i = 0; i < n; ++i) p[i] /= norm;
  }
}

struct Rect {
  std::int64_t top, left, h, w;
  bool overlaps(const Rect& o) const {
    return top < o.top + o.h && o.top < top + h && left < o.left + o.w && o.left < left + w;
  }
};

Rect sample_rect(Rng& rng, std::int64_t grid_h, std::int64_t grid_w) {
  const std::int64_t side = std::min(grid_h, grid_w);
  const std::int64_t lo = std::max<std::int64_t>(2, side / 4);
  const std::int64_t hi = std::max(lo, side / 2);
  Rect r{};
  r.h = rng.uniform_int(lo, std::min(hi, grid_h));
  r.w = rng.uniform_int(lo, std::min(hi, grid_w));
  r.top = rng.uniform_int(0, grid_h - r.h);
  r.left = rng.uniform_int(0, grid_w - r.w);
  return r;
}

Tensor corrupted_mask_logits(const Tensor& mask, double flip_rate, Rng& rng) {
  Tensor out(mask.shape());
  for (std::int64_t i = 0; i < mask.size(); ++i) {
    double sign = mask.at(i) > 0.5 ? 1.0 : -1.0;
    if (rng.uniform() < flip_rate) sign = -sign;
    out.at(i) = sign * kMaskLogitMagnitude;
  }
  return out;
}

ImageSample generate_image(const DatasetSpec& spec, const SyntheticDataset& ds, bool train_split,
                           std::int64_t index, Rng rng) {
  ImageSample img;
  const std::int64_t k = spec.k_queries, d = spec.d_vision, h = spec.grid_h, w = spec.grid_w;
  const std::int64_t n_seg = rng.uniform_int(spec.segments_min, spec.segments_max);

  // Non-overlapping rectangles, largest first for packability.
  std::vector<Rect> rects;
  for (std::int64_t s = 0; s < n_seg; ++s) rects.push_back(sample_rect(rng, h, w));
  std::sort(rects.begin(), rects.end(), [](const Rect& a, const Rect& b) { return a.h * a.w > b.h * b.w; });
  std::vector<Rect> placed;
  for (std::size_t s = 0; s < rects.size(); ++s) {
    Rect r = rects[s];
    bool ok = false;
    for (int attempt = 0; attempt < 200 && !ok; ++attempt) {
      ok = true;
      for (const auto& p : placed) {
        if (r.overlaps(p)) {
          ok = false;
          break;
        }
      }
      if (!ok) {
        r.top = rng.uniform_int(0, h - r.h);
        r.left = rng.uniform_int(0, w - r.w);
      }
    }
    // Random placement failed; fall back to a deterministic scan, shrinking
    // the rectangle until it fits somewhere. A 2x2 always fits on the grids
    // this generator accepts unless the image is pathologically full.
    while (!ok) {
      for (std::int64_t top = 0; top + r.h <= h && !ok; ++top) {
        for (std::int64_t left = 0; left + r.w <= w && !ok; ++left) {
          Rect cand = r;
          cand.top = top;
          cand.left = left;
          bool free = true;
          for (const auto& p : placed) {
            if (cand.overlaps(p)) {
              free = false;
              break;
            }
          }
          if (free) {
            r = cand;
            ok = true;
          }
        }
      }
      if (!ok) {
        if (r.h <= 2 && r.w <= 2) {
          throw ContractError("dataset generation: could not place segment " + std::to_string(s) + " of " +
                              (train_split ? std::string("train") : std::string("test")) + " image " +
                              std::to_string(index));
        }
        r.h = std::max<std::int64_t>(2, r.h - 1);
        r.w = std::max<std::int64_t>(2, r.w - 1);
      }
    }
    placed.push_back(r);
  }

  // Categories: train draws seen only; test draws from the full table.
  std::vector<std::int64_t> cats;
  for (std::int64_t s = 0; s < n_seg; ++s) {
    if (train_split) {
      cats.push_back(ds.table.seen_ids[static_cast<std::size_t>(rng.uniform_int(0, spec.n_seen - 1))]);
    } else {
      cats.push_back(rng.uniform_int(0, spec.n_categories() - 1));
    }
  }

  img.gt_segments.resize(static_cast<std::size_t>(n_seg));
  for (std::int64_t s = 0; s < n_seg; ++s) {
    auto& seg = img.gt_segments[static_cast<std::size_t>(s)];
    seg.category_id = cats[static_cast<std::size_t>(s)];
    seg.segment_id = s + 1;
    seg.mask = Tensor({h, w});
    const Rect& r = placed[static_cast<std::size_t>(s)];
    for (std::int64_t i = r.top; i < r.top + r.h; ++i)
      for (std::int64_t j = r.left; j < r.left + r.w; ++j) seg.mask.at2(i, j) = 1.0;
  }

  // Segments occupy random distinct query slots; remaining slots are
  // distractors (prototype mixtures with blob masks).
  std::vector<std::int64_t> slots(static_cast<std::size_t>(k));
  for (std::int64_t i = 0; i < k; ++i) slots[static_cast<std::size_t>(i)] = i;
  for (std::int64_t i = k - 1; i > 0; --i) {
    const std::int64_t j = rng.uniform_int(0, i);
    std::swap(slots[static_cast<std::size_t>(i)], slots[static_cast<std::size_t>(j)]);
  }

  img.vision_queries = Tensor({k, d});
  img.pred_mask_logits = Tensor({k, h, w});
  std::vector<bool> taken(static_cast<std::size_t>(k), false);
  for (std::int64_t s = 0; s < n_seg; ++s) {
    const std::int64_t slot = slots[static_cast<std::size_t>(s)];
    taken[static_cast<std::size_t>(slot)] = true;
    const std::int64_t cat = cats[static_cast<std::size_t>(s)];
    for (std::int64_t j = 0; j < d; ++j) {
      img.vision_queries.at2(slot, j) = ds.prototypes.at2(cat, j) + spec.sigma_vision * rng.normal();
    }
    const Tensor logits = corrupted_mask_logits(img.gt_segments[static_cast<std::size_t>(s)].mask, spec.mask_flip_rate, rng);
    for (std::int64_t i = 0; i < h * w; ++i) img.pred_mask_logits.at(slot * h * w + i) = logits.at(i);
  }
  const std::int64_t mix_pool = train_split ? spec.n_seen : spec.n_categories();
  for (std::int64_t q = 0; q < k; ++q) {
    if (taken[static_cast<std::size_t>(q)]) continue;
    std::int64_t c1 = rng.uniform_int(0, mix_pool - 1);
    std::int64_t c2 = rng.uniform_int(0, mix_pool - 1);
    if (train_split) {
      c1 = ds.table.seen_ids[static_cast<std::size_t>(c1)];
      c2 = ds.table.seen_ids[static_cast<std::size_t>(c2)];
    }
    for (std::int64_t j = 0; j < d; ++j) {
      img.vision_queries.at2(q, j) =
          0.5 * (ds.prototypes.at2(c1, j) + ds.prototypes.at2(c2, j)) + spec.sigma_vision * rng.normal();
    }
    const Rect blob = sample_rect(rng, h, w);
    Tensor blob_mask({h, w});
    for (std::int64_t i = blob.top; i < blob.top + blob.h; ++i)
      for (std::int64_t j = blob.left; j < blob.left + blob.w; ++j) blob_mask.at2(i, j) = 1.0;
    const Tensor logits = corrupted_mask_logits(blob_mask, spec.mask_flip_rate, rng);
    for (std::int64_t i = 0; i < h * w; ++i) img.pred_mask_logits.at(q * h * w + i) = logits.at(i);
  }

  img.global_cls = surrogate_cls(cats, ds.table, spec.sigma_cls, rng).token;
  img.segment_cls = Tensor({n_seg, spec.c_semantic});
  for (std::int64_t s = 0; s < n_seg; ++s) {
    const Tensor tok = surrogate_cls({cats[static_cast<std::size_t>(s)]}, ds.table, spec.sigma_cls, rng).token;
    for (std::int64_t j = 0; j < spec.c_semantic; ++j) img.segment_cls.at2(s, j) = tok.at(j);
  }
  return img;
}

NamedTensors dataset_entries(const SyntheticDataset& ds) {
  NamedTensors out;
  out.emplace_back("prototypes", ds.prototypes);
  out.emplace_back("table/embeddings", ds.table.embeddings);
  auto ids_tensor = [](const std::vector<std::int64_t>& ids) {
    Tensor t({static_cast<std::int64_t>(ids.size())});
    for (std::size_t i = 0; i < ids.size(); ++i) t.at(static_cast<std::int64_t>(i)) = static_cast<double>(ids[i]);
    return t;
  };
  out.emplace_back("table/seen_ids", ids_tensor(ds.table.seen_ids));
  out.emplace_back("table/unseen_ids", ids_tensor(ds.table.unseen_ids));
  auto emit_split = [&](const std::vector<ImageSample>& split, const std::string& name) {
    for (std::size_t i = 0; i < split.size(); ++i) {
      std::ostringstream prefix;
      prefix << name << "/";
      prefix.width(6);
      prefix.fill('0');
      prefix << i;
      const std::string p = prefix.str();
      const ImageSample& img = split[i];
      out.emplace_back(p + "/vision_queries", img.vision_queries);
      out.emplace_back(p + "/pred_mask_logits", img.pred_mask_logits);
      const std::int64_t o = static_cast<std::int64_t>(img.gt_segments.size());
      Tensor cats({o}), seg_ids({o});
      const std::int64_t h = img.pred_mask_logits.shape()[1], w = img.pred_mask_logits.shape()[2];
      Tensor masks({o, h, w});
      for (std::int64_t s = 0; s < o; ++s) {
        cats.at(s) = static_cast<double>(img.gt_segments[static_cast<std::size_t>(s)].category_id);
        seg_ids.at(s) = static_cast<double>(img.gt_segments[static_cast<std::size_t>(s)].segment_id);
        for (std::int64_t t = 0; t < h * w; ++t) masks.at(s * h * w + t) = img.gt_segments[static_cast<std::size_t>(s)].mask.at(t);
      }
      out.emplace_back(p + "/gt_categories", cats);
      out.emplace_back(p + "/gt_segment_ids", seg_ids);
      out.emplace_back(p + "/gt_masks", masks);
      out.emplace_back(p + "/global_cls", img.global_cls);
      out.emplace_back(p + "/segment_cls", img.segment_cls);
    }
  };
  emit_split(ds.train, "train");
  emit_split(ds.test, "test");
  return out;
}

}  // namespace

void DatasetSpec::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw ContractError("dataset spec: " + field + " " + why);
  };
  if (n_seen < 1) fail("n_seen", "must be >= 1");
  if (n_unseen < 1) fail("n_unseen", "must be >= 1");
  if (d_vision < 1) fail("d_vision", "must be >= 1");
  if (c_semantic < 1) fail("c_semantic", "must be >= 1");
  if (grid_h < 4 || grid_w < 4) fail("grid", "must be at least 4x4");
  if (segments_min < 1) fail("segments_min", "must be >= 1");
  if (segments_max < segments_min) fail("segments_max", "must be >= segments_min");
  if (k_queries < segments_max) fail("k_queries", "must be >= segments_max");
  if (n_train < 0) fail("n_train", "must be >= 0");
  if (n_test < 0) fail("n_test", "must be >= 0");
  if (sigma_vision < 0) fail("sigma_vision", "must be >= 0");
  if (sigma_cls < 0) fail("sigma_cls", "must be >= 0");
  if (mask_flip_rate < 0 || mask_flip_rate > 1) fail("mask_flip_rate", "must be in [0, 1]");
}

Tensor SemanticEmbeddingTable::rows(const std::vector<std::int64_t>& ids) const {
  const std::int64_t c = embeddings.cols();
  Tensor out({static_cast<std::int64_t>(ids.size()), c});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const std::int64_t id = ids[i];
    if (id < 0 || id >= embeddings.rows()) {
      throw ContractError("embedding table: category id " + std::to_string(id) + " out of range");
    }
    if (access_counts.size() == static_cast<std::size_t>(embeddings.rows())) access_counts[static_cast<std::size_t>(id)] += 1;
    for (std::int64_t j = 0; j < c; ++j) out.at2(static_cast<std::int64_t>(i), j) = embeddings.at2(id, j);
  }
  return out;
}

bool SemanticEmbeddingTable::is_seen(std::int64_t category) const {
  for (auto id : seen_ids) {
    if (id == category) return true;
  }
  return false;
}

void SemanticEmbeddingTable::reset_access_counts() const {
  access_counts.assign(static_cast<std::size_t>(embeddings.rows()), 0);
}

SurrogateCls surrogate_cls(const std::vector<std::int64_t>& category_ids, const SemanticEmbeddingTable& table,
                           double sigma_cls, Rng& rng) {
  if (category_ids.empty()) throw ContractError("surrogate_cls: empty category list");
  const std::int64_t c = table.embeddings.cols();
  Tensor mean({1, c});
  for (auto id : category_ids) {
    if (id < 0 || id >= table.embeddings.rows()) {
      throw ContractError("surrogate_cls: category id " + std::to_string(id) + " out of range");
    }
    for (std::int64_t j = 0; j < c; ++j) mean.at(j) += table.embeddings.at2(id, j);
  }
  for (std::int64_t j = 0; j < c; ++j) mean.at(j) /= static_cast<double>(category_ids.size());
  double norm = 0.0;
  for (std::int64_t j = 0; j < c; ++j) norm += mean.at(j) * mean.at(j);
  norm = std::sqrt(norm);
  SurrogateCls out;
  if (norm < 1e-12) {
    out.token = mean;  // degenerate antipodal mean, returned unnormalized
    out.degenerate = true;
    return out;
  }
  Tensor token({1, c});
  for (std::int64_t j = 0; j < c; ++j) token.at(j) = mean.at(j) / norm + sigma_cls * rng.normal();
  normalize_row(token.data(), c);
  out.token = token;
  return out;
}

SyntheticDataset generate_dataset(const DatasetSpec& spec) {
  spec.validate();
  SyntheticDataset ds;
  ds.spec = spec;
  const std::int64_t n = spec.n_categories(), d = spec.d_vision, c = spec.c_semantic;

  Rng proto_rng(derive_seed(spec.seed, kStreamPrototypes));
  ds.prototypes = Tensor({n, d});
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t j = 0; j < d; ++j) ds.prototypes.at2(i, j) = proto_rng.normal();
    normalize_row(ds.prototypes.data() + i * d, d);
  }

  Rng map_rng(derive_seed(spec.seed, kStreamSemanticMap));
  Tensor lin({d, c});
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  for (std::int64_t i = 0; i < d * c; ++i) lin.at(i) = scale * map_rng.normal();
  ds.table.embeddings = Tensor({n, c});
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t j = 0; j < c; ++j) {
      double v = 0.0;
      for (std::int64_t p = 0; p < d; ++p) v += ds.prototypes.at2(i, p) * lin.at2(p, j);
      ds.table.embeddings.at2(i, j) = v + kSemanticMapNoise * map_rng.normal();
    }
    normalize_row(ds.table.embeddings.data() + i * c, c);
  }
  for (std::int64_t i = 0; i < spec.n_seen; ++i) ds.table.seen_ids.push_back(i);
  for (std::int64_t i = spec.n_seen; i < n; ++i) ds.table.unseen_ids.push_back(i);
  ds.table.reset_access_counts();

  for (std::int64_t i = 0; i < spec.n_train; ++i) {
    ds.train.push_back(generate_image(spec, ds, true, i, Rng(derive_seed(derive_seed(spec.seed, kStreamTrain), static_cast<std::uint64_t>(i)))));
  }
  for (std::int64_t i = 0; i < spec.n_test; ++i) {
    ds.test.push_back(generate_image(spec, ds, false, i, Rng(derive_seed(derive_seed(spec.seed, kStreamTest), static_cast<std::uint64_t>(i)))));
  }
  ds.table.reset_access_counts();  // generation reads don't count as training access
  return ds;
}

std::uint64_t SyntheticDataset::content_digest() const { return named_tensors_digest(dataset_entries(*this)); }

void save_dataset(const SyntheticDataset& ds, const std::string& base_path) {
  const NamedTensors entries = dataset_entries(ds);
  save_checkpoint(base_path, entries);
  ordered_json meta;
  meta["format"] = "concatlab-dataset";
  ordered_json spec_j;
  spec_j["n_seen"] = ds.spec.n_seen;
  spec_j["n_unseen"] = ds.spec.n_unseen;
  spec_j["d_vision"] = ds.spec.d_vision;
  spec_j["c_semantic"] = ds.spec.c_semantic;
  spec_j["k_queries"] = ds.spec.k_queries;
  spec_j["grid_h"] = ds.spec.grid_h;
  spec_j["grid_w"] = ds.spec.grid_w;
  spec_j["n_train"] = ds.spec.n_train;
  spec_j["n_test"] = ds.spec.n_test;
  spec_j["segments_min"] = ds.spec.segments_min;
  spec_j["segments_max"] = ds.spec.segments_max;
  spec_j["sigma_vision"] = ds.spec.sigma_vision;
  spec_j["sigma_cls"] = ds.spec.sigma_cls;
  spec_j["mask_flip_rate"] = ds.spec.mask_flip_rate;
  spec_j["seed"] = ds.spec.seed;
  meta["spec"] = spec_j;
  meta["digest"] = hex64(named_tensors_digest(entries));
  meta["n_train"] = ds.train.size();
  meta["n_test"] = ds.test.size();
  std::ofstream f(base_path + ".meta.json", std::ios::trunc);
  if (!f) throw ContractError("cannot open '" + base_path + ".meta.json' for writing");
  f << meta.dump(2) << "\n";
}

SyntheticDataset load_dataset(const std::string& base_path) {
  std::ifstream f(base_path + ".meta.json");
  if (!f) throw ContractError("missing dataset sidecar '" + base_path + ".meta.json'");
  ordered_json meta;
  try {
    f >> meta;
  } catch (const std::exception& ex) {
    throw ContractError("invalid dataset sidecar: " + std::string(ex.what()));
  }
  if (meta.value("format", "") != "concatlab-dataset") throw ContractError("'" + base_path + "' is not a dataset");
  SyntheticDataset ds;
  const auto& s = meta.at("spec");
  ds.spec.n_seen = s.at("n_seen").get<std::int64_t>();
  ds.spec.n_unseen = s.at("n_unseen").get<std::int64_t>();
  ds.spec.d_vision = s.at("d_vision").get<std::int64_t>();
  ds.spec.c_semantic = s.at("c_semantic").get<std::int64_t>();
  ds.spec.k_queries = s.at("k_queries").get<std::int64_t>();
  ds.spec.grid_h = s.at("grid_h").get<std::int64_t>();
  ds.spec.grid_w = s.at("grid_w").get<std::int64_t>();
  ds.spec.n_train = s.at("n_train").get<std::int64_t>();
  ds.spec.n_test = s.at("n_test").get<std::int64_t>();
  ds.spec.segments_min = s.at("segments_min").get<std::int64_t>();
  ds.spec.segments_max = s.at("segments_max").get<std::int64_t>();
  ds.spec.sigma_vision = s.at("sigma_vision").get<double>();
  ds.spec.sigma_cls = s.at("sigma_cls").get<double>();
  ds.spec.mask_flip_rate = s.at("mask_flip_rate").get<double>();
  ds.spec.seed = s.at("seed").get<std::uint64_t>();

  NamedTensors entries = load_checkpoint(base_path);
  std::map<std::string, Tensor> by_name;
  for (auto& [name, t] : entries) by_name[name] = std::move(t);
  auto take = [&](const std::string& name) -> Tensor {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw ContractError("dataset missing entry '" + name + "'");
    return it->second;
  };
  ds.prototypes = take("prototypes");
  ds.table.embeddings = take("table/embeddings");
  auto ids_from = [&](const std::string& name) {
    const Tensor t = take(name);
    std::vector<std::int64_t> ids;
    for (std::int64_t i = 0; i < t.size(); ++i) ids.push_back(static_cast<std::int64_t>(t.at(i)));
    return ids;
  };
  ds.table.seen_ids = ids_from("table/seen_ids");
  ds.table.unseen_ids = ids_from("table/unseen_ids");
  ds.table.reset_access_counts();

  auto load_split = [&](const std::string& split, std::int64_t count) {
    std::vector<ImageSample> out;
    for (std::int64_t i = 0; i < count; ++i) {
      std::ostringstream prefix;
      prefix << split << "/";
      prefix.width(6);
      prefix.fill('0');
      prefix << i;
      const std::string p = prefix.str();
      ImageSample img;
      img.vision_queries = take(p + "/vision_queries");
      img.pred_mask_logits = take(p + "/pred_mask_logits");
      const Tensor cats = take(p + "/gt_categories");
      const Tensor seg_ids = take(p + "/gt_segment_ids");
      const Tensor masks = take(p + "/gt_masks");
      img.global_cls = take(p + "/global_cls");
      img.segment_cls = take(p + "/segment_cls");
      for (std::int64_t si = 0; si < cats.size(); ++si) {
        GtSegment seg;
        seg.category_id = static_cast<std::int64_t>(cats.at(si));
        seg.segment_id = static_cast<std::int64_t>(seg_ids.at(si));
        seg.mask = slice_first(masks, si);
        img.gt_segments.push_back(std::move(seg));
      }
      out.push_back(std::move(img));
    }
    return out;
  };
  ds.train = load_split("train", meta.at("n_train").get<std::int64_t>());
  ds.test = load_split("test", meta.at("n_test").get<std::int64_t>());

  const std::string want = meta.at("digest").get<std::string>();
  const std::string got = hex64(ds.content_digest());
  if (want != got) throw ContractError("dataset digest mismatch: sidecar " + want + ", content " + got);
  return ds;
}

}  // namespace concatlab
