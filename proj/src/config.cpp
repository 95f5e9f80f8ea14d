#include "concatlab/config.hpp"

#include <fstream>
#include <sstream>

#include "json.hpp"

namespace concatlab {

namespace {

using nlohmann::ordered_json;

[[noreturn]] void bad(const std::string& where, const std::string& why) {
  throw ContractError("config: " + where + " " + why);
}

class Section {
 public:
  Section(const ordered_json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) bad(path_, "must be an object");
    for (auto it = j_.begin(); it != j_.end(); ++it) unread_.push_back(it.key());
  }

  ~Section() = default;

  bool has(const std::string& key) const { return j_.contains(key); }

  const ordered_json& raw(const std::string& key) {
    mark(key);
    if (!j_.contains(key)) bad(path_ + "." + key, "is required");
    return j_.at(key);
  }

  template <typename T>
  T get(const std::string& key, T fallback, const char* kind) {
    mark(key);
    if (!j_.contains(key)) return fallback;
    try {
      return j_.at(key).get<T>();
    } catch (const std::exception&) {
      bad(path_ + "." + key, std::string("must be ") + kind);
    }
  }

  double number(const std::string& key, double fallback) { return get<double>(key, fallback, "a number"); }
  std::int64_t integer(const std::string& key, std::int64_t fallback) {
    mark(key);
    if (!j_.contains(key)) return fallback;
    const auto& v = j_.at(key);
    if (!v.is_number_integer() && !v.is_number_unsigned()) bad(path_ + "." + key, "must be an integer");
    return v.get<std::int64_t>();
  }
  bool boolean(const std::string& key, bool fallback) { return get<bool>(key, fallback, "a boolean"); }
  std::string text(const std::string& key, const std::string& fallback) {
    return get<std::string>(key, fallback, "a string");
  }

  void finish() const {
    for (const auto& key : unread_) bad(path_ + "." + key, "is not a recognized field");
  }

 private:
  void mark(const std::string& key) {
    for (auto it = unread_.begin(); it != unread_.end(); ++it) {
      if (*it == key) {
        unread_.erase(it);
        return;
      }
    }
  }

  const ordered_json& j_;
  std::string path_;
  std::vector<std::string> unread_;
};

StageConfig parse_stage(const ordered_json& j, const std::string& path, StageConfig defaults) {
  Section s(j, path);
  StageConfig out;
  out.epochs = s.integer("epochs", defaults.epochs);
  out.batch_size = s.integer("batch_size", defaults.batch_size);
  out.lr_scale = s.number("lr_scale", defaults.lr_scale);
  s.finish();
  return out;
}

ordered_json stage_json(const StageConfig& s) {
  ordered_json j;
  j["epochs"] = s.epochs;
  j["batch_size"] = s.batch_size;
  j["lr_scale"] = s.lr_scale;
  return j;
}

RunConfig parse_config(const ordered_json& j) {
  RunConfig cfg;
  Section root(j, "config");
  cfg.schema_version = static_cast<int>(root.integer("schema_version", 1));
  cfg.seed = static_cast<std::uint64_t>(root.integer("seed", static_cast<std::int64_t>(cfg.seed)));
  cfg.mode = mode_from_name(root.text("mode", mode_name(cfg.mode)));
  cfg.output_dir = root.text("output_dir", cfg.output_dir);

  if (root.has("dataset")) {
    Section d(root.raw("dataset"), "dataset");
    cfg.dataset.n_seen = d.integer("n_seen", cfg.dataset.n_seen);
    cfg.dataset.n_unseen = d.integer("n_unseen", cfg.dataset.n_unseen);
    cfg.dataset.d_vision = d.integer("d_vision", cfg.dataset.d_vision);
    cfg.dataset.c_semantic = d.integer("c_semantic", cfg.dataset.c_semantic);
    cfg.dataset.k_queries = d.integer("k_queries", cfg.dataset.k_queries);
    cfg.dataset.grid_h = d.integer("grid_h", cfg.dataset.grid_h);
    cfg.dataset.grid_w = d.integer("grid_w", cfg.dataset.grid_w);
    cfg.dataset.n_train = d.integer("n_train", cfg.dataset.n_train);
    cfg.dataset.n_test = d.integer("n_test", cfg.dataset.n_test);
    cfg.dataset.segments_min = d.integer("segments_min", cfg.dataset.segments_min);
    cfg.dataset.segments_max = d.integer("segments_max", cfg.dataset.segments_max);
    cfg.dataset.sigma_vision = d.number("sigma_vision", cfg.dataset.sigma_vision);
    cfg.dataset.sigma_cls = d.number("sigma_cls", cfg.dataset.sigma_cls);
    cfg.dataset.mask_flip_rate = d.number("mask_flip_rate", cfg.dataset.mask_flip_rate);
    cfg.dataset.seed = static_cast<std::uint64_t>(d.integer("seed", static_cast<std::int64_t>(cfg.dataset.seed)));
    d.finish();
  }

  if (root.has("losses")) {
    Section l(root.raw("losses"), "losses");
    cfg.losses.alpha_focal = l.number("alpha_focal", cfg.losses.alpha_focal);
    cfg.losses.gamma_focal = l.number("gamma_focal", cfg.losses.gamma_focal);
    cfg.losses.bce_weight = l.number("bce_weight", cfg.losses.bce_weight);
    cfg.losses.dice_weight = l.number("dice_weight", cfg.losses.dice_weight);
    cfg.losses.gamma = l.number("gamma", cfg.losses.gamma);
    cfg.losses.tau = l.number("tau", cfg.losses.tau);
    cfg.losses.tau_r = l.number("tau_r", cfg.losses.tau_r);
    if (l.has("bandwidths")) {
      const auto& b = l.raw("bandwidths");
      if (!b.is_array() || b.empty()) bad("losses.bandwidths", "must be a non-empty array of numbers");
      cfg.losses.bandwidths.clear();
      for (const auto& v : b) {
        if (!v.is_number()) bad("losses.bandwidths", "must be a non-empty array of numbers");
        cfg.losses.bandwidths.push_back(v.get<double>());
      }
    }
    cfg.losses.lambda_cga = l.number("lambda_cga", cfg.losses.lambda_cga);
    cfg.losses.lambda_c = l.number("lambda_c", cfg.losses.lambda_c);
    cfg.losses.lambda_r = l.number("lambda_r", cfg.losses.lambda_r);
    cfg.losses.lambda_f = l.number("lambda_f", cfg.losses.lambda_f);
    cfg.losses.beta_kl = l.number("beta_kl", cfg.losses.beta_kl);
    cfg.losses.noobj_weight = l.number("noobj_weight", cfg.losses.noobj_weight);
    cfg.losses.lambda_span = l.number("lambda_span", cfg.losses.lambda_span);
    cfg.losses.bank_size = l.integer("bank_size", cfg.losses.bank_size);
    cfg.losses.qc_include_matched_negatives =
        l.boolean("qc_include_matched_negatives", cfg.losses.qc_include_matched_negatives);
    cfg.losses.stage3_seen_term = l.boolean("stage3_seen_term", cfg.losses.stage3_seen_term);
    l.finish();
  }

  if (root.has("optim")) {
    Section o(root.raw("optim"), "optim");
    cfg.base_lr = o.number("base_lr", cfg.base_lr);
    cfg.weight_decay = o.number("weight_decay", cfg.weight_decay);
    o.finish();
  }
  if (root.has("stage1")) cfg.stage1 = parse_stage(root.raw("stage1"), "stage1", cfg.stage1);
  if (root.has("stage2")) cfg.stage2 = parse_stage(root.raw("stage2"), "stage2", cfg.stage2);
  if (root.has("stage3")) cfg.stage3 = parse_stage(root.raw("stage3"), "stage3", cfg.stage3);

  if (root.has("generator")) {
    Section g(root.raw("generator"), "generator");
    cfg.generator_hidden = g.integer("hidden", cfg.generator_hidden);
    cfg.conditioning = conditioning_from_name(g.text("conditioning", conditioning_name(cfg.conditioning)));
    g.finish();
  }
  cfg.pseudo_per_step = root.integer("pseudo_per_step", cfg.pseudo_per_step);

  if (root.has("inference")) {
    Section i(root.raw("inference"), "inference");
    cfg.inference.segment_threshold = i.number("segment_threshold", cfg.inference.segment_threshold);
    cfg.inference.unseen_logit_increment = i.number("unseen_logit_increment", cfg.inference.unseen_logit_increment);
    cfg.inference.mask_prob_floor = i.number("mask_prob_floor", cfg.inference.mask_prob_floor);
    i.finish();
  }
  root.finish();
  cfg.validate();
  return cfg;
}

ordered_json config_json(const RunConfig& cfg) {
  ordered_json j;
  j["schema_version"] = cfg.schema_version;
  j["seed"] = cfg.seed;
  j["mode"] = mode_name(cfg.mode);
  j["output_dir"] = cfg.output_dir;
  ordered_json d;
  d["n_seen"] = cfg.dataset.n_seen;
  d["n_unseen"] = cfg.dataset.n_unseen;
  d["d_vision"] = cfg.dataset.d_vision;
  d["c_semantic"] = cfg.dataset.c_semantic;
  d["k_queries"] = cfg.dataset.k_queries;
  d["grid_h"] = cfg.dataset.grid_h;
  d["grid_w"] = cfg.dataset.grid_w;
  d["n_train"] = cfg.dataset.n_train;
  d["n_test"] = cfg.dataset.n_test;
  d["segments_min"] = cfg.dataset.segments_min;
  d["segments_max"] = cfg.dataset.segments_max;
  d["sigma_vision"] = cfg.dataset.sigma_vision;
  d["sigma_cls"] = cfg.dataset.sigma_cls;
  d["mask_flip_rate"] = cfg.dataset.mask_flip_rate;
  d["seed"] = cfg.dataset.seed;
  j["dataset"] = d;
  ordered_json l;
  l["alpha_focal"] = cfg.losses.alpha_focal;
  l["gamma_focal"] = cfg.losses.gamma_focal;
  l["bce_weight"] = cfg.losses.bce_weight;
  l["dice_weight"] = cfg.losses.dice_weight;
  l["gamma"] = cfg.losses.gamma;
  l["tau"] = cfg.losses.tau;
  l["tau_r"] = cfg.losses.tau_r;
  l["bandwidths"] = cfg.losses.bandwidths;
  l["lambda_cga"] = cfg.losses.lambda_cga;
  l["lambda_c"] = cfg.losses.lambda_c;
  l["lambda_r"] = cfg.losses.lambda_r;
  l["lambda_f"] = cfg.losses.lambda_f;
  l["beta_kl"] = cfg.losses.beta_kl;
  l["noobj_weight"] = cfg.losses.noobj_weight;
  l["lambda_span"] = cfg.losses.lambda_span;
  l["bank_size"] = cfg.losses.bank_size;
  l["qc_include_matched_negatives"] = cfg.losses.qc_include_matched_negatives;
  l["stage3_seen_term"] = cfg.losses.stage3_seen_term;
  j["losses"] = l;
  ordered_json o;
  o["base_lr"] = cfg.base_lr;
  o["weight_decay"] = cfg.weight_decay;
  j["optim"] = o;
  j["stage1"] = stage_json(cfg.stage1);
  j["stage2"] = stage_json(cfg.stage2);
  j["stage3"] = stage_json(cfg.stage3);
  ordered_json g;
  g["hidden"] = cfg.generator_hidden;
  g["conditioning"] = conditioning_name(cfg.conditioning);
  j["generator"] = g;
  j["pseudo_per_step"] = cfg.pseudo_per_step;
  ordered_json inf;
  inf["segment_threshold"] = cfg.inference.segment_threshold;
  inf["unseen_logit_increment"] = cfg.inference.unseen_logit_increment;
  inf["mask_prob_floor"] = cfg.inference.mask_prob_floor;
  j["inference"] = inf;
  return j;
}

}  // namespace

std::string mode_name(Mode m) { return m == Mode::kInductive ? "inductive" : "transductive"; }

Mode mode_from_name(const std::string& name) {
  if (name == "inductive") return Mode::kInductive;
  if (name == "transductive") return Mode::kTransductive;
  bad("mode", "must be \"inductive\" or \"transductive\", got \"" + name + "\"");
}

std::string conditioning_name(Conditioning c) { return c == Conditioning::kAdd ? "add" : "concat"; }

Conditioning conditioning_from_name(const std::string& name) {
  if (name == "add") return Conditioning::kAdd;
  if (name == "concat") return Conditioning::kConcat;
  bad("generator.conditioning", "must be \"add\" or \"concat\", got \"" + name + "\"");
}

void RunConfig::validate() const {
  if (schema_version != 1) bad("schema_version", "must be 1");
  dataset.validate();
  auto check_stage = [](const char* name, const StageConfig& s) {
    if (s.epochs < 0) bad(std::string(name) + ".epochs", "must be >= 0");
    if (s.batch_size < 1) bad(std::string(name) + ".batch_size", "must be >= 1");
    if (!(s.lr_scale > 0)) bad(std::string(name) + ".lr_scale", "must be > 0");
  };
  check_stage("stage1", stage1);
  check_stage("stage2", stage2);
  check_stage("stage3", stage3);
  if (!(base_lr > 0)) bad("optim.base_lr", "must be > 0");
  if (weight_decay < 0) bad("optim.weight_decay", "must be >= 0");
  if (pseudo_per_step < 0) bad("pseudo_per_step", "must be >= 0");
  if (generator_hidden < 0) bad("generator.hidden", "must be >= 0");
  if (!(losses.tau > 0)) bad("losses.tau", "must be > 0");
  if (!(losses.tau_r > 0)) bad("losses.tau_r", "must be > 0");
  if (losses.bandwidths.empty()) bad("losses.bandwidths", "must be non-empty");
  for (double b : losses.bandwidths) {
    if (!(b > 0)) bad("losses.bandwidths", "entries must be > 0");
  }
  if (losses.alpha_focal < 0 || losses.alpha_focal > 1) bad("losses.alpha_focal", "must be in [0, 1]");
  if (losses.gamma_focal < 0) bad("losses.gamma_focal", "must be >= 0");
  if (losses.gamma < 0) bad("losses.gamma", "must be >= 0");
  for (const auto& [name, v] : std::vector<std::pair<std::string, double>>{
           {"bce_weight", losses.bce_weight},
           {"dice_weight", losses.dice_weight},
           {"lambda_cga", losses.lambda_cga},
           {"lambda_c", losses.lambda_c},
           {"lambda_r", losses.lambda_r},
           {"lambda_f", losses.lambda_f},
           {"beta_kl", losses.beta_kl},
           {"noobj_weight", losses.noobj_weight},
           {"lambda_span", losses.lambda_span}}) {
    if (v < 0) bad("losses." + name, "must be >= 0");
  }
  if (losses.bank_size < 0) bad("losses.bank_size", "must be >= 0");
  if (inference.segment_threshold < 0 || inference.segment_threshold > 1) {
    bad("inference.segment_threshold", "must be in [0, 1]");
  }
  if (inference.mask_prob_floor < 0 || inference.mask_prob_floor > 1) {
    bad("inference.mask_prob_floor", "must be in [0, 1]");
  }
}

std::string RunConfig::to_json_string(int indent) const { return config_json(*this).dump(indent); }

RunConfig RunConfig::from_json_string(const std::string& text) {
  ordered_json j = ordered_json::parse(text, nullptr, false);
  if (j.is_discarded()) throw ContractError("config: not valid JSON");
  return parse_config(j);
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ContractError("config: cannot open '" + path + "'");
  std::ostringstream buf;
  buf << f.rdbuf();
  return from_json_string(buf.str());
}

RunConfig apply_overrides(const RunConfig& base, const std::vector<std::string>& sets) {
  ordered_json j = ordered_json::parse(base.to_json_string());
  for (const std::string& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw ContractError("config: override '" + s + "' must look like path.to.field=value");
    }
    const std::string path = s.substr(0, eq);
    const std::string value = s.substr(eq + 1);
    std::vector<std::string> parts;
    std::istringstream ps(path);
    std::string part;
    while (std::getline(ps, part, '.')) parts.push_back(part);
    if (parts.empty()) throw ContractError("config: override '" + s + "' has an empty path");
    ordered_json* cursor = &j;
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
      if (!cursor->contains(parts[i])) throw ContractError("config: override path '" + path + "' has no field '" + parts[i] + "'");
      cursor = &(*cursor)[parts[i]];
    }
    if (!cursor->is_object() || !cursor->contains(parts.back())) {
      throw ContractError("config: override path '" + path + "' has no field '" + parts.back() + "'");
    }
    ordered_json parsed = ordered_json::parse(value, nullptr, false);
    (*cursor)[parts.back()] = parsed.is_discarded() ? ordered_json(value) : parsed;
  }
  return RunConfig::from_json_string(j.dump());
}

}  // namespace concatlab
