#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "concatlab/checkpoint.hpp"
#include "concatlab/config.hpp"
#include "concatlab/dataset.hpp"
#include "concatlab/matching.hpp"
#include "concatlab/pipeline.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace concatlab;

namespace {

// exit codes: 0 ok, 1 runtime failure, 2 invalid config/usage, 3 missing
// prerequisite checkpoint
struct CliError {
  int code;
  std::string message;
};

struct CommonOpts {
  std::string config_path;
  std::vector<std::string> sets;
  std::int64_t seed = -1;  // < 0 -> keep config seed
  std::string out;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("--config", o.config_path, "JSON config file (defaults apply when omitted)");
  cmd->add_option("--set", o.sets, "dotted override, e.g. --set losses.lambda_r=0 (repeatable)")
      ->take_all();
  cmd->add_option("--seed", o.seed, "run seed override (>= 0)");
  cmd->add_option("--out", o.out, "run directory (overrides config output_dir)");
}

RunConfig resolve_config(const CommonOpts& o) {
  try {
    RunConfig cfg;
    if (!o.config_path.empty()) cfg = RunConfig::load(o.config_path);
    cfg = apply_overrides(cfg, o.sets);
    if (o.seed >= 0) cfg.seed = static_cast<std::uint64_t>(o.seed);
    if (!o.out.empty()) cfg.output_dir = o.out;
    cfg.validate();
    return cfg;
  } catch (const Error& e) {
    throw CliError{2, e.what()};
  }
}

void write_run_config(const RunConfig& cfg) {
  fs::create_directories(cfg.output_dir);
  std::ofstream f(cfg.output_dir + "/config.json", std::ios::trunc);
  if (!f) throw CliError{1, "cannot write '" + cfg.output_dir + "/config.json'"};
  f << cfg.to_json_string(2) << "\n";
}

LogSink file_sink(const std::string& path) {
  auto out = std::make_shared<std::ofstream>(path, std::ios::trunc);
  if (!*out) throw CliError{1, "cannot open log file '" + path + "'"};
  return [out](const std::string& line) { *out << line << "\n"; };
}

bool same_spec(const DatasetSpec& a, const DatasetSpec& b) {
  return a.n_seen == b.n_seen && a.n_unseen == b.n_unseen && a.d_vision == b.d_vision &&
         a.c_semantic == b.c_semantic && a.k_queries == b.k_queries && a.grid_h == b.grid_h &&
         a.grid_w == b.grid_w && a.n_train == b.n_train && a.n_test == b.n_test &&
         a.segments_min == b.segments_min && a.segments_max == b.segments_max &&
         a.sigma_vision == b.sigma_vision && a.sigma_cls == b.sigma_cls &&
         a.mask_flip_rate == b.mask_flip_rate && a.seed == b.seed;
}

SyntheticDataset obtain_dataset(const RunConfig& cfg) {
  const std::string base = cfg.output_dir + "/dataset";
  if (fs::exists(base + ".meta.json")) {
    SyntheticDataset ds = load_dataset(base);
    if (!same_spec(ds.spec, cfg.dataset)) {
      throw CliError{2, "dataset at '" + base + "' was generated from a different spec; delete it or align the config"};
    }
    return ds;
  }
  return generate_dataset(cfg.dataset);
}

SemanticProjector load_projector_checkpoint(const RunConfig& cfg, const std::string& base,
                                            const std::string& stage_name) {
  if (!fs::exists(base + ".json")) {
    throw CliError{3, "missing " + stage_name + " checkpoint '" + base + ".json' — run `concatlab " + stage_name +
                          "` first"};
  }
  Rng dummy(0);
  SemanticProjector p = SemanticProjector::init(cfg.dataset.d_vision, cfg.dataset.c_semantic, dummy);
  p.restore(load_checkpoint(base));
  return p;
}

QueryGenerator load_generator_checkpoint(const RunConfig& cfg, const std::string& base) {
  if (!fs::exists(base + ".json")) {
    throw CliError{3, "missing stage2 checkpoint '" + base + ".json' — run `concatlab stage2` first"};
  }
  Rng dummy(0);
  QueryGenerator g = QueryGenerator::init(
      GeneratorConfig{cfg.dataset.d_vision, cfg.dataset.c_semantic, cfg.generator_hidden, cfg.conditioning}, dummy);
  g.restore(load_checkpoint(base));
  return g;
}

void write_metrics(const MetricsReport& report, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw CliError{1, "cannot write '" + path + "'"};
  f << report.to_json(2) << "\n";
}

void print_metrics(const std::string& label, const MetricsReport& r) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << "[" << label << "] sPQ " << r.spq << "  uPQ " << r.upq << "  hPQ " << r.hpq << "  sIoU " << r.siou
     << "  uIoU " << r.uiou << "  hIoU " << r.hiou;
  std::cout << os.str() << "\n";
}

double last_total(const StageArtifacts& a) { return a.iterations.empty() ? 0.0 : a.iterations.back().total; }

struct PipelineOutcome {
  MetricsReport headline;
  std::map<std::string, std::string> summary;  // key -> value rows for summary.csv
};

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

PipelineOutcome run_full_pipeline(const RunConfig& cfg) {
  write_run_config(cfg);
  PipelineOutcome out;
  SyntheticDataset ds = obtain_dataset(cfg);
  out.summary["dataset.digest"] = hex64(ds.content_digest());

  StageArtifacts a1;
  SemanticProjector projector = train_stage1(ds, cfg, file_sink(cfg.output_dir + "/stage1_log.jsonl"), &a1);
  save_checkpoint(cfg.output_dir + "/stage1", projector.snapshot());
  out.summary["stage1.iterations"] = std::to_string(a1.iterations.size());
  out.summary["stage1.final_total"] = fmt(last_total(a1));
  std::cout << "[stage1] " << a1.iterations.size() << " iterations, final loss " << last_total(a1) << "\n";

  if (cfg.mode == Mode::kTransductive) {
    StageArtifacts a2;
    QueryGenerator generator = train_stage2(ds, projector, cfg, file_sink(cfg.output_dir + "/stage2_log.jsonl"), &a2);
    save_checkpoint(cfg.output_dir + "/stage2", generator.snapshot());
    out.summary["stage2.iterations"] = std::to_string(a2.iterations.size());
    out.summary["stage2.final_total"] = fmt(last_total(a2));
    std::cout << "[stage2] " << a2.iterations.size() << " iterations, final loss " << last_total(a2) << "\n";

    StageArtifacts a3;
    Stage3Result s3 = union_finetune(ds, generator, projector, cfg, file_sink(cfg.output_dir + "/stage3_log.jsonl"), &a3);
    save_checkpoint(cfg.output_dir + "/stage3", s3.best_projector.snapshot());
    save_checkpoint(cfg.output_dir + "/stage3_final", s3.final_projector.snapshot());
    out.summary["stage3.iterations"] = std::to_string(a3.iterations.size());
    out.summary["stage3.final_total"] = fmt(last_total(a3));
    out.summary["stage3.best_epoch"] = std::to_string(s3.best_epoch);
    std::cout << "[stage3] best epoch " << s3.best_epoch << " of " << s3.per_epoch.size() << "\n";
    if (!s3.per_epoch.empty()) {
      const MetricsReport& fin = s3.per_epoch.back();
      out.summary["stage3.final_hPQ"] = fmt(fin.hpq);
      print_metrics("stage3 final", fin);
    }
    out.headline = evaluate_split(ds.test, s3.best_projector, ds.table, cfg.mode, cfg.inference);
  } else {
    out.headline = evaluate_split(ds.test, projector, ds.table, cfg.mode, cfg.inference);
  }

  write_metrics(out.headline, cfg.output_dir + "/metrics.json");
  out.summary["metrics.sPQ"] = fmt(out.headline.spq);
  out.summary["metrics.uPQ"] = fmt(out.headline.upq);
  out.summary["metrics.hPQ"] = fmt(out.headline.hpq);
  out.summary["metrics.sIoU"] = fmt(out.headline.siou);
  out.summary["metrics.uIoU"] = fmt(out.headline.uiou);
  out.summary["metrics.hIoU"] = fmt(out.headline.hiou);
  print_metrics(cfg.mode == Mode::kTransductive ? "eval best" : "eval", out.headline);

  std::ofstream csv(cfg.output_dir + "/summary.csv", std::ios::trunc);
  if (!csv) throw CliError{1, "cannot write '" + cfg.output_dir + "/summary.csv'"};
  csv << "key,value\n";
  for (const auto& [k, v] : out.summary) csv << k << "," << v << "\n";
  std::cout << "metrics written to " << cfg.output_dir << "/metrics.json\n";
  return out;
}

int cmd_datagen(const CommonOpts& o) {
  RunConfig cfg = resolve_config(o);
  write_run_config(cfg);
  SyntheticDataset ds = generate_dataset(cfg.dataset);
  save_dataset(ds, cfg.output_dir + "/dataset");
  std::cout << "dataset written to " << cfg.output_dir << "/dataset.{json,bin,meta.json} (train "
            << ds.train.size() << ", test " << ds.test.size() << ", digest " << hex64(ds.content_digest()) << ")\n";
  return 0;
}

int cmd_stage1(const CommonOpts& o) {
  RunConfig cfg = resolve_config(o);
  write_run_config(cfg);
  SyntheticDataset ds = obtain_dataset(cfg);
  StageArtifacts a;
  SemanticProjector p = train_stage1(ds, cfg, file_sink(cfg.output_dir + "/stage1_log.jsonl"), &a);
  save_checkpoint(cfg.output_dir + "/stage1", p.snapshot());
  std::cout << "[stage1] " << a.iterations.size() << " iterations, final loss " << last_total(a)
            << "; checkpoint " << cfg.output_dir << "/stage1.{json,bin}\n";
  return 0;
}

int cmd_stage2(const CommonOpts& o) {
  RunConfig cfg = resolve_config(o);
  write_run_config(cfg);
  SyntheticDataset ds = obtain_dataset(cfg);
  SemanticProjector p = load_projector_checkpoint(cfg, cfg.output_dir + "/stage1", "stage1");
  StageArtifacts a;
  QueryGenerator g = train_stage2(ds, p, cfg, file_sink(cfg.output_dir + "/stage2_log.jsonl"), &a);
  save_checkpoint(cfg.output_dir + "/stage2", g.snapshot());
  std::cout << "[stage2] " << a.iterations.size() << " iterations, final loss " << last_total(a)
            << "; checkpoint " << cfg.output_dir << "/stage2.{json,bin}\n";
  return 0;
}

int cmd_stage3(const CommonOpts& o) {
  RunConfig cfg = resolve_config(o);
  write_run_config(cfg);
  SyntheticDataset ds = obtain_dataset(cfg);
  SemanticProjector p = load_projector_checkpoint(cfg, cfg.output_dir + "/stage1", "stage1");
  QueryGenerator g = load_generator_checkpoint(cfg, cfg.output_dir + "/stage2");
  StageArtifacts a;
  Stage3Result s3;
  try {
    s3 = union_finetune(ds, g, p, cfg, file_sink(cfg.output_dir + "/stage3_log.jsonl"), &a);
  } catch (const ContractError& e) {
    throw CliError{2, e.what()};
  }
  save_checkpoint(cfg.output_dir + "/stage3", s3.best_projector.snapshot());
  save_checkpoint(cfg.output_dir + "/stage3_final", s3.final_projector.snapshot());
  std::cout << "[stage3] best epoch " << s3.best_epoch << "; checkpoints " << cfg.output_dir
            << "/stage3.{json,bin} (best) and stage3_final.{json,bin}\n";
  if (s3.best_epoch >= 0) print_metrics("stage3 best", s3.per_epoch[static_cast<std::size_t>(s3.best_epoch)]);
  if (!s3.per_epoch.empty()) print_metrics("stage3 final", s3.per_epoch.back());
  return 0;
}

int cmd_eval(const CommonOpts& o, const std::string& checkpoint) {
  RunConfig cfg = resolve_config(o);
  write_run_config(cfg);
  SyntheticDataset ds = obtain_dataset(cfg);
  std::string pick = checkpoint;
  if (pick == "auto") pick = fs::exists(cfg.output_dir + "/stage3.json") ? "stage3" : "stage1";
  if (pick != "stage1" && pick != "stage3" && pick != "stage3_final") {
    throw CliError{2, "eval --checkpoint must be auto, stage1, stage3, or stage3_final"};
  }
  SemanticProjector p =
      load_projector_checkpoint(cfg, cfg.output_dir + "/" + pick, pick == "stage3_final" ? "stage3" : pick);
  MetricsReport r = evaluate_split(ds.test, p, ds.table, cfg.mode, cfg.inference);
  write_metrics(r, cfg.output_dir + "/metrics.json");
  print_metrics("eval " + pick + " " + mode_name(cfg.mode), r);
  std::cout << "metrics written to " << cfg.output_dir << "/metrics.json\n";
  return 0;
}

int cmd_pipeline(const CommonOpts& o) {
  RunConfig cfg = resolve_config(o);
  run_full_pipeline(cfg);
  return 0;
}

int cmd_export_embeddings(const CommonOpts& o, std::int64_t per_category, const std::string& split) {
  RunConfig cfg = resolve_config(o);
  write_run_config(cfg);
  if (split != "test" && split != "train") throw CliError{2, "--split must be test or train"};
  SyntheticDataset ds = obtain_dataset(cfg);
  const std::string proj_base =
      fs::exists(cfg.output_dir + "/stage3.json") ? cfg.output_dir + "/stage3" : cfg.output_dir + "/stage1";
  SemanticProjector p = load_projector_checkpoint(cfg, proj_base, "stage1");
  QueryGenerator g = load_generator_checkpoint(cfg, cfg.output_dir + "/stage2");

  const std::string path = cfg.output_dir + "/embeddings.csv";
  std::ofstream csv(path, std::ios::trunc);
  if (!csv) throw CliError{1, "cannot write '" + path + "'"};
  csv << std::setprecision(10);
  csv << "source,category";
  for (std::int64_t j = 0; j < ds.spec.c_semantic; ++j) csv << ",c" << j;
  csv << "\n";

  // Real rows: per ground-truth segment, the query owning it under a
  // mask-only assignment (masks are frozen, so this is label-faithful for
  // seen and unseen categories alike).
  const auto& images = split == "test" ? ds.test : ds.train;
  std::int64_t real_rows = 0;
  for (const auto& img : images) {
    const std::int64_t k = img.vision_queries.rows();
    const std::int64_t n_seg = static_cast<std::int64_t>(img.gt_segments.size());
    Tensor cost({k, n_seg});
    for (std::int64_t q = 0; q < k; ++q) {
      const Tensor mask_q = slice_first(img.pred_mask_logits, q);
      for (std::int64_t sgi = 0; sgi < n_seg; ++sgi) {
        cost.at2(q, sgi) = mask_loss(mask_q, img.gt_segments[static_cast<std::size_t>(sgi)].mask,
                                     cfg.losses.bce_weight, cfg.losses.dice_weight);
      }
    }
    const Assignment assign = hungarian(cost);
    const Tensor s = p.project_plain(img.vision_queries);
    for (std::int64_t sgi = 0; sgi < n_seg; ++sgi) {
      const std::int64_t q = assign.segment_to_query[static_cast<std::size_t>(sgi)];
      csv << "real," << img.gt_segments[static_cast<std::size_t>(sgi)].category_id;
      for (std::int64_t j = 0; j < s.cols(); ++j) csv << "," << s.at2(q, j);
      csv << "\n";
      real_rows += 1;
    }
  }

  // Generated rows: decode per-category samples in eval mode, then project.
  QueryGenerator frozen = clone_generator(g, false);
  Rng rng(derive_seed(cfg.seed, 509));
  std::int64_t gen_rows = 0;
  for (std::int64_t cat = 0; cat < ds.table.embeddings.rows(); ++cat) {
    Tensor eps({per_category, ds.spec.c_semantic});
    for (std::int64_t i = 0; i < eps.size(); ++i) eps.at(i) = rng.normal();
    Tensor cond({per_category, ds.spec.c_semantic});
    for (std::int64_t r = 0; r < per_category; ++r) {
      for (std::int64_t j = 0; j < ds.spec.c_semantic; ++j) cond.at2(r, j) = ds.table.embeddings.at2(cat, j);
    }
    const Tensor decoded = ad::evaluate(frozen.decode(ad::constant(eps), ad::constant(cond), false));
    const Tensor s = p.project_plain(decoded);
    for (std::int64_t r = 0; r < per_category; ++r) {
      csv << "generated," << cat;
      for (std::int64_t j = 0; j < s.cols(); ++j) csv << "," << s.at2(r, j);
      csv << "\n";
      gen_rows += 1;
    }
  }
  std::cout << "wrote " << real_rows << " real and " << gen_rows << " generated rows to " << path << "\n";
  return 0;
}

int cmd_ablate(const CommonOpts& o, std::vector<std::string> switches) {
  RunConfig base = resolve_config(o);
  if (base.mode != Mode::kTransductive) throw CliError{2, "ablate runs the transductive pipeline; set mode accordingly"};
  if (switches.empty()) switches = {"full", "qc=off", "sup=off"};
  const std::map<std::string, std::vector<std::string>> presets = {
      {"full", {}},
      {"qc=off", {"losses.lambda_r=0"}},
      {"sup=off", {"losses.lambda_f=0"}},
      {"cia=off", {"losses.lambda_c=0"}},
      {"g=off", {"losses.gamma=0"}},
      {"bank=off", {"losses.bank_size=0"}},
  };
  std::vector<std::pair<std::string, MetricsReport>> rows;
  for (const auto& name : switches) {
    auto it = presets.find(name);
    if (it == presets.end()) {
      std::string known;
      for (const auto& [k, v] : presets) known += (known.empty() ? "" : ", ") + k;
      throw CliError{2, "unknown ablation switch '" + name + "' (known: " + known + ")"};
    }
    RunConfig cfg = apply_overrides(base, it->second);
    std::string dir_name = name;
    for (auto& ch : dir_name) {
      if (ch == '=') ch = '_';
    }
    cfg.output_dir = base.output_dir + "/ablate/" + dir_name;
    std::cout << "=== ablation " << name << " -> " << cfg.output_dir << "\n";
    rows.emplace_back(name, run_full_pipeline(cfg).headline);
  }
  const std::string path = base.output_dir + "/ablate/comparison.csv";
  fs::create_directories(base.output_dir + "/ablate");
  std::ofstream csv(path, std::ios::trunc);
  if (!csv) throw CliError{1, "cannot write '" + path + "'"};
  csv << "switch,sPQ,uPQ,hPQ,sIoU,uIoU,hIoU\n";
  std::cout << "\nswitch      sPQ     uPQ     hPQ     sIoU    uIoU    hIoU\n";
  for (const auto& [name, r] : rows) {
    csv << name << "," << fmt(r.spq) << "," << fmt(r.upq) << "," << fmt(r.hpq) << "," << fmt(r.siou) << ","
        << fmt(r.uiou) << "," << fmt(r.hiou) << "\n";
    std::ostringstream os;
    os << std::left << std::setw(11) << name << std::fixed << std::setprecision(4) << " " << r.spq << "  " << r.upq
       << "  " << r.hpq << "  " << r.siou << "  " << r.uiou << "  " << r.hiou;
    std::cout << os.str() << "\n";
  }
  std::cout << "comparison written to " << path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"three-stage zero-shot panoptic segmentation lab on synthetic data"};
  app.require_subcommand(1);

  CommonOpts o_datagen, o_s1, o_s2, o_s3, o_eval, o_pipe, o_export, o_ablate;
  std::string eval_checkpoint = "auto";
  std::int64_t export_per_category = 50;
  std::string export_split = "test";
  std::vector<std::string> ablate_switches;

  add_common(app.add_subcommand("datagen", "generate and save the synthetic dataset"), o_datagen);
  add_common(app.add_subcommand("stage1", "train the semantic projector (alignment stage)"), o_s1);
  add_common(app.add_subcommand("stage2", "train the conditional VAE generator (projector frozen)"), o_s2);
  add_common(app.add_subcommand("stage3", "union-finetune the projector with pseudo-unseen queries"), o_s3);
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  add_common(eval_cmd, o_eval);
  eval_cmd->add_option("--checkpoint", eval_checkpoint, "auto | stage1 | stage3 | stage3_final");
  add_common(app.add_subcommand("pipeline", "run all stages plus evaluation"), o_pipe);
  auto* export_cmd = app.add_subcommand("export-embeddings", "dump projected real and generated queries as CSV");
  add_common(export_cmd, o_export);
  export_cmd->add_option("--per-category", export_per_category, "generated samples per category (default 50)");
  export_cmd->add_option("--split", export_split, "test | train (default test)");
  auto* ablate_cmd = app.add_subcommand("ablate", "run named switch sets and tabulate metrics");
  add_common(ablate_cmd, o_ablate);
  ablate_cmd->add_option("switches", ablate_switches,
                         "switch specs (full, qc=off, sup=off, cia=off, g=off, bank=off); default: full qc=off sup=off");

  CLI11_PARSE(app, argc, argv);

  try {
    if (app.got_subcommand("datagen")) return cmd_datagen(o_datagen);
    if (app.got_subcommand("stage1")) return cmd_stage1(o_s1);
    if (app.got_subcommand("stage2")) return cmd_stage2(o_s2);
    if (app.got_subcommand("stage3")) return cmd_stage3(o_s3);
    if (app.got_subcommand("eval")) return cmd_eval(o_eval, eval_checkpoint);
    if (app.got_subcommand("pipeline")) return cmd_pipeline(o_pipe);
    if (app.got_subcommand("export-embeddings"))
      return cmd_export_embeddings(o_export, export_per_category, export_split);
    if (app.got_subcommand("ablate")) return cmd_ablate(o_ablate, ablate_switches);
  } catch (const CliError& e) {
    std::cerr << "error: " << e.message << "\n";
    return e.code;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
