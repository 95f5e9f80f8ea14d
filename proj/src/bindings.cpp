#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "concatlab/checkpoint.hpp"
#include "concatlab/config.hpp"
#include "concatlab/dataset.hpp"
#include "concatlab/losses.hpp"
#include "concatlab/matching.hpp"
#include "concatlab/metrics.hpp"
#include "concatlab/pipeline.hpp"

namespace py = pybind11;
using namespace concatlab;

namespace {

Tensor tensor2d(const std::vector<std::vector<double>>& rows, const char* what) {
  if (rows.empty()) throw ContractError(std::string(what) + ": needs at least one row");
  const std::int64_t c = static_cast<std::int64_t>(rows[0].size());
  Tensor t({static_cast<std::int64_t>(rows.size()), c});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (static_cast<std::int64_t>(rows[i].size()) != c) {
      throw ContractError(std::string(what) + ": ragged rows");
    }
    for (std::int64_t j = 0; j < c; ++j) t.at2(static_cast<std::int64_t>(i), j) = rows[i][static_cast<std::size_t>(j)];
  }
  return t;
}

}  // namespace

PYBIND11_MODULE(_concatlab, m) {
  m.doc() = "zero-shot panoptic segmentation lab: core operations";

  py::register_exception<Error>(m, "CoreError");

  m.def("harmonic", &harmonic, py::arg("seen"), py::arg("unseen"),
        "2ab/(a+b), 0 when either side is 0");

  m.def(
      "focal_loss",
      [](const std::vector<std::vector<double>>& prob, const std::vector<std::vector<double>>& target, double alpha,
         double gamma) { return focal_loss(tensor2d(prob, "prob"), tensor2d(target, "target"), alpha, gamma); },
      py::arg("prob"), py::arg("target"), py::arg("alpha") = 0.25, py::arg("gamma") = 2.0);

  m.def(
      "mask_loss",
      [](const std::vector<std::vector<double>>& logits, const std::vector<std::vector<double>>& gt, double bce,
         double dice) { return mask_loss(tensor2d(logits, "logits"), tensor2d(gt, "gt"), bce, dice); },
      py::arg("mask_logits"), py::arg("gt_mask"), py::arg("bce_weight") = 1.0, py::arg("dice_weight") = 1.0);

  m.def(
      "hungarian",
      [](const std::vector<std::vector<double>>& cost) {
        const Assignment a = hungarian(tensor2d(cost, "cost"));
        return py::make_tuple(a.query_to_segment, a.segment_to_query, a.total_cost);
      },
      py::arg("cost"), "exact min-cost assignment; returns (query_to_segment, segment_to_query, total_cost)");

  m.def(
      "mmd",
      [](const std::vector<std::vector<double>>& real, const std::vector<std::vector<double>>& generated,
         const std::vector<double>& bandwidths) {
        return ad::evaluate(mmd_loss(tensor2d(real, "real"), ad::constant(tensor2d(generated, "generated")), bandwidths))
            .item();
      },
      py::arg("real"), py::arg("generated"), py::arg("bandwidths") = std::vector<double>{2, 5, 10, 20, 40, 60});

  m.def(
      "kl",
      [](const std::vector<std::vector<double>>& mu, const std::vector<std::vector<double>>& logvar) {
        return ad::evaluate(kl_loss(ad::constant(tensor2d(mu, "mu")), ad::constant(tensor2d(logvar, "logvar")))).item();
      },
      py::arg("mu"), py::arg("logvar"));

  m.def("default_config", [] { return RunConfig().to_json_string(2); },
        "JSON text of the default run configuration");

  m.def(
      "generate_dataset",
      [](const std::string& config_json) {
        const RunConfig cfg = RunConfig::from_json_string(config_json);
        const SyntheticDataset ds = generate_dataset(cfg.dataset);
        py::dict out;
        out["digest"] = hex64(ds.content_digest());
        out["n_train"] = ds.train.size();
        out["n_test"] = ds.test.size();
        out["n_categories"] = ds.spec.n_categories();
        return out;
      },
      py::arg("config_json"), "generate the synthetic dataset for a config; returns a summary dict");

  m.def(
      "run_pipeline",
      [](const std::string& config_json) {
        const RunConfig cfg = RunConfig::from_json_string(config_json);
        cfg.validate();
        const SyntheticDataset ds = generate_dataset(cfg.dataset);
        const SemanticProjector p1 = train_stage1(ds, cfg);
        MetricsReport report;
        if (cfg.mode == Mode::kTransductive) {
          const QueryGenerator gen = train_stage2(ds, p1, cfg);
          const Stage3Result s3 = union_finetune(ds, gen, p1, cfg);
          report = evaluate_split(ds.test, s3.best_projector, ds.table, cfg.mode, cfg.inference);
        } else {
          report = evaluate_split(ds.test, p1, ds.table, cfg.mode, cfg.inference);
        }
        return report.to_json(2);
      },
      py::arg("config_json"),
      "run the staged pipeline in memory (no artifacts) and return the metrics report as JSON text");
}
