#include "concatlab/metrics.hpp"

#include <algorithm>
#include <sstream>

#include "json.hpp"

namespace concatlab {

namespace {

std::int64_t popcount_mask(const Tensor& m) {
  std::int64_t n = 0;
  for (std::int64_t i = 0; i < m.size(); ++i) n += m.at(i) > 0.5 ? 1 : 0;
  return n;
}

double segment_iou(const Tensor& a, const Tensor& b) {
  std::int64_t inter = 0, uni = 0;
  for (std::int64_t i = 0; i < a.size(); ++i) {
    const bool x = a.at(i) > 0.5, y = b.at(i) > 0.5;
    inter += (x && y) ? 1 : 0;
    uni += (x || y) ? 1 : 0;
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace

double CategoryMetrics::pq() const {
  const double denom = static_cast<double>(tp) + 0.5 * static_cast<double>(fp) + 0.5 * static_cast<double>(fn);
  return denom == 0.0 ? 0.0 : iou_sum / denom;
}

double CategoryMetrics::iou() const {
  return pixel_union == 0 ? 0.0 : static_cast<double>(pixel_intersection) / static_cast<double>(pixel_union);
}

void MetricsAccumulator::add_image(const PanopticPrediction& pred, const std::vector<GtSegment>& gt) {
  if (grid_h_ < 0) {
    grid_h_ = pred.grid_h;
    grid_w_ = pred.grid_w;
  } else if (grid_h_ != pred.grid_h || grid_w_ != pred.grid_w) {
    throw ShapeError("metrics: prediction grid " + std::to_string(pred.grid_h) + "x" + std::to_string(pred.grid_w) +
                     " differs from earlier images (" + std::to_string(grid_h_) + "x" + std::to_string(grid_w_) + ")");
  }
  const std::int64_t cells = grid_h_ * grid_w_;
  for (const auto& s : pred.segments) {
    if (s.mask.size() != cells) {
      throw ShapeError("metrics: predicted mask shape " + shape_str(s.mask.shape()) + " does not cover a " +
                       std::to_string(grid_h_) + "x" + std::to_string(grid_w_) + " grid");
    }
  }
  for (const auto& s : gt) {
    if (s.mask.size() != cells) {
      throw ShapeError("metrics: gt mask shape " + shape_str(s.mask.shape()) + " does not cover a " +
                       std::to_string(grid_h_) + "x" + std::to_string(grid_w_) + " grid");
    }
  }

  // Category universe touched by this image.
  std::vector<std::int64_t> cats;
  for (const auto& s : gt) cats.push_back(s.category_id);
  for (const auto& s : pred.segments) cats.push_back(s.category_id);
  std::sort(cats.begin(), cats.end());
  cats.erase(std::unique(cats.begin(), cats.end()), cats.end());

  for (const std::int64_t c : cats) {
    CategoryMetrics& m = stats_[c];
    std::vector<const GtSegment*> gt_c;
    std::vector<const PredSegment*> pred_c;
    for (const auto& s : gt) {
      if (s.category_id == c) gt_c.push_back(&s);
    }
    for (const auto& s : pred.segments) {
      if (s.category_id == c) pred_c.push_back(&s);
    }
    if (!gt_c.empty()) m.in_gt = true;
    if (!pred_c.empty()) m.in_pred = true;

    std::vector<int> gt_matched(gt_c.size(), 0), pred_matched(pred_c.size(), 0);
    for (std::size_t gi = 0; gi < gt_c.size(); ++gi) {
      for (std::size_t pi = 0; pi < pred_c.size(); ++pi) {
        const double iou = segment_iou(gt_c[gi]->mask, pred_c[pi]->mask);
        if (iou > 0.5) {
          if (gt_matched[gi] || pred_matched[pi]) {
            throw ContractError("metrics: non-unique IoU>0.5 match for category " + std::to_string(c));
          }
          gt_matched[gi] = 1;
          pred_matched[pi] = 1;
          m.tp += 1;
          m.iou_sum += iou;
        }
      }
    }
    for (int v : gt_matched) m.fn += v ? 0 : 1;
    for (int v : pred_matched) m.fp += v ? 0 : 1;
  }

  // Pixel tallies for mean IoU: per-category intersection/union over the
  // collapsed category maps (void where nothing claims the pixel).
  std::vector<std::int64_t> gt_map(static_cast<std::size_t>(cells), -1);
  std::vector<std::int64_t> pred_map(static_cast<std::size_t>(cells), -1);
  for (const auto& s : gt) {
    for (std::int64_t i = 0; i < cells; ++i) {
      if (s.mask.at(i) > 0.5) gt_map[static_cast<std::size_t>(i)] = s.category_id;
    }
  }
  for (const auto& s : pred.segments) {
    for (std::int64_t i = 0; i < cells; ++i) {
      if (s.mask.at(i) > 0.5) pred_map[static_cast<std::size_t>(i)] = s.category_id;
    }
  }
  for (const std::int64_t c : cats) {
    CategoryMetrics& m = stats_[c];
    for (std::int64_t i = 0; i < cells; ++i) {
      const bool x = gt_map[static_cast<std::size_t>(i)] == c;
      const bool y = pred_map[static_cast<std::size_t>(i)] == c;
      m.pixel_intersection += (x && y) ? 1 : 0;
      m.pixel_union += (x || y) ? 1 : 0;
    }
  }
}

void MetricsAccumulator::merge(const MetricsAccumulator& other) {
  if (other.grid_h_ < 0) return;  // nothing accumulated
  if (grid_h_ < 0) {
    grid_h_ = other.grid_h_;
    grid_w_ = other.grid_w_;
  } else if (grid_h_ != other.grid_h_ || grid_w_ != other.grid_w_) {
    throw ShapeError("metrics: merging accumulators over different grids");
  }
  for (const auto& [c, m] : other.stats_) {
    CategoryMetrics& mine = stats_[c];
    mine.tp += m.tp;
    mine.fp += m.fp;
    mine.fn += m.fn;
    mine.iou_sum += m.iou_sum;
    mine.pixel_intersection += m.pixel_intersection;
    mine.pixel_union += m.pixel_union;
    mine.in_gt = mine.in_gt || m.in_gt;
    mine.in_pred = mine.in_pred || m.in_pred;
  }
}

double harmonic(double seen, double unseen) {
  if (seen < 0.0 || unseen < 0.0) throw ContractError("harmonic: inputs must be non-negative");
  if (seen == 0.0 || unseen == 0.0) return 0.0;
  return 2.0 * seen * unseen / (seen + unseen);
}

MetricsReport build_report(const MetricsAccumulator& acc, const std::vector<std::int64_t>& seen_ids,
                           const std::vector<std::int64_t>& unseen_ids) {
  MetricsReport r;
  r.per_category = acc.per_category();
  auto pq_mean = [&](const std::vector<std::int64_t>& ids) {
    double sum = 0.0;
    std::int64_t n = 0;
    for (auto id : ids) {
      auto it = r.per_category.find(id);
      if (it == r.per_category.end()) continue;
      if (!it->second.in_gt && !it->second.in_pred) continue;
      sum += it->second.pq();
      n += 1;
    }
    return n == 0 ? 0.0 : sum / static_cast<double>(n);
  };
  auto iou_mean = [&](const std::vector<std::int64_t>& ids) {
    double sum = 0.0;
    std::int64_t n = 0;
    for (auto id : ids) {
      auto it = r.per_category.find(id);
      if (it == r.per_category.end() || !it->second.in_gt) continue;
      sum += it->second.iou();
      n += 1;
    }
    return n == 0 ? 0.0 : sum / static_cast<double>(n);
  };
  r.spq = pq_mean(seen_ids);
  r.upq = pq_mean(unseen_ids);
  r.hpq = harmonic(r.spq, r.upq);
  r.siou = iou_mean(seen_ids);
  r.uiou = iou_mean(unseen_ids);
  r.hiou = harmonic(r.siou, r.uiou);
  return r;
}

std::string MetricsReport::to_json(int indent) const {
  nlohmann::ordered_json j;
  j["sPQ"] = spq;
  j["uPQ"] = upq;
  j["hPQ"] = hpq;
  j["sIoU"] = siou;
  j["uIoU"] = uiou;
  j["hIoU"] = hiou;
  nlohmann::ordered_json cats = nlohmann::ordered_json::object();
  for (const auto& [c, m] : per_category) {
    nlohmann::ordered_json e;
    e["pq"] = m.pq();
    e["iou"] = m.iou();
    e["tp"] = m.tp;
    e["fp"] = m.fp;
    e["fn"] = m.fn;
    cats[std::to_string(c)] = e;
  }
  j["per_category"] = cats;
  return j.dump(indent);
}

}  // namespace concatlab
