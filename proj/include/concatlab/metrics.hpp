#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "concatlab/dataset.hpp"
#include "concatlab/tensor.hpp"

namespace concatlab {

struct PredSegment {
  std::int64_t category_id = -1;
  Tensor mask;  // H x W binary
};

struct PanopticPrediction {
  std::int64_t grid_h = 0;
  std::int64_t grid_w = 0;
  std::vector<PredSegment> segments;  // pairwise disjoint masks
};

// Split-level tallies for one category. Panoptic matching pairs a predicted
// and a ground-truth segment of the same category iff IoU > 0.5 (such a match
// is unique, and asserted to be). Pixel tallies feed mean IoU.
struct CategoryMetrics {
  std::int64_t tp = 0;
  std::int64_t fp = 0;
  std::int64_t fn = 0;
  double iou_sum = 0.0;  // summed IoU of matched pairs
  std::int64_t pixel_intersection = 0;
  std::int64_t pixel_union = 0;
  bool in_gt = false;
  bool in_pred = false;

  double pq() const;
  double iou() const;
};

// Per-image accumulation with associative merging, so evaluation can fan out
// across worker threads and combine partial tallies in a fixed order.
class MetricsAccumulator {
 public:
  void add_image(const PanopticPrediction& pred, const std::vector<GtSegment>& gt);
  void merge(const MetricsAccumulator& other);
  const std::map<std::int64_t, CategoryMetrics>& per_category() const { return stats_; }

 private:
  std::map<std::int64_t, CategoryMetrics> stats_;
  std::int64_t grid_h_ = -1;
  std::int64_t grid_w_ = -1;
};

// 2ab/(a+b), defined as 0 when either input is 0. Scale-free (works on both
// fractional and percent inputs); negative inputs are a contract violation.
double harmonic(double seen, double unseen);

struct MetricsReport {
  double spq = 0.0, upq = 0.0, hpq = 0.0;
  double siou = 0.0, uiou = 0.0, hiou = 0.0;
  std::map<std::int64_t, CategoryMetrics> per_category;

  // Fixed key names: sPQ, uPQ, hPQ, sIoU, uIoU, hIoU, per_category.
  std::string to_json(int indent = 2) const;
};

// PQ averages skip categories absent from both gt and predictions; IoU
// averages run over categories present in gt. Empty partitions average to 0.
MetricsReport build_report(const MetricsAccumulator& acc, const std::vector<std::int64_t>& seen_ids,
                           const std::vector<std::int64_t>& unseen_ids);

}  // namespace concatlab
