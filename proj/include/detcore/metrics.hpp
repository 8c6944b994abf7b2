// COCO-style detection metrics: AP over IoU thresholds (101-point
// interpolation), mAP and average recall of top-k proposals.
#pragma once

#include "detcore/geom.hpp"
#include "detcore/postproc.hpp"

#include <map>
#include <optional>
#include <vector>

namespace detcore {

struct GroundTruth {
  int image_id{0};
  Box box;
  int class_id{0};
};

struct ImageDetection {
  int image_id{0};
  Detection det;
};

struct EvalResult {
  std::map<double, double> ap_per_threshold;
  double map{0};
  std::optional<double> ar_at_k;
};

/// 0.50, 0.55, ..., 0.95, each the closest double to its decimal value.
std::vector<double> coco_iou_thresholds();

/// Greedy matching for one image and one class. Detections are visited by
/// descending score (input order on ties); each takes the unmatched gt with
/// the highest IoU >= iou_thr (lowest gt index on ties). Returns a TP flag
/// per detection, in input order.
std::vector<bool> match_detections(const std::vector<Detection>& dets,
                                   const std::vector<Box>& gts, double iou_thr);

/// 101-point interpolated AP: mean over r in {0, 0.01, ..., 1} of the best
/// precision at recall >= r (0 where unreachable). Recalls must be
/// non-decreasing.
double average_precision(const std::vector<double>& recalls,
                         const std::vector<double>& precisions);

/// AP per threshold averaged over classes present in `gts`, then mAP over
/// thresholds. Classes without ground truth are skipped.
EvalResult eval_map(const std::vector<ImageDetection>& dets,
                    const std::vector<GroundTruth>& gts,
                    const std::vector<double>& thresholds = coco_iou_thresholds());

struct RecallResult {
  double value{0};
  bool degenerate{false};  // no ground truth at all
};

/// Class-agnostic recall of each image's top-k proposals, averaged over
/// thresholds.
RecallResult eval_ar(const std::vector<ImageDetection>& proposals,
                     const std::vector<GroundTruth>& gts, std::size_t k,
                     const std::vector<double>& thresholds = coco_iou_thresholds());

}  // namespace detcore
