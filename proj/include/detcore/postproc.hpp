// Detection post-processing: hard NMS, Soft-NMS and score / top-k filtering.
// Suppression is class-wise; detections of different classes never interact.
#pragma once

#include "detcore/geom.hpp"

#include <cstddef>
#include <vector>

namespace detcore {

struct Detection {
  Box box;
  double score{0};
  int class_id{0};

  friend bool operator==(const Detection&, const Detection&) = default;
};

/// Indices ordered by descending score, ties broken by lower index.
std::vector<std::size_t> score_order(const std::vector<Detection>& dets);

/// Greedy NMS. Returns indices of kept detections, sorted by descending score
/// (lower input index first on ties). A detection is dropped when its IoU
/// with a kept, higher-ranked detection of the same class exceeds iou_thr.
std::vector<std::size_t> nms(const std::vector<Detection>& dets, double iou_thr = 0.5);

enum class SoftNmsMethod { kLinear, kGaussian };

struct SoftNmsParams {
  SoftNmsMethod method = SoftNmsMethod::kLinear;
  double iou_thr = 0.5;
  double sigma = 0.5;
  double score_thr = 1e-3;
};

struct SoftNmsResult {
  std::vector<Detection> dets;     // in selection order, rescored
  std::vector<std::size_t> indices;  // source index of each entry in dets
};

SoftNmsResult soft_nms(const std::vector<Detection>& dets, const SoftNmsParams& params = {});

/// Drops detections scoring below score_thr and keeps the k best.
std::vector<Detection> topk_filter(const std::vector<Detection>& dets,
                                   double score_thr, std::size_t k);

}  // namespace detcore
