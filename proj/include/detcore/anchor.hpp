// Anchor generation, border filtering, max-IoU assignment and sampling.
#pragma once

#include "detcore/geom.hpp"

#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <vector>

namespace detcore {

/// Passing this as allowed_border keeps every anchor.
inline constexpr double kUnboundedBorder = std::numeric_limits<double>::infinity();

struct AnchorGenSpec {
  double base_size = 8;
  std::vector<double> scales{4};
  std::vector<double> ratios{1};  // height / width
  double stride = 8;

  std::size_t anchors_per_cell() const { return scales.size() * ratios.size(); }
  void validate() const;
};

/// Anchors centred at (base_size / 2, base_size / 2), ratio-major then
/// scale: index = ratio_index * |scales| + scale_index.
std::vector<Box> base_anchors(const AnchorGenSpec& spec);

/// Tiles `base` over a feat_w x feat_h grid. Cells are visited row-major
/// (y outer, x inner) and all base anchors of a cell are contiguous, so
/// anchor (x, y, a) lives at ((y * feat_w) + x) * |base| + a.
std::vector<Box> grid_anchors(const std::vector<Box>& base, int feat_w,
                              int feat_h, double stride);

using Mask = Eigen::Array<bool, Eigen::Dynamic, 1>;

/// True where the anchor lies within the image grown by allowed_border on
/// every side. kUnboundedBorder marks every anchor valid.
Mask valid_flags(const std::vector<Box>& anchors, double img_w, double img_h,
                 double allowed_border);

enum class AssignLabel : std::int8_t { kIgnore, kNegative, kPositive };

struct AssignResult {
  std::vector<AssignLabel> labels;
  std::vector<int> gt_index;  // -1 unless positive
  Eigen::VectorXd max_iou;

  std::size_t size() const { return labels.size(); }
  std::size_t num_positive() const;
};

struct AssignerSpec {
  double pos_iou_thr = 0.7;
  double neg_iou_thr = 0.3;
  double min_pos_iou = 0.3;
};

/// Max-IoU assignment with the low-quality rule: after thresholding, each
/// gt's best anchor (lowest index on ties) becomes positive for that gt when
/// their overlap is at least min_pos_iou. Gts are visited in index order, so
/// a later gt claims an anchor both share. Anchors with valid[i] == false
/// are ignored and take no part in matching.
AssignResult max_iou_assign(const std::vector<Box>& anchors,
                            const std::vector<Box>& gts,
                            const AssignerSpec& spec,
                            const Mask* valid = nullptr);

struct SamplerSpec {
  std::size_t num = 256;
  double pos_fraction = 0.5;
  std::optional<std::size_t> neg_pos_ub;  // nullopt: unbounded

  void validate() const;
};

struct SamplingResult {
  std::vector<std::size_t> pos_indices;
  std::vector<std::size_t> neg_indices;
};

/// Uniform sampling without replacement: up to num * pos_fraction positives,
/// then negatives filling to num, capped at neg_pos_ub * max(1, |pos|).
SamplingResult random_sample(const AssignResult& assign, const SamplerSpec& spec,
                             std::mt19937_64& rng);

}  // namespace detcore
