#include "detcore/anchor.hpp"

#include <algorithm>
#include <cmath>
#include <iterator>
#include <stdexcept>

namespace detcore {

void AnchorGenSpec::validate() const {
  if (!(base_size > 0) || !(stride > 0))
    throw std::invalid_argument("anchor base_size and stride must be > 0");
  if (scales.empty() || ratios.empty())
    throw std::invalid_argument("anchor scales and ratios must be non-empty");
  for (double s : scales)
    if (!(s > 0)) throw std::invalid_argument("anchor scales must be > 0");
  for (double r : ratios)
    if (!(r > 0)) throw std::invalid_argument("anchor ratios must be > 0");
}

std::vector<Box> base_anchors(const AnchorGenSpec& spec) {
  spec.validate();
  const double c = 0.5 * spec.base_size;
  std::vector<Box> out;
  out.reserve(spec.anchors_per_cell());
  for (double ratio : spec.ratios) {
    const double root = std::sqrt(ratio);
    for (double scale : spec.scales) {
      const double w = spec.base_size * scale / root;
      const double h = spec.base_size * scale * root;
      out.push_back({c - 0.5 * w, c - 0.5 * h, c + 0.5 * w, c + 0.5 * h});
    }
  }
  return out;
}

std::vector<Box> grid_anchors(const std::vector<Box>& base, int feat_w,
                              int feat_h, double stride) {
  if (feat_w < 1 || feat_h < 1)
    throw std::invalid_argument("grid_anchors: feature dims must be >= 1");
  std::vector<Box> out;
  out.reserve(base.size() * static_cast<std::size_t>(feat_w) * feat_h);
  for (int y = 0; y < feat_h; ++y) {
    const double sy = y * stride;
    for (int x = 0; x < feat_w; ++x) {
      const double sx = x * stride;
      for (const Box& b : base)
        out.push_back({b.x1 + sx, b.y1 + sy, b.x2 + sx, b.y2 + sy});
    }
  }
  return out;
}

Mask valid_flags(const std::vector<Box>& anchors, double img_w, double img_h,
                 double allowed_border) {
  if (!(img_w > 0) || !(img_h > 0))
    throw std::invalid_argument("valid_flags: image dims must be > 0");
  if (!(allowed_border >= 0))
    throw std::invalid_argument("valid_flags: allowed_border must be >= 0");
  Mask flags(static_cast<Eigen::Index>(anchors.size()));
  if (std::isinf(allowed_border)) {
    flags.setConstant(true);
    return flags;
  }
  const double ab = allowed_border;
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    const Box& a = anchors[i];
    flags(static_cast<Eigen::Index>(i)) =
        a.x1 >= -ab && a.y1 >= -ab && a.x2 <= img_w + ab && a.y2 <= img_h + ab;
  }
  return flags;
}

std::size_t AssignResult::num_positive() const {
  return static_cast<std::size_t>(
      std::count(labels.begin(), labels.end(), AssignLabel::kPositive));
}

AssignResult max_iou_assign(const std::vector<Box>& anchors,
                            const std::vector<Box>& gts,
                            const AssignerSpec& spec, const Mask* valid) {
  if (spec.pos_iou_thr < spec.neg_iou_thr)
    throw std::invalid_argument("max_iou_assign: pos_iou_thr < neg_iou_thr");
  const auto n = static_cast<Eigen::Index>(anchors.size());
  if (valid && valid->size() != n)
    throw std::invalid_argument("max_iou_assign: mask size mismatch");

  AssignResult r;
  r.labels.assign(anchors.size(), AssignLabel::kNegative);
  r.gt_index.assign(anchors.size(), -1);
  r.max_iou = Eigen::VectorXd::Zero(n);
  if (anchors.empty()) return r;

  auto is_valid = [&](Eigen::Index i) { return !valid || (*valid)(i); };
  if (gts.empty()) {
    for (Eigen::Index i = 0; i < n; ++i)
      if (!is_valid(i)) r.labels[i] = AssignLabel::kIgnore;
    return r;
  }

  Eigen::MatrixXd overlaps = iou_matrix(anchors, gts);
  for (Eigen::Index i = 0; i < n; ++i)
    if (!is_valid(i)) overlaps.row(i).setConstant(-1.0);

  for (Eigen::Index i = 0; i < n; ++i) {
    if (!is_valid(i)) {
      r.labels[i] = AssignLabel::kIgnore;
      continue;
    }
    Eigen::Index best = 0;
    // maxCoeff returns the first maximum, i.e. the lowest gt index.
    const double m = overlaps.row(i).maxCoeff(&best);
    r.max_iou(i) = m;
    if (m >= spec.pos_iou_thr) {
      r.labels[i] = AssignLabel::kPositive;
      r.gt_index[i] = static_cast<int>(best);
    } else if (m >= spec.neg_iou_thr) {
      r.labels[i] = AssignLabel::kIgnore;
    }
  }

  for (Eigen::Index j = 0; j < overlaps.cols(); ++j) {
    Eigen::Index best = 0;
    const double m = overlaps.col(j).maxCoeff(&best);
    if (m >= spec.min_pos_iou && m > 0) {
      r.labels[best] = AssignLabel::kPositive;
      r.gt_index[best] = static_cast<int>(j);
    }
  }
  return r;
}

void SamplerSpec::validate() const {
  if (num < 1) throw std::invalid_argument("sampler num must be >= 1");
  if (!(pos_fraction > 0 && pos_fraction <= 1))
    throw std::invalid_argument("sampler pos_fraction must be in (0, 1]");
  if (neg_pos_ub && *neg_pos_ub < 1)
    throw std::invalid_argument("sampler neg_pos_ub must be >= 1");
}

namespace {

std::vector<std::size_t> pick(const std::vector<std::size_t>& pool,
                              std::size_t k, std::mt19937_64& rng) {
  if (pool.size() <= k) return pool;
  std::vector<std::size_t> out;
  out.reserve(k);
  std::sample(pool.begin(), pool.end(), std::back_inserter(out), k, rng);
  return out;
}

}  // namespace

SamplingResult random_sample(const AssignResult& assign, const SamplerSpec& spec,
                             std::mt19937_64& rng) {
  spec.validate();
  std::vector<std::size_t> pos_pool, neg_pool;
  for (std::size_t i = 0; i < assign.size(); ++i) {
    if (assign.labels[i] == AssignLabel::kPositive) pos_pool.push_back(i);
    else if (assign.labels[i] == AssignLabel::kNegative) neg_pool.push_back(i);
  }
  SamplingResult r;
  const auto pos_quota =
      static_cast<std::size_t>(static_cast<double>(spec.num) * spec.pos_fraction);
  r.pos_indices = pick(pos_pool, pos_quota, rng);

  std::size_t neg_quota = spec.num - r.pos_indices.size();
  if (spec.neg_pos_ub) {
    const std::size_t cap =
        *spec.neg_pos_ub * std::max<std::size_t>(1, r.pos_indices.size());
    neg_quota = std::min(neg_quota, cap);
  }
  r.neg_indices = pick(neg_pool, neg_quota, rng);
  return r;
}

}  // namespace detcore
