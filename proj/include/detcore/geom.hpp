// Axis-aligned box geometry in continuous image coordinates.
//
// Boxes use the corner convention (x1, y1, x2, y2) with width = x2 - x1 and
// height = y2 - y1; there is no "+1" pixel correction. On integer boxes this
// makes the area equal to the number of covered unit pixels.
#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <span>
#include <type_traits>
#include <stdexcept>
#include <utility>
#include <vector>

namespace detcore {

template <typename Scalar>
struct BoxT {
  Scalar x1{0}, y1{0}, x2{0}, y2{0};

  Scalar width() const { return x2 - x1; }
  Scalar height() const { return y2 - y1; }
  Scalar cx() const { return (x1 + x2) * Scalar(0.5); }
  Scalar cy() const { return (y1 + y2) * Scalar(0.5); }

  bool valid() const {
    return std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) &&
           std::isfinite(y2) && x2 >= x1 && y2 >= y1;
  }

  template <typename Other>
  BoxT<Other> cast() const {
    return {Other(x1), Other(y1), Other(x2), Other(y2)};
  }

  friend bool operator==(const BoxT&, const BoxT&) = default;
};

using Box = BoxT<double>;
using Boxf = BoxT<float>;

template <typename Scalar>
using Vec4 = Eigen::Matrix<Scalar, 4, 1>;

/// Regression target of a box relative to an anchor: (dx, dy, dw, dh).
template <typename Scalar>
using DeltaT = Vec4<Scalar>;
using Delta = DeltaT<double>;

/// Per-coordinate normalization applied after encoding and undone before
/// decoding: normalized = (raw - mean) / std.
template <typename Scalar>
struct DeltaNormT {
  Vec4<Scalar> means = Vec4<Scalar>::Zero();
  Vec4<Scalar> stds = Vec4<Scalar>::Ones();
};
using DeltaNorm = DeltaNormT<double>;

/// ln(1000 / 16): decoded boxes may grow or shrink at most this much in log space.
inline constexpr double kMaxLogRatio = 4.135166556742356;

template <typename Scalar>
Scalar area(const BoxT<Scalar>& b) {
  return b.width() * b.height();
}

template <typename Scalar>
Scalar intersection_area(const BoxT<Scalar>& a, const BoxT<Scalar>& b) {
  const Scalar iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const Scalar ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= Scalar(0) || ih <= Scalar(0)) return Scalar(0);
  return iw * ih;
}

/// Smallest box containing both operands.
template <typename Scalar>
BoxT<Scalar> enclosing(const BoxT<Scalar>& a, const BoxT<Scalar>& b) {
  return {std::min(a.x1, b.x1), std::min(a.y1, b.y1), std::max(a.x2, b.x2),
          std::max(a.y2, b.y2)};
}

/// Intersection over union. Zero when the union is empty.
template <typename Scalar>
Scalar iou(const BoxT<Scalar>& a, const BoxT<Scalar>& b) {
  const Scalar inter = intersection_area(a, b);
  const Scalar uni = area(a) + area(b) - inter;
  if (uni <= Scalar(0)) return Scalar(0);
  return inter / uni;
}

/// Generalized IoU: iou - |C \ (A u B)| / |C| with C the enclosing box.
/// Two zero-area boxes sharing a single point have an empty C and yield 0.
template <typename Scalar>
Scalar giou(const BoxT<Scalar>& a, const BoxT<Scalar>& b) {
  const Scalar inter = intersection_area(a, b);
  const Scalar uni = area(a) + area(b) - inter;
  const Scalar hull = area(enclosing(a, b));
  const Scalar overlap = uni > Scalar(0) ? inter / uni : Scalar(0);
  if (hull <= Scalar(0)) return overlap;
  return overlap - (hull - uni) / hull;
}

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

/// Pairwise IoU: entry (i, j) = iou(a[i], b[j]).
template <typename Scalar>
MatrixX<Scalar> iou_matrix(std::span<const BoxT<Scalar>> a,
                           std::span<const BoxT<Scalar>> b) {
  const auto rows = static_cast<Eigen::Index>(a.size());
  const auto cols = static_cast<Eigen::Index>(b.size());
  MatrixX<Scalar> out(rows, cols);
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> area_b(cols);
  for (Eigen::Index j = 0; j < cols; ++j) area_b(j) = area(b[j]);
  // Column-major storage: fill one column per b box.
  for (Eigen::Index j = 0; j < cols; ++j) {
    const auto& bj = b[j];
    Scalar* col = out.col(j).data();
    for (Eigen::Index i = 0; i < rows; ++i) {
      const auto& ai = a[i];
      const Scalar iw = std::min(ai.x2, bj.x2) - std::max(ai.x1, bj.x1);
      const Scalar ih = std::min(ai.y2, bj.y2) - std::max(ai.y1, bj.y1);
      const Scalar inter =
          (iw > Scalar(0) && ih > Scalar(0)) ? iw * ih : Scalar(0);
      const Scalar uni = area(ai) + area_b(j) - inter;
      col[i] = uni > Scalar(0) ? inter / uni : Scalar(0);
    }
  }
  return out;
}

template <typename Scalar>
MatrixX<Scalar> iou_matrix(const std::vector<BoxT<Scalar>>& a,
                           const std::vector<BoxT<Scalar>>& b) {
  return iou_matrix(std::span<const BoxT<Scalar>>(a),
                    std::span<const BoxT<Scalar>>(b));
}

template <typename Scalar>
BoxT<Scalar> clip(const BoxT<Scalar>& b, Scalar img_w, Scalar img_h) {
  auto cx = [&](Scalar v) { return std::clamp(v, Scalar(0), img_w); };
  auto cy = [&](Scalar v) { return std::clamp(v, Scalar(0), img_h); };
  return {cx(b.x1), cy(b.y1), cx(b.x2), cy(b.y2)};
}

/// Encodes `gt` relative to `anchor`. Both boxes need positive width and height.
template <typename Scalar>
DeltaT<Scalar> encode_delta(const BoxT<Scalar>& anchor, const BoxT<Scalar>& gt,
                            const DeltaNormT<Scalar>& norm = {}) {
  const Scalar aw = anchor.width(), ah = anchor.height();
  const Scalar gw = gt.width(), gh = gt.height();
  if (!(aw > Scalar(0) && ah > Scalar(0)))
    throw std::invalid_argument("encode_delta: anchor has zero size");
  if (!(gw > Scalar(0) && gh > Scalar(0)))
    throw std::invalid_argument("encode_delta: ground truth has zero size");
  DeltaT<Scalar> d;
  d << (gt.cx() - anchor.cx()) / aw, (gt.cy() - anchor.cy()) / ah,
      std::log(gw / aw), std::log(gh / ah);
  return (d - norm.means).cwiseQuotient(norm.stds);
}

/// Inverse of encode_delta. Log size ratios are clamped to +-max_log_ratio so
/// the decoded box stays finite; the result is clipped to `clip_shape` (w, h)
/// when given.
template <typename Scalar>
BoxT<Scalar> decode_delta(
    const BoxT<Scalar>& anchor, const DeltaT<Scalar>& delta,
    std::optional<std::pair<std::type_identity_t<Scalar>, std::type_identity_t<Scalar>>>
        clip_shape = std::nullopt,
    const DeltaNormT<std::type_identity_t<Scalar>>& norm = {},
    std::type_identity_t<Scalar> max_log_ratio = Scalar(kMaxLogRatio)) {
  if (!delta.allFinite())
    throw std::invalid_argument("decode_delta: non-finite delta");
  const Scalar aw = anchor.width(), ah = anchor.height();
  if (!(aw > Scalar(0) && ah > Scalar(0)))
    throw std::invalid_argument("decode_delta: anchor has zero size");
  const DeltaT<Scalar> d = delta.cwiseProduct(norm.stds) + norm.means;
  const Scalar dw = std::clamp(d(2), -max_log_ratio, max_log_ratio);
  const Scalar dh = std::clamp(d(3), -max_log_ratio, max_log_ratio);
  const Scalar cx = anchor.cx() + d(0) * aw;
  const Scalar cy = anchor.cy() + d(1) * ah;
  const Scalar half_w = Scalar(0.5) * aw * std::exp(dw);
  const Scalar half_h = Scalar(0.5) * ah * std::exp(dh);
  BoxT<Scalar> out{cx - half_w, cy - half_h, cx + half_w, cy + half_h};
  if (clip_shape) out = clip(out, clip_shape->first, clip_shape->second);
  return out;
}

/// Jacobian of the unclipped decoded corners (x1, y1, x2, y2) with respect
/// to the normalized delta. Clamped log ratios contribute zero.
template <typename Scalar>
Eigen::Matrix<Scalar, 4, 4> decode_jacobian(
    const BoxT<Scalar>& anchor, const DeltaT<Scalar>& delta,
    const DeltaNormT<Scalar>& norm = {},
    Scalar max_log_ratio = Scalar(kMaxLogRatio)) {
  const Scalar aw = anchor.width(), ah = anchor.height();
  const DeltaT<Scalar> d = delta.cwiseProduct(norm.stds) + norm.means;
  const bool w_free = std::abs(d(2)) < max_log_ratio;
  const bool h_free = std::abs(d(3)) < max_log_ratio;
  const Scalar half_w =
      Scalar(0.5) * aw * std::exp(std::clamp(d(2), -max_log_ratio, max_log_ratio));
  const Scalar half_h =
      Scalar(0.5) * ah * std::exp(std::clamp(d(3), -max_log_ratio, max_log_ratio));
  const Scalar dhw = w_free ? half_w : Scalar(0);
  const Scalar dhh = h_free ? half_h : Scalar(0);
  Eigen::Matrix<Scalar, 4, 4> jac;
  // rows: x1, y1, x2, y2; cols: dx, dy, dw, dh (raw, before std scaling)
  jac << aw, 0, -dhw, 0,
         0, ah, 0, -dhh,
         aw, 0, dhw, 0,
         0, ah, 0, dhh;
  return jac * norm.stds.asDiagonal();
}

}  // namespace detcore
