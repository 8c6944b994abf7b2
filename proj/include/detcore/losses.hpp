// Bounding-box regression losses with analytic gradients.
//
// Residual losses (smooth L1, L1, balanced L1) act on a scalar residual
// x = pred - target, or elementwise on a 4-vector of delta residuals and sum.
// Box losses (IoU, GIoU, bounded IoU) take corner-form boxes and return the
// gradient with respect to the predicted corners (x1, y1, x2, y2).
#pragma once

#include "detcore/geom.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <string_view>

namespace detcore {

template <typename Scalar, int N>
struct LossOut {
  Scalar value{0};
  Eigen::Matrix<Scalar, N, 1> grad = Eigen::Matrix<Scalar, N, 1>::Zero();
  // Set when an eps floor replaced a log or ratio argument.
  bool floored{false};
};

template <typename Scalar>
using ScalarLoss = LossOut<Scalar, 1>;
template <typename Scalar>
using BoxLoss = LossOut<Scalar, 4>;

enum class LossKind { kSmoothL1, kL1, kBalancedL1, kIoU, kGIoU, kBoundedIoU };
enum class IouMode { kLog, kLinear };

inline constexpr double kLossEps = 1e-6;

/// A regression loss and its hyper-parameters. Only the fields relevant to
/// `kind` are read.
struct LossSpec {
  LossKind kind = LossKind::kSmoothL1;
  double loss_weight = 1.0;
  double beta = 1.0;  // smooth_l1; bounded_iou uses 0.2 by default
  double alpha = 0.5;
  double gamma = 1.5;
  IouMode mode = IouMode::kLog;

  static LossSpec defaults(LossKind kind) {
    LossSpec s;
    s.kind = kind;
    if (kind == LossKind::kBoundedIoU) s.beta = 0.2;
    return s;
  }

  void validate() const {
    if (!(loss_weight > 0)) throw std::invalid_argument("loss_weight must be > 0");
    if (!(beta > 0)) throw std::invalid_argument("beta must be > 0");
    if (!(alpha > 0)) throw std::invalid_argument("alpha must be > 0");
    if (!(gamma > 0)) throw std::invalid_argument("gamma must be > 0");
  }

  bool is_box_loss() const {
    return kind == LossKind::kIoU || kind == LossKind::kGIoU ||
           kind == LossKind::kBoundedIoU;
  }
};

inline std::string_view to_string(LossKind k) {
  switch (k) {
    case LossKind::kSmoothL1: return "smooth_l1";
    case LossKind::kL1: return "l1";
    case LossKind::kBalancedL1: return "balanced_l1";
    case LossKind::kIoU: return "iou";
    case LossKind::kGIoU: return "giou";
    case LossKind::kBoundedIoU: return "bounded_iou";
  }
  return "?";
}

inline LossKind parse_loss_kind(std::string_view s) {
  for (auto k : {LossKind::kSmoothL1, LossKind::kL1, LossKind::kBalancedL1,
                 LossKind::kIoU, LossKind::kGIoU, LossKind::kBoundedIoU}) {
    if (to_string(k) == s) return k;
  }
  throw std::invalid_argument("unknown loss kind '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// Residual losses

template <typename Scalar>
ScalarLoss<Scalar> smooth_l1(Scalar x, Scalar beta) {
  if (!(beta > Scalar(0))) throw std::invalid_argument("smooth_l1: beta must be > 0");
  ScalarLoss<Scalar> out;
  const Scalar ax = std::abs(x);
  if (ax < beta) {
    out.value = Scalar(0.5) * x * x / beta;
    out.grad(0) = x / beta;
  } else {
    out.value = ax - Scalar(0.5) * beta;
    out.grad(0) = x > Scalar(0) ? Scalar(1) : Scalar(-1);
  }
  return out;
}

template <typename Scalar>
ScalarLoss<Scalar> l1(Scalar x) {
  ScalarLoss<Scalar> out;
  out.value = std::abs(x);
  out.grad(0) = x > Scalar(0) ? Scalar(1) : (x < Scalar(0) ? Scalar(-1) : Scalar(0));
  return out;
}

/// Balanced L1 with b fixed by alpha * ln(b + 1) = gamma, so the inner
/// branch meets the linear branch with slope gamma at |x| = 1.
template <typename Scalar>
ScalarLoss<Scalar> balanced_l1(Scalar x, Scalar alpha, Scalar gamma) {
  if (!(alpha > Scalar(0)) || !(gamma > Scalar(0)))
    throw std::invalid_argument("balanced_l1: alpha and gamma must be > 0");
  const Scalar b = std::expm1(gamma / alpha);
  const Scalar ax = std::abs(x);
  const Scalar sign = x > Scalar(0) ? Scalar(1) : (x < Scalar(0) ? Scalar(-1) : Scalar(0));
  ScalarLoss<Scalar> out;
  if (ax < Scalar(1)) {
    const Scalar t = b * ax + Scalar(1);
    out.value = alpha / b * t * std::log(t) - alpha * ax;
    out.grad(0) = sign * alpha * std::log(t);
  } else {
    out.value = gamma * ax + gamma / b - alpha;
    out.grad(0) = sign * gamma;
  }
  return out;
}

/// Applies a scalar residual loss to each component of `residual` and sums.
template <typename Scalar, typename Fn>
BoxLoss<Scalar> elementwise(const Vec4<Scalar>& residual, Fn&& fn) {
  BoxLoss<Scalar> out;
  for (int i = 0; i < 4; ++i) {
    const auto term = fn(residual(i));
    out.value += term.value;
    out.grad(i) = term.grad(0);
    out.floored = out.floored || term.floored;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Box losses

namespace detail {

// IoU of pred against target together with d(iou)/d(pred corners) and the
// union / intersection pieces the GIoU gradient reuses.
template <typename Scalar>
struct IouParts {
  Scalar inter{0}, uni{0}, iou{0};
  Vec4<Scalar> d_inter = Vec4<Scalar>::Zero();
  Vec4<Scalar> d_uni = Vec4<Scalar>::Zero();
  Vec4<Scalar> d_iou = Vec4<Scalar>::Zero();
};

template <typename Scalar>
IouParts<Scalar> iou_parts(const BoxT<Scalar>& p, const BoxT<Scalar>& t) {
  IouParts<Scalar> r;
  const Scalar pw = p.width(), ph = p.height();
  const Scalar iw = std::min(p.x2, t.x2) - std::max(p.x1, t.x1);
  const Scalar ih = std::min(p.y2, t.y2) - std::max(p.y1, t.y1);
  Vec4<Scalar> d_area;
  d_area << -ph, -pw, ph, pw;
  if (iw > Scalar(0) && ih > Scalar(0)) {
    r.inter = iw * ih;
    // An edge of the intersection follows pred only where pred is the tighter side.
    const Scalar diw_x1 = p.x1 > t.x1 ? Scalar(-1) : Scalar(0);
    const Scalar diw_x2 = p.x2 < t.x2 ? Scalar(1) : Scalar(0);
    const Scalar dih_y1 = p.y1 > t.y1 ? Scalar(-1) : Scalar(0);
    const Scalar dih_y2 = p.y2 < t.y2 ? Scalar(1) : Scalar(0);
    r.d_inter << diw_x1 * ih, dih_y1 * iw, diw_x2 * ih, dih_y2 * iw;
  }
  r.uni = pw * ph + area(t) - r.inter;
  r.d_uni = d_area - r.d_inter;
  if (r.uni > Scalar(0)) {
    r.iou = r.inter / r.uni;
    r.d_iou = (r.d_inter * r.uni - r.inter * r.d_uni) / (r.uni * r.uni);
  }
  return r;
}

template <typename Scalar>
void require_positive_target(const BoxT<Scalar>& target, const char* who) {
  if (!(target.width() > Scalar(0) && target.height() > Scalar(0)))
    throw std::invalid_argument(std::string(who) + ": target must have positive area");
}

}  // namespace detail

/// -ln(iou) in log mode (iou floored at eps), 1 - iou in linear mode.
template <typename Scalar>
BoxLoss<Scalar> iou_loss(const BoxT<Scalar>& pred, const BoxT<Scalar>& target,
                         IouMode mode = IouMode::kLog,
                         Scalar eps = Scalar(kLossEps)) {
  detail::require_positive_target(target, "iou_loss");
  const auto parts = detail::iou_parts(pred, target);
  BoxLoss<Scalar> out;
  if (mode == IouMode::kLinear) {
    out.value = Scalar(1) - parts.iou;
    out.grad = -parts.d_iou;
    return out;
  }
  if (parts.iou < eps) {
    out.value = -std::log(eps);
    out.floored = true;
    return out;
  }
  out.value = Scalar(0) - std::log(parts.iou);
  out.grad = -parts.d_iou / parts.iou;
  return out;
}

/// 1 - giou, in [0, 2].
template <typename Scalar>
BoxLoss<Scalar> giou_loss(const BoxT<Scalar>& pred, const BoxT<Scalar>& target) {
  detail::require_positive_target(target, "giou_loss");
  const auto parts = detail::iou_parts(pred, target);
  const auto hull = enclosing(pred, target);
  const Scalar cw = hull.width(), ch = hull.height();
  const Scalar c = cw * ch;
  const Scalar dcw_x1 = pred.x1 < target.x1 ? Scalar(-1) : Scalar(0);
  const Scalar dcw_x2 = pred.x2 > target.x2 ? Scalar(1) : Scalar(0);
  const Scalar dch_y1 = pred.y1 < target.y1 ? Scalar(-1) : Scalar(0);
  const Scalar dch_y2 = pred.y2 > target.y2 ? Scalar(1) : Scalar(0);
  Vec4<Scalar> d_c;
  d_c << dcw_x1 * ch, dch_y1 * cw, dcw_x2 * ch, dch_y2 * cw;
  // giou = iou - 1 + union / hull
  BoxLoss<Scalar> out;
  out.value = Scalar(2) - parts.iou - parts.uni / c;
  out.grad = -parts.d_iou - (parts.d_uni * c - parts.uni * d_c) / (c * c);
  return out;
}

/// Sum over the four coordinates of smooth_l1(1 - IoU_B, beta), where IoU_B
/// is the best IoU attainable when only that coordinate is wrong.
template <typename Scalar>
BoxLoss<Scalar> bounded_iou_loss(const BoxT<Scalar>& pred,
                                 const BoxT<Scalar>& target,
                                 Scalar beta = Scalar(0.2),
                                 Scalar eps = Scalar(kLossEps)) {
  detail::require_positive_target(target, "bounded_iou_loss");
  if (!(beta > Scalar(0))) throw std::invalid_argument("bounded_iou_loss: beta must be > 0");
  BoxLoss<Scalar> out;

  // d(center)/d(x1, x2) = (0.5, 0.5); d(size)/d(x1, x2) = (-1, 1)
  auto center_term = [&](Scalar offset, Scalar t_size, int lo, int hi) {
    const Scalar a = std::abs(offset);
    Scalar ib = Scalar(0), dib_da = Scalar(0);
    if (Scalar(2) * a < t_size) {
      const Scalar den = t_size + Scalar(2) * a;
      ib = (t_size - Scalar(2) * a) / den;
      dib_da = Scalar(-4) * t_size / (den * den);
    }
    const auto sl = smooth_l1(Scalar(1) - ib, beta);
    const Scalar sign = offset > Scalar(0) ? Scalar(1) : (offset < Scalar(0) ? Scalar(-1) : Scalar(0));
    const Scalar d_offset = -sl.grad(0) * dib_da * sign;
    out.value += sl.value;
    out.grad(lo) += Scalar(0.5) * d_offset;
    out.grad(hi) += Scalar(0.5) * d_offset;
  };
  auto size_term = [&](Scalar size, Scalar t_size, int lo, int hi) {
    const bool floor = size < eps;
    if (floor) {
      size = eps;
      out.floored = true;
    }
    Scalar ib, dib_ds;
    if (size < t_size) {
      ib = size / t_size;
      dib_ds = Scalar(1) / t_size;
    } else {
      ib = t_size / size;
      dib_ds = -t_size / (size * size);
    }
    if (floor) dib_ds = Scalar(0);
    const auto sl = smooth_l1(Scalar(1) - ib, beta);
    const Scalar d_size = -sl.grad(0) * dib_ds;
    out.value += sl.value;
    out.grad(lo) -= d_size;
    out.grad(hi) += d_size;
  };

  center_term(pred.cx() - target.cx(), target.width(), 0, 2);
  center_term(pred.cy() - target.cy(), target.height(), 1, 3);
  size_term(pred.width(), target.width(), 0, 2);
  size_term(pred.height(), target.height(), 1, 3);
  return out;
}

/// Scales value and gradient by the loss weight.
template <typename Scalar, int N>
LossOut<Scalar, N> weighted(LossOut<Scalar, N> loss, Scalar lw) {
  if (!(lw > Scalar(0))) throw std::invalid_argument("weighted: lw must be > 0");
  loss.value *= lw;
  loss.grad *= lw;
  return loss;
}

}  // namespace detcore
