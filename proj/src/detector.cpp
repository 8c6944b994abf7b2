#include "detcore/refdet.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace detcore {

int DetectorSpec::feature_dim() const {
  const int side = window / pool;
  return side * side + 1;
}

void DetectorSpec::validate() const {
  anchors.validate();
  if (num_classes < 1) throw std::invalid_argument("model: num_classes must be >= 1");
  if (window < 1 || pool < 1 || window % pool != 0)
    throw std::invalid_argument("model: window must be a positive multiple of pool");
  if (anchors.stride != std::floor(anchors.stride) ||
      anchors.base_size != std::floor(anchors.base_size))
    throw std::invalid_argument("anchors: stride and base_size must be whole pixels");
  loss.validate();
  if ((delta_norm.stds.array() <= 0).any())
    throw std::invalid_argument("model: target stds must be > 0");
  if (norm.kind == NormKind::kGroupNorm && feature_dim() % norm.num_groups != 0)
    throw std::invalid_argument("norm: feature dim " + std::to_string(feature_dim()) +
                                " is not divisible by num_groups " +
                                std::to_string(norm.num_groups));
}

TinyDetector::TinyDetector(DetectorSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  const Eigen::Index d = spec_.feature_dim();
  const Eigen::Index a = anchors_per_cell();
  cls_w = Eigen::MatrixXd::Zero(a * spec_.num_classes, d + 1);
  reg_w = Eigen::MatrixXd::Zero(a * 4, d + 1);
  bn = NormState::identity(d);
  bn.momentum = spec_.norm.momentum;
  bn.eps = spec_.norm.eps;
  bn.eval = spec_.norm.eval;
  bn.requires_grad = spec_.norm.requires_grad;
  if (spec_.norm.kind == NormKind::kFrozenBatchNorm) {
    bn.eval = true;
    bn.requires_grad = false;
  }
  if (spec_.norm.kind == NormKind::kGroupNorm) {
    gn = GroupNormSpec::identity(d, spec_.norm.num_groups);
    gn.eps = spec_.norm.eps;
    gn.requires_grad = spec_.norm.requires_grad;
  }
}

bool TinyDetector::norm_trainable() const {
  switch (spec_.norm.kind) {
    case NormKind::kBatchNorm: return bn.requires_grad;
    case NormKind::kGroupNorm: return gn.requires_grad;
    default: return false;
  }
}

Eigen::VectorXd TinyDetector::params() const {
  const Eigen::Index nc = cls_w.size(), nr = reg_w.size();
  const Eigen::Index nn = norm_trainable() ? 2 * spec_.feature_dim() : 0;
  Eigen::VectorXd p(nc + nr + nn);
  p.head(nc) = Eigen::Map<const Eigen::VectorXd>(cls_w.data(), nc);
  p.segment(nc, nr) = Eigen::Map<const Eigen::VectorXd>(reg_w.data(), nr);
  if (nn > 0) {
    const bool use_gn = spec_.norm.kind == NormKind::kGroupNorm;
    p.segment(nc + nr, nn / 2) = use_gn ? gn.gamma : bn.gamma;
    p.tail(nn / 2) = use_gn ? gn.beta : bn.beta;
  }
  return p;
}

void TinyDetector::set_params(const Eigen::VectorXd& p) {
  const Eigen::Index nc = cls_w.size(), nr = reg_w.size();
  const Eigen::Index nn = norm_trainable() ? 2 * spec_.feature_dim() : 0;
  if (p.size() != nc + nr + nn) throw std::invalid_argument("set_params: size mismatch");
  Eigen::Map<Eigen::VectorXd>(cls_w.data(), nc) = p.head(nc);
  Eigen::Map<Eigen::VectorXd>(reg_w.data(), nr) = p.segment(nc, nr);
  if (nn > 0) {
    auto& gamma = spec_.norm.kind == NormKind::kGroupNorm ? gn.gamma : bn.gamma;
    auto& beta = spec_.norm.kind == NormKind::kGroupNorm ? gn.beta : bn.beta;
    gamma = p.segment(nc + nr, nn / 2);
    beta = p.tail(nn / 2);
  }
}

std::vector<Box> TinyDetector::anchors_for(int img_w, int img_h) const {
  const int stride = static_cast<int>(spec_.anchors.stride);
  return grid_anchors(base_anchors(spec_.anchors), img_w / stride, img_h / stride,
                      spec_.anchors.stride);
}

Eigen::MatrixXd extract_features(const SynthImage& img, const DetectorSpec& spec) {
  const int stride = static_cast<int>(spec.anchors.stride);
  const int w = img.width(), h = img.height();
  if (w % stride != 0 || h % stride != 0)
    throw std::invalid_argument("forward: image dims must be divisible by the stride");
  const int fw = w / stride, fh = h / stride;
  const int side = spec.window / spec.pool;

  // Summed-area table; regions outside the image contribute zero.
  Eigen::MatrixXd sat = Eigen::MatrixXd::Zero(h + 1, w + 1);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      sat(r + 1, c + 1) = img.pixels(r, c) + sat(r, c + 1) + sat(r + 1, c) - sat(r, c);
  auto region = [&](int x0, int y0, int x1, int y1) {
    x0 = std::clamp(x0, 0, w);
    x1 = std::clamp(x1, 0, w);
    y0 = std::clamp(y0, 0, h);
    y1 = std::clamp(y1, 0, h);
    if (x1 <= x0 || y1 <= y0) return 0.0;
    return sat(y1, x1) - sat(y0, x1) - sat(y1, x0) + sat(y0, x0);
  };

  const int centre = static_cast<int>(spec.anchors.base_size) / 2;
  const int half = spec.window / 2;
  const double cell_area = double(spec.pool) * spec.pool;
  Eigen::MatrixXd feats(fw * fh, spec.feature_dim());
  for (int y = 0; y < fh; ++y) {
    for (int x = 0; x < fw; ++x) {
      const int row = y * fw + x;
      const int left = x * stride + centre - half;
      const int top = y * stride + centre - half;
      for (int q = 0; q < side; ++q)
        for (int p = 0; p < side; ++p)
          feats(row, q * side + p) =
              region(left + p * spec.pool, top + q * spec.pool, left + (p + 1) * spec.pool,
                     top + (q + 1) * spec.pool) /
              cell_area;
      feats(row, side * side) =
          region(left, top, left + spec.window, top + spec.window) /
          (double(spec.window) * spec.window);
    }
  }
  return feats;
}

ForwardOut forward(const TinyDetector& det, const std::vector<SynthImage>& batch,
                   bool training, NormState* bn_update) {
  const DetectorSpec& spec = det.spec();
  ForwardOut out;
  std::vector<Eigen::MatrixXd> parts;
  Eigen::Index rows = 0;
  for (const auto& img : batch) {
    out.cache.row_offset.push_back(rows);
    parts.push_back(extract_features(img, spec));
    rows += parts.back().rows();
  }
  const Eigen::Index d = spec.feature_dim();
  Eigen::MatrixXd feats(rows, d);
  for (std::size_t i = 0; i < parts.size(); ++i)
    feats.middleRows(out.cache.row_offset[i], parts[i].rows()) = parts[i];

  Eigen::MatrixXd normed;
  switch (spec.norm.kind) {
    case NormKind::kNone:
      normed = feats;
      break;
    case NormKind::kBatchNorm:
    case NormKind::kFrozenBatchNorm: {
      NormState state = det.bn;
      auto f = bn_forward(feats, state, training);
      normed = std::move(f.y);
      out.cache.bn = std::move(f.cache);
      if (bn_update) *bn_update = std::move(state);
      break;
    }
    case NormKind::kGroupNorm: {
      FeatureMap fm(rows, d, 1);
      for (Eigen::Index r = 0; r < rows; ++r) fm.data.middleRows(r * d, d) = feats.row(r).transpose();
      auto f = gn_forward(fm, det.gn);
      normed.resize(rows, d);
      for (Eigen::Index r = 0; r < rows; ++r) normed.row(r) = f.y.data.middleRows(r * d, d).transpose();
      out.cache.gn = std::move(f.cache);
      break;
    }
  }
  if (bn_update && spec.norm.kind != NormKind::kBatchNorm &&
      spec.norm.kind != NormKind::kFrozenBatchNorm)
    *bn_update = det.bn;

  out.cache.normed.resize(rows, d + 1);
  out.cache.normed.leftCols(d) = normed;
  out.cache.normed.col(d).setOnes();
  out.logits = out.cache.normed * det.cls_w.transpose();
  out.scores = (1.0 + (-out.logits.array()).exp()).inverse().matrix();
  out.deltas = out.cache.normed * det.reg_w.transpose();
  return out;
}

TrainTargets build_targets(const TinyDetector& det, const std::vector<SynthImage>& batch,
                           const TrainParams& params, std::mt19937_64& rng) {
  TrainTargets t;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& img = batch[i];
    const auto anchors = det.anchors_for(img.width(), img.height());
    const Mask valid = valid_flags(anchors, img.width(), img.height(), params.allowed_border);
    std::vector<Box> gts;
    for (const auto& a : img.annotations) gts.push_back(a.box);
    const auto assign = max_iou_assign(anchors, gts, params.assigner, &valid);
    const auto sample = random_sample(assign, params.sampler, rng);
    for (std::size_t k : sample.pos_indices) {
      const int g = assign.gt_index[k];
      const int label = det.spec().num_classes == 1 ? 0 : img.annotations[g].label;
      t.positives.push_back({i, k, g, label});
    }
    for (std::size_t k : sample.neg_indices) t.negatives.push_back({i, k, -1, -1});
  }
  return t;
}

namespace {

double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

}  // namespace

LossEval evaluate_loss(const TinyDetector& det, const std::vector<SynthImage>& batch,
                       const TrainTargets& targets) {
  const DetectorSpec& spec = det.spec();
  const int a_per_cell = det.anchors_per_cell();
  const int nc = spec.num_classes;
  LossEval out;
  auto fwd = forward(det, batch, /*training=*/true, &out.bn_after);

  Eigen::MatrixXd d_logits = Eigen::MatrixXd::Zero(fwd.logits.rows(), fwd.logits.cols());
  Eigen::MatrixXd d_deltas = Eigen::MatrixXd::Zero(fwd.deltas.rows(), fwd.deltas.cols());
  auto locate = [&](const SampledAnchor& s) {
    const auto cell = static_cast<Eigen::Index>(s.anchor) / a_per_cell;
    const auto slot = static_cast<Eigen::Index>(s.anchor) % a_per_cell;
    return std::make_pair(fwd.cache.row_offset[s.image] + cell, slot);
  };

  const double n_sampled = double(targets.positives.size() + targets.negatives.size());
  auto add_cls = [&](const SampledAnchor& s) {
    const auto [row, slot] = locate(s);
    for (int c = 0; c < nc; ++c) {
      const Eigen::Index col = slot * nc + c;
      const double z = fwd.logits(row, col);
      const double t = (s.label == c) ? 1.0 : 0.0;
      out.cls += (softplus(z) - t * z) / n_sampled;
      d_logits(row, col) += (fwd.scores(row, col) - t) / n_sampled;
    }
  };
  for (const auto& s : targets.positives) add_cls(s);
  for (const auto& s : targets.negatives) add_cls(s);

  out.no_positives = targets.positives.empty();
  if (!out.no_positives) {
    const double scale = spec.loss.loss_weight / double(targets.positives.size());
    std::vector<std::vector<Box>> anchor_cache(batch.size());
    for (const auto& s : targets.positives) {
      auto& anchors = anchor_cache[s.image];
      if (anchors.empty()) anchors = det.anchors_for(batch[s.image].width(), batch[s.image].height());
      const Box& anchor = anchors[s.anchor];
      const Box& gt = batch[s.image].annotations[static_cast<std::size_t>(s.gt)].box;
      const auto [row, slot] = locate(s);
      const Delta pred = fwd.deltas.row(row).segment<4>(slot * 4).transpose();

      BoxLoss<double> term;
      if (spec.loss.is_box_loss()) {
        const Box pbox = decode_delta(anchor, pred, std::nullopt, spec.delta_norm);
        if (spec.loss.kind == LossKind::kIoU) term = iou_loss(pbox, gt, spec.loss.mode);
        else if (spec.loss.kind == LossKind::kGIoU) term = giou_loss(pbox, gt);
        else term = bounded_iou_loss(pbox, gt, spec.loss.beta);
        term.grad = decode_jacobian(anchor, pred, spec.delta_norm).transpose() * term.grad;
      } else {
        const Delta residual = pred - encode_delta(anchor, gt, spec.delta_norm);
        switch (spec.loss.kind) {
          case LossKind::kSmoothL1:
            term = elementwise(residual, [&](double x) { return smooth_l1(x, spec.loss.beta); });
            break;
          case LossKind::kL1:
            term = elementwise(residual, [](double x) { return l1(x); });
            break;
          default:
            term = elementwise(residual, [&](double x) {
              return balanced_l1(x, spec.loss.alpha, spec.loss.gamma);
            });
        }
      }
      out.reg += scale * term.value;
      d_deltas.row(row).segment<4>(slot * 4) += scale * term.grad.transpose();
    }
  }
  out.total = out.cls + out.reg;

  const Eigen::Index d = spec.feature_dim();
  const Eigen::MatrixXd g_cls = d_logits.transpose() * fwd.cache.normed;
  const Eigen::MatrixXd g_reg = d_deltas.transpose() * fwd.cache.normed;
  const Eigen::Index n_cls = g_cls.size(), n_reg = g_reg.size();
  const Eigen::Index n_norm = det.norm_trainable() ? 2 * d : 0;
  out.grad.resize(n_cls + n_reg + n_norm);
  out.grad.head(n_cls) = Eigen::Map<const Eigen::VectorXd>(g_cls.data(), n_cls);
  out.grad.segment(n_cls, n_reg) = Eigen::Map<const Eigen::VectorXd>(g_reg.data(), n_reg);
  if (n_norm > 0) {
    const Eigen::MatrixXd d_normed =
        d_logits * det.cls_w.leftCols(d) + d_deltas * det.reg_w.leftCols(d);
    if (spec.norm.kind == NormKind::kGroupNorm) {
      FeatureMap g(d_normed.rows(), d, 1);
      for (Eigen::Index r = 0; r < d_normed.rows(); ++r)
        g.data.middleRows(r * d, d) = d_normed.row(r).transpose();
      const auto grads = gn_backward(g, fwd.cache.gn);
      out.grad.segment(n_cls + n_reg, d) = grads.grad_gamma;
      out.grad.tail(d) = grads.grad_beta;
    } else {
      const auto grads = bn_backward(d_normed, fwd.cache.bn);
      out.grad.segment(n_cls + n_reg, d) = grads.grad_gamma;
      out.grad.tail(d) = grads.grad_beta;
    }
  }
  return out;
}

void SgdOptimizer::step(TinyDetector& det, const Eigen::VectorXd& grad, double lr) {
  Eigen::VectorXd p = det.params();
  if (grad.size() != p.size()) throw std::invalid_argument("sgd: gradient size mismatch");
  if (velocity_.size() != p.size()) velocity_ = Eigen::VectorXd::Zero(p.size());
  double clip = 1.0;
  if (params_.max_grad_norm) {
    const double norm = grad.norm();
    if (norm > *params_.max_grad_norm) clip = *params_.max_grad_norm / norm;
  }
  velocity_ = params_.momentum * velocity_ + clip * grad + params_.weight_decay * p;
  p -= lr * velocity_;
  det.set_params(p);
}

StepResult train_step(TinyDetector& det, SgdOptimizer& opt, const std::vector<SynthImage>& batch,
                      const TrainParams& params, double lr, std::mt19937_64& rng) {
  const auto targets = build_targets(det, batch, params, rng);
  auto eval = evaluate_loss(det, batch, targets);
  opt.step(det, eval.grad, lr);
  det.bn.running_mean = eval.bn_after.running_mean;
  det.bn.running_var = eval.bn_after.running_var;
  return {eval.total, eval.no_positives};
}

std::vector<Detection> infer(const TinyDetector& det, const SynthImage& img,
                             const InferParams& params) {
  const DetectorSpec& spec = det.spec();
  const auto fwd = forward(det, {img}, /*training=*/false);
  const auto anchors = det.anchors_for(img.width(), img.height());
  const int a_per_cell = det.anchors_per_cell();
  const int nc = spec.num_classes;
  const std::pair<double, double> shape{img.width(), img.height()};

  std::vector<Detection> candidates;
  for (std::size_t k = 0; k < anchors.size(); ++k) {
    const auto row = static_cast<Eigen::Index>(k) / a_per_cell;
    const auto slot = static_cast<Eigen::Index>(k) % a_per_cell;
    for (int c = 0; c < nc; ++c) {
      const double s = fwd.scores(row, slot * nc + c);
      if (s < params.score_thr) continue;
      const Delta d = fwd.deltas.row(row).segment<4>(slot * 4).transpose();
      candidates.push_back({decode_delta(anchors[k], d, shape, spec.delta_norm), s, c});
    }
  }
  std::vector<Detection> kept;
  for (std::size_t i : nms(candidates, params.nms_thr)) {
    if (kept.size() >= params.max_per_img) break;
    kept.push_back(candidates[i]);
  }
  return kept;
}

}  // namespace detcore
