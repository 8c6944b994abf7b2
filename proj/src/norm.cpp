#include "detcore/norm.hpp"

#include <stdexcept>
#include <string>

namespace detcore {

NormState NormState::identity(Eigen::Index channels) {
  NormState s;
  s.running_mean = Eigen::VectorXd::Zero(channels);
  s.running_var = Eigen::VectorXd::Ones(channels);
  s.gamma = Eigen::VectorXd::Ones(channels);
  s.beta = Eigen::VectorXd::Zero(channels);
  return s;
}

NormState NormState::frozen(Eigen::VectorXd mean, Eigen::VectorXd var,
                            Eigen::VectorXd gamma, Eigen::VectorXd beta) {
  NormState s;
  s.running_mean = std::move(mean);
  s.running_var = std::move(var);
  s.gamma = std::move(gamma);
  s.beta = std::move(beta);
  s.eval = true;
  s.requires_grad = false;
  s.validate();
  return s;
}

void NormState::validate() const {
  const Eigen::Index c = gamma.size();
  if (beta.size() != c || running_mean.size() != c || running_var.size() != c)
    throw std::invalid_argument("NormState: per-channel vectors differ in size");
  if ((running_var.array() < 0).any())
    throw std::invalid_argument("NormState: running_var must be >= 0");
  if (!(eps >= 0)) throw std::invalid_argument("NormState: eps must be >= 0");
  if (!(momentum >= 0 && momentum <= 1))
    throw std::invalid_argument("NormState: momentum must be in [0, 1]");
}

BnForward bn_forward(const Eigen::MatrixXd& x, NormState& state, bool training) {
  if (x.cols() != state.channels())
    throw std::invalid_argument("bn_forward: channel count mismatch");
  if (x.rows() < 1) throw std::invalid_argument("bn_forward: empty batch");

  BnForward out;
  Eigen::RowVectorXd mean, var;
  out.cache.batch_stats = training && !state.eval;
  if (out.cache.batch_stats) {
    const auto n = static_cast<double>(x.rows());
    mean = x.colwise().mean();
    var = (x.rowwise() - mean).array().square().colwise().mean();
    const Eigen::RowVectorXd unbiased = x.rows() > 1 ? Eigen::RowVectorXd(var * (n / (n - 1))) : var;
    const double m = state.momentum;
    state.running_mean = (1 - m) * state.running_mean + m * mean.transpose();
    state.running_var = (1 - m) * state.running_var + m * unbiased.transpose();
  } else {
    mean = state.running_mean.transpose();
    var = state.running_var.transpose();
  }
  out.cache.inv_std = (var.array() + state.eps).rsqrt().transpose();
  out.cache.x_hat = ((x.rowwise() - mean).array().rowwise() *
                     out.cache.inv_std.transpose().array())
                        .matrix();
  out.cache.gamma = state.gamma;
  out.cache.requires_grad = state.requires_grad;
  out.y = (out.cache.x_hat.array().rowwise() * state.gamma.transpose().array())
              .rowwise() +
          state.beta.transpose().array();
  return out;
}

NormGrads bn_backward(const Eigen::MatrixXd& grad_out, const BnCache& cache) {
  if (grad_out.rows() != cache.x_hat.rows() || grad_out.cols() != cache.x_hat.cols())
    throw std::invalid_argument("bn_backward: gradient does not match forward context");
  const Eigen::ArrayXXd dy = grad_out.array();
  const Eigen::ArrayXXd xh = cache.x_hat.array();
  const Eigen::RowVectorXd g = cache.gamma.transpose();
  const Eigen::RowVectorXd inv = cache.inv_std.transpose();

  NormGrads out;
  const Eigen::ArrayXXd dxh = dy.rowwise() * g.array();
  if (cache.batch_stats) {
    const auto n = static_cast<double>(dy.rows());
    const Eigen::RowVectorXd sum_dxh = dxh.colwise().sum();
    const Eigen::RowVectorXd sum_dxh_xh = (dxh * xh).colwise().sum();
    const Eigen::ArrayXXd centered =
        (n * dxh).rowwise() - sum_dxh.array() - xh.rowwise() * sum_dxh_xh.array();
    out.grad_x = (centered.rowwise() * (inv.array() / n)).matrix();
  } else {
    out.grad_x = (dxh.rowwise() * inv.array()).matrix();
  }
  if (cache.requires_grad) {
    out.grad_gamma = (dy * xh).colwise().sum().transpose();
    out.grad_beta = dy.colwise().sum().transpose();
  } else {
    out.grad_gamma = Eigen::VectorXd::Zero(g.size());
    out.grad_beta = Eigen::VectorXd::Zero(g.size());
  }
  return out;
}

GroupNormSpec GroupNormSpec::identity(Eigen::Index channels, Eigen::Index groups) {
  GroupNormSpec s;
  s.num_groups = groups;
  s.gamma = Eigen::VectorXd::Ones(channels);
  s.beta = Eigen::VectorXd::Zero(channels);
  s.validate(channels);
  return s;
}

void GroupNormSpec::validate(Eigen::Index channels) const {
  if (num_groups < 1) throw std::invalid_argument("GroupNorm: num_groups must be >= 1");
  if (channels % num_groups != 0)
    throw std::invalid_argument("GroupNorm: " + std::to_string(channels) +
                                " channels not divisible by " +
                                std::to_string(num_groups) + " groups");
  if (gamma.size() != channels || beta.size() != channels)
    throw std::invalid_argument("GroupNorm: affine weights do not match channels");
  if (!(eps >= 0)) throw std::invalid_argument("GroupNorm: eps must be >= 0");
}

GnForward gn_forward(const FeatureMap& x, const GroupNormSpec& spec) {
  spec.validate(x.channels);
  const Eigen::Index groups = spec.num_groups;
  const Eigen::Index cpg = x.channels / groups;
  const auto m = static_cast<double>(cpg * x.spatial);

  GnForward out;
  out.y = FeatureMap(x.batch, x.channels, x.spatial);
  out.cache.x_hat = FeatureMap(x.batch, x.channels, x.spatial);
  out.cache.inv_std.resize(x.batch, groups);
  out.cache.gamma = spec.gamma;
  out.cache.num_groups = groups;
  out.cache.requires_grad = spec.requires_grad;

  for (Eigen::Index n = 0; n < x.batch; ++n) {
    for (Eigen::Index g = 0; g < groups; ++g) {
      const Eigen::Index row = n * x.channels + g * cpg;
      const auto block = x.data.middleRows(row, cpg);
      const double mean = block.sum() / m;
      const double var = (block.array() - mean).square().sum() / m;
      const double inv = 1.0 / std::sqrt(var + spec.eps);
      out.cache.inv_std(n, g) = inv;
      out.cache.x_hat.data.middleRows(row, cpg) = (block.array() - mean) * inv;
    }
    for (Eigen::Index c = 0; c < x.channels; ++c)
      out.y.channel(n, c) =
          (out.cache.x_hat.channel(n, c).array() * spec.gamma(c) + spec.beta(c)).matrix();
  }
  return out;
}

GnGrads gn_backward(const FeatureMap& grad_out, const GnCache& cache) {
  const FeatureMap& xh = cache.x_hat;
  if (grad_out.batch != xh.batch || grad_out.channels != xh.channels ||
      grad_out.spatial != xh.spatial)
    throw std::invalid_argument("gn_backward: gradient does not match forward context");
  const Eigen::Index groups = cache.num_groups;
  const Eigen::Index cpg = xh.channels / groups;
  const auto m = static_cast<double>(cpg * xh.spatial);

  GnGrads out;
  out.grad_x = FeatureMap(xh.batch, xh.channels, xh.spatial);
  out.grad_gamma = Eigen::VectorXd::Zero(xh.channels);
  out.grad_beta = Eigen::VectorXd::Zero(xh.channels);

  for (Eigen::Index n = 0; n < xh.batch; ++n) {
    for (Eigen::Index g = 0; g < groups; ++g) {
      const Eigen::Index row = n * xh.channels + g * cpg;
      const Eigen::ArrayXXd dy = grad_out.data.middleRows(row, cpg).array();
      const Eigen::ArrayXXd x_hat = xh.data.middleRows(row, cpg).array();
      const Eigen::ArrayXXd dxh =
          dy.colwise() * cache.gamma.segment(g * cpg, cpg).array();
      const double sum_dxh = dxh.sum();
      const double sum_dxh_xh = (dxh * x_hat).sum();
      out.grad_x.data.middleRows(row, cpg) =
          ((m * dxh - sum_dxh - x_hat * sum_dxh_xh) * (cache.inv_std(n, g) / m)).matrix();
      if (cache.requires_grad) {
        out.grad_gamma.segment(g * cpg, cpg) += (dy * x_hat).rowwise().sum().matrix();
        out.grad_beta.segment(g * cpg, cpg) += dy.rowwise().sum().matrix();
      }
    }
  }
  return out;
}

std::string_view to_string(NormKind k) {
  switch (k) {
    case NormKind::kNone: return "none";
    case NormKind::kBatchNorm: return "bn";
    case NormKind::kFrozenBatchNorm: return "frozen_bn";
    case NormKind::kGroupNorm: return "gn";
  }
  return "?";
}

NormKind parse_norm_kind(std::string_view s) {
  for (auto k : {NormKind::kNone, NormKind::kBatchNorm, NormKind::kFrozenBatchNorm,
                 NormKind::kGroupNorm})
    if (to_string(k) == s) return k;
  throw std::invalid_argument("unknown norm type '" + std::string(s) + "'");
}

}  // namespace detcore
