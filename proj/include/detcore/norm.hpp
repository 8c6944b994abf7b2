// Batch and group normalization on small dense tensors, forward and backward.
//
// BatchNorm carries two independent switches: `eval` freezes the running
// statistics (normalization always uses them), `requires_grad` controls
// whether the affine weights receive gradients. eval && !requires_grad is
// FrozenBN.
#pragma once

#include <Eigen/Dense>

#include <string_view>

namespace detcore {

struct NormState {
  Eigen::VectorXd running_mean;
  Eigen::VectorXd running_var;
  Eigen::VectorXd gamma;
  Eigen::VectorXd beta;
  double momentum = 0.1;
  double eps = 1e-5;
  bool eval = false;
  bool requires_grad = true;

  /// Zero mean, unit variance, identity affine.
  static NormState identity(Eigen::Index channels);
  static NormState frozen(Eigen::VectorXd mean, Eigen::VectorXd var,
                          Eigen::VectorXd gamma, Eigen::VectorXd beta);

  Eigen::Index channels() const { return gamma.size(); }
  void validate() const;
};

struct BnCache {
  Eigen::MatrixXd x_hat;      // batch x channel, normalized input
  Eigen::VectorXd inv_std;    // per channel
  Eigen::VectorXd gamma;      // affine weights used in forward
  bool batch_stats{false};
  bool requires_grad{true};
};

struct BnForward {
  Eigen::MatrixXd y;
  BnCache cache;
};

/// x is batch x channel. Batch statistics are used (and the running ones
/// updated with momentum, unbiased variance) only when training && !eval.
BnForward bn_forward(const Eigen::MatrixXd& x, NormState& state, bool training);

struct NormGrads {
  Eigen::MatrixXd grad_x;
  Eigen::VectorXd grad_gamma;
  Eigen::VectorXd grad_beta;
};

/// grad_gamma / grad_beta are zero vectors when the forward state had
/// requires_grad == false.
NormGrads bn_backward(const Eigen::MatrixXd& grad_out, const BnCache& cache);

/// Dense batch x channel x spatial tensor. data row (n * channels + c) holds
/// the spatial values of channel c of sample n.
struct FeatureMap {
  Eigen::Index batch{0}, channels{0}, spatial{0};
  Eigen::MatrixXd data;

  FeatureMap() = default;
  FeatureMap(Eigen::Index n, Eigen::Index c, Eigen::Index s)
      : batch(n), channels(c), spatial(s), data(Eigen::MatrixXd::Zero(n * c, s)) {}

  auto channel(Eigen::Index n, Eigen::Index c) { return data.row(n * channels + c); }
  auto channel(Eigen::Index n, Eigen::Index c) const { return data.row(n * channels + c); }
};

struct GroupNormSpec {
  Eigen::Index num_groups = 32;
  double eps = 1e-5;
  Eigen::VectorXd gamma;
  Eigen::VectorXd beta;
  bool requires_grad = true;

  static GroupNormSpec identity(Eigen::Index channels, Eigen::Index groups);
  void validate(Eigen::Index channels) const;
};

struct GnCache {
  FeatureMap x_hat;
  Eigen::MatrixXd inv_std;  // batch x groups
  Eigen::VectorXd gamma;
  Eigen::Index num_groups{1};
  bool requires_grad{true};
};

struct GnForward {
  FeatureMap y;
  GnCache cache;
};

GnForward gn_forward(const FeatureMap& x, const GroupNormSpec& spec);

struct GnGrads {
  FeatureMap grad_x;
  Eigen::VectorXd grad_gamma;
  Eigen::VectorXd grad_beta;
};

GnGrads gn_backward(const FeatureMap& grad_out, const GnCache& cache);

enum class NormKind { kNone, kBatchNorm, kFrozenBatchNorm, kGroupNorm };

std::string_view to_string(NormKind k);
NormKind parse_norm_kind(std::string_view s);

}  // namespace detcore
