#include "detcore/norm.hpp"

#include "doctest.h"

#include <random>

using namespace detcore;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

MatrixXd random_matrix(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c) {
  std::normal_distribution<double> n(0.5, 2.0);
  MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

NormState random_state(std::mt19937_64& rng, Eigen::Index c) {
  NormState s = NormState::identity(c);
  s.gamma = random_matrix(rng, c, 1);
  s.beta = random_matrix(rng, c, 1);
  s.running_mean = random_matrix(rng, c, 1);
  s.running_var = random_matrix(rng, c, 1).cwiseAbs().array() + 0.5;
  return s;
}

// Loss L = sum(w .* y) so dL/dy = w.
double bn_loss(const MatrixXd& x, NormState s, bool training, const MatrixXd& w) {
  return (bn_forward(x, s, training).y.cwiseProduct(w)).sum();
}

double gn_loss(const FeatureMap& x, const GroupNormSpec& s, const FeatureMap& w) {
  return gn_forward(x, s).y.data.cwiseProduct(w.data).sum();
}

double rel(const MatrixXd& a, const MatrixXd& b) {
  return (a - b).norm() / std::max(1.0, b.norm());
}

}  // namespace

TEST_CASE("bn eval forward") {
  NormState s = NormState::identity(3);
  s.eps = 0;
  s.eval = true;
  MatrixXd x(2, 3);
  x << 1, -2, 3.5, 0.25, 7, -1;
  CHECK(bn_forward(x, s, true).y == x);
  CHECK(s.running_mean.isZero());
  CHECK(s.running_var == VectorXd::Ones(3));

  std::mt19937_64 rng(1);
  NormState r = random_state(rng, 3);
  r.eval = true;
  const NormState before = r;
  bn_forward(random_matrix(rng, 5, 3), r, true);
  CHECK(r.running_mean == before.running_mean);
  CHECK(r.running_var == before.running_var);

  // eval mode is a per-channel affine map
  const MatrixXd a = random_matrix(rng, 4, 3), b = random_matrix(rng, 4, 3);
  const MatrixXd ya = bn_forward(a, r, false).y, yb = bn_forward(b, r, false).y;
  const MatrixXd y0 = bn_forward(MatrixXd::Zero(4, 3), r, false).y;
  const MatrixXd mix = bn_forward(0.3 * a + 0.7 * b, r, false).y;
  CHECK(rel(mix, 0.3 * ya + 0.7 * yb) < 1e-12);
  CHECK(rel(bn_forward(2 * a, r, false).y - y0, 2 * (ya - y0)) < 1e-12);
}

TEST_CASE("bn training updates running stats") {
  NormState s = NormState::identity(1);
  s.momentum = 1;
  MatrixXd x(2, 1);
  x << 1, 3;
  const auto f = bn_forward(x, s, true);
  CHECK(s.running_mean(0) == doctest::Approx(2));
  CHECK(s.running_var(0) == doctest::Approx(2));  // unbiased
  CHECK(f.y(0, 0) == doctest::Approx(-1).epsilon(1e-4));
  CHECK(f.y(1, 0) == doctest::Approx(1).epsilon(1e-4));

  NormState half = NormState::identity(1);
  half.momentum = 0.5;
  bn_forward(x, half, true);
  CHECK(half.running_mean(0) == doctest::Approx(1));

  // not training: running statistics are used and left alone
  NormState idle = NormState::identity(1);
  bn_forward(x, idle, false);
  CHECK(idle.running_mean(0) == 0);
}

TEST_CASE("bn backward matches finite differences") {
  std::mt19937_64 rng(5);
  for (bool eval : {false, true}) {
    NormState s = random_state(rng, 3);
    s.eval = eval;
    const MatrixXd x = random_matrix(rng, 4, 3), w = random_matrix(rng, 4, 3);
    NormState fwd = s;
    const auto f = bn_forward(x, fwd, true);
    const auto g = bn_backward(w, f.cache);
    const double h = 1e-5;
    MatrixXd fd_x(4, 3);
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      MatrixXd xp = x, xm = x;
      xp.data()[i] += h;
      xm.data()[i] -= h;
      fd_x.data()[i] = (bn_loss(xp, s, true, w) - bn_loss(xm, s, true, w)) / (2 * h);
    }
    CHECK(rel(g.grad_x, fd_x) < 1e-4);
    VectorXd fd_g(3), fd_b(3);
    for (Eigen::Index c = 0; c < 3; ++c) {
      NormState p = s, m = s;
      p.gamma(c) += h;
      m.gamma(c) -= h;
      fd_g(c) = (bn_loss(x, p, true, w) - bn_loss(x, m, true, w)) / (2 * h);
      p = s;
      m = s;
      p.beta(c) += h;
      m.beta(c) -= h;
      fd_b(c) = (bn_loss(x, p, true, w) - bn_loss(x, m, true, w)) / (2 * h);
    }
    CHECK(rel(g.grad_gamma, fd_g) < 1e-4);
    CHECK(rel(g.grad_beta, fd_b) < 1e-4);
  }
}

TEST_CASE("bn backward flags and linearity") {
  std::mt19937_64 rng(6);
  NormState s = random_state(rng, 3);
  s.eval = true;
  s.requires_grad = false;
  const MatrixXd x = random_matrix(rng, 4, 3), go = random_matrix(rng, 4, 3);
  const auto g = bn_backward(go, bn_forward(x, s, true).cache);
  CHECK(g.grad_gamma.isZero());
  CHECK(g.grad_beta.isZero());
  CHECK(g.grad_gamma.size() == 3);

  NormState d = s;
  d.gamma *= 2;
  const auto g2 = bn_backward(go, bn_forward(x, d, true).cache);
  CHECK(rel(g2.grad_x, 2 * g.grad_x) < 1e-12);
}

TEST_CASE("frozen bn state never changes") {
  std::mt19937_64 rng(8);
  NormState s = random_state(rng, 4);
  s = NormState::frozen(s.running_mean, s.running_var, s.gamma, s.beta);
  const NormState before = s;
  for (int k = 0; k < 50; ++k) {
    const auto f = bn_forward(random_matrix(rng, 6, 4), s, true);
    bn_backward(random_matrix(rng, 6, 4), f.cache);
  }
  CHECK(s.running_mean == before.running_mean);
  CHECK(s.running_var == before.running_var);
  CHECK(s.gamma == before.gamma);
  CHECK(s.beta == before.beta);
  CHECK(s.momentum == before.momentum);
  CHECK(s.eps == before.eps);
}

TEST_CASE("norm state validation") {
  NormState s = NormState::identity(2);
  s.eps = -1;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s = NormState::identity(2);
  s.momentum = 1.5;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  MatrixXd wrong = MatrixXd::Zero(2, 3);
  NormState two = NormState::identity(2);
  CHECK_THROWS_AS(bn_forward(wrong, two, true), std::invalid_argument);
  CHECK_THROWS_AS(GroupNormSpec::identity(6, 4).validate(6), std::invalid_argument);
}

TEST_CASE("gn forward examples") {
  FeatureMap x(1, 1, 2);
  x.data << 1, 3;
  GroupNormSpec one = GroupNormSpec::identity(1, 1);
  one.eps = 0;
  const auto y = gn_forward(x, one).y;
  CHECK(y.data(0, 0) == doctest::Approx(-1));
  CHECK(y.data(0, 1) == doctest::Approx(1));

  FeatureMap flat(2, 4, 3);
  flat.data.setConstant(7.5);
  CHECK(gn_forward(flat, GroupNormSpec::identity(4, 2)).y.data.isZero());

  std::mt19937_64 rng(12);
  FeatureMap r(3, 6, 5);
  r.data = random_matrix(rng, 18, 5);
  const auto out = gn_forward(r, GroupNormSpec::identity(6, 3)).y;
  for (Eigen::Index n = 0; n < 3; ++n)
    for (Eigen::Index g = 0; g < 3; ++g) {
      const auto block = out.data.middleRows(n * 6 + g * 2, 2);
      const double mean = block.mean();
      const double var = (block.array() - mean).square().mean();
      CHECK(std::abs(mean) < 1e-5);
      CHECK(std::abs(var - 1) < 1e-5 * 10 + 1e-4);  // eps 1e-5 shrinks var slightly
    }
}

TEST_CASE("gn is shift invariant per group") {
  std::mt19937_64 rng(14);
  FeatureMap x(2, 4, 6);
  x.data = random_matrix(rng, 8, 6);
  FeatureMap shifted = x;
  for (Eigen::Index n = 0; n < 2; ++n)
    for (Eigen::Index g = 0; g < 2; ++g) shifted.data.middleRows(n * 4 + g * 2, 2).array() += 3.0 * (n + 1) - g;
  const auto spec = GroupNormSpec::identity(4, 2);
  CHECK((gn_forward(x, spec).y.data - gn_forward(shifted, spec).y.data).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("gn backward") {
  std::mt19937_64 rng(15);
  FeatureMap x(2, 4, 3), w(2, 4, 3);
  x.data = random_matrix(rng, 8, 3);
  w.data = random_matrix(rng, 8, 3);
  GroupNormSpec s = GroupNormSpec::identity(4, 2);
  s.gamma = random_matrix(rng, 4, 1);
  s.beta = random_matrix(rng, 4, 1);
  const auto f = gn_forward(x, s);
  const auto g = gn_backward(w, f.cache);
  const double h = 1e-5;
  MatrixXd fd(8, 3);
  for (Eigen::Index i = 0; i < x.data.size(); ++i) {
    FeatureMap p = x, m = x;
    p.data.data()[i] += h;
    m.data.data()[i] -= h;
    fd.data()[i] = (gn_loss(p, s, w) - gn_loss(m, s, w)) / (2 * h);
  }
  CHECK(rel(g.grad_x.data, fd) < 1e-4);
  VectorXd fd_g(4);
  for (Eigen::Index c = 0; c < 4; ++c) {
    GroupNormSpec p = s, m = s;
    p.gamma(c) += h;
    m.gamma(c) -= h;
    fd_g(c) = (gn_loss(x, p, w) - gn_loss(x, m, w)) / (2 * h);
  }
  CHECK(rel(g.grad_gamma, fd_g) < 1e-4);
  for (Eigen::Index c = 0; c < 4; ++c) {
    const double sum = w.channel(0, c).sum() + w.channel(1, c).sum();
    CHECK(g.grad_beta(c) == doctest::Approx(sum));
  }

  FeatureMap zero(2, 4, 3);
  const auto z = gn_backward(zero, f.cache);
  CHECK(z.grad_x.data.isZero());
  CHECK(z.grad_gamma.isZero());
  CHECK(z.grad_beta.isZero());
}

TEST_CASE("norm kind names") {
  for (auto k : {NormKind::kNone, NormKind::kBatchNorm, NormKind::kFrozenBatchNorm, NormKind::kGroupNorm})
    CHECK(parse_norm_kind(to_string(k)) == k);
  CHECK_THROWS(parse_norm_kind("layer"));
}
