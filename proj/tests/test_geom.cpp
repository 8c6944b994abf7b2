#include "detcore/geom.hpp"

#include "doctest.h"

#include <cmath>
#include <random>
#include <vector>

using namespace detcore;

namespace {

// Counts unit pixels whose centres fall inside the box. Exact for integer boxes.
int pixels(const Box& a, const Box& b, bool want_union) {
  int n = 0;
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      const bool ina = px > a.x1 && px < a.x2 && py > a.y1 && py < a.y2;
      const bool inb = px > b.x1 && px < b.x2 && py > b.y1 && py < b.y2;
      n += want_union ? (ina || inb) : (ina && inb);
    }
  return n;
}

Box random_int_box(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> c(0, 64);
  int x1 = c(rng), x2 = c(rng), y1 = c(rng), y2 = c(rng);
  if (x1 > x2) std::swap(x1, x2);
  if (y1 > y2) std::swap(y1, y2);
  return {double(x1), double(y1), double(x2), double(y2)};
}

}  // namespace

TEST_CASE("area") {
  CHECK(area(Box{0, 0, 10, 10}) == 100);
  CHECK(area(Box{3, 3, 3, 9}) == 0);
  CHECK(area(clip(Box{0, 0, 10, 10}, 8.0, 8.0)) == 64);
}

TEST_CASE("iou examples") {
  CHECK(iou(Box{0, 0, 10, 10}, Box{0, 0, 10, 10}) == 1.0);
  CHECK(iou(Box{0, 0, 1, 1}, Box{2, 2, 3, 3}) == 0.0);
  CHECK(iou(Box{0, 0, 10, 10}, Box{5, 5, 15, 15}) == doctest::Approx(25.0 / 175.0).epsilon(1e-15));
  CHECK(iou(Box{3, 3, 3, 3}, Box{3, 3, 3, 3}) == 0.0);
}

TEST_CASE("iou agrees with pixel counting") {
  std::mt19937_64 rng(7);
  for (int t = 0; t < 1000; ++t) {
    const Box a = random_int_box(rng), b = random_int_box(rng);
    const int u = pixels(a, b, true);
    const double expect = u == 0 ? 0.0 : double(pixels(a, b, false)) / u;
    REQUIRE(iou(a, b) == doctest::Approx(expect).epsilon(1e-12));
    CHECK(iou(a, b) == iou(b, a));
    CHECK(iou(a, b) >= 0.0);
    CHECK(iou(a, b) <= 1.0);
    CHECK(giou(a, b) <= iou(a, b) + 1e-15);
  }
}

TEST_CASE("iou_matrix") {
  const std::vector<Box> one{{0, 0, 4, 4}};
  const std::vector<Box> none;
  const auto m11 = iou_matrix(one, one);
  CHECK(m11.rows() == 1);
  CHECK(m11.cols() == 1);
  CHECK(m11(0, 0) == 1.0);
  const auto m10 = iou_matrix(one, none);
  CHECK(m10.rows() == 1);
  CHECK(m10.cols() == 0);

  std::mt19937_64 rng(11);
  std::vector<Box> a, b;
  for (int i = 0; i < 20; ++i) a.push_back(random_int_box(rng));
  for (int j = 0; j < 30; ++j) b.push_back(random_int_box(rng));
  const auto m = iou_matrix(a, b);
  REQUIRE(m.rows() == 20);
  REQUIRE(m.cols() == 30);
  for (int i = 0; i < 20; ++i)
    for (int j = 0; j < 30; ++j) CHECK(m(i, j) == iou(a[i], b[j]));
}

TEST_CASE("giou") {
  CHECK(giou(Box{1, 2, 5, 7}, Box{1, 2, 5, 7}) == 1.0);
  CHECK(giou(Box{0, 0, 1, 1}, Box{2, 0, 3, 1}) == doctest::Approx(-1.0 / 3.0));
  // hand value: 1/7 - 50/225
  CHECK(giou(Box{0, 0, 10, 10}, Box{5, 5, 15, 15}) ==
        doctest::Approx(1.0 / 7.0 - 50.0 / 225.0).epsilon(1e-12));
  CHECK(giou(Box{0, 0, 10, 10}, Box{5, 5, 15, 15}) == doctest::Approx(-0.079365).epsilon(1e-5));
  // C equals the union here, so giou collapses to iou.
  CHECK(giou(Box{0, 0, 10, 10}, Box{0, 0, 10, 5}) == iou(Box{0, 0, 10, 10}, Box{0, 0, 10, 5}));
}

TEST_CASE("clip") {
  CHECK(clip(Box{-5, -5, 5, 5}, 100.0, 100.0) == Box{0, 0, 5, 5});
  CHECK(clip(Box{0, 0, 10, 10}, 100.0, 100.0) == Box{0, 0, 10, 10});
  CHECK(clip(Box{90, 90, 120, 130}, 100.0, 100.0) == Box{90, 90, 100, 100});
}

TEST_CASE("encode and decode") {
  const Box a{0, 0, 10, 10};
  CHECK(encode_delta(a, a).isZero());
  const Delta d = encode_delta(a, Box{5, 0, 15, 10});
  CHECK(d(0) == 0.5);
  CHECK(d(1) == 0.0);
  CHECK(d(2) == 0.0);
  CHECK(d(3) == 0.0);

  CHECK(decode_delta(a, Delta(Delta::Zero())) == a);
  Delta grow;
  grow << 0, 0, std::log(2.0), std::log(2.0);
  const Box g = decode_delta(a, grow);
  CHECK(g.x1 == doctest::Approx(-5));
  CHECK(g.y1 == doctest::Approx(-5));
  CHECK(g.x2 == doctest::Approx(15));
  CHECK(g.y2 == doctest::Approx(15));
  CHECK(decode_delta(a, grow, std::pair{12.0, 12.0}) == Box{0, 0, 12, 12});

  CHECK_THROWS_AS(encode_delta(Box{0, 0, 0, 5}, a), std::invalid_argument);
  CHECK_THROWS_AS(encode_delta(a, Box{1, 1, 1, 4}), std::invalid_argument);
  Delta bad = Delta::Zero();
  bad(2) = std::nan("");
  CHECK_THROWS_AS(decode_delta(a, bad), std::invalid_argument);
}

TEST_CASE("encode/decode round trip") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> pos(0, 500), size(10, 300);  // ratios stay inside the decode clamp
  double worst = 0;
  for (int t = 0; t < 1000; ++t) {
    const double ax = pos(rng), ay = pos(rng), gx = pos(rng), gy = pos(rng);
    const Box an{ax, ay, ax + size(rng), ay + size(rng)};
    const Box gt{gx, gy, gx + size(rng), gy + size(rng)};
    DeltaNorm norm;
    norm.means << 0.1, -0.2, 0.05, 0.0;
    norm.stds << 0.1, 0.1, 0.2, 0.2;
    const bool use_norm = t % 2;
    const Box back = use_norm ? decode_delta(an, encode_delta(an, gt, norm), std::nullopt, norm)
                              : decode_delta(an, encode_delta(an, gt));
    worst = std::max({worst, std::abs(back.x1 - gt.x1), std::abs(back.y1 - gt.y1),
                      std::abs(back.x2 - gt.x2), std::abs(back.y2 - gt.y2)});
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("decode clamps extreme log ratios") {
  Delta huge = Delta::Zero();
  huge(2) = 50;
  huge(3) = -50;
  const Box b = decode_delta(Box{0, 0, 16, 16}, huge);
  CHECK(b.valid());
  CHECK(b.width() == doctest::Approx(1000.0));
  CHECK(b.height() == doctest::Approx(0.256));
}

TEST_CASE("decode_jacobian matches finite differences") {
  const Box a{3, 4, 20, 13};
  Delta d;
  d << 0.1, -0.3, 0.4, -0.2;
  const auto jac = decode_jacobian(a, d);
  const double h = 1e-6;
  for (int k = 0; k < 4; ++k) {
    Delta dp = d, dm = d;
    dp(k) += h;
    dm(k) -= h;
    const Box bp = decode_delta(a, dp), bm = decode_delta(a, dm);
    const Vec4<double> fd = (Vec4<double>(bp.x1, bp.y1, bp.x2, bp.y2) -
                             Vec4<double>(bm.x1, bm.y1, bm.x2, bm.y2)) / (2 * h);
    CHECK((fd - jac.col(k)).norm() < 1e-5);
  }
}
