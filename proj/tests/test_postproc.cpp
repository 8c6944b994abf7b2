#include "detcore/postproc.hpp"

#include "doctest.h"

#include <cmath>
#include <random>

using namespace detcore;

namespace {

// Quadratic reference: repeatedly take the best remaining detection (lowest
// index on ties) and drop same-class overlaps above the threshold.
std::vector<std::size_t> slow_nms(const std::vector<Detection>& d, double thr) {
  std::vector<bool> alive(d.size(), true);
  std::vector<std::size_t> keep;
  for (;;) {
    std::size_t best = d.size();
    for (std::size_t i = 0; i < d.size(); ++i)
      if (alive[i] && (best == d.size() || d[i].score > d[best].score)) best = i;
    if (best == d.size()) return keep;
    keep.push_back(best);
    alive[best] = false;
    for (std::size_t i = 0; i < d.size(); ++i)
      if (alive[i] && d[i].class_id == d[best].class_id && iou(d[i].box, d[best].box) > thr)
        alive[i] = false;
  }
}

std::vector<Detection> random_dets(std::mt19937_64& rng, std::size_t n) {
  std::uniform_real_distribution<double> c(0, 60), s(4, 30), sc(0, 1);
  std::uniform_int_distribution<int> cls(0, 2), coarse(0, 4);
  std::vector<Detection> out;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = c(rng), y = c(rng);
    // coarse scores make ties common
    const double score = i % 3 == 0 ? coarse(rng) / 4.0 : sc(rng);
    out.push_back({{x, y, x + s(rng), y + s(rng)}, score, cls(rng)});
  }
  return out;
}

}  // namespace

TEST_CASE("nms examples") {
  const std::vector<Detection> one{{{0, 0, 5, 5}, 0.3, 0}};
  CHECK(nms(one, 0.5) == std::vector<std::size_t>{0});

  // B overlaps A with iou 0.8
  const std::vector<Detection> abc{{{0, 0, 10, 10}, 0.9, 0},
                                   {{0, 0, 10, 8}, 0.8, 0},
                                   {{50, 50, 60, 60}, 0.7, 0}};
  CHECK(iou(abc[0].box, abc[1].box) == doctest::Approx(0.8));
  CHECK(nms(abc, 0.5) == std::vector<std::size_t>{0, 2});

  const std::vector<Detection> twins{{{0, 0, 10, 10}, 0.9, 0}, {{0, 0, 10, 10}, 0.8, 1}};
  CHECK(nms(twins, 0.5) == std::vector<std::size_t>{0, 1});

  // equal scores: the lower index is kept
  const std::vector<Detection> tie{{{0, 0, 10, 10}, 0.5, 0}, {{0, 0, 10, 10}, 0.5, 0}};
  CHECK(nms(tie, 0.5) == std::vector<std::size_t>{0});

  // suppression needs strictly more than the threshold
  const std::vector<Detection> edge{{{0, 0, 10, 10}, 0.9, 0}, {{0, 0, 10, 5}, 0.8, 0}};
  CHECK(nms(edge, 0.5).size() == 2);

  CHECK(nms({}, 0.5).empty());
  CHECK_THROWS_AS(nms(abc, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(nms(abc, 1.0), std::invalid_argument);
}

TEST_CASE("nms matches the quadratic reference") {
  std::mt19937_64 rng(13);
  for (int t = 0; t < 300; ++t) {
    const auto dets = random_dets(rng, std::uniform_int_distribution<std::size_t>(0, 100)(rng));
    for (double thr : {0.3, 0.5, 0.7}) {
      const auto keep = nms(dets, thr);
      REQUIRE(keep == slow_nms(dets, thr));
      // idempotent
      std::vector<Detection> kept;
      for (std::size_t i : keep) kept.push_back(dets[i]);
      const auto again = nms(kept, thr);
      REQUIRE(again.size() == kept.size());
      for (std::size_t i = 0; i < again.size(); ++i) CHECK(again[i] == i);
    }
  }
}

TEST_CASE("soft nms examples") {
  const std::vector<Detection> apart{{{0, 0, 5, 5}, 0.9, 0}, {{10, 10, 15, 15}, 0.4, 0}};
  const auto same = soft_nms(apart);
  REQUIRE(same.dets.size() == 2);
  CHECK(same.dets[0].score == 0.9);
  CHECK(same.dets[1].score == 0.4);

  const std::vector<Detection> pair{{{0, 0, 10, 10}, 0.9, 0}, {{0, 0, 10, 8}, 0.8, 0}};
  SoftNmsParams lin;
  const auto l = soft_nms(pair, lin);
  REQUIRE(l.dets.size() == 2);
  CHECK(l.dets[1].score == doctest::Approx(0.16));
  CHECK(l.indices[1] == 1);

  SoftNmsParams gau;
  gau.method = SoftNmsMethod::kGaussian;
  gau.sigma = 0.5;
  const auto g = soft_nms(pair, gau);
  REQUIRE(g.dets.size() == 2);
  CHECK(g.dets[1].score == doctest::Approx(0.8 * std::exp(-1.28)));
  CHECK(g.dets[1].score == doctest::Approx(0.2224).epsilon(1e-3));

  // a decayed score under score_thr is dropped
  SoftNmsParams harsh;
  harsh.score_thr = 0.2;
  CHECK(soft_nms(pair, harsh).dets.size() == 1);

  // other classes are untouched
  const std::vector<Detection> cross{{{0, 0, 10, 10}, 0.9, 0}, {{0, 0, 10, 8}, 0.8, 1}};
  CHECK(soft_nms(cross).dets[1].score == 0.8);

  CHECK_THROWS_AS(soft_nms(pair, {SoftNmsMethod::kGaussian, 0.5, 0.0, 1e-3}), std::invalid_argument);
}

TEST_CASE("soft nms properties") {
  std::mt19937_64 rng(31);
  for (int t = 0; t < 200; ++t) {
    const auto dets = random_dets(rng, 40);
    SoftNmsParams p;
    p.method = t % 2 ? SoftNmsMethod::kGaussian : SoftNmsMethod::kLinear;
    const auto r = soft_nms(dets, p);
    for (std::size_t k = 0; k < r.dets.size(); ++k) {
      CHECK(r.dets[k].score <= dets[r.indices[k]].score);
      CHECK(r.dets[k].score >= p.score_thr);
    }
    // selection order is non-increasing: each pick was the max remaining
    for (std::size_t k = 1; k < r.dets.size(); ++k) CHECK(r.dets[k].score <= r.dets[k - 1].score);

    SoftNmsParams off;
    off.iou_thr = 1.0;
    off.score_thr = 0;
    const auto u = soft_nms(dets, off);
    REQUIRE(u.dets.size() == dets.size());
    for (std::size_t k = 0; k < u.dets.size(); ++k) CHECK(u.dets[k].score == dets[u.indices[k]].score);
  }
}

TEST_CASE("topk filter") {
  const std::vector<Detection> d{{{0, 0, 1, 1}, 0.9, 0}, {{0, 0, 1, 1}, 0.5, 0}, {{0, 0, 1, 1}, 0.1, 0}};
  CHECK(topk_filter(d, 0.2, 0).empty());
  const auto two = topk_filter(d, 0.2, 5);
  REQUIRE(two.size() == 2);
  CHECK(two[0].score == 0.9);
  CHECK(two[1].score == 0.5);
  CHECK(topk_filter(d, 0.0, 2).size() == 2);

  const std::vector<Detection> ties{{{0, 0, 1, 1}, 0.5, 0}, {{0, 0, 2, 2}, 0.7, 0}, {{0, 0, 3, 3}, 0.5, 0}};
  const auto t = topk_filter(ties, 0.0, 3);
  CHECK(t[0] == ties[1]);
  CHECK(t[1] == ties[0]);
  CHECK(t[2] == ties[2]);
}
