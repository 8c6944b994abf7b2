#include "detcore/oracle.hpp"

#include "detcore/losses.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <ostream>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

namespace detcore {

std::ostream& operator<<(std::ostream& os, const OracleReport& r) {
  os << r.suite << ": " << (r.checked - r.failed) << "/" << r.checked << " passed";
  if (r.suite == "grad") os << ", max relative error " << r.max_error;
  else os << ", max deviation " << r.max_error;
  if (!r.first_failure.empty()) os << "; first failure: " << r.first_failure;
  return os;
}

namespace {

void record(OracleReport& r, bool pass, double err, const std::string& what) {
  ++r.checked;
  r.max_error = std::max(r.max_error, err);
  if (pass) return;
  ++r.failed;
  if (r.first_failure.empty()) r.first_failure = what;
}

std::string describe(const Box& b) {
  std::ostringstream s;
  s << '[' << b.x1 << ',' << b.y1 << ',' << b.x2 << ',' << b.y2 << ']';
  return s.str();
}

}  // namespace

// ---------------------------------------------------------------------------
// References

double pixel_iou(const Box& a, const Box& b, int grid) {
  long inter = 0, uni = 0;
  for (int y = 0; y < grid; ++y) {
    for (int x = 0; x < grid; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      const bool in_a = px > a.x1 && px < a.x2 && py > a.y1 && py < a.y2;
      const bool in_b = px > b.x1 && px < b.x2 && py > b.y1 && py < b.y2;
      inter += in_a && in_b;
      uni += in_a || in_b;
    }
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

std::vector<std::size_t> brute_force_nms(const std::vector<Detection>& dets, double iou_thr) {
  std::vector<bool> alive(dets.size(), true);
  std::vector<std::size_t> keep;
  for (;;) {
    std::size_t best = dets.size();
    for (std::size_t i = 0; i < dets.size(); ++i)
      if (alive[i] && (best == dets.size() || dets[i].score > dets[best].score)) best = i;
    if (best == dets.size()) break;
    keep.push_back(best);
    alive[best] = false;
    const Box& k = dets[best].box;
    for (std::size_t j = 0; j < dets.size(); ++j) {
      if (!alive[j] || dets[j].class_id != dets[best].class_id) continue;
      const Box& o = dets[j].box;
      const double iw = std::max(0.0, std::min(k.x2, o.x2) - std::max(k.x1, o.x1));
      const double ih = std::max(0.0, std::min(k.y2, o.y2) - std::max(k.y1, o.y1));
      const double inter = iw * ih;
      const double uni = (k.x2 - k.x1) * (k.y2 - k.y1) + (o.x2 - o.x1) * (o.y2 - o.y1) - inter;
      if (uni > 0 && inter / uni > iou_thr) alive[j] = false;
    }
  }
  return keep;
}

EvalResult reference_eval(const std::vector<ImageDetection>& dets,
                          const std::vector<GroundTruth>& gts,
                          const std::vector<double>& thresholds) {
  std::set<int> classes;
  for (const auto& g : gts) classes.insert(g.class_id);

  EvalResult out;
  for (double thr : thresholds) {
    double sum = 0;
    for (int cls : classes) {
      std::vector<const ImageDetection*> ranked;
      for (const auto& d : dets)
        if (d.det.class_id == cls) ranked.push_back(&d);
      std::stable_sort(ranked.begin(), ranked.end(), [](auto* a, auto* b) {
        return a->det.score > b->det.score;
      });
      std::size_t n_gt = 0;
      for (const auto& g : gts) n_gt += g.class_id == cls;

      std::set<const GroundTruth*> used;
      std::vector<double> recall, precision;
      std::size_t tp = 0;
      for (std::size_t r = 0; r < ranked.size(); ++r) {
        const GroundTruth* hit = nullptr;
        double hit_iou = -1;
        for (const auto& g : gts) {
          if (g.class_id != cls || g.image_id != ranked[r]->image_id || used.count(&g)) continue;
          const double ov = iou(ranked[r]->det.box, g.box);
          if (ov >= thr && ov > hit_iou) {
            hit = &g;
            hit_iou = ov;
          }
        }
        if (hit) {
          used.insert(hit);
          ++tp;
        }
        recall.push_back(double(tp) / double(n_gt));
        precision.push_back(double(tp) / double(r + 1));
      }
      double ap = 0;
      for (int i = 0; i <= 100; ++i) {
        const double level = i / 100.0;
        double best = 0;
        for (std::size_t r = 0; r < recall.size(); ++r)
          if (recall[r] >= level) best = std::max(best, precision[r]);
        ap += best;
      }
      sum += ap / 101.0;
    }
    out.ap_per_threshold[thr] = classes.empty() ? 0.0 : sum / double(classes.size());
  }
  double total = 0;
  for (const auto& [thr, ap] : out.ap_per_threshold) total += ap;
  out.map = thresholds.empty() ? 0.0 : total / double(thresholds.size());
  return out;
}

// ---------------------------------------------------------------------------
// Suites

OracleReport iou_suite(std::uint64_t seed, std::size_t cases, IouFn fn) {
  if (!fn) fn = [](const Box& a, const Box& b) { return iou(a, b); };
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> coord(0, 64);
  auto draw = [&] {
    int a = coord(rng), b = coord(rng), c = coord(rng), d = coord(rng);
    while (a == b) b = coord(rng);
    while (c == d) d = coord(rng);
    return Box{double(std::min(a, b)), double(std::min(c, d)), double(std::max(a, b)),
               double(std::max(c, d))};
  };
  OracleReport r;
  r.suite = "iou";
  for (std::size_t i = 0; i < cases; ++i) {
    const Box a = draw(), b = draw();
    const double want = pixel_iou(a, b);
    const double got = fn(a, b);
    record(r, got == want, std::abs(got - want),
           "iou " + describe(a) + " " + describe(b) + " = " + std::to_string(got) +
               ", pixels give " + std::to_string(want));

    const Box hull = enclosing(a, b);
    const double u = area(a) + area(b) - intersection_area(a, b);
    const double c = area(hull);
    const double hand = want - (c - u) / c;
    const double g = giou(a, b);
    record(r, std::abs(g - hand) <= 1e-9, std::abs(g - hand),
           "giou " + describe(a) + " " + describe(b));
  }
  return r;
}

OracleReport nms_suite(std::uint64_t seed, std::size_t instances, NmsFn fn) {
  if (!fn) fn = [](const std::vector<Detection>& d, double t) { return nms(d, t); };
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> count(0, 100);
  std::uniform_real_distribution<double> pos(0, 100), size(5, 40), jitter(-6, 6);
  std::uniform_int_distribution<int> cls(0, 2), coarse(0, 9), cluster(0, 4);
  std::bernoulli_distribution tie(0.3);
  const double thresholds[] = {0.3, 0.5, 0.7};
  OracleReport r;
  r.suite = "nms";
  for (std::size_t n = 0; n < instances; ++n) {
    // Boxes gather around a few centres so suppression actually happens;
    // coarse scores force ties.
    std::vector<Box> centres;
    for (int c = 0; c < 5; ++c) {
      const double x = pos(rng), y = pos(rng), w = size(rng), h = size(rng);
      centres.push_back({x, y, x + w, y + h});
    }
    std::vector<Detection> dets(static_cast<std::size_t>(count(rng)));
    for (auto& d : dets) {
      const Box& c = centres[static_cast<std::size_t>(cluster(rng))];
      const double x1 = c.x1 + jitter(rng), y1 = c.y1 + jitter(rng);
      d.box = {x1, y1, std::max(x1 + 1, c.x2 + jitter(rng)), std::max(y1 + 1, c.y2 + jitter(rng))};
      d.score = tie(rng) ? coarse(rng) / 10.0 : std::uniform_real_distribution<double>(0, 1)(rng);
      d.class_id = cls(rng);
    }
    const double thr = thresholds[n % 3];
    const auto want = brute_force_nms(dets, thr);
    const auto got = fn(dets, thr);
    record(r, got == want, got == want ? 0.0 : 1.0,
           "instance " + std::to_string(n) + " (" + std::to_string(dets.size()) +
               " boxes): kept " + std::to_string(got.size()) + ", reference kept " +
               std::to_string(want.size()));

    std::vector<Detection> kept;
    for (std::size_t i : got) kept.push_back(dets[i]);
    const auto again = fn(kept, thr);
    bool idem = again.size() == kept.size();
    for (std::size_t i = 0; idem && i < again.size(); ++i) idem = again[i] == i;
    record(r, idem, idem ? 0.0 : 1.0, "instance " + std::to_string(n) + " not idempotent");
  }
  return r;
}

namespace {

constexpr double kFdStep = 1e-5;
constexpr double kFdTol = 1e-4;

double rel_error(const Vec4<double>& analytic, const Vec4<double>& numeric) {
  const double scale = std::max({analytic.norm(), numeric.norm(), 1e-8});
  return (analytic - numeric).norm() / scale;
}

template <typename Fn>
Vec4<double> central_diff(const Vec4<double>& at, Fn&& value) {
  Vec4<double> g;
  for (int i = 0; i < 4; ++i) {
    Vec4<double> hi = at, lo = at;
    hi(i) += kFdStep;
    lo(i) -= kFdStep;
    g(i) = (value(hi) - value(lo)) / (2 * kFdStep);
  }
  return g;
}

Box as_box(const Vec4<double>& v) { return {v(0), v(1), v(2), v(3)}; }

// Keeps sample points away from the kinks of each loss. Smooth L1 and
// balanced L1 are C1 everywhere and get no exclusions.
bool far_from(double v, const std::vector<double>& seams) {
  return std::all_of(seams.begin(), seams.end(), [&](double s) { return std::abs(v - s) > 1e-3; });
}

}  // namespace

OracleReport grad_suite(std::uint64_t seed, std::size_t points) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> res(-3, 3), unit(0, 1);
  OracleReport r;
  r.suite = "grad";

  const double beta = 1.0 / 9.0, alpha = 0.5, gamma = 1.5;
  struct Residual {
    const char* name;
    std::function<BoxLoss<double>(const Vec4<double>&)> fn;
    std::vector<double> seams;
  };
  const Residual residual_losses[] = {
      {"smooth_l1",
       [&](const Vec4<double>& x) {
         return elementwise(x, [&](double v) { return smooth_l1(v, beta); });
       },
       {}},
      {"l1", [](const Vec4<double>& x) { return elementwise(x, [](double v) { return l1(v); }); },
       {0.0}},
      {"balanced_l1",
       [&](const Vec4<double>& x) {
         return elementwise(x, [&](double v) { return balanced_l1(v, alpha, gamma); });
       },
       {}},
  };
  for (const auto& loss : residual_losses) {
    for (std::size_t p = 0; p < points; ++p) {
      Vec4<double> x;
      for (int i = 0; i < 4; ++i) {
        do x(i) = res(rng);
        while (!far_from(x(i), loss.seams));
      }
      const auto out = loss.fn(x);
      const auto fd = central_diff(x, [&](const Vec4<double>& v) { return loss.fn(v).value; });
      const double err = rel_error(out.grad, fd);
      record(r, err < kFdTol, err, std::string(loss.name) + " point " + std::to_string(p));
    }
  }

  // Box losses: overlapping pred/target pairs with no coincident edges.
  std::uniform_real_distribution<double> origin(0, 40), extent(6, 30), shift(-0.35, 0.35);
  auto draw_pair = [&]() {
    for (;;) {
      const double tx = origin(rng), ty = origin(rng), tw = extent(rng), th = extent(rng);
      const Box t{tx, ty, tx + tw, ty + th};
      const Box p{tx + shift(rng) * tw, ty + shift(rng) * th, tx + tw + shift(rng) * tw,
                  ty + th + shift(rng) * th};
      if (p.width() < 1 || p.height() < 1 || iou(p, t) < 0.05) continue;
      const double ox = p.cx() - t.cx(), oy = p.cy() - t.cy();
      const bool clean = far_from(p.x1, {t.x1, t.x2}) && far_from(p.x2, {t.x1, t.x2}) &&
                         far_from(p.y1, {t.y1, t.y2}) && far_from(p.y2, {t.y1, t.y2}) &&
                         far_from(ox, {0.0, t.width() / 2, -t.width() / 2}) &&
                         far_from(oy, {0.0, t.height() / 2, -t.height() / 2}) &&
                         far_from(p.width(), {t.width()}) && far_from(p.height(), {t.height()});
      if (clean) return std::make_pair(p, t);
    }
  };
  struct BoxCase {
    const char* name;
    std::function<BoxLoss<double>(const Box&, const Box&, std::size_t)> fn;
  };
  const BoxCase box_losses[] = {
      {"iou",
       [](const Box& p, const Box& t, std::size_t k) {
         return iou_loss(p, t, k % 2 ? IouMode::kLinear : IouMode::kLog);
       }},
      {"giou", [](const Box& p, const Box& t, std::size_t) { return giou_loss(p, t); }},
      {"bounded_iou",
       [](const Box& p, const Box& t, std::size_t) { return bounded_iou_loss(p, t, 0.2); }},
  };
  for (const auto& loss : box_losses) {
    for (std::size_t p = 0; p < points; ++p) {
      const auto [pred, target] = draw_pair();
      const Vec4<double> v(pred.x1, pred.y1, pred.x2, pred.y2);
      const auto out = loss.fn(pred, target, p);
      const auto fd = central_diff(
          v, [&](const Vec4<double>& q) { return loss.fn(as_box(q), target, p).value; });
      const double err = rel_error(out.grad, fd);
      record(r, err < kFdTol && !out.floored, err,
             std::string(loss.name) + " pred " + describe(pred) + " target " + describe(target));
    }
  }

  // Smooth L1 joins its two branches at |x| = beta in value and slope.
  for (double b : {1.0, 1.0 / 9.0, 0.2, 1e-3}) {
    for (double s : {1.0, -1.0}) {
      const auto inner = smooth_l1(std::nextafter(s * b, 0.0), b);
      const auto outer = smooth_l1(s * b, b);
      const double dv = std::abs(inner.value - outer.value);
      const double dg = std::abs(inner.grad(0) - outer.grad(0));
      record(r, dv <= 1e-9 && dg <= 1e-9, 0.0,
             "smooth_l1 joint at beta=" + std::to_string(b));
    }
  }
  return r;
}

OracleReport map_suite(std::uint64_t seed, std::size_t scenes, MapFn fn) {
  if (!fn) fn = [](const std::vector<ImageDetection>& d, const std::vector<GroundTruth>& g) {
    return eval_map(d, g);
  };
  std::mt19937_64 rng(seed);
  // Up to 5 images with at most 4 gts and 10 detections each.
  std::uniform_int_distribution<int> n_images(1, 5), n_gt(0, 4), n_extra(0, 2), cls(0, 2);
  std::uniform_real_distribution<double> pos(0, 60), size(8, 30), jitter(-5, 5), unit(0, 1);
  OracleReport r;
  r.suite = "map";
  for (std::size_t s = 0; s < scenes; ++s) {
    std::vector<GroundTruth> gts;
    std::vector<ImageDetection> dets;
    const int images = n_images(rng);
    for (int im = 0; im < images; ++im) {
      for (int g = n_gt(rng); g > 0; --g) {
        const double x = pos(rng), y = pos(rng);
        const GroundTruth gt{im, {x, y, x + size(rng), y + size(rng)}, cls(rng)};
        gts.push_back(gt);
        // Near-hits of varying quality, sometimes with the wrong class.
        for (int k = n_extra(rng) % 2; k >= 0; --k) {
          const Box& b = gt.box;
          const double x1 = b.x1 + jitter(rng), y1 = b.y1 + jitter(rng);
          const Box d{x1, y1, std::max(x1 + 2, b.x2 + jitter(rng)), std::max(y1 + 2, b.y2 + jitter(rng))};
          dets.push_back({im, {d, unit(rng), unit(rng) < 0.8 ? gt.class_id : cls(rng)}});
        }
      }
      for (int k = n_extra(rng); k > 0; --k) {
        const double x = pos(rng), y = pos(rng);
        dets.push_back({im, {{x, y, x + size(rng), y + size(rng)}, unit(rng), cls(rng)}});
      }
    }
    const auto want = reference_eval(dets, gts);
    const auto got = fn(dets, gts);
    double dev = std::abs(got.map - want.map);
    bool same_keys = got.ap_per_threshold.size() == want.ap_per_threshold.size();
    for (const auto& [thr, ap] : want.ap_per_threshold) {
      auto it = got.ap_per_threshold.find(thr);
      if (it == got.ap_per_threshold.end()) same_keys = false;
      else dev = std::max(dev, std::abs(it->second - ap));
    }
    record(r, same_keys && dev <= 1e-9, dev,
           "scene " + std::to_string(s) + ": mAP " + std::to_string(got.map) + ", reference " +
               std::to_string(want.map));
  }
  return r;
}

OracleReport run_oracle(const std::string& suite, std::uint64_t seed) {
  if (suite == "iou") return iou_suite(seed);
  if (suite == "nms") return nms_suite(seed);
  if (suite == "grad") return grad_suite(seed);
  if (suite == "map") return map_suite(seed);
  throw std::invalid_argument("unknown oracle suite '" + suite + "' (iou, nms, grad, map)");
}

}  // namespace detcore
