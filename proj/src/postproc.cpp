#include "detcore/postproc.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace detcore {

std::vector<std::size_t> score_order(const std::vector<Detection>& dets) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return dets[a].score > dets[b].score;
  });
  return order;
}

std::vector<std::size_t> nms(const std::vector<Detection>& dets, double iou_thr) {
  if (!(iou_thr > 0 && iou_thr < 1))
    throw std::invalid_argument("nms: iou_thr must be in (0, 1)");
  const auto order = score_order(dets);
  const std::size_t n = order.size();

  // Structure-of-arrays copy in rank order keeps the inner loop tight.
  std::vector<double> x1(n), y1(n), x2(n), y2(n), areas(n);
  std::vector<int> cls(n);
  for (std::size_t r = 0; r < n; ++r) {
    const Detection& d = dets[order[r]];
    x1[r] = d.box.x1;
    y1[r] = d.box.y1;
    x2[r] = d.box.x2;
    y2[r] = d.box.y2;
    areas[r] = area(d.box);
    cls[r] = d.class_id;
  }

  // Ranks sorted by x1: only boxes with x1 in (ix1 - max_w, ix2) can overlap
  // box i, which prunes most pairs when boxes are spread out.
  std::vector<std::size_t> by_x(n);
  std::iota(by_x.begin(), by_x.end(), std::size_t{0});
  std::sort(by_x.begin(), by_x.end(), [&](std::size_t a, std::size_t b) {
    return x1[a] < x1[b] || (x1[a] == x1[b] && a < b);
  });
  std::vector<double> sorted_x1(n);
  double max_w = 0;
  for (std::size_t k = 0; k < n; ++k) {
    sorted_x1[k] = x1[by_x[k]];
    max_w = std::max(max_w, x2[k] - x1[k]);
  }

  std::vector<char> suppressed(n, 0);
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < n; ++i) {
    if (suppressed[i]) continue;
    keep.push_back(order[i]);
    const double ix1 = x1[i], iy1 = y1[i], ix2 = x2[i], iy2 = y2[i];
    const double ia = areas[i];
    const int ic = cls[i];
    const auto lo = std::upper_bound(sorted_x1.begin(), sorted_x1.end(), ix1 - max_w);
    const auto hi = std::lower_bound(lo, sorted_x1.end(), ix2);
    for (auto k = lo; k != hi; ++k) {
      const std::size_t j = by_x[static_cast<std::size_t>(k - sorted_x1.begin())];
      if (j <= i || suppressed[j] || cls[j] != ic) continue;
      const double iw = std::min(ix2, x2[j]) - std::max(ix1, x1[j]);
      if (iw <= 0) continue;
      const double ih = std::min(iy2, y2[j]) - std::max(iy1, y1[j]);
      if (ih <= 0) continue;
      const double inter = iw * ih;
      const double uni = ia + areas[j] - inter;
      if (uni > 0 && inter / uni > iou_thr) suppressed[j] = 1;
    }
  }
  return keep;
}

SoftNmsResult soft_nms(const std::vector<Detection>& dets, const SoftNmsParams& params) {
  if (!(params.iou_thr > 0 && params.iou_thr <= 1))
    throw std::invalid_argument("soft_nms: iou_thr must be in (0, 1]");
  if (!(params.sigma > 0)) throw std::invalid_argument("soft_nms: sigma must be > 0");
  if (!(params.score_thr >= 0)) throw std::invalid_argument("soft_nms: score_thr must be >= 0");

  struct Live {
    std::size_t index;
    double score;
  };
  std::vector<Live> live;
  live.reserve(dets.size());
  for (std::size_t i = 0; i < dets.size(); ++i)
    if (dets[i].score >= params.score_thr) live.push_back({i, dets[i].score});

  SoftNmsResult out;
  while (!live.empty()) {
    // live stays in index order, so the first maximum has the lowest index.
    auto best = std::max_element(live.begin(), live.end(), [](const Live& a, const Live& b) {
      return a.score < b.score;
    });
    const Live cur = *best;
    live.erase(best);
    Detection kept = dets[cur.index];
    kept.score = cur.score;
    out.dets.push_back(kept);
    out.indices.push_back(cur.index);

    std::vector<Live> next;
    next.reserve(live.size());
    for (Live l : live) {
      const Detection& d = dets[l.index];
      if (d.class_id == kept.class_id) {
        const double ov = iou(kept.box, d.box);
        if (params.method == SoftNmsMethod::kLinear) {
          if (ov > params.iou_thr) l.score *= 1.0 - ov;
        } else {
          l.score *= std::exp(-(ov * ov) / params.sigma);
        }
      }
      if (l.score >= params.score_thr) next.push_back(l);
    }
    live = std::move(next);
  }
  return out;
}

std::vector<Detection> topk_filter(const std::vector<Detection>& dets,
                                   double score_thr, std::size_t k) {
  std::vector<Detection> out;
  for (std::size_t i : score_order(dets)) {
    if (out.size() >= k) break;
    if (dets[i].score >= score_thr) out.push_back(dets[i]);
  }
  return out;
}

}  // namespace detcore
