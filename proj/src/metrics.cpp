#include "detcore/metrics.hpp"

#include <algorithm>
#include <numeric>
#include <set>
#include <stdexcept>
#include <tuple>

namespace detcore {

std::vector<double> coco_iou_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back((50 + 5 * i) / 100.0);
  return t;
}

std::vector<bool> match_detections(const std::vector<Detection>& dets,
                                   const std::vector<Box>& gts, double iou_thr) {
  std::vector<bool> tp(dets.size(), false);
  std::vector<bool> taken(gts.size(), false);
  for (std::size_t d : score_order(dets)) {
    int best = -1;
    double best_iou = iou_thr;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (taken[g]) continue;
      const double ov = iou(dets[d].box, gts[g]);
      if (ov >= best_iou && (best < 0 || ov > best_iou)) {
        best = static_cast<int>(g);
        best_iou = ov;
      }
    }
    if (best >= 0) {
      taken[best] = true;
      tp[d] = true;
    }
  }
  return tp;
}

double average_precision(const std::vector<double>& recalls,
                         const std::vector<double>& precisions) {
  if (recalls.size() != precisions.size())
    throw std::invalid_argument("average_precision: length mismatch");
  if (!std::is_sorted(recalls.begin(), recalls.end()))
    throw std::invalid_argument("average_precision: recalls must be non-decreasing");
  std::vector<double> envelope = precisions;
  for (std::size_t i = envelope.size(); i-- > 1;)
    envelope[i - 1] = std::max(envelope[i - 1], envelope[i]);
  double sum = 0;
  for (int i = 0; i <= 100; ++i) {
    const double r = i / 100.0;
    auto it = std::lower_bound(recalls.begin(), recalls.end(), r);
    if (it != recalls.end()) sum += envelope[static_cast<std::size_t>(it - recalls.begin())];
  }
  return sum / 101.0;
}

namespace {

// Canonical order so results do not depend on the caller's input order.
bool canonical_less(const ImageDetection& a, const ImageDetection& b) {
  const auto key = [](const ImageDetection& d) {
    return std::make_tuple(-d.det.score, d.image_id, d.det.class_id, d.det.box.x1,
                           d.det.box.y1, d.det.box.x2, d.det.box.y2);
  };
  return key(a) < key(b);
}

struct ClassSlice {
  // image id -> boxes / detections of this class
  std::map<int, std::vector<Box>> gts;
  std::map<int, std::vector<Detection>> dets;
  std::size_t num_gts{0};
};

}  // namespace

EvalResult eval_map(const std::vector<ImageDetection>& dets,
                    const std::vector<GroundTruth>& gts,
                    const std::vector<double>& thresholds) {
  std::map<int, ClassSlice> slices;
  for (const auto& g : gts) {
    auto& s = slices[g.class_id];
    s.gts[g.image_id].push_back(g.box);
    ++s.num_gts;
  }
  std::vector<ImageDetection> sorted = dets;
  std::stable_sort(sorted.begin(), sorted.end(), canonical_less);
  for (const auto& d : sorted) {
    auto it = slices.find(d.det.class_id);
    if (it != slices.end()) it->second.dets[d.image_id].push_back(d.det);
  }

  EvalResult result;
  for (double thr : thresholds) {
    double class_sum = 0;
    for (const auto& [cls, slice] : slices) {
      struct Scored {
        double score;
        bool tp;
      };
      std::vector<Scored> all;
      for (const auto& [image, image_dets] : slice.dets) {
        static const std::vector<Box> kNone;
        auto g = slice.gts.find(image);
        const auto tp = match_detections(image_dets, g == slice.gts.end() ? kNone : g->second, thr);
        for (std::size_t i = 0; i < image_dets.size(); ++i)
          all.push_back({image_dets[i].score, tp[i]});
      }
      std::stable_sort(all.begin(), all.end(),
                       [](const Scored& a, const Scored& b) { return a.score > b.score; });
      std::vector<double> rec, prec;
      double tp_count = 0;
      for (std::size_t i = 0; i < all.size(); ++i) {
        tp_count += all[i].tp ? 1 : 0;
        rec.push_back(tp_count / static_cast<double>(slice.num_gts));
        prec.push_back(tp_count / static_cast<double>(i + 1));
      }
      class_sum += average_precision(rec, prec);
    }
    result.ap_per_threshold[thr] = slices.empty() ? 0.0 : class_sum / static_cast<double>(slices.size());
  }
  double total = 0;
  for (const auto& [thr, ap] : result.ap_per_threshold) total += ap;
  result.map = result.ap_per_threshold.empty()
                   ? 0.0
                   : total / static_cast<double>(result.ap_per_threshold.size());
  return result;
}

RecallResult eval_ar(const std::vector<ImageDetection>& proposals,
                     const std::vector<GroundTruth>& gts, std::size_t k,
                     const std::vector<double>& thresholds) {
  if (k < 1) throw std::invalid_argument("eval_ar: k must be >= 1");
  RecallResult r;
  if (gts.empty()) {
    r.degenerate = true;
    return r;
  }
  std::map<int, std::vector<Box>> gt_boxes;
  for (const auto& g : gts) gt_boxes[g.image_id].push_back(g.box);

  std::vector<ImageDetection> sorted = proposals;
  std::stable_sort(sorted.begin(), sorted.end(), canonical_less);
  std::map<int, std::vector<Detection>> per_image;
  for (const auto& p : sorted) {
    auto& v = per_image[p.image_id];
    if (v.size() < k) v.push_back(p.det);
  }

  double sum = 0;
  for (double thr : thresholds) {
    std::size_t matched = 0;
    for (const auto& [image, boxes] : gt_boxes) {
      auto it = per_image.find(image);
      if (it == per_image.end()) continue;
      const auto tp = match_detections(it->second, boxes, thr);
      matched += static_cast<std::size_t>(std::count(tp.begin(), tp.end(), true));
    }
    sum += static_cast<double>(matched) / static_cast<double>(gts.size());
  }
  r.value = thresholds.empty() ? 0.0 : sum / static_cast<double>(thresholds.size());
  return r;
}

}  // namespace detcore
