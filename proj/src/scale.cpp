#include "detcore/refdet.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace detcore {

void ScalePolicy::validate() const {
  if (long_edge < 1) throw std::invalid_argument("scale_policy: long_edge must be >= 1");
  if (short_edges.empty()) throw std::invalid_argument("scale_policy: short_edges is empty");
  for (int s : short_edges)
    if (s < 1) throw std::invalid_argument("scale_policy: short edges must be >= 1");
  if (mode == ScaleMode::kRange) {
    if (short_edges.size() != 2)
      throw std::invalid_argument("scale_policy: range mode takes [min, max]");
    if (short_edges[0] > short_edges[1])
      throw std::invalid_argument("scale_policy: range min > max");
  }
}

int ScalePolicy::max_short() const {
  return *std::max_element(short_edges.begin(), short_edges.end());
}

std::vector<int> enumerate_scales(int lo, int hi, int step) {
  if (step < 1 || lo > hi) throw std::invalid_argument("enumerate_scales: bad range");
  std::vector<int> out;
  for (int s = lo; s <= hi; s += step) out.push_back(s);
  return out;
}

std::pair<int, int> sample_scale(const ScalePolicy& policy, std::mt19937_64& rng) {
  policy.validate();
  if (policy.mode == ScaleMode::kValue) {
    std::uniform_int_distribution<std::size_t> pick(0, policy.short_edges.size() - 1);
    return {policy.long_edge, policy.short_edges[pick(rng)]};
  }
  std::uniform_int_distribution<int> pick(policy.short_edges[0], policy.short_edges[1]);
  return {policy.long_edge, pick(rng)};
}

double resize_factor(int img_w, int img_h, int long_cap, int short_target) {
  if (img_w < 1 || img_h < 1 || long_cap < 1 || short_target < 1)
    throw std::invalid_argument("resize_factor: dims must be positive");
  const double long_side = std::max(img_w, img_h);
  const double short_side = std::min(img_w, img_h);
  return std::min(long_cap / long_side, short_target / short_side);
}

std::pair<int, int> resized_dims(int img_w, int img_h, double factor) {
  auto r = [&](int v) { return std::max(1, static_cast<int>(std::floor(v * factor + 0.5))); };
  return {r(img_w), r(img_h)};
}

}  // namespace detcore
