// Brute-force reference checks for the numeric kernels. Each suite draws
// random cases from a seed, compares the function under test against an
// independent slow implementation and counts mismatches. The function under
// test is injectable so a deliberately broken kernel can be shown to fail.
#pragma once

#include "detcore/geom.hpp"
#include "detcore/metrics.hpp"
#include "detcore/postproc.hpp"

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

namespace detcore {

struct OracleReport {
  std::string suite;
  std::size_t checked{0};
  std::size_t failed{0};
  double max_error{0};        // largest observed deviation (relative for grad)
  std::string first_failure;  // description of the first mismatch, if any

  bool ok() const { return failed == 0 && checked > 0; }
};

std::ostream& operator<<(std::ostream& os, const OracleReport& r);

using IouFn = std::function<double(const Box&, const Box&)>;
using NmsFn = std::function<std::vector<std::size_t>(const std::vector<Detection>&, double)>;
using MapFn = std::function<EvalResult(const std::vector<ImageDetection>&,
                                       const std::vector<GroundTruth>&)>;

// Reference implementations.
/// Counts covered unit pixels of integer-corner boxes inside [0,grid)^2.
double pixel_iou(const Box& a, const Box& b, int grid = 64);
/// Repeated argmax with full rescans; suppression when IoU > thr, same class.
std::vector<std::size_t> brute_force_nms(const std::vector<Detection>& dets, double iou_thr);
/// Direct COCO evaluation: one global ranking per class, brute-force
/// precision envelope at each of the 101 recall points.
EvalResult reference_eval(const std::vector<ImageDetection>& dets,
                          const std::vector<GroundTruth>& gts,
                          const std::vector<double>& thresholds = coco_iou_thresholds());

/// Integer box pairs on a 64x64 grid: iou exact against pixel counting, giou
/// within 1e-9 of the enclosing-box formula.
OracleReport iou_suite(std::uint64_t seed, std::size_t cases = 1000, IouFn fn = {});
/// Random instances of up to 100 boxes: exact index match plus idempotence.
OracleReport nms_suite(std::uint64_t seed, std::size_t instances = 500, NmsFn fn = {});
/// Central differences (h = 1e-5) for all six regression losses, plus the
/// smooth L1 joint at |x| = beta. Fails a point at relative error >= 1e-4.
OracleReport grad_suite(std::uint64_t seed, std::size_t points = 200);
/// Random small scenes: every AP and the mAP within 1e-9 of reference_eval.
OracleReport map_suite(std::uint64_t seed, std::size_t scenes = 200, MapFn fn = {});

/// Dispatch by name: "iou", "nms", "grad" or "map". Throws
/// std::invalid_argument on anything else.
OracleReport run_oracle(const std::string& suite, std::uint64_t seed);

}  // namespace detcore
