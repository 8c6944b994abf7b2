// Subcommands behind the `detcore` binary. Each returns a process exit code:
// 0 success, 1 runtime failure, 2 usage or config error.
#pragma once

#include "detcore/config.hpp"
#include "detcore/report.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace detcore {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

struct CommonOptions {
  std::optional<std::filesystem::path> config;  // default_config() when unset
  std::filesystem::path out = "detcore_out";
  std::optional<std::uint64_t> seed;  // overrides the config seed
  bool quiet = false;
};

/// Loads the config named by `opts` and applies the seed override.
ExperimentConfig resolve_config(const CommonOptions& opts);

/// Parallel cell cap: DETCORE_THREADS when set to a positive integer,
/// otherwise the hardware concurrency (at least 1).
unsigned thread_cap();

nlohmann::ordered_json to_json(const EvalResult& r);
nlohmann::ordered_json weights_json(const TinyDetector& det);

/// One detector per (loss, lw) cell; value = val AP@0.5, nan when the cell
/// failed. Label = loss name, metric = lw. Rows come out in grid order
/// whatever the thread count.
Report grid_loss_study(const ExperimentConfig& base, const std::vector<LossKind>& losses,
                       const std::vector<double>& weights, unsigned threads,
                       std::ostream* err = nullptr);

struct RpnSetting {
  double smoothl1_beta;
  double allowed_border;      // kUnboundedBorder for "inf"
  std::optional<double> neg_pos_ub;  // nullopt for "inf"
  std::string label;
};
/// (1/5,0,inf) (1/9,0,inf) (1/15,0,inf) (1/9,inf,inf) (1/9,inf,3) (1/9,inf,5)
std::vector<RpnSetting> rpn_settings();
/// Single-class proposal task; per setting four rows: smoothl1_beta,
/// allowed_border, neg_pos_ub (inf when unbounded) and AR_1000.
Report rpn_study(const ExperimentConfig& base, unsigned threads, std::ostream* err = nullptr);

/// Wall time of one kernel; rows min_ms, median_ms, max_ms under one label.
/// Kernels: "iou_matrix" (size x size boxes), "nms" (size boxes), "anchors"
/// (size x size grid, 9 anchors per cell).
Report bench(const std::string& kernel, std::size_t size, std::size_t reps, std::uint64_t seed);

int cmd_train(const CommonOptions& opts, std::ostream& out, std::ostream& err);
int cmd_grid_loss(const CommonOptions& opts, const std::vector<std::string>& losses,
                  const std::vector<double>& weights, std::ostream& out, std::ostream& err);
int cmd_rpn_study(const CommonOptions& opts, std::ostream& out, std::ostream& err);
/// suite: iou, nms, grad, map or all.
int cmd_oracle(const std::string& suite, const CommonOptions& opts, std::ostream& out,
               std::ostream& err);
int cmd_bench(const std::string& kernel, std::size_t size, std::size_t reps,
              const CommonOptions& opts, std::ostream& out, std::ostream& err);
/// Detections [{image_id, bbox, score, category_id}] against ground truth
/// [{image_id, bbox, category_id}].
int cmd_eval(const std::filesystem::path& dets, const std::filesystem::path& gts,
             const CommonOptions& opts, std::ostream& out, std::ostream& err);
/// Writes the configured train and val splits under out/train and out/val.
int cmd_gen_data(const CommonOptions& opts, std::ostream& out, std::ostream& err);

/// Full command line entry point used by the binary.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace detcore
