// Epoch-based training runner with a hooking mechanism.
//
// The runner itself only forwards the workload batch after batch; everything
// else (lr updates, logging, evaluation) is attached as hooks that fire at
// ten fixed timepoints in (priority, registration) order.
#pragma once

#include "detcore/metrics.hpp"

#include <array>
#include <functional>
#include <map>
#include <ostream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace detcore {

enum class HookPoint {
  kBeforeRun,
  kBeforeTrainEpoch,
  kAfterTrainEpoch,
  kBeforeTrainIter,
  kAfterTrainIter,
  kBeforeValEpoch,
  kAfterValEpoch,
  kBeforeValIter,
  kAfterValIter,
  kAfterRun,
};

inline constexpr std::array<HookPoint, 10> kAllHookPoints = {
    HookPoint::kBeforeRun,      HookPoint::kBeforeTrainEpoch, HookPoint::kAfterTrainEpoch,
    HookPoint::kBeforeTrainIter, HookPoint::kAfterTrainIter,  HookPoint::kBeforeValEpoch,
    HookPoint::kAfterValEpoch,  HookPoint::kBeforeValIter,    HookPoint::kAfterValIter,
    HookPoint::kAfterRun};

std::string_view to_string(HookPoint p);

enum class Phase { kTrain, kVal };

struct WorkflowStage {
  Phase phase = Phase::kTrain;
  int epochs = 1;
};

struct Event {
  HookPoint point;
  int epoch;  // completed train epochs at dispatch time
  int iter;   // completed train iterations at dispatch time

  friend bool operator==(const Event&, const Event&) = default;
};

struct RunnerState {
  int epoch{0};      // completed train epochs
  int val_epoch{0};  // completed val epochs
  int iter{0};       // completed train iterations, all epochs
  int inner_iter{0}; // batch index inside the current epoch
  double lr{0.01};
  double last_loss{0};
  std::vector<WorkflowStage> workflow;
  int max_epochs{0};
  std::vector<Event> events;
  std::vector<std::pair<int, EvalResult>> eval_records;
};

struct Hook {
  std::string name;
  int priority{50};  // lower fires earlier
  std::map<HookPoint, std::function<void(RunnerState&)>> callbacks;
};

/// The model + data bundle the runner drives.
class Workload {
 public:
  virtual ~Workload() = default;
  virtual std::size_t num_batches(Phase phase) const = 0;
  /// Forward, backward and optimizer step on one training batch; returns the loss.
  virtual double train_step(std::size_t batch, const RunnerState& state) = 0;
  virtual void val_step(std::size_t batch, const RunnerState& state) = 0;
};

struct LrSchedule {
  double base_lr = 0.01;
  std::vector<int> steps;  // epochs at which lr decays
  double factor = 0.1;
  int warmup_iters = 0;
  double warmup_ratio = 1.0 / 3.0;

  void validate() const;
};

/// Step decay by the number of steps <= epoch (epoch is 0-based), ramped
/// linearly from warmup_ratio during the first warmup_iters iterations.
double lr_at(const LrSchedule& schedule, int epoch, int iter);

class Runner {
 public:
  explicit Runner(std::vector<WorkflowStage> workflow, int max_epochs = 0);

  /// Throws on a duplicate hook name.
  void register_hook(Hook hook);
  const std::vector<Hook>& hooks() const { return hooks_; }

  /// Runs the workflow. With max_epochs > 0 the workflow repeats until that
  /// many train epochs have completed; otherwise it runs once.
  RunnerState run(Workload& workload);

  RunnerState& state() { return state_; }

 private:
  void dispatch(HookPoint point);
  void run_epoch(Workload& workload, Phase phase);

  std::vector<Hook> hooks_;
  RunnerState state_;
};

/// Sets state.lr before every train epoch and iteration.
Hook lr_hook(LrSchedule schedule, int priority = 10);

/// Writes one line per `interval` train iterations and one per epoch.
Hook logger_hook(std::ostream& out, int interval, int priority = 90);

using Evaluator = std::function<EvalResult(const RunnerState&)>;

/// Runs `evaluator` after train epochs whose 1-based number is a multiple of
/// every_n_epochs and stores the result in state.eval_records.
Hook eval_hook(int every_n_epochs, Evaluator evaluator, int priority = 80);

}  // namespace detcore
