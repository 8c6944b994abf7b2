#include "detcore/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace detcore {

std::string_view to_string(HookPoint p) {
  switch (p) {
    case HookPoint::kBeforeRun: return "before_run";
    case HookPoint::kBeforeTrainEpoch: return "before_train_epoch";
    case HookPoint::kAfterTrainEpoch: return "after_train_epoch";
    case HookPoint::kBeforeTrainIter: return "before_train_iter";
    case HookPoint::kAfterTrainIter: return "after_train_iter";
    case HookPoint::kBeforeValEpoch: return "before_val_epoch";
    case HookPoint::kAfterValEpoch: return "after_val_epoch";
    case HookPoint::kBeforeValIter: return "before_val_iter";
    case HookPoint::kAfterValIter: return "after_val_iter";
    case HookPoint::kAfterRun: return "after_run";
  }
  return "?";
}

void LrSchedule::validate() const {
  if (!(base_lr > 0)) throw std::invalid_argument("lr_schedule: base lr must be > 0");
  if (!(factor > 0)) throw std::invalid_argument("lr_schedule: factor must be > 0");
  if (warmup_iters < 0) throw std::invalid_argument("lr_schedule: warmup_iters must be >= 0");
  if (!(warmup_ratio > 0 && warmup_ratio <= 1))
    throw std::invalid_argument("lr_schedule: warmup_ratio must be in (0, 1]");
  for (std::size_t i = 1; i < steps.size(); ++i)
    if (steps[i] <= steps[i - 1])
      throw std::invalid_argument("lr_schedule: steps must be strictly increasing");
}

double lr_at(const LrSchedule& schedule, int epoch, int iter) {
  const auto passed = std::count_if(schedule.steps.begin(), schedule.steps.end(),
                                    [&](int s) { return s <= epoch; });
  double lr = schedule.base_lr * std::pow(schedule.factor, static_cast<double>(passed));
  if (iter < schedule.warmup_iters) {
    const double k = (1.0 - static_cast<double>(iter) / schedule.warmup_iters) *
                     (1.0 - schedule.warmup_ratio);
    lr *= 1.0 - k;
  }
  return lr;
}

Runner::Runner(std::vector<WorkflowStage> workflow, int max_epochs) {
  if (workflow.empty()) throw std::invalid_argument("runner: workflow must not be empty");
  bool has_train = false;
  for (const auto& s : workflow) {
    if (s.epochs < 1) throw std::invalid_argument("runner: workflow epochs must be >= 1");
    has_train = has_train || s.phase == Phase::kTrain;
  }
  if (max_epochs > 0 && !has_train)
    throw std::invalid_argument("runner: max_epochs needs a train stage in the workflow");
  state_.workflow = std::move(workflow);
  state_.max_epochs = max_epochs;
}

void Runner::register_hook(Hook hook) {
  for (const auto& h : hooks_)
    if (h.name == hook.name)
      throw std::invalid_argument("runner: duplicate hook name '" + hook.name + "'");
  // Insert after every hook of equal or lower priority: stable by registration.
  auto pos = std::upper_bound(hooks_.begin(), hooks_.end(), hook.priority,
                              [](int p, const Hook& h) { return p < h.priority; });
  hooks_.insert(pos, std::move(hook));
}

void Runner::dispatch(HookPoint point) {
  state_.events.push_back({point, state_.epoch, state_.iter});
  for (auto& hook : hooks_) {
    auto it = hook.callbacks.find(point);
    if (it == hook.callbacks.end()) continue;
    try {
      it->second(state_);
    } catch (const std::exception& e) {
      throw std::runtime_error("hook '" + hook.name + "' failed at " +
                               std::string(to_string(point)) + " (epoch " +
                               std::to_string(state_.epoch) + ", iter " +
                               std::to_string(state_.iter) + "): " + e.what());
    }
  }
}

void Runner::run_epoch(Workload& workload, Phase phase) {
  const bool train = phase == Phase::kTrain;
  const std::size_t batches = workload.num_batches(phase);
  dispatch(train ? HookPoint::kBeforeTrainEpoch : HookPoint::kBeforeValEpoch);
  for (std::size_t b = 0; b < batches; ++b) {
    state_.inner_iter = static_cast<int>(b);
    dispatch(train ? HookPoint::kBeforeTrainIter : HookPoint::kBeforeValIter);
    if (train) {
      state_.last_loss = workload.train_step(b, state_);
      ++state_.iter;
    } else {
      workload.val_step(b, state_);
    }
    dispatch(train ? HookPoint::kAfterTrainIter : HookPoint::kAfterValIter);
  }
  if (train) ++state_.epoch;
  else ++state_.val_epoch;
  dispatch(train ? HookPoint::kAfterTrainEpoch : HookPoint::kAfterValEpoch);
}

RunnerState Runner::run(Workload& workload) {
  dispatch(HookPoint::kBeforeRun);
  bool done = false;
  while (!done) {
    for (const auto& stage : state_.workflow) {
      for (int e = 0; e < stage.epochs; ++e) {
        if (state_.max_epochs > 0 && stage.phase == Phase::kTrain &&
            state_.epoch >= state_.max_epochs)
          break;
        run_epoch(workload, stage.phase);
      }
    }
    done = state_.max_epochs <= 0 || state_.epoch >= state_.max_epochs;
  }
  dispatch(HookPoint::kAfterRun);
  return state_;
}

Hook lr_hook(LrSchedule schedule, int priority) {
  schedule.validate();
  Hook h{"lr", priority, {}};
  auto update = [schedule](RunnerState& s) { s.lr = lr_at(schedule, s.epoch, s.iter); };
  h.callbacks[HookPoint::kBeforeRun] = update;
  h.callbacks[HookPoint::kBeforeTrainEpoch] = update;
  h.callbacks[HookPoint::kBeforeTrainIter] = update;
  return h;
}

Hook logger_hook(std::ostream& out, int interval, int priority) {
  Hook h{"logger", priority, {}};
  h.callbacks[HookPoint::kAfterTrainIter] = [&out, interval](RunnerState& s) {
    if (interval > 0 && s.iter % interval == 0)
      out << "epoch " << s.epoch + 1 << " iter " << s.iter << " lr " << s.lr << " loss "
          << s.last_loss << '\n';
  };
  h.callbacks[HookPoint::kAfterTrainEpoch] = [&out](RunnerState& s) {
    out << "finished train epoch " << s.epoch << '\n';
  };
  h.callbacks[HookPoint::kAfterRun] = [&out](RunnerState& s) {
    out << "run complete: " << s.epoch << " train epochs, " << s.iter << " iters\n";
  };
  return h;
}

Hook eval_hook(int every_n_epochs, Evaluator evaluator, int priority) {
  if (every_n_epochs < 1) throw std::invalid_argument("eval_hook: interval must be >= 1");
  Hook h{"eval", priority, {}};
  h.callbacks[HookPoint::kAfterTrainEpoch] = [every_n_epochs,
                                              evaluator = std::move(evaluator)](RunnerState& s) {
    if (s.epoch % every_n_epochs == 0) s.eval_records.emplace_back(s.epoch, evaluator(s));
  };
  return h;
}

}  // namespace detcore
