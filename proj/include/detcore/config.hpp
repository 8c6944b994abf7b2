// Experiment configuration: a strict JSON schema mapped onto the module
// parameter structs. Missing keys take defaults; unknown keys are errors.
#pragma once

#include "detcore/anchor.hpp"
#include "detcore/losses.hpp"
#include "detcore/pipeline.hpp"
#include "detcore/refdet.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>

namespace detcore {

/// Schema violation; `path` names the offending field, e.g. "anchors.num".
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string path, const std::string& message)
      : std::runtime_error(path + ": " + message), path_(std::move(path)) {}
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

struct DataConfig {
  int train_images = 64;
  int val_images = 16;
  int img_size = 64;
  int max_objects = 3;
  int batch_size = 8;
};

struct HooksConfig {
  int eval_interval = 1;
  int log_interval = 0;  // 0 disables per-iteration log lines
};

struct ExperimentConfig {
  DetectorSpec model;
  InferParams infer;
  DataConfig data;
  double lr = 0.02;
  SgdParams optimizer;
  LrSchedule lr_schedule;  // base_lr mirrors `lr`
  std::vector<WorkflowStage> workflow{{Phase::kTrain, 1}};
  int max_epochs = 30;
  HooksConfig hooks;
  TrainParams train;
  std::optional<double> smoothl1_beta;
  ScalePolicy scale_policy;
  std::uint64_t seed = 0;

  /// Copies of model/loss/lr settings wired together (lr into the schedule,
  /// smoothl1_beta into a smooth L1 loss).
  DetectorSpec detector_spec() const;
  LrSchedule schedule() const;
  void validate() const;
};

ExperimentConfig default_config();

ExperimentConfig parse_config(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);
nlohmann::ordered_json to_json(const ExperimentConfig& cfg);

nlohmann::ordered_json to_json(const LossSpec& spec);
LossSpec parse_loss_spec(const nlohmann::json& j, const std::string& path = "loss");

}  // namespace detcore
