// Config-driven training of the reference detector through the hook runner.
#pragma once

#include "detcore/config.hpp"
#include "detcore/pipeline.hpp"
#include "detcore/refdet.hpp"

#include <ostream>
#include <vector>

namespace detcore {

struct ExperimentData {
  std::vector<SynthImage> train;
  std::vector<SynthImage> val;
};

/// Train ids start at 0, val ids at 100000; both splits derive from cfg.seed.
ExperimentData make_data(const ExperimentConfig& cfg);

/// Sets BatchNorm running statistics from the features of `images`.
void calibrate_norm(TinyDetector& det, const std::vector<SynthImage>& images);

/// Inference at the policy's test scale, boxes mapped back to input coords.
std::vector<Detection> infer_scaled(const TinyDetector& det, const SynthImage& img,
                                    const ScalePolicy& policy, const InferParams& params);

/// Class-agnostic proposals: best class score per anchor, NMS at nms_thr, top k.
std::vector<Detection> propose(const TinyDetector& det, const SynthImage& img,
                               std::size_t k, double nms_thr = 0.7);

/// mAP over the COCO thresholds plus AR@ar_k of class-agnostic proposals.
EvalResult evaluate(const TinyDetector& det, const std::vector<SynthImage>& images,
                    const ExperimentConfig& cfg, std::size_t ar_k = 1000);

struct ExperimentResult {
  TinyDetector det;
  RunnerState state;
};

/// Trains a fresh detector on data.train with an lr hook, an eval hook on
/// data.val every hooks.eval_interval epochs and, when `log` is set, a
/// logger hook.
ExperimentResult run_experiment(const ExperimentConfig& cfg, const ExperimentData& data,
                                std::ostream* log = nullptr);

}  // namespace detcore
