// Desk-scale reference detector: synthetic shapes data, training-scale
// policies and a tiny single-stage anchor-based detector with hand-derived
// gradients.
#pragma once

#include "detcore/anchor.hpp"
#include "detcore/geom.hpp"
#include "detcore/losses.hpp"
#include "detcore/metrics.hpp"
#include "detcore/norm.hpp"
#include "detcore/postproc.hpp"

#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace detcore {

// ---------------------------------------------------------------------------
// Training scales

enum class ScaleMode { kValue, kRange };

struct ScalePolicy {
  ScaleMode mode = ScaleMode::kValue;
  int long_edge = 1333;
  // value mode: candidate short edges; range mode: {min, max}
  std::vector<int> short_edges{800};

  void validate() const;
  /// Largest short edge the policy can produce; used at test time.
  int max_short() const;
};

/// "[lo:hi:step]" enumerated inclusively, e.g. [640:800:32] has six entries.
std::vector<int> enumerate_scales(int lo, int hi, int step);

/// (long, short) target for one iteration.
std::pair<int, int> sample_scale(const ScalePolicy& policy, std::mt19937_64& rng);

/// Aspect-preserving factor so that neither edge exceeds its bound.
double resize_factor(int img_w, int img_h, int long_cap, int short_target);

/// Image dims after scaling, rounded half up.
std::pair<int, int> resized_dims(int img_w, int img_h, double factor);

// ---------------------------------------------------------------------------
// Synthetic data

enum ShapeClass : int { kSquare = 0, kWide = 1 };

struct Annotation {
  Box box;
  int label{0};
};

struct SynthImage {
  int id{0};
  Eigen::MatrixXd pixels;  // height x width, intensities in [0, 1]
  std::vector<Annotation> annotations;

  int width() const { return static_cast<int>(pixels.cols()); }
  int height() const { return static_cast<int>(pixels.rows()); }
};

/// Class implied by a box's aspect ratio: square when |w / h - 1| < 0.2.
int shape_class(const Box& b);

/// Images of size img_size x img_size with 1..max_objects non-overlapping
/// filled rectangles on a noisy background. Deterministic per generator state.
std::vector<SynthImage> gen_dataset(int n_images, int img_size, int max_objects,
                                    std::mt19937_64& rng, int first_id = 0);

/// Bilinear resize by `factor` (dims rounded half up), zero-padded so both
/// dims are multiples of `pad_to`. Boxes are scaled by the exact per-axis ratio.
SynthImage resize_image(const SynthImage& img, double factor, int pad_to = 1);

/// Writes <dir>/<id>.pgm per image and <dir>/annotations.json.
void write_dataset(const std::vector<SynthImage>& images, const std::filesystem::path& dir);
std::vector<SynthImage> read_dataset(const std::filesystem::path& dir);

std::vector<GroundTruth> ground_truth(const std::vector<SynthImage>& images);

// ---------------------------------------------------------------------------
// Detector

struct NormConfig {
  NormKind kind = NormKind::kBatchNorm;
  bool eval = false;
  bool requires_grad = true;
  int num_groups = 32;
  double momentum = 0.1;
  double eps = 1e-5;
};

struct DetectorSpec {
  AnchorGenSpec anchors;
  int num_classes = 2;
  int window = 32;  // receptive window around each cell centre (pixels)
  int pool = 4;     // average-pool factor inside the window
  NormConfig norm;
  LossSpec loss;
  DeltaNorm delta_norm;

  int feature_dim() const;  // (window / pool)^2 pooled values + window mean
  void validate() const;
};

struct SgdParams {
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::optional<double> max_grad_norm;  // rescale the loss gradient above this L2 norm
};

struct TrainParams {
  AssignerSpec assigner;
  SamplerSpec sampler;
  double allowed_border = kUnboundedBorder;
};

/// Per-anchor logistic classifier and linear box regressor on pooled-window
/// features. Anchor a of cell r owns weight rows [a * C, (a + 1) * C) of
/// cls_w and [a * 4, (a + 1) * 4) of reg_w; the last column is the bias.
class TinyDetector {
 public:
  explicit TinyDetector(DetectorSpec spec);

  const DetectorSpec& spec() const { return spec_; }
  int anchors_per_cell() const { return static_cast<int>(spec_.anchors.anchors_per_cell()); }

  Eigen::MatrixXd cls_w;
  Eigen::MatrixXd reg_w;
  NormState bn;     // used for bn / frozen_bn
  GroupNormSpec gn; // used for gn

  /// All trainable parameters flattened: cls_w, reg_w, then norm affine
  /// weights when they are trainable.
  Eigen::VectorXd params() const;
  void set_params(const Eigen::VectorXd& p);
  bool norm_trainable() const;

  std::vector<Box> anchors_for(int img_w, int img_h) const;

 private:
  DetectorSpec spec_;
};

/// Pooled-window features, one row per grid cell (row-major), before norm.
Eigen::MatrixXd extract_features(const SynthImage& img, const DetectorSpec& spec);

struct ForwardCache {
  std::vector<Eigen::Index> row_offset;  // first feature row of each image
  Eigen::MatrixXd normed;                // rows x (D + 1), last column ones
  BnCache bn;
  GnCache gn;
};

struct ForwardOut {
  Eigen::MatrixXd logits;  // rows x (A * C)
  Eigen::MatrixXd scores;  // sigmoid(logits)
  Eigen::MatrixXd deltas;  // rows x (A * 4)
  ForwardCache cache;
};

/// training selects batch statistics for a non-frozen BatchNorm; the running
/// statistics in `det` are updated only through train_step.
ForwardOut forward(const TinyDetector& det, const std::vector<SynthImage>& batch,
                   bool training, NormState* bn_update = nullptr);

struct SampledAnchor {
  std::size_t image;
  std::size_t anchor;
  int gt{-1};  // -1 for negatives
  int label{-1};
};

struct TrainTargets {
  std::vector<SampledAnchor> positives;
  std::vector<SampledAnchor> negatives;
};

TrainTargets build_targets(const TinyDetector& det, const std::vector<SynthImage>& batch,
                           const TrainParams& params, std::mt19937_64& rng);

struct LossEval {
  double total{0};
  double cls{0};
  double reg{0};
  bool no_positives{false};
  Eigen::VectorXd grad;  // aligned with TinyDetector::params()
  NormState bn_after;    // running stats after the forward pass
};

/// Loss and its gradient for fixed targets.
LossEval evaluate_loss(const TinyDetector& det, const std::vector<SynthImage>& batch,
                       const TrainTargets& targets);

struct StepResult {
  double loss{0};
  bool no_positives{false};
};

class SgdOptimizer {
 public:
  explicit SgdOptimizer(SgdParams params = {}) : params_(params) {}
  void step(TinyDetector& det, const Eigen::VectorXd& grad, double lr);

 private:
  SgdParams params_;
  Eigen::VectorXd velocity_;
};

/// Assign, sample, evaluate the loss and take one SGD step.
StepResult train_step(TinyDetector& det, SgdOptimizer& opt, const std::vector<SynthImage>& batch,
                      const TrainParams& params, double lr, std::mt19937_64& rng);

struct InferParams {
  double score_thr = 0.05;
  double nms_thr = 0.5;
  std::size_t max_per_img = 100;
};

std::vector<Detection> infer(const TinyDetector& det, const SynthImage& img,
                             const InferParams& params = {});

}  // namespace detcore
