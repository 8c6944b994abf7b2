#include "detcore/experiment.hpp"

#include <algorithm>
#include <numeric>

namespace detcore {

namespace {

std::mt19937_64 stream(std::uint64_t seed, std::uint64_t tag) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(tag)};
  return std::mt19937_64(seq);
}

// Images prepared for one training iteration: resized to the sampled scale
// and padded to the stride.
std::vector<SynthImage> rescale(const std::vector<const SynthImage*>& images,
                                const ScalePolicy& policy, int stride, std::mt19937_64& rng) {
  const auto [long_edge, short_edge] = sample_scale(policy, rng);
  std::vector<SynthImage> out;
  out.reserve(images.size());
  for (const SynthImage* img : images) {
    const double f = resize_factor(img->width(), img->height(), long_edge, short_edge);
    out.push_back(resize_image(*img, f, stride));
  }
  return out;
}

class DetectorWorkload : public Workload {
 public:
  DetectorWorkload(TinyDetector& det, const ExperimentConfig& cfg, const ExperimentData& data)
      : det_(det),
        cfg_(cfg),
        data_(data),
        opt_(cfg.optimizer),
        order_rng_(stream(cfg.seed, 2)),
        sample_rng_(stream(cfg.seed, 3)),
        scale_rng_(stream(cfg.seed, 4)) {
    order_.resize(data.train.size());
    std::iota(order_.begin(), order_.end(), std::size_t{0});
  }

  std::size_t num_batches(Phase phase) const override {
    const auto n = phase == Phase::kTrain ? data_.train.size() : data_.val.size();
    const auto bs = static_cast<std::size_t>(cfg_.data.batch_size);
    return (n + bs - 1) / bs;
  }

  double train_step(std::size_t batch, const RunnerState& state) override {
    if (batch == 0) std::shuffle(order_.begin(), order_.end(), order_rng_);
    const auto bs = static_cast<std::size_t>(cfg_.data.batch_size);
    std::vector<const SynthImage*> picked;
    for (std::size_t i = batch * bs; i < std::min(order_.size(), (batch + 1) * bs); ++i)
      picked.push_back(&data_.train[order_[i]]);
    const auto images = rescale(picked, cfg_.scale_policy,
                                static_cast<int>(cfg_.model.anchors.stride), scale_rng_);
    const auto r = detcore::train_step(det_, opt_, images, cfg_.train, state.lr, sample_rng_);
    return r.loss;
  }

  void val_step(std::size_t batch, const RunnerState&) override {
    const auto bs = static_cast<std::size_t>(cfg_.data.batch_size);
    for (std::size_t i = batch * bs; i < std::min(data_.val.size(), (batch + 1) * bs); ++i)
      infer_scaled(det_, data_.val[i], cfg_.scale_policy, cfg_.infer);
  }

 private:
  TinyDetector& det_;
  const ExperimentConfig& cfg_;
  const ExperimentData& data_;
  SgdOptimizer opt_;
  std::vector<std::size_t> order_;
  std::mt19937_64 order_rng_, sample_rng_, scale_rng_;
};

}  // namespace

ExperimentData make_data(const ExperimentConfig& cfg) {
  ExperimentData d;
  auto train_rng = stream(cfg.seed, 0);
  auto val_rng = stream(cfg.seed, 1);
  d.train = gen_dataset(cfg.data.train_images, cfg.data.img_size, cfg.data.max_objects, train_rng, 0);
  d.val = gen_dataset(cfg.data.val_images, cfg.data.img_size, cfg.data.max_objects, val_rng, 100000);
  if (cfg.model.num_classes == 1) {
    for (auto* split : {&d.train, &d.val})
      for (auto& img : *split)
        for (auto& a : img.annotations) a.label = 0;
  }
  return d;
}

void calibrate_norm(TinyDetector& det, const std::vector<SynthImage>& images) {
  const auto kind = det.spec().norm.kind;
  if (kind != NormKind::kBatchNorm && kind != NormKind::kFrozenBatchNorm) return;
  if (images.empty()) return;
  std::vector<Eigen::MatrixXd> parts;
  Eigen::Index rows = 0;
  for (const auto& img : images) {
    parts.push_back(extract_features(img, det.spec()));
    rows += parts.back().rows();
  }
  Eigen::MatrixXd all(rows, det.spec().feature_dim());
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    all.middleRows(at, p.rows()) = p;
    at += p.rows();
  }
  const Eigen::RowVectorXd mean = all.colwise().mean();
  const double n = static_cast<double>(std::max<Eigen::Index>(rows - 1, 1));
  det.bn.running_mean = mean.transpose();
  det.bn.running_var = ((all.rowwise() - mean).array().square().colwise().sum() / n).transpose();
}

std::vector<Detection> infer_scaled(const TinyDetector& det, const SynthImage& img,
                                    const ScalePolicy& policy, const InferParams& params) {
  const double f = resize_factor(img.width(), img.height(), policy.long_edge, policy.max_short());
  const int stride = static_cast<int>(det.spec().anchors.stride);
  const auto [w, h] = resized_dims(img.width(), img.height(), f);
  if (w == img.width() && h == img.height() && w % stride == 0 && h % stride == 0)
    return infer(det, img, params);
  const SynthImage scaled = resize_image(img, f, stride);
  const double sx = static_cast<double>(w) / img.width();
  const double sy = static_cast<double>(h) / img.height();
  auto dets = infer(det, scaled, params);
  for (auto& d : dets) {
    d.box = clip(Box{d.box.x1 / sx, d.box.y1 / sy, d.box.x2 / sx, d.box.y2 / sy},
                 double(img.width()), double(img.height()));
  }
  return dets;
}

std::vector<Detection> propose(const TinyDetector& det, const SynthImage& img, std::size_t k,
                               double nms_thr) {
  InferParams p{0.0, nms_thr, std::numeric_limits<std::size_t>::max()};
  auto dets = infer(det, img, p);
  if (det.spec().num_classes > 1) {
    for (auto& d : dets) d.class_id = 0;
    std::vector<Detection> merged;
    for (std::size_t i : nms(dets, nms_thr)) merged.push_back(dets[i]);
    dets = std::move(merged);
  }
  if (dets.size() > k) dets.resize(k);
  return dets;
}

EvalResult evaluate(const TinyDetector& det, const std::vector<SynthImage>& images,
                    const ExperimentConfig& cfg, std::size_t ar_k) {
  std::vector<ImageDetection> dets, proposals;
  for (const auto& img : images) {
    for (const auto& d : infer_scaled(det, img, cfg.scale_policy, cfg.infer))
      dets.push_back({img.id, d});
    for (const auto& d : propose(det, img, ar_k)) proposals.push_back({img.id, d});
  }
  const auto gts = ground_truth(images);
  EvalResult r = eval_map(dets, gts);
  r.ar_at_k = eval_ar(proposals, gts, ar_k).value;
  return r;
}

ExperimentResult run_experiment(const ExperimentConfig& cfg, const ExperimentData& data,
                                std::ostream* log) {
  cfg.validate();
  ExperimentResult result{TinyDetector(cfg.detector_spec()), {}};
  TinyDetector& det = result.det;
  calibrate_norm(det, data.train);

  Runner runner(cfg.workflow, cfg.max_epochs);
  runner.register_hook(lr_hook(cfg.schedule()));
  runner.register_hook(eval_hook(cfg.hooks.eval_interval, [&](const RunnerState&) {
    return evaluate(det, data.val, cfg);
  }));
  if (log) runner.register_hook(logger_hook(*log, cfg.hooks.log_interval));

  DetectorWorkload workload(det, cfg, data);
  result.state = runner.run(workload);
  return result;
}

}  // namespace detcore
