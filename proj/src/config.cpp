#include "detcore/config.hpp"

#include <cmath>
#include <fstream>
#include <set>

namespace detcore {

namespace {

using nlohmann::json;

// Reads fields of one JSON object and rejects keys nobody asked for.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
  }

  std::string child(const std::string& key) const {
    return path_.empty() ? key : path_ + "." + key;
  }

  const json* find(const std::string& key) {
    known_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  template <typename T>
  void read(const std::string& key, T& out) {
    const json* v = find(key);
    if (!v) return;
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v->is_boolean()) throw ConfigError(child(key), "expected a boolean");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v->is_number_integer()) throw ConfigError(child(key), "expected an integer");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v->is_number()) throw ConfigError(child(key), "expected a number");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v->is_string()) throw ConfigError(child(key), "expected a string");
      }
      out = v->get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(child(key), e.what());
    }
  }

  template <typename T>
  void read_list(const std::string& key, std::vector<T>& out) {
    const json* v = find(key);
    if (!v) return;
    if (!v->is_array()) throw ConfigError(child(key), "expected an array");
    std::vector<T> tmp;
    for (std::size_t i = 0; i < v->size(); ++i) {
      const json& e = (*v)[i];
      const bool ok = std::is_integral_v<T> ? e.is_number_integer() : e.is_number();
      if (!ok) throw ConfigError(child(key) + "[" + std::to_string(i) + "]", "expected a number");
      tmp.push_back(e.get<T>());
    }
    out = std::move(tmp);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!known_.count(it.key())) throw ConfigError(child(it.key()), "unknown key");
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> known_;
};

template <typename Fn>
void section(ObjectReader& parent, const std::string& key, Fn&& fn) {
  if (const json* v = parent.find(key)) {
    ObjectReader r(*v, parent.child(key));
    fn(r);
    r.finish();
  }
}

// Number or the string "inf".
double read_unbounded_number(const json& v, const std::string& path) {
  if (v.is_string() && v.get<std::string>() == "inf") return kUnboundedBorder;
  if (!v.is_number()) throw ConfigError(path, "expected a number or \"inf\"");
  return v.get<double>();
}

std::string phase_name(Phase p) { return p == Phase::kTrain ? "train" : "val"; }

json unbounded_json(double v) { return std::isinf(v) ? json("inf") : json(v); }

}  // namespace

DetectorSpec ExperimentConfig::detector_spec() const {
  DetectorSpec s = model;
  if (smoothl1_beta && s.loss.kind == LossKind::kSmoothL1) s.loss.beta = *smoothl1_beta;
  return s;
}

LrSchedule ExperimentConfig::schedule() const {
  LrSchedule s = lr_schedule;
  s.base_lr = lr;
  return s;
}

void ExperimentConfig::validate() const {
  auto wrap = [](const std::string& path, auto&& fn) {
    try {
      fn();
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw ConfigError(path, e.what());
    }
  };
  wrap("model", [&] { detector_spec().validate(); });
  wrap("loss", [&] { model.loss.validate(); });
  wrap("optimizer", [&] {
    if (!(lr > 0)) throw std::invalid_argument("lr must be > 0");
    if (optimizer.momentum < 0 || optimizer.weight_decay < 0)
      throw std::invalid_argument("momentum and weight_decay must be >= 0");
    if (optimizer.max_grad_norm && !(*optimizer.max_grad_norm > 0))
      throw std::invalid_argument("grad_clip must be > 0 or null");
  });
  wrap("lr_schedule", [&] { schedule().validate(); });
  wrap("anchors", [&] {
    train.sampler.validate();
    if (train.assigner.pos_iou_thr < train.assigner.neg_iou_thr)
      throw std::invalid_argument("pos_iou_thr must be >= neg_iou_thr");
    if (!(train.allowed_border >= 0)) throw std::invalid_argument("allowed_border must be >= 0");
    if (smoothl1_beta && !(*smoothl1_beta > 0))
      throw std::invalid_argument("smoothl1_beta must be > 0");
  });
  wrap("scale_policy", [&] { scale_policy.validate(); });
  wrap("data", [&] {
    if (data.train_images < 1 || data.val_images < 1 || data.batch_size < 1 ||
        data.max_objects < 1 || data.img_size < 40)
      throw std::invalid_argument("counts must be >= 1 and img_size >= 40");
  });
  wrap("workflow", [&] {
    if (workflow.empty()) throw std::invalid_argument("workflow must not be empty");
    for (const auto& w : workflow)
      if (w.epochs < 1) throw std::invalid_argument("stage epochs must be >= 1");
  });
  wrap("max_epochs", [&] {
    if (max_epochs < 0) throw std::invalid_argument("max_epochs must be >= 0");
  });
  wrap("hooks", [&] {
    if (hooks.eval_interval < 1) throw std::invalid_argument("eval_interval must be >= 1");
    if (hooks.log_interval < 0) throw std::invalid_argument("log_interval must be >= 0");
  });
  wrap("model", [&] {
    if (!(infer.nms_thr > 0 && infer.nms_thr < 1))
      throw std::invalid_argument("nms_thr must be in (0, 1)");
  });
}

ExperimentConfig default_config() {
  ExperimentConfig c;
  c.model.anchors = AnchorGenSpec{8, {3.5}, {1, 0.5}, 8};
  c.model.num_classes = 2;
  c.model.window = 48;
  c.model.norm.num_groups = 5;  // feature_dim 145 = 5 * 29
  c.model.pool = 4;
  c.model.loss = LossSpec::defaults(LossKind::kSmoothL1);
  c.model.loss.beta = 1.0 / 9.0;
  c.infer = InferParams{0.05, 0.5, 100};
  c.lr = 0.02;
  c.optimizer = SgdParams{0.9, 1e-4, 1.0};
  c.lr_schedule.steps = {20, 27};
  c.lr_schedule.factor = 0.1;
  c.lr_schedule.warmup_iters = 0;
  c.max_epochs = 30;
  c.train.assigner = AssignerSpec{0.5, 0.4, 0.3};
  c.train.sampler = SamplerSpec{64, 0.5, std::nullopt};
  c.train.allowed_border = kUnboundedBorder;
  c.scale_policy = ScalePolicy{ScaleMode::kValue, 64, {64}};
  c.seed = 0;
  return c;
}

LossSpec parse_loss_spec(const json& j, const std::string& path) {
  ObjectReader r(j, path);
  LossSpec s;
  std::string kind = "smooth_l1";
  r.read("kind", kind);
  try {
    s = LossSpec::defaults(parse_loss_kind(kind));
  } catch (const std::invalid_argument& e) {
    throw ConfigError(r.child("kind"), e.what());
  }
  r.read("loss_weight", s.loss_weight);
  r.read("beta", s.beta);
  r.read("alpha", s.alpha);
  r.read("gamma", s.gamma);
  std::string mode = s.mode == IouMode::kLog ? "log" : "linear";
  r.read("mode", mode);
  if (mode == "log") s.mode = IouMode::kLog;
  else if (mode == "linear") s.mode = IouMode::kLinear;
  else throw ConfigError(r.child("mode"), "expected \"log\" or \"linear\"");
  r.finish();
  try {
    s.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(path, e.what());
  }
  return s;
}

nlohmann::ordered_json to_json(const LossSpec& s) {
  nlohmann::ordered_json j;
  j["kind"] = std::string(to_string(s.kind));
  j["loss_weight"] = s.loss_weight;
  j["beta"] = s.beta;
  j["alpha"] = s.alpha;
  j["gamma"] = s.gamma;
  j["mode"] = s.mode == IouMode::kLog ? "log" : "linear";
  return j;
}

ExperimentConfig parse_config(const json& j) {
  ExperimentConfig c = default_config();
  ObjectReader root(j, "");

  section(root, "model", [&](ObjectReader& r) {
    r.read("num_classes", c.model.num_classes);
    r.read("window", c.model.window);
    r.read("pool", c.model.pool);
    std::vector<double> stds;
    r.read_list("target_stds", stds);
    if (!stds.empty()) {
      if (stds.size() != 4) throw ConfigError(r.child("target_stds"), "expected 4 values");
      c.model.delta_norm.stds = Eigen::Vector4d(stds[0], stds[1], stds[2], stds[3]);
    }
    r.read("score_thr", c.infer.score_thr);
    r.read("nms_thr", c.infer.nms_thr);
    r.read("max_per_img", c.infer.max_per_img);
  });
  section(root, "data", [&](ObjectReader& r) {
    r.read("train_images", c.data.train_images);
    r.read("val_images", c.data.val_images);
    r.read("img_size", c.data.img_size);
    r.read("max_objects", c.data.max_objects);
    r.read("batch_size", c.data.batch_size);
  });
  section(root, "optimizer", [&](ObjectReader& r) {
    r.read("lr", c.lr);
    r.read("momentum", c.optimizer.momentum);
    r.read("weight_decay", c.optimizer.weight_decay);
    if (const json* v = r.find("grad_clip")) {
      if (v->is_null()) c.optimizer.max_grad_norm.reset();
      else if (v->is_number()) c.optimizer.max_grad_norm = v->get<double>();
      else throw ConfigError(r.child("grad_clip"), "expected a number or null");
    }
  });
  section(root, "lr_schedule", [&](ObjectReader& r) {
    r.read_list("steps", c.lr_schedule.steps);
    r.read("factor", c.lr_schedule.factor);
    r.read("warmup_iters", c.lr_schedule.warmup_iters);
  });
  if (const json* w = root.find("workflow")) {
    if (!w->is_array()) throw ConfigError("workflow", "expected an array of [phase, epochs]");
    c.workflow.clear();
    for (std::size_t i = 0; i < w->size(); ++i) {
      const json& e = (*w)[i];
      const std::string p = "workflow[" + std::to_string(i) + "]";
      if (!e.is_array() || e.size() != 2 || !e[0].is_string() || !e[1].is_number_integer())
        throw ConfigError(p, "expected [\"train\"|\"val\", epochs]");
      const auto phase = e[0].get<std::string>();
      if (phase != "train" && phase != "val") throw ConfigError(p, "unknown phase '" + phase + "'");
      c.workflow.push_back({phase == "train" ? Phase::kTrain : Phase::kVal, e[1].get<int>()});
    }
  }
  root.read("max_epochs", c.max_epochs);
  section(root, "hooks", [&](ObjectReader& r) {
    r.read("eval_interval", c.hooks.eval_interval);
    r.read("log_interval", c.hooks.log_interval);
  });
  if (const json* l = root.find("loss")) c.model.loss = parse_loss_spec(*l, "loss");
  section(root, "anchors", [&](ObjectReader& r) {
    r.read("base_size", c.model.anchors.base_size);
    r.read_list("scales", c.model.anchors.scales);
    r.read_list("ratios", c.model.anchors.ratios);
    r.read("stride", c.model.anchors.stride);
    r.read("pos_iou_thr", c.train.assigner.pos_iou_thr);
    r.read("neg_iou_thr", c.train.assigner.neg_iou_thr);
    r.read("min_pos_iou", c.train.assigner.min_pos_iou);
    if (const json* v = r.find("allowed_border"))
      c.train.allowed_border = read_unbounded_number(*v, r.child("allowed_border"));
    r.read("num", c.train.sampler.num);
    r.read("pos_fraction", c.train.sampler.pos_fraction);
    if (const json* v = r.find("neg_pos_ub")) {
      if (v->is_string() && v->get<std::string>() == "inf") {
        c.train.sampler.neg_pos_ub.reset();
      } else if (v->is_number_integer() && v->get<long long>() >= 1) {
        c.train.sampler.neg_pos_ub = v->get<std::size_t>();
      } else {
        throw ConfigError(r.child("neg_pos_ub"), "expected a positive integer or \"inf\"");
      }
    }
    double beta = 0;
    if (r.find("smoothl1_beta")) {
      r.read("smoothl1_beta", beta);
      c.smoothl1_beta = beta;
    }
  });
  section(root, "scale_policy", [&](ObjectReader& r) {
    std::string mode = "value";
    r.read("mode", mode);
    if (mode == "value") c.scale_policy.mode = ScaleMode::kValue;
    else if (mode == "range") c.scale_policy.mode = ScaleMode::kRange;
    else throw ConfigError(r.child("mode"), "expected \"value\" or \"range\"");
    r.read("long_edge", c.scale_policy.long_edge);
    r.read_list("short_edges", c.scale_policy.short_edges);
  });
  section(root, "norm", [&](ObjectReader& r) {
    std::string type(to_string(c.model.norm.kind));
    r.read("type", type);
    try {
      c.model.norm.kind = parse_norm_kind(type);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(r.child("type"), e.what());
    }
    r.read("eval", c.model.norm.eval);
    r.read("requires_grad", c.model.norm.requires_grad);
    r.read("num_groups", c.model.norm.num_groups);
    r.read("momentum", c.model.norm.momentum);
    r.read("eps", c.model.norm.eps);
  });
  root.read("seed", c.seed);
  root.finish();
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path.string(), "cannot open config file");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string(), e.what());
  }
  return parse_config(j);
}

nlohmann::ordered_json to_json(const ExperimentConfig& c) {
  nlohmann::ordered_json j;
  const auto& m = c.model;
  j["model"] = {{"num_classes", m.num_classes},
                {"window", m.window},
                {"pool", m.pool},
                {"target_stds",
                 {m.delta_norm.stds(0), m.delta_norm.stds(1), m.delta_norm.stds(2),
                  m.delta_norm.stds(3)}},
                {"score_thr", c.infer.score_thr},
                {"nms_thr", c.infer.nms_thr},
                {"max_per_img", c.infer.max_per_img}};
  j["data"] = {{"train_images", c.data.train_images},
               {"val_images", c.data.val_images},
               {"img_size", c.data.img_size},
               {"max_objects", c.data.max_objects},
               {"batch_size", c.data.batch_size}};
  j["optimizer"] = {{"lr", c.lr},
                    {"momentum", c.optimizer.momentum},
                    {"weight_decay", c.optimizer.weight_decay},
                    {"grad_clip", c.optimizer.max_grad_norm ? json(*c.optimizer.max_grad_norm)
                                                            : json(nullptr)}};
  j["lr_schedule"] = {{"steps", c.lr_schedule.steps},
                      {"factor", c.lr_schedule.factor},
                      {"warmup_iters", c.lr_schedule.warmup_iters}};
  auto wf = nlohmann::ordered_json::array();
  for (const auto& w : c.workflow) wf.push_back({phase_name(w.phase), w.epochs});
  j["workflow"] = wf;
  j["max_epochs"] = c.max_epochs;
  j["hooks"] = {{"eval_interval", c.hooks.eval_interval},
                {"log_interval", c.hooks.log_interval}};
  j["loss"] = to_json(m.loss);
  nlohmann::ordered_json anchors = {{"base_size", m.anchors.base_size},
                                    {"scales", m.anchors.scales},
                                    {"ratios", m.anchors.ratios},
                                    {"stride", m.anchors.stride},
                                    {"pos_iou_thr", c.train.assigner.pos_iou_thr},
                                    {"neg_iou_thr", c.train.assigner.neg_iou_thr},
                                    {"min_pos_iou", c.train.assigner.min_pos_iou},
                                    {"allowed_border", unbounded_json(c.train.allowed_border)},
                                    {"num", c.train.sampler.num},
                                    {"pos_fraction", c.train.sampler.pos_fraction}};
  anchors["neg_pos_ub"] = c.train.sampler.neg_pos_ub ? json(*c.train.sampler.neg_pos_ub) : json("inf");
  if (c.smoothl1_beta) anchors["smoothl1_beta"] = *c.smoothl1_beta;
  j["anchors"] = anchors;
  j["scale_policy"] = {{"mode", c.scale_policy.mode == ScaleMode::kValue ? "value" : "range"},
                       {"long_edge", c.scale_policy.long_edge},
                       {"short_edges", c.scale_policy.short_edges}};
  j["norm"] = {{"type", std::string(to_string(m.norm.kind))},
               {"eval", m.norm.eval},
               {"requires_grad", m.norm.requires_grad},
               {"num_groups", m.norm.num_groups},
               {"momentum", m.norm.momentum},
               {"eps", m.norm.eps}};
  j["seed"] = c.seed;
  return j;
}

}  // namespace detcore
