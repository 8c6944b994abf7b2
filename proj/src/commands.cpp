#include "detcore/commands.hpp"

#include "detcore/experiment.hpp"
#include "detcore/oracle.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <random>
#include <sstream>
#include <thread>

namespace detcore {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

ExperimentConfig resolve_config(const CommonOptions& opts) {
  ExperimentConfig cfg = opts.config ? load_config(*opts.config) : default_config();
  if (opts.seed) cfg.seed = *opts.seed;
  cfg.validate();
  return cfg;
}

unsigned thread_cap() {
  if (const char* env = std::getenv("DETCORE_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<unsigned>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

namespace {

std::string threshold_key(double t) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(2) << t;
  return s.str();
}

ordered_json matrix_json(const Eigen::MatrixXd& m) {
  ordered_json rows = ordered_json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    ordered_json row = ordered_json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

ordered_json vector_json(const Eigen::VectorXd& v) {
  ordered_json a = ordered_json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

void write_json(const fs::path& path, const ordered_json& j) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << j.dump(2) << '\n';
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
}

// Runs task(i) for i in [0, n) on up to `threads` workers.
template <typename Task>
void parallel_cells(std::size_t n, unsigned threads, Task&& task) {
  const unsigned workers = static_cast<unsigned>(std::min<std::size_t>(std::max(1u, threads), n));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) task(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) task(i);
    });
  for (auto& t : pool) t.join();
}

// Wraps a command body with the exit-code contract.
template <typename Body>
int guarded(std::ostream& err, Body&& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}

double ap50(const EvalResult& r) {
  auto it = r.ap_per_threshold.find(0.5);
  return it == r.ap_per_threshold.end() ? std::nan("") : it->second;
}

Box parse_bbox(const json& j, const std::string& where) {
  if (!j.is_array() || j.size() != 4) throw std::runtime_error(where + ": bbox must be [x1,y1,x2,y2]");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}

json read_json_file(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read " + path.string());
  return json::parse(f);
}

}  // namespace

ordered_json to_json(const EvalResult& r) {
  ordered_json ap = ordered_json::object();
  for (const auto& [thr, v] : r.ap_per_threshold) ap[threshold_key(thr)] = v;
  ordered_json j;
  j["ap"] = ap;
  j["map"] = r.map;
  j["ar_at_k"] = r.ar_at_k ? ordered_json(*r.ar_at_k) : ordered_json(nullptr);
  return j;
}

ordered_json weights_json(const TinyDetector& det) {
  ordered_json j;
  j["feature_dim"] = det.spec().feature_dim();
  j["anchors_per_cell"] = det.anchors_per_cell();
  j["cls_w"] = matrix_json(det.cls_w);
  j["reg_w"] = matrix_json(det.reg_w);
  j["norm"] = std::string(to_string(det.spec().norm.kind));
  j["bn"] = {{"running_mean", vector_json(det.bn.running_mean)},
             {"running_var", vector_json(det.bn.running_var)},
             {"gamma", vector_json(det.bn.gamma)},
             {"beta", vector_json(det.bn.beta)}};
  if (det.spec().norm.kind == NormKind::kGroupNorm)
    j["gn"] = {{"gamma", vector_json(det.gn.gamma)}, {"beta", vector_json(det.gn.beta)}};
  return j;
}

Report grid_loss_study(const ExperimentConfig& base, const std::vector<LossKind>& losses,
                       const std::vector<double>& weights, unsigned threads, std::ostream* err) {
  const ExperimentData data = make_data(base);
  Report rows;
  for (LossKind k : losses)
    for (double w : weights) rows.push_back({std::string(to_string(k)), format_value(w), 0.0});
  std::vector<std::string> failures(rows.size());

  parallel_cells(rows.size(), threads, [&](std::size_t i) {
    try {
      ExperimentConfig cfg = base;
      const LossKind kind = losses[i / weights.size()];
      // Keep the configured smooth L1 beta for the smooth L1 row only.
      const double beta = cfg.model.loss.kind == LossKind::kSmoothL1 ? cfg.model.loss.beta : 1.0;
      cfg.model.loss = LossSpec::defaults(kind);
      if (kind == LossKind::kSmoothL1) cfg.model.loss.beta = beta;
      cfg.model.loss.loss_weight = weights[i % weights.size()];
      cfg.smoothl1_beta.reset();
      const auto result = run_experiment(cfg, data);
      rows[i].value = ap50(evaluate(result.det, data.val, cfg));
    } catch (const std::exception& e) {
      rows[i].value = std::nan("");
      failures[i] = e.what();
    }
  });
  if (err)
    for (std::size_t i = 0; i < rows.size(); ++i)
      if (!failures[i].empty())
        *err << "cell " << rows[i].label << " lw=" << rows[i].metric << " failed: " << failures[i]
             << '\n';
  return rows;
}

std::vector<RpnSetting> rpn_settings() {
  const double inf = kUnboundedBorder;
  return {{1.0 / 5, 0, std::nullopt, "1/5, 0, inf"},   {1.0 / 9, 0, std::nullopt, "1/9, 0, inf"},
          {1.0 / 15, 0, std::nullopt, "1/15, 0, inf"}, {1.0 / 9, inf, std::nullopt, "1/9, inf, inf"},
          {1.0 / 9, inf, 3.0, "1/9, inf, 3"},           {1.0 / 9, inf, 5.0, "1/9, inf, 5"}};
}

Report rpn_study(const ExperimentConfig& base, unsigned threads, std::ostream* err) {
  ExperimentConfig single = base;
  single.model.num_classes = 1;
  const ExperimentData data = make_data(single);
  const auto settings = rpn_settings();
  std::vector<double> ar(settings.size(), std::nan(""));
  std::vector<std::string> failures(settings.size());

  parallel_cells(settings.size(), threads, [&](std::size_t i) {
    try {
      ExperimentConfig cfg = single;
      cfg.smoothl1_beta = settings[i].smoothl1_beta;
      cfg.train.allowed_border = settings[i].allowed_border;
      cfg.train.sampler.neg_pos_ub = settings[i].neg_pos_ub;
      const auto result = run_experiment(cfg, data);
      ar[i] = evaluate(result.det, data.val, cfg, 1000).ar_at_k.value_or(std::nan(""));
    } catch (const std::exception& e) {
      failures[i] = e.what();
    }
  });

  Report rows;
  const double inf = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < settings.size(); ++i) {
    const auto& s = settings[i];
    rows.push_back({s.label, "smoothl1_beta", s.smoothl1_beta});
    rows.push_back({s.label, "allowed_border", s.allowed_border});
    rows.push_back({s.label, "neg_pos_ub", s.neg_pos_ub.value_or(inf)});
    rows.push_back({s.label, "AR_1000", ar[i]});
    if (err && !failures[i].empty()) *err << "row " << s.label << " failed: " << failures[i] << '\n';
  }
  return rows;
}

Report bench(const std::string& kernel, std::size_t size, std::size_t reps, std::uint64_t seed) {
  if (size < 1 || reps < 1) throw std::invalid_argument("bench: size and reps must be >= 1");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> pos(0, 1000), extent(4, 120), unit(0, 1);
  auto random_boxes = [&](std::size_t n) {
    std::vector<Box> out(n);
    for (auto& b : out) {
      const double x = pos(rng), y = pos(rng);
      b = {x, y, x + extent(rng), y + extent(rng)};
    }
    return out;
  };

  std::function<void()> run;
  std::vector<Box> a, b;
  std::vector<Detection> dets;
  std::vector<Box> base;
  volatile double sink = 0;
  if (kernel == "iou_matrix") {
    a = random_boxes(size);
    b = random_boxes(size);
    run = [&] { sink = sink + iou_matrix(a, b)(0, 0); };
  } else if (kernel == "nms") {
    for (const Box& bx : random_boxes(size)) dets.push_back({bx, unit(rng), 0});
    run = [&] { sink = sink + static_cast<double>(nms(dets, 0.5).size()); };
  } else if (kernel == "anchors") {
    base = base_anchors(AnchorGenSpec{16, {0.5, 1, 2}, {0.5, 1, 2}, 16});
    const int side = static_cast<int>(size);
    run = [&, side] { sink = sink + static_cast<double>(grid_anchors(base, side, side, 16).size()); };
  } else {
    throw std::invalid_argument("unknown bench kernel '" + kernel + "' (iou_matrix, nms, anchors)");
  }

  std::vector<double> ms;
  for (std::size_t r = 0; r < reps; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    run();
    ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
  }
  std::vector<double> sorted = ms;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  const double median = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  const std::string label = kernel + " n=" + std::to_string(size);
  return {{label, "min_ms", sorted.front()}, {label, "median_ms", median}, {label, "max_ms", sorted.back()}};
}

// ---------------------------------------------------------------------------
// Commands

int cmd_train(const CommonOptions& opts, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const ExperimentConfig cfg = resolve_config(opts);
    fs::create_directories(opts.out / "eval");
    write_json(opts.out / "config.json", to_json(cfg));

    const ExperimentData data = make_data(cfg);
    std::ostringstream log;
    const auto result = run_experiment(cfg, data, &log);

    write_text(opts.out / "train.log", log.str());
    std::ostringstream events;
    for (const auto& e : result.state.events)
      events << to_string(e.point) << ' ' << e.epoch << ' ' << e.iter << '\n';
    write_text(opts.out / "events.log", events.str());
    write_json(opts.out / "weights.json", weights_json(result.det));
    for (const auto& [epoch, r] : result.state.eval_records) {
      std::ostringstream name;
      name << "epoch_" << std::setw(3) << std::setfill('0') << epoch << ".json";
      ordered_json j;
      j["epoch"] = epoch;
      j.update(to_json(r));
      write_json(opts.out / "eval" / name.str(), j);
    }
    if (!opts.quiet) {
      out << log.str();
      if (!result.state.eval_records.empty()) {
        const auto& [epoch, r] = result.state.eval_records.back();
        out << "epoch " << epoch << ": AP@0.5 " << ap50(r) << ", mAP " << r.map << ", AR@1000 "
            << r.ar_at_k.value_or(std::nan("")) << '\n';
      }
      out << "wrote " << opts.out.string() << '\n';
    }
    return kExitOk;
  });
}

int cmd_grid_loss(const CommonOptions& opts, const std::vector<std::string>& losses,
                  const std::vector<double>& weights, std::ostream& out, std::ostream& err) {
  return guarded(err, [&]() -> int {
    std::vector<LossKind> kinds;
    for (const auto& name : losses) {
      try {
        kinds.push_back(parse_loss_kind(name));
      } catch (const std::invalid_argument& e) {
        err << "usage error: " << e.what() << '\n';
        return kExitUsage;
      }
    }
    if (kinds.empty() || weights.empty()) {
      err << "usage error: need at least one loss and one weight\n";
      return kExitUsage;
    }
    for (double w : weights) {
      if (!(w > 0)) {
        err << "usage error: loss weights must be > 0\n";
        return kExitUsage;
      }
    }
    const ExperimentConfig cfg = resolve_config(opts);
    const Report rows = grid_loss_study(cfg, kinds, weights, thread_cap(), &err);
    fs::create_directories(opts.out);
    write_text(opts.out / "grid_loss.csv", to_csv(rows));
    if (!opts.quiet) out << render_table(rows, "loss \\ lw");
    return kExitOk;
  });
}

int cmd_rpn_study(const CommonOptions& opts, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const ExperimentConfig cfg = resolve_config(opts);
    const Report rows = rpn_study(cfg, thread_cap(), &err);
    fs::create_directories(opts.out);
    write_text(opts.out / "rpn_study.csv", to_csv(rows));
    if (!opts.quiet) out << render_table(rows, "beta, border, ub");
    return kExitOk;
  });
}

int cmd_oracle(const std::string& suite, const CommonOptions& opts, std::ostream& out,
               std::ostream& err) {
  return guarded(err, [&]() -> int {
    std::vector<std::string> suites{suite};
    if (suite == "all") suites = {"iou", "nms", "grad", "map"};
    const std::uint64_t seed = opts.seed.value_or(0);
    bool ok = true;
    for (const auto& s : suites) {
      OracleReport r;
      try {
        r = run_oracle(s, seed);
      } catch (const std::invalid_argument& e) {
        err << "usage error: " << e.what() << '\n';
        return kExitUsage;
      }
      ok = ok && r.ok();
      if (!opts.quiet || !r.ok()) (r.ok() ? out : err) << r << '\n';
    }
    return ok ? kExitOk : kExitRuntime;
  });
}

int cmd_bench(const std::string& kernel, std::size_t size, std::size_t reps,
              const CommonOptions& opts, std::ostream& out, std::ostream& err) {
  return guarded(err, [&]() -> int {
    Report rows;
    try {
      rows = bench(kernel, size, reps, opts.seed.value_or(0));
    } catch (const std::invalid_argument& e) {
      err << "usage error: " << e.what() << '\n';
      return kExitUsage;
    }
    out << to_csv(rows);
    return kExitOk;
  });
}

int cmd_eval(const fs::path& dets_path, const fs::path& gts_path, const CommonOptions& opts,
             std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    std::vector<ImageDetection> dets;
    const json dj = read_json_file(dets_path);
    if (!dj.is_array()) throw std::runtime_error(dets_path.string() + ": expected an array");
    for (std::size_t i = 0; i < dj.size(); ++i) {
      const auto& d = dj[i];
      const std::string where = dets_path.string() + "[" + std::to_string(i) + "]";
      dets.push_back({d.at("image_id").get<int>(),
                      {parse_bbox(d.at("bbox"), where), d.at("score").get<double>(),
                       d.at("category_id").get<int>()}});
    }
    std::vector<GroundTruth> gts;
    const json gj = read_json_file(gts_path);
    if (!gj.is_array()) throw std::runtime_error(gts_path.string() + ": expected an array");
    for (std::size_t i = 0; i < gj.size(); ++i) {
      const auto& g = gj[i];
      const std::string where = gts_path.string() + "[" + std::to_string(i) + "]";
      gts.push_back({g.at("image_id").get<int>(), parse_bbox(g.at("bbox"), where),
                     g.at("category_id").get<int>()});
    }
    EvalResult r = eval_map(dets, gts);
    r.ar_at_k = eval_ar(dets, gts, 100).value;
    fs::create_directories(opts.out);
    write_json(opts.out / "eval.json", to_json(r));
    if (!opts.quiet) {
      const auto ap75 = r.ap_per_threshold.at(0.75);
      out << "mAP " << r.map << "  AP@0.5 " << ap50(r) << "  AP@0.75 " << ap75 << "  AR@100 "
          << *r.ar_at_k << '\n';
    }
    return kExitOk;
  });
}

int cmd_gen_data(const CommonOptions& opts, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const ExperimentConfig cfg = resolve_config(opts);
    const ExperimentData data = make_data(cfg);
    write_dataset(data.train, opts.out / "train");
    write_dataset(data.val, opts.out / "val");
    if (!opts.quiet)
      out << "wrote " << data.train.size() << " train and " << data.val.size()
          << " val images under " << opts.out.string() << '\n';
    return kExitOk;
  });
}

// ---------------------------------------------------------------------------
// Command line

namespace {

void add_common(CLI::App* cmd, CommonOptions& opts, std::string& config, std::string& out_dir) {
  cmd->add_option("--config", config, "JSON experiment config (defaults built in)");
  cmd->add_option("--out", out_dir, "output directory")->capture_default_str();
  cmd->add_option("--seed", opts.seed, "override the config seed");
  cmd->add_flag("--quiet", opts.quiet, "suppress normal output");
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  for (std::string item; std::getline(in, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"detcore: detection toolkit primitives, studies and checks"};
  app.require_subcommand(1);
  CommonOptions opts;
  std::string config, out_dir = "detcore_out";

  auto* train = app.add_subcommand("train", "train the reference detector from a config");
  add_common(train, opts, config, out_dir);

  std::string losses = "smooth_l1,l1,balanced_l1,iou,giou,bounded_iou";
  std::string weights = "1,2,5,10";
  auto* grid = app.add_subcommand("grid-loss", "AP@0.5 for every (loss, loss weight) cell");
  add_common(grid, opts, config, out_dir);
  grid->add_option("--losses", losses, "comma separated loss names")->capture_default_str();
  grid->add_option("--weights", weights, "comma separated loss weights")->capture_default_str();

  auto* rpn = app.add_subcommand("rpn-study", "AR@1000 over the six proposal settings");
  add_common(rpn, opts, config, out_dir);

  std::string suite = "all";
  auto* oracle = app.add_subcommand("oracle", "compare kernels against brute-force references");
  add_common(oracle, opts, config, out_dir);
  oracle->add_option("suite", suite, "iou, nms, grad, map or all")->capture_default_str();

  std::string kernel;
  std::size_t size = 1000, reps = 5;
  auto* bench_cmd = app.add_subcommand("bench", "time a kernel; CSV of min/median/max ms");
  add_common(bench_cmd, opts, config, out_dir);
  bench_cmd->add_option("kernel", kernel, "iou_matrix, nms or anchors")->required();
  bench_cmd->add_option("--size", size, "problem size")->capture_default_str();
  bench_cmd->add_option("--reps", reps, "repetitions")->capture_default_str();

  std::string dets_path, gts_path;
  auto* eval = app.add_subcommand("eval", "score a detections file against ground truth");
  add_common(eval, opts, config, out_dir);
  eval->add_option("--dets", dets_path, "detections JSON")->required();
  eval->add_option("--gts", gts_path, "ground truth JSON")->required();

  auto* gen = app.add_subcommand("gen-data", "write the synthetic train/val splits");
  add_common(gen, opts, config, out_dir);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }
  if (!config.empty()) opts.config = config;
  opts.out = out_dir;

  if (train->parsed()) return cmd_train(opts, out, err);
  if (grid->parsed()) {
    std::vector<double> ws;
    for (const auto& w : split_list(weights)) {
      try {
        ws.push_back(parse_value(w));
      } catch (const std::invalid_argument& e) {
        err << "usage error: --weights: " << e.what() << '\n';
        return kExitUsage;
      }
    }
    return cmd_grid_loss(opts, split_list(losses), ws, out, err);
  }
  if (rpn->parsed()) return cmd_rpn_study(opts, out, err);
  if (oracle->parsed()) return cmd_oracle(suite, opts, out, err);
  if (bench_cmd->parsed()) return cmd_bench(kernel, size, reps, opts, out, err);
  if (eval->parsed()) return cmd_eval(dets_path, gts_path, opts, out, err);
  if (gen->parsed()) return cmd_gen_data(opts, out, err);
  return kExitUsage;
}

}  // namespace detcore
