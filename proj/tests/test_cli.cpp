#include "detcore/commands.hpp"
#include "detcore/config.hpp"
#include "detcore/oracle.hpp"
#include "detcore/report.hpp"

#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

using namespace detcore;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("detcore_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void spit(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

// A config small enough for a quick run.
fs::path small_config(const fs::path& dir, int epochs = 4) {
  auto j = to_json(default_config());
  j["data"]["train_images"] = 16;
  j["data"]["val_images"] = 4;
  j["max_epochs"] = epochs;
  const fs::path p = dir / "small.json";
  spit(p, j.dump(2));
  return p;
}

int run(std::vector<std::string> args, std::string* out_text = nullptr, std::string* err_text = nullptr) {
  args.insert(args.begin(), "detcore");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  if (out_text) *out_text = out.str();
  if (err_text) *err_text = err.str();
  return code;
}

}  // namespace

TEST_CASE("value formatting round trips") {
  for (double v : {0.0, 1.0, -2.5, 0.1, 1.0 / 3.0, 1e-300, 6.02e23}) CHECK(parse_value(format_value(v)) == v);
  CHECK(format_value(std::numeric_limits<double>::infinity()) == "inf");
  CHECK(format_value(-std::numeric_limits<double>::infinity()) == "-inf");
  CHECK(format_value(std::nan("")) == "nan");
  CHECK(std::isnan(parse_value("nan")));
  CHECK(format_value(0.5) == "0.5");
  CHECK_THROWS_AS(parse_value("1.5x"), std::invalid_argument);
  CHECK_THROWS_AS(parse_value(""), std::invalid_argument);
}

TEST_CASE("csv round trip") {
  const Report rows{{"smooth_l1", "1", 0.917},
                    {"a, \"quoted\" label", "AR_1000", std::nan("")},
                    {"1/9, inf, 3", "allowed_border", std::numeric_limits<double>::infinity()},
                    {"multi\nline", "m", -0.0}};
  const std::string csv = to_csv(rows);
  CHECK(csv.rfind("label,metric,value\n", 0) == 0);
  CHECK(parse_csv(csv) == rows);
  CHECK(parse_csv(csv + "\n\n") == rows);
  CHECK_THROWS_AS(parse_csv("label,metric,value\na,b\n"), std::invalid_argument);
  CHECK_THROWS_AS(parse_csv("nope\n"), std::invalid_argument);
  try {
    parse_csv("label,metric,value\na,b,1\nc,d,zz\n");
    FAIL("expected a throw");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("line 3") != std::string::npos);
  }
}

TEST_CASE("pivot table") {
  const Report rows{{"l1", "1", 0.5}, {"l1", "2", 0.25}, {"iou", "2", 0.75}};
  const std::string t = render_table(rows, "loss", 2);
  std::istringstream in(t);
  std::string header, rule, r1, r2;
  std::getline(in, header);
  std::getline(in, rule);
  std::getline(in, r1);
  std::getline(in, r2);
  CHECK(header.find("loss") == 0);
  CHECK(header.find('1') < header.find('2'));
  CHECK(rule.find_first_not_of("- ") == std::string::npos);
  CHECK(r1.find("0.50") != std::string::npos);
  CHECK(r2.find("iou") == 0);
  CHECK(r2.find('-') != std::string::npos);  // missing lw=1 cell
}

TEST_CASE("config schema") {
  const auto d = default_config();
  CHECK_NOTHROW(d.validate());
  const auto back = parse_config(to_json(d));
  CHECK(to_json(back).dump() == to_json(d).dump());

  auto j = to_json(d);
  j["model"]["bogus"] = 1;
  try {
    parse_config(j);
    FAIL("expected a throw");
  } catch (const ConfigError& e) {
    CHECK(e.path() == "model.bogus");
  }
  j = to_json(d);
  j["optimizer"]["grad_clip"] = nullptr;
  CHECK_FALSE(parse_config(j).optimizer.max_grad_norm.has_value());
  j["optimizer"]["grad_clip"] = "big";
  CHECK_THROWS_AS(parse_config(j), ConfigError);
  j = to_json(d);
  j["model"]["loss"]["loss_weight"] = -1;
  CHECK_THROWS_AS(parse_config(j), ConfigError);
  CHECK(parse_config(nlohmann::json::object()).max_epochs == d.max_epochs);

  const fs::path repo_default = fs::path(DETCORE_SOURCE_DIR) / "configs" / "default.json";
  CHECK(to_json(load_config(repo_default)).dump() == to_json(d).dump());
}

TEST_CASE("oracle suites") {
  for (const char* s : {"iou", "nms", "grad", "map"}) {
    const auto r = run_oracle(s, 1);
    CAPTURE(r);
    CHECK(r.ok());
  }
  CHECK_THROWS_AS(run_oracle("bogus", 0), std::invalid_argument);

  const auto off_by_one = [](const Box& a, const Box& b) {
    // legacy "+1" pixel convention
    const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1) + 1;
    const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1) + 1;
    const double inter = iw > 0 && ih > 0 ? iw * ih : 0;
    const double ua = (a.x2 - a.x1 + 1) * (a.y2 - a.y1 + 1) + (b.x2 - b.x1 + 1) * (b.y2 - b.y1 + 1) - inter;
    return inter / ua;
  };
  const auto bad = iou_suite(1, 1000, off_by_one);
  CHECK_FALSE(bad.ok());
  CHECK_FALSE(bad.first_failure.empty());

  const auto keep_all = [](const std::vector<Detection>& d, double) { return score_order(d); };
  CHECK_FALSE(nms_suite(1, 50, keep_all).ok());

  std::ostringstream text;
  text << grad_suite(1, 20);
  CHECK(text.str().find("max relative error") != std::string::npos);
}

TEST_CASE("oracle command") {
  std::string out, err;
  CHECK(run({"oracle", "iou"}, &out) == kExitOk);
  CHECK(out.find("passed") != std::string::npos);
  CHECK(run({"oracle", "grad"}, &out) == kExitOk);
  CHECK(out.find("max relative error") != std::string::npos);
  CHECK(run({"oracle", "bogus"}, &out, &err) == kExitUsage);
}

TEST_CASE("usage errors") {
  CHECK(run({}) == kExitUsage);
  CHECK(run({"frobnicate"}) == kExitUsage);
  CHECK(run({"train", "--no-such-flag"}) == kExitUsage);
  CHECK(run({"--help"}) == kExitOk);
  CHECK(run({"bench", "nope"}) == kExitUsage);
  CHECK(run({"grid-loss", "--losses", "focal"}) == kExitUsage);
  CHECK(run({"grid-loss", "--weights", "0"}) == kExitUsage);
}

TEST_CASE("train command") {
  const auto dir = scratch("train");
  const auto cfg = small_config(dir, 3);
  CHECK(run({"train", "--config", cfg.string(), "--out", (dir / "a").string(), "--quiet"}) == kExitOk);
  CHECK(run({"train", "--config", cfg.string(), "--out", (dir / "b").string(), "--quiet"}) == kExitOk);
  for (const char* f : {"config.json", "weights.json", "events.log", "train.log"}) {
    CHECK(fs::exists(dir / "a" / f));
  }
  for (int e = 1; e <= 3; ++e) {
    const std::string name = "eval/epoch_00" + std::to_string(e) + ".json";
    REQUIRE(fs::exists(dir / "a" / name));
    CHECK(slurp(dir / "a" / name) == slurp(dir / "b" / name));
  }
  CHECK(slurp(dir / "a" / "weights.json") == slurp(dir / "b" / "weights.json"));
  CHECK(slurp(dir / "a" / "events.log").rfind("before_run", 0) == 0);

  // a different seed changes the run
  CHECK(run({"train", "--config", cfg.string(), "--out", (dir / "c").string(), "--seed", "7", "--quiet"}) == kExitOk);
  CHECK(slurp(dir / "a" / "weights.json") != slurp(dir / "c" / "weights.json"));

  auto j = nlohmann::json::parse(slurp(cfg));
  j["model"]["bogus"] = 1;
  spit(dir / "bad.json", j.dump());
  std::string err;
  CHECK(run({"train", "--config", (dir / "bad.json").string(), "--out", (dir / "d").string()}, nullptr, &err) ==
        kExitUsage);
  CHECK(err.find("model.bogus") != std::string::npos);
  spit(dir / "broken.json", "{not json");
  CHECK(run({"train", "--config", (dir / "broken.json").string(), "--out", (dir / "d").string()}) == kExitUsage);
  CHECK(run({"train", "--config", (dir / "missing.json").string(), "--out", (dir / "d").string()}) != kExitOk);
  fs::remove_all(dir);
}

TEST_CASE("grid loss command") {
  const auto dir = scratch("grid");
  const auto cfg = small_config(dir, 3);
  CHECK(run({"grid-loss", "--config", cfg.string(), "--out", dir.string(), "--losses", "smooth_l1,giou",
             "--weights", "1,2", "--quiet"}) == kExitOk);
  const Report rows = parse_csv(slurp(dir / "grid_loss.csv"));
  REQUIRE(rows.size() == 4);
  CHECK(rows[0].label == "smooth_l1");
  CHECK(rows[0].metric == "1");
  CHECK(rows[3].label == "giou");
  CHECK(rows[3].metric == "2");
  for (const auto& r : rows) {
    CHECK(r.value >= 0);
    CHECK(r.value <= 1);
  }
  CHECK(to_csv(rows) == slurp(dir / "grid_loss.csv"));
  fs::remove_all(dir);
}

TEST_CASE("grid defaults cover the paper axes") {
  // Parsing only: the defaults are the six losses and four weights.
  std::string out;
  CHECK(run({"grid-loss", "--help"}, &out) == kExitOk);
  CHECK(out.find("1,2,5,10") != std::string::npos);
  CHECK(out.find("smooth_l1,l1,balanced_l1,iou,giou,bounded_iou") != std::string::npos);
}

TEST_CASE("rpn settings and study") {
  const auto s = rpn_settings();
  REQUIRE(s.size() == 6);
  CHECK(s[0].smoothl1_beta == doctest::Approx(1.0 / 5));
  CHECK(s[0].allowed_border == 0);
  CHECK_FALSE(s[0].neg_pos_ub.has_value());
  CHECK(s[2].smoothl1_beta == doctest::Approx(1.0 / 15));
  CHECK(std::isinf(s[3].allowed_border));
  CHECK(s[4].neg_pos_ub == 3u);
  CHECK(s[5].neg_pos_ub == 5u);

  auto cfg = default_config();
  cfg.data.train_images = 16;
  cfg.data.val_images = 4;
  cfg.max_epochs = 2;
  const Report rows = rpn_study(cfg, 1);
  REQUIRE(rows.size() == 24);
  std::set<std::string> labels;
  for (const auto& r : rows) {
    labels.insert(r.label);
    if (r.metric == "AR_1000") {
      CHECK(r.value >= 0);
      CHECK(r.value <= 1);
    }
  }
  CHECK(labels.size() == 6);
  const std::string csv = to_csv(rows);
  CHECK(csv.find("inf") != std::string::npos);
  CHECK(parse_csv(csv) == rows);
}

TEST_CASE("bench command") {
  const Report r = bench("iou_matrix", 50, 1, 0);
  REQUIRE(r.size() == 3);
  CHECK(r[0].metric == "min_ms");
  CHECK(r[1].metric == "median_ms");
  CHECK(r[2].metric == "max_ms");
  CHECK(r[0].value <= r[1].value);
  CHECK(r[1].value <= r[2].value);
  for (const char* k : {"nms", "anchors"}) CHECK(bench(k, 20, 3, 0).size() == 3);
  CHECK_THROWS_AS(bench("iou_matrix", 0, 1, 0), std::invalid_argument);
  std::string out;
  CHECK(run({"bench", "nms", "--size", "100", "--reps", "2"}, &out) == kExitOk);
  CHECK(parse_csv(out).size() == 3);
}

TEST_CASE("eval and gen-data commands") {
  const auto dir = scratch("eval");
  spit(dir / "gts.json", R"([{"image_id": 0, "bbox": [0, 0, 10, 10], "category_id": 0}])");
  spit(dir / "dets.json", R"([{"image_id": 0, "bbox": [0, 0, 6, 10], "score": 0.9, "category_id": 0}])");
  CHECK(run({"eval", "--dets", (dir / "dets.json").string(), "--gts", (dir / "gts.json").string(), "--out",
             dir.string(), "--quiet"}) == kExitOk);
  const auto j = nlohmann::json::parse(slurp(dir / "eval.json"));
  CHECK(j.at("map").get<double>() == doctest::Approx(0.3));
  CHECK(j.at("ap").at("0.50").get<double>() == 1.0);

  spit(dir / "bad.json", R"([{"image_id": 0}])");
  CHECK(run({"eval", "--dets", (dir / "bad.json").string(), "--gts", (dir / "gts.json").string(), "--out",
             dir.string()}) == kExitRuntime);

  const auto cfg = small_config(dir);
  CHECK(run({"gen-data", "--config", cfg.string(), "--out", (dir / "data").string(), "--quiet"}) == kExitOk);
  CHECK(fs::exists(dir / "data" / "train" / "annotations.json"));
  CHECK(fs::exists(dir / "data" / "val" / "annotations.json"));
  fs::remove_all(dir);
}

TEST_CASE("thread cap") {
  setenv("DETCORE_THREADS", "3", 1);
  CHECK(thread_cap() == 3);
  setenv("DETCORE_THREADS", "zero", 1);
  CHECK(thread_cap() >= 1);
  unsetenv("DETCORE_THREADS");
  CHECK(thread_cap() >= 1);
}
