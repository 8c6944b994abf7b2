#include "detcore/pipeline.hpp"

#include "doctest.h"

#include <algorithm>
#include <set>
#include <sstream>
#include <string>

using namespace detcore;

namespace {

struct CountingWorkload : Workload {
  std::size_t train_batches = 2, val_batches = 1;
  int train_calls = 0, val_calls = 0;

  std::size_t num_batches(Phase p) const override {
    return p == Phase::kTrain ? train_batches : val_batches;
  }
  double train_step(std::size_t, const RunnerState&) override {
    ++train_calls;
    return 1.0 / train_calls;
  }
  void val_step(std::size_t, const RunnerState&) override { ++val_calls; }
};

std::vector<HookPoint> points(const RunnerState& s) {
  std::vector<HookPoint> out;
  for (const auto& e : s.events) out.push_back(e.point);
  return out;
}

// Checks the run grammar: before_run (train_block | val_block)+ after_run,
// where each block brackets its own iteration pairs.
bool well_formed(const std::vector<HookPoint>& p) {
  using H = HookPoint;
  if (p.size() < 2 || p.front() != H::kBeforeRun || p.back() != H::kAfterRun) return false;
  std::size_t i = 1;
  int blocks = 0;
  while (i + 1 < p.size()) {
    H open = p[i], close, bi, ai;
    if (open == H::kBeforeTrainEpoch) {
      close = H::kAfterTrainEpoch, bi = H::kBeforeTrainIter, ai = H::kAfterTrainIter;
    } else if (open == H::kBeforeValEpoch) {
      close = H::kAfterValEpoch, bi = H::kBeforeValIter, ai = H::kAfterValIter;
    } else {
      return false;
    }
    ++i;
    while (i + 1 < p.size() && p[i] == bi) {
      if (p[i + 1] != ai) return false;
      i += 2;
    }
    if (p[i] != close) return false;
    ++i;
    ++blocks;
  }
  return blocks > 0;
}

Hook recorder(const std::string& name, int priority, std::vector<std::string>& log) {
  Hook h{name, priority, {}};
  for (HookPoint p : kAllHookPoints)
    h.callbacks[p] = [&log, name, p](RunnerState&) {
      log.push_back(std::string(to_string(p)) + ":" + name);
    };
  return h;
}

}  // namespace

TEST_CASE("single train epoch event sequence") {
  using H = HookPoint;
  Runner r({{Phase::kTrain, 1}});
  CountingWorkload w;
  const auto s = r.run(w);
  const std::vector<H> want{H::kBeforeRun,      H::kBeforeTrainEpoch, H::kBeforeTrainIter,
                            H::kAfterTrainIter, H::kBeforeTrainIter,  H::kAfterTrainIter,
                            H::kAfterTrainEpoch, H::kAfterRun};
  CHECK(points(s) == want);
  CHECK(s.iter == 2);
  CHECK(s.epoch == 1);
  CHECK(w.train_calls == 2);
  // counters seen by each event are the completed ones at dispatch time
  CHECK(s.events[3] == Event{H::kAfterTrainIter, 0, 1});
  CHECK(s.events[6] == Event{H::kAfterTrainEpoch, 1, 2});
}

TEST_CASE("val events follow train events") {
  Runner r({{Phase::kTrain, 1}, {Phase::kVal, 1}});
  CountingWorkload w;
  const auto p = points(r.run(w));
  const auto last_train = std::find(p.begin(), p.end(), HookPoint::kAfterTrainEpoch);
  const auto first_val = std::find(p.begin(), p.end(), HookPoint::kBeforeValEpoch);
  REQUIRE(last_train != p.end());
  REQUIRE(first_val != p.end());
  CHECK(last_train < first_val);
  CHECK(well_formed(p));
  CHECK(w.val_calls == 1);
}

TEST_CASE("zero batches still fire epoch events") {
  Runner r({{Phase::kTrain, 2}, {Phase::kVal, 1}});
  CountingWorkload w;
  w.train_batches = 0;
  w.val_batches = 0;
  const auto s = r.run(w);
  const auto p = points(s);
  CHECK(well_formed(p));
  CHECK(std::count(p.begin(), p.end(), HookPoint::kBeforeTrainEpoch) == 2);
  CHECK(std::count(p.begin(), p.end(), HookPoint::kBeforeTrainIter) == 0);
  CHECK(std::count(p.begin(), p.end(), HookPoint::kBeforeValIter) == 0);
  CHECK(s.epoch == 2);
  CHECK(s.iter == 0);
}

TEST_CASE("counters and max_epochs") {
  Runner r({{Phase::kTrain, 2}, {Phase::kVal, 1}}, 5);
  CountingWorkload w;
  w.train_batches = 3;
  const auto s = r.run(w);
  CHECK(s.epoch == 5);
  CHECK(s.iter == 15);
  CHECK(w.train_calls == 15);  // minimum pipeline, no hooks registered
  // the val stage after the last train epoch still runs
  CHECK(s.val_epoch == 3);
  CHECK(well_formed(points(s)));

  Runner plain({{Phase::kTrain, 3}, {Phase::kVal, 2}});
  CountingWorkload w2;
  const auto s2 = plain.run(w2);
  CHECK(s2.epoch == 3);
  CHECK(s2.val_epoch == 2);
  CHECK(s2.iter == 6);

  CHECK_THROWS_AS(Runner({}), std::invalid_argument);
  CHECK_THROWS_AS(Runner({{Phase::kTrain, 0}}), std::invalid_argument);
  CHECK_THROWS_AS(Runner({{Phase::kVal, 1}}, 3), std::invalid_argument);
}

TEST_CASE("hook priority and registration order") {
  std::vector<std::string> log;
  Runner r({{Phase::kTrain, 1}, {Phase::kVal, 1}});
  r.register_hook(recorder("A", 50, log));
  r.register_hook(recorder("B", 10, log));
  r.register_hook(recorder("C", 50, log));
  CountingWorkload w;
  r.run(w);
  REQUIRE(log.size() % 3 == 0);
  for (std::size_t i = 0; i < log.size(); i += 3) {
    const std::string point = log[i].substr(0, log[i].find(':'));
    CHECK(log[i] == point + ":B");
    CHECK(log[i + 1] == point + ":A");
    CHECK(log[i + 2] == point + ":C");
  }
  CHECK_THROWS_AS(r.register_hook(recorder("A", 1, log)), std::invalid_argument);
}

TEST_CASE("hook failures name the hook") {
  Runner r({{Phase::kTrain, 1}});
  Hook bad{"boom", 50, {}};
  bad.callbacks[HookPoint::kAfterTrainIter] = [](RunnerState&) { throw std::runtime_error("x"); };
  r.register_hook(bad);
  CountingWorkload w;
  try {
    r.run(w);
    FAIL("expected a throw");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("boom") != std::string::npos);
    CHECK(std::string(e.what()).find("after_train_iter") != std::string::npos);
  }
}

TEST_CASE("lr schedule") {
  LrSchedule s;
  s.base_lr = 0.02;
  s.steps = {8, 11};
  s.factor = 0.1;
  CHECK(lr_at(s, 0, 0) == doctest::Approx(0.02));
  CHECK(lr_at(s, 7, 500) == doctest::Approx(0.02));
  CHECK(lr_at(s, 9, 500) == doctest::Approx(0.002));
  CHECK(lr_at(s, 11, 500) == doctest::Approx(0.0002));

  s.warmup_iters = 100;
  s.warmup_ratio = 0.25;
  CHECK(lr_at(s, 0, 0) == doctest::Approx(0.005));
  CHECK(lr_at(s, 0, 50) == doctest::Approx(0.0125));
  CHECK(lr_at(s, 0, 100) == doctest::Approx(0.02));

  LrSchedule bad;
  bad.steps = {5, 3};
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("lr hook drives the runner lr") {
  LrSchedule s;
  s.base_lr = 0.1;
  s.steps = {1};
  Runner r({{Phase::kTrain, 2}});
  r.register_hook(lr_hook(s));
  std::vector<double> seen;
  Hook spy{"spy", 60, {}};
  spy.callbacks[HookPoint::kBeforeTrainIter] = [&](RunnerState& st) { seen.push_back(st.lr); };
  r.register_hook(spy);
  CountingWorkload w;
  r.run(w);
  REQUIRE(seen.size() == 4);
  CHECK(seen[0] == doctest::Approx(0.1));
  CHECK(seen[3] == doctest::Approx(0.01));
}

TEST_CASE("eval hook") {
  EvalResult fixed;
  fixed.ap_per_threshold[0.5] = 0.25;
  fixed.map = 0.125;
  auto count_evals = [&](int n) {
    Runner r({{Phase::kTrain, 3}});
    r.register_hook(eval_hook(n, [&](const RunnerState&) { return fixed; }));
    CountingWorkload w;
    return r.run(w).eval_records;
  };
  const auto every = count_evals(1);
  CHECK(every.size() == 3);
  const auto second = count_evals(2);
  REQUIRE(second.size() == 1);
  CHECK(second[0].first == 2);
  CHECK(second[0].second.map == 0.125);
  CHECK(second[0].second.ap_per_threshold == fixed.ap_per_threshold);
  CHECK_THROWS_AS(eval_hook(0, [&](const RunnerState&) { return fixed; }), std::invalid_argument);
}

TEST_CASE("logger hook") {
  std::ostringstream out;
  Runner r({{Phase::kTrain, 1}});
  r.register_hook(logger_hook(out, 1));
  CountingWorkload w;
  r.run(w);
  const std::string text = out.str();
  CHECK(text.find("iter 1") != std::string::npos);
  CHECK(text.find("finished train epoch 1") != std::string::npos);
}

TEST_CASE("hook point names are distinct") {
  std::set<std::string_view> names;
  for (HookPoint p : kAllHookPoints) names.insert(to_string(p));
  CHECK(names.size() == 10);
}
