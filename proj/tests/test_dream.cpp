#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "tfl/dream.hpp"

using namespace tfl;
namespace fs = std::filesystem;

namespace {

ModelSpec tiny_spec() {
  ModelSpec s = catalog("C-1");
  s.stem.width = 4;
  s.stem.depth = 1;
  return s;
}

Tensor expected_noise(const Shape& shape, uint64_t seed) {
  RngStream rng(seed);
  Tensor x(shape);
  for (double& v : x.mutable_data()) v = rng.uniform(0.4, 0.6);
  return x;
}

} // namespace

TEST_CASE("config bounds are enforced") {
  DreamConfig cfg;
  cfg.steps = 0;
  CHECK_THROWS_AS(activation_maximize_fn([](const Tensor& x, ForwardCtx&) { return mean(x); },
                                         {2, 2, 1}, cfg),
                  ContractError);
  cfg.steps = 1;
  cfg.step_size = 0.0;
  CHECK_THROWS_AS(activation_maximize_fn([](const Tensor& x, ForwardCtx&) { return mean(x); },
                                         {2, 2, 1}, cfg),
                  ContractError);
}

TEST_CASE("zero-weight model stalls on the unchanged noise image") {
  BuiltModel m = build_model(tiny_spec(), {24, 32, 3}, 1);
  m.visit_params([](const std::string&, Tensor& t) {
    std::fill(t.mutable_data().begin(), t.mutable_data().end(), 0.0);
  });

  DreamConfig cfg;
  cfg.layer = "comp0.stem0.conv";
  cfg.channel = 0;
  cfg.steps = 20;
  cfg.seed = 42;
  DreamResult r = activation_maximize(m, cfg);

  CHECK(r.stalled);
  CHECK(r.trace.size() == 5); // five zero-gradient probes, then early return
  for (double v : r.trace) CHECK(v == 0.0);

  Tensor x0 = expected_noise({24, 32, 3}, 42);
  REQUIRE(r.image.shape() == x0.shape());
  for (int64_t i = 0; i < x0.numel(); ++i) CHECK(r.image.data()[i] == x0.data()[i]);
}

TEST_CASE("linear objective ascends along the weight direction") {
  // objective = mean(x .* w): gradient w/n, normalized direction w/||w||.
  Shape shape{3, 4, 1};
  RngStream rng(7);
  Tensor w(shape);
  for (double& v : w.mutable_data()) v = rng.normal();

  DreamConfig cfg;
  cfg.steps = 3;
  cfg.step_size = 1e-3;
  cfg.seed = 9;
  DreamResult r = activation_maximize_fn(
      [&](const Tensor& x, ForwardCtx&) { return mean(mul(x, w)); }, shape, cfg);

  CHECK(!r.stalled);
  REQUIRE(r.trace.size() == 4);
  for (size_t i = 1; i < r.trace.size(); ++i) CHECK(r.trace[i] > r.trace[i - 1]);

  // Gradient of mean(x .* w) is w / n, so the 1e-8 guard meets ||w|| / n.
  const double n = static_cast<double>(w.numel());
  double gnorm = 0.0;
  for (double v : w.data()) gnorm += (v / n) * (v / n);
  const double scale = 1e-3 / (std::sqrt(gnorm) + 1e-8);
  Tensor x0 = expected_noise(shape, 9);
  for (int64_t i = 0; i < x0.numel(); ++i) {
    double want = x0.data()[i] + 3.0 * scale * w.data()[i] / n;
    CHECK(r.image.data()[i] == doctest::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("ascent on a stem conv channel raises its mean activation") {
  BuiltModel m = build_model(tiny_spec(), {24, 32, 3}, 3);
  DreamConfig cfg;
  cfg.layer = "comp0.stem0.conv";
  cfg.channel = 2;
  cfg.steps = 10;
  cfg.step_size = 1e-2;
  cfg.seed = 5;
  DreamResult r = activation_maximize(m, cfg);

  CHECK(!r.stalled);
  REQUIRE(r.trace.size() == 11);
  CHECK(r.trace.back() > r.trace.front());
  for (double v : r.image.data()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }

  DreamResult again = activation_maximize(m, cfg);
  CHECK(again.trace == r.trace);
  for (int64_t i = 0; i < r.image.numel(); ++i)
    CHECK(again.image.data()[i] == r.image.data()[i]);
}

TEST_CASE("rank-2 records target their last axis") {
  BuiltModel m = build_model(tiny_spec(), {24, 32, 3}, 3);
  DreamConfig cfg;
  cfg.layer = "head.out";
  cfg.channel = 3;
  cfg.steps = 4;
  cfg.step_size = 1e-3;
  cfg.seed = 2;
  DreamResult r = activation_maximize(m, cfg);
  CHECK(r.trace.size() == 5);
  for (double v : r.trace) CHECK(std::isfinite(v));
}

TEST_CASE("unknown targets are rejected") {
  BuiltModel m = build_model(tiny_spec(), {24, 32, 3}, 3);
  DreamConfig cfg;
  cfg.layer = "comp0.stem9.conv";
  CHECK_THROWS_AS(activation_maximize(m, cfg), LookupError);
  cfg.layer = "comp0.stem0.conv";
  cfg.channel = 99;
  CHECK_THROWS_AS(activation_maximize(m, cfg), LookupError);
}

TEST_CASE("trace tsv lists step and objective") {
  DreamResult r;
  r.trace = {0.25, 0.5};
  fs::path p = fs::temp_directory_path() / ("tfl_trace_" + std::to_string(::getpid()) + ".tsv");
  write_trace_tsv(p.string(), r);
  std::ifstream f(p);
  std::string line;
  REQUIRE(std::getline(f, line));
  CHECK(line == "step\tobjective");
  REQUIRE(std::getline(f, line));
  CHECK(line == "0\t0.25");
  REQUIRE(std::getline(f, line));
  CHECK(line == "1\t0.5");
  CHECK(!std::getline(f, line));
  fs::remove(p);
}
