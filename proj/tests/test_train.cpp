#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include "tfl/train.hpp"

using namespace tfl;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("tfl_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

ModelSpec tiny_spec(const std::string& id) {
  ModelSpec s = catalog(id);
  s.stem.width = 4;
  s.stem.depth = 2;
  s.branch.depth = 1;
  s.branch.dm = 8;
  s.branch.heads = 2;
  return s;
}

std::map<std::string, std::vector<double>> snapshot(BuiltModel& m) {
  std::map<std::string, std::vector<double>> out;
  m.visit_params([&](const std::string& name, Tensor& t) { out[name] = t.data(); });
  return out;
}

// Constant-output model: every weight zero, head bias = `bias` per coordinate.
void make_constant(BuiltModel& m, double bias) {
  m.visit_params([&](const std::string& name, Tensor& t) {
    double v = name == "head.dense.b" ? bias : 0.0;
    std::fill(t.mutable_data().begin(), t.mutable_data().end(), v);
  });
}

double sample_wing(const BuiltModel& m, const Sample& s) {
  ForwardCtx ctx;
  Tensor pred = m.forward(s.image, ctx);
  return wing_loss(pred, normalized_points(s)).value();
}

} // namespace

TEST_CASE("learning rate zero is a pure iteration") {
  RngStream rng(21);
  Dataset d = synth_generate(6, 24, 32, rng);
  RngStream sp(1);
  auto [tr, va] = split_dataset(d, 0.34, sp);

  BuiltModel m = build_model(tiny_spec("C-1"), {24, 32, 3}, 7);
  auto before = snapshot(m);
  MetricsReport eval_before = evaluate(m, va);

  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 2;
  cfg.learning_rate = 0.0;
  cfg.seed = 3;
  RunLog log = train_model(m, tr, va, cfg);

  CHECK(log.status == RunStatus::complete);
  REQUIRE(log.epochs.size() == 1);
  CHECK(log.epochs[0].epoch == 1);
  CHECK(log.epochs[0].has_val);

  auto after = snapshot(m);
  for (const auto& [name, vals] : before) {
    REQUIRE(after.count(name) == 1);
    CHECK(after[name] == vals);
  }
  MetricsReport eval_after = evaluate(m, va);
  CHECK(eval_after.mae == eval_before.mae);
  CHECK(eval_after.wing_loss == eval_before.wing_loss);
}

TEST_CASE("config violations are rejected") {
  RngStream rng(22);
  Dataset d = synth_generate(2, 24, 32, rng);
  BuiltModel m = build_model(tiny_spec("C-1"), {24, 32, 3}, 7);
  TrainConfig cfg;
  cfg.epochs = 0;
  CHECK_THROWS_AS(train_model(m, d, d, cfg), ContractError);
  cfg.epochs = 1;
  cfg.batch_size = 0;
  CHECK_THROWS_AS(train_model(m, d, d, cfg), ContractError);
  cfg.batch_size = 1;
  cfg.learning_rate = -1.0;
  CHECK_THROWS_AS(train_model(m, d, d, cfg), ContractError);
  cfg.learning_rate = 1e-3;
  Dataset empty;
  CHECK_THROWS_AS(train_model(m, empty, d, cfg), ContractError);
  CHECK_THROWS_AS(train_model(m, d, empty, cfg), ContractError);
  CHECK_THROWS_AS(evaluate(m, empty), ContractError);
}

TEST_CASE("one tiny step on one sample decreases that sample's loss") {
  RngStream rng(23);
  Dataset one = synth_generate(1, 24, 32, rng);

  ModelSpec spec = tiny_spec("C-1");
  spec.head.dropout_rate = 0.0; // gradient direction test wants the eval network
  BuiltModel m = build_model(spec, {24, 32, 3}, 11);

  double before = sample_wing(m, one.samples[0]);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 1;
  cfg.learning_rate = 1e-6;
  cfg.eval_every = 0;
  train_model(m, one, Dataset{}, cfg);
  double after = sample_wing(m, one.samples[0]);
  CHECK(after < before);
}

TEST_CASE("tiny A-1 run learns: final train wing loss below initial") {
  RngStream rng(24);
  Dataset tr = synth_generate(50, 24, 32, rng);
  Dataset va = synth_generate(8, 24, 32, rng);

  BuiltModel m = build_model(tiny_spec("A-1"), {24, 32, 3}, 5);
  TrainConfig cfg;
  cfg.epochs = 30;
  cfg.batch_size = 32;
  cfg.seed = 17;
  cfg.eval_every = 10;
  RunLog log = train_model(m, tr, va, cfg);

  CHECK(log.status == RunStatus::complete);
  REQUIRE(log.epochs.size() == 30);
  CHECK(log.epochs.back().train_wing < log.epochs.front().train_wing);

  // Validation cadence: epochs 10, 20, 30 carry metrics, others do not.
  for (const EpochRecord& r : log.epochs) CHECK(r.has_val == (r.epoch % 10 == 0));
  CHECK(log.epochs.back().val.n_samples == 8);
}

TEST_CASE("same seed trains to bit-identical weights") {
  RngStream rng_a(25), rng_b(25);
  Dataset a = synth_generate(10, 24, 32, rng_a);
  Dataset b = synth_generate(10, 24, 32, rng_b);

  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 4;
  cfg.seed = 9;
  cfg.eval_every = 0;

  BuiltModel m1 = build_model(tiny_spec("L-2"), {24, 32, 3}, 2);
  BuiltModel m2 = build_model(tiny_spec("L-2"), {24, 32, 3}, 2);
  RunLog l1 = train_model(m1, a, Dataset{}, cfg);
  RunLog l2 = train_model(m2, b, Dataset{}, cfg);

  auto s1 = snapshot(m1), s2 = snapshot(m2);
  REQUIRE(s1.size() == s2.size());
  for (const auto& [name, vals] : s1) CHECK(s2[name] == vals);
  REQUIRE(l1.epochs.size() == l2.epochs.size());
  for (size_t i = 0; i < l1.epochs.size(); ++i)
    CHECK(l1.epochs[i].train_wing == l2.epochs[i].train_wing);
}

TEST_CASE("non-finite loss aborts with diverged status and finite weights") {
  RngStream rng(26);
  Dataset d = synth_generate(2, 24, 32, rng);

  BuiltModel m = build_model(tiny_spec("C-1"), {24, 32, 3}, 3);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 1;
  cfg.learning_rate = 1e308; // one step throws the weights to the edge of range
  cfg.eval_every = 0;
  RunLog log = train_model(m, d, Dataset{}, cfg);

  CHECK(log.status == RunStatus::diverged);
  bool all_finite = true;
  m.visit_params([&](const std::string&, Tensor& t) {
    for (double v : t.data()) all_finite &= std::isfinite(v);
  });
  CHECK(all_finite);
}

TEST_CASE("evaluate on an exact-target model reports accuracy 1 and zero losses") {
  Dataset d;
  d.height = 24;
  d.width = 32;
  RngStream rng(27);
  d = synth_generate(3, 24, 32, rng);
  // Force identical targets so one constant output can be exact for all.
  for (Sample& s : d.samples) s.points = d.samples[0].points;

  BuiltModel m = build_model(tiny_spec("C-1"), {24, 32, 3}, 1);
  make_constant(m, 0.0);
  // Bias per flattened coordinate = that shared normalized target.
  Tensor t = normalized_points(d.samples[0]);
  m.visit_params([&](const std::string& name, Tensor& p) {
    if (name == "head.dense.b") p.mutable_data() = t.data();
  });

  MetricsReport r = evaluate(m, d);
  CHECK(r.accuracy == 1.0);
  CHECK(r.wing_loss == 0.0);
  CHECK(r.mae == 0.0);
  CHECK(r.mse == 0.0);
  CHECK(r.n_samples == 3);
}

TEST_CASE("constant-output MAE matches a hand sum") {
  RngStream rng(28);
  Dataset d = synth_generate(4, 24, 32, rng);
  BuiltModel m = build_model(tiny_spec("C-1"), {24, 32, 3}, 1);
  make_constant(m, 0.5);

  double hand = 0.0;
  for (const Sample& s : d.samples) {
    Tensor t = normalized_points(s);
    for (int64_t i = 0; i < t.numel(); ++i) hand += std::fabs(t.data()[i] - 0.5);
  }
  hand /= static_cast<double>(4 * 12);

  MetricsReport r = evaluate(m, d);
  CHECK(r.mae == doctest::Approx(hand).epsilon(1e-12));

  // Eval mode is deterministic; dataset order does not matter.
  MetricsReport r2 = evaluate(m, d);
  CHECK(r2.mae == r.mae);
  CHECK(r2.wing_loss == r.wing_loss);
  std::reverse(d.samples.begin(), d.samples.end());
  MetricsReport r3 = evaluate(m, d);
  CHECK(r3.mae == doctest::Approx(r.mae).epsilon(1e-12));
  CHECK(r3.accuracy == doctest::Approx(r.accuracy).epsilon(1e-12));
}

TEST_CASE("checkpoint round trip is bit-exact and manifest-audited") {
  TempDir td("ckpt");
  BuiltModel m = build_model(tiny_spec("C-4"), {24, 32, 3}, 13);
  RngStream rng(29);
  Tensor x({24, 32, 3});
  for (auto& v : x.mutable_data()) v = rng.uniform();

  ForwardCtx ctx;
  Tensor y_before = m.forward(x, ctx);
  save_checkpoint(m, (td.path / "a").string());
  BuiltModel back = load_checkpoint((td.path / "a").string());
  Tensor y_after = back.forward(x, ctx);
  REQUIRE(y_after.shape() == y_before.shape());
  for (int64_t i = 0; i < y_before.numel(); ++i)
    CHECK(y_after.data()[i] == y_before.data()[i]);

  // save -> load -> save yields byte-identical files.
  save_checkpoint(back, (td.path / "b").string());
  for (const auto& ent : fs::directory_iterator(td.path / "a")) {
    fs::path twin = td.path / "b" / ent.path().filename();
    REQUIRE(fs::exists(twin));
    std::ifstream f1(ent.path(), std::ios::binary), f2(twin, std::ios::binary);
    std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(b1 == b2);
  }

  // param_count equals the sum of manifest tensor sizes.
  int64_t manifest_total = 0;
  std::ifstream man(td.path / "a" / "manifest.tsv");
  std::string line;
  while (std::getline(man, line)) {
    size_t tab2 = line.rfind('\t');
    REQUIRE(tab2 != std::string::npos);
    int64_t prod = 1;
    std::string dims = line.substr(tab2 + 1);
    size_t pos = 0;
    while (pos < dims.size()) {
      size_t x_at = dims.find('x', pos);
      if (x_at == std::string::npos) x_at = dims.size();
      prod *= std::stoll(dims.substr(pos, x_at - pos));
      pos = x_at + 1;
    }
    manifest_total += prod;
  }
  CHECK(manifest_total == param_count(m));
}

TEST_CASE("corrupt checkpoints are rejected") {
  TempDir td("corrupt");
  BuiltModel m = build_model(tiny_spec("C-1"), {24, 32, 3}, 13);
  save_checkpoint(m, td.path.string());

  fs::path blob = td.path / "head.dense.b.bin";
  REQUIRE(fs::exists(blob));
  fs::resize_file(blob, fs::file_size(blob) - 8);
  CHECK_THROWS_AS(load_checkpoint(td.path.string()), CheckpointError);

  save_checkpoint(m, td.path.string());
  fs::remove(td.path / "root.conv0.kernel.bin");
  CHECK_THROWS_AS(load_checkpoint(td.path.string()), CheckpointError);

  save_checkpoint(m, td.path.string());
  fs::remove(td.path / "model.conf");
  CHECK_THROWS_AS(load_checkpoint(td.path.string()), CheckpointError);
}

TEST_CASE("runlog tsv has a header plus one row per epoch") {
  TempDir td("runlog");
  RunLog log;
  log.epochs.push_back({1, 2.5, false, {}});
  EpochRecord r2{2, 1.5, true, {}};
  r2.val = {0.5, 1.0, 0.1, 0.02, 8};
  log.epochs.push_back(r2);
  log.write_tsv((td.path / "runlog.tsv").string());

  std::ifstream f(td.path / "runlog.tsv");
  std::string line;
  REQUIRE(std::getline(f, line));
  CHECK(line == "epoch\ttrain_wing\tval_accuracy\tval_wing_loss\tval_mae\tval_mse");
  REQUIRE(std::getline(f, line));
  CHECK(line == "1\t2.5\tnan\tnan\tnan\tnan");
  REQUIRE(std::getline(f, line));
  CHECK(line == "2\t1.5\t0.5\t1\t0.1\t0.02");
  CHECK(!std::getline(f, line));
}
