#pragma once

#include <functional>
#include <string>
#include <vector>

#include "tfl/data.hpp"
#include "tfl/losses.hpp"
#include "tfl/model.hpp"

namespace tfl {

struct TrainConfig {
  int64_t epochs = 30;
  int64_t batch_size = 32;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  uint64_t seed = 0;
  int64_t eval_every = 1; // validate every k-th epoch; 0 disables validation
};

enum class RunStatus { complete, diverged };
std::string to_string(RunStatus s);

struct EpochRecord {
  int64_t epoch = 0;       // 1-based
  double train_wing = 0.0; // mean per-sample wing loss across the epoch
  bool has_val = false;
  MetricsReport val;
};

/// One record per completed epoch. A diverged run carries the records of the
/// epochs that finished before the non-finite loss appeared.
struct RunLog {
  std::vector<EpochRecord> epochs;
  RunStatus status = RunStatus::complete;

  void write_tsv(const std::string& path) const;
};

/// Adam over a fixed parameter registry with one shared step counter.
/// step() consumes and clears the accumulated leaf gradients.
class Adam {
public:
  Adam(std::vector<Tensor> params, double lr, double beta1, double beta2, double eps);
  void step();

private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
};

/// Called after each completed epoch; return false to stop training early
/// (the log keeps the records emitted so far, status stays complete).
using EpochCallback = std::function<bool(const EpochRecord&)>;

/// Mini-batch wing-loss training with a seeded shuffle per epoch. The model is
/// updated in place. A non-finite batch loss stops the run with the weights of
/// the last finite step intact and status diverged.
RunLog train_model(BuiltModel& model, const Dataset& train_set, const Dataset& val_set,
                   const TrainConfig& cfg, const EpochCallback& on_epoch = {});

/// Full-dataset metrics in eval mode on normalized coordinates.
MetricsReport evaluate(const BuiltModel& model, const Dataset& d);

/// Checkpoint directory: manifest.tsv (name, dtype, dims per tensor), one raw
/// little-endian float64 blob per tensor, and model.conf describing the spec
/// and input dims. Round-trips are bit-exact.
void save_checkpoint(BuiltModel& model, const std::string& dir);
BuiltModel load_checkpoint(const std::string& dir);

} // namespace tfl
