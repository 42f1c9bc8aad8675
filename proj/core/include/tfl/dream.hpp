#pragma once

#include <functional>
#include <string>
#include <vector>

#include "tfl/model.hpp"

namespace tfl {

struct DreamConfig {
  std::string layer;  // activation-record key
  int64_t channel = 0; // index into the record's last axis
  int64_t steps = 50;
  double step_size = 1e-2;
  uint64_t seed = 0;
  bool normalize_grad = true;
};

struct DreamResult {
  Tensor image;
  /// Objective before each step plus one final value; a stalled run stops
  /// at the step where the gradient has been zero five times running.
  std::vector<double> trace;
  bool stalled = false;
};

/// Scalar objective evaluated on the current image; must register tape nodes
/// reaching back to its input so ascent gradients exist.
using DreamObjective = std::function<Tensor(const Tensor& x, ForwardCtx& ctx)>;

/// Gradient ascent on the input: x <- clip(x + step * g / (||g|| + 1e-8), 0, 1),
/// starting from seeded uniform noise in [0.4, 0.6].
DreamResult activation_maximize_fn(const DreamObjective& objective, const Shape& in_shape,
                                   const DreamConfig& cfg);

/// Ascends the mean activation of one channel of a recorded layer output.
DreamResult activation_maximize(const BuiltModel& model, const DreamConfig& cfg);

/// Two-column tsv: step index and the objective value recorded at it.
void write_trace_tsv(const std::string& path, const DreamResult& result);

} // namespace tfl
