#include "tfl/dream.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "tfl/error.hpp"

namespace tfl {

DreamResult activation_maximize_fn(const DreamObjective& objective, const Shape& in_shape,
                                   const DreamConfig& cfg) {
  if (cfg.steps < 1) throw ContractError("steps must be >= 1, got " + std::to_string(cfg.steps));
  if (!(cfg.step_size > 0.0)) throw ContractError("step_size must be > 0");

  RngStream rng(cfg.seed);
  Tensor x(in_shape);
  for (double& v : x.mutable_data()) v = rng.uniform(0.4, 0.6);
  x.set_requires_grad();

  DreamResult out;
  int64_t zero_run = 0;
  for (int64_t step = 0; step < cfg.steps; ++step) {
    ForwardCtx ctx;
    Tensor obj = objective(x, ctx);
    if (obj.numel() != 1) throw ContractError("dream objective must be scalar");
    out.trace.push_back(obj.value());

    backward(obj);
    double norm_sq = 0.0;
    if (x.has_grad())
      for (double v : x.grad()) norm_sq += v * v;
    if (norm_sq == 0.0) {
      // The update would be exactly zero; only the stall counter moves.
      x.zero_grad();
      if (++zero_run >= 5) {
        out.stalled = true;
        break;
      }
      continue;
    }
    zero_run = 0;

    const double scale =
        cfg.normalize_grad ? cfg.step_size / (std::sqrt(norm_sq) + 1e-8) : cfg.step_size;
    const std::vector<double>& g = x.grad();
    std::vector<double>& px = x.mutable_data();
    for (size_t i = 0; i < px.size(); ++i) px[i] = std::clamp(px[i] + scale * g[i], 0.0, 1.0);
    x.zero_grad();
  }

  if (!out.stalled) {
    ForwardCtx ctx;
    out.trace.push_back(objective(x, ctx).value());
  }
  out.image = x.clone();
  return out;
}

DreamResult activation_maximize(const BuiltModel& model, const DreamConfig& cfg) {
  const std::vector<std::string> names = model.layer_names();
  if (std::find(names.begin(), names.end(), cfg.layer) == names.end())
    throw LookupError("unknown layer " + cfg.layer);

  DreamObjective objective = [&](const Tensor& x, ForwardCtx& ctx) {
    std::map<std::string, Tensor> record;
    ctx.record = &record;
    model.forward(x, ctx);
    const Tensor& act = record.at(cfg.layer);
    const int64_t channels = act.dim(act.rank() - 1);
    if (cfg.channel < 0 || cfg.channel >= channels)
      throw LookupError("channel " + std::to_string(cfg.channel) + " out of range for " +
                        cfg.layer + " with " + std::to_string(channels));
    return mean(slice(act, act.rank() - 1, cfg.channel, 1));
  };
  return activation_maximize_fn(objective, model.input_shape(), cfg);
}

void write_trace_tsv(const std::string& path, const DreamResult& result) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write " + path);
  f << "step\tobjective\n";
  for (size_t i = 0; i < result.trace.size(); ++i) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.17g", result.trace[i]);
    f << i << '\t' << buf << '\n';
  }
  if (!f) throw IoError("write failed for " + path);
}

} // namespace tfl
