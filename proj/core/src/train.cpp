#include "tfl/train.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "tfl/error.hpp"

namespace tfl {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are little-endian float64");

namespace {

std::string fmt12(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return buf;
}

std::string dims_str(const Shape& s) {
  std::string out;
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += 'x';
    out += std::to_string(s[i]);
  }
  return out;
}

} // namespace

std::string to_string(RunStatus s) {
  return s == RunStatus::complete ? "complete" : "diverged";
}

void RunLog::write_tsv(const std::string& path) const {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write " + path);
  f << "epoch\ttrain_wing\tval_accuracy\tval_wing_loss\tval_mae\tval_mse\n";
  for (const EpochRecord& r : epochs) {
    f << r.epoch << '\t' << fmt12(r.train_wing);
    if (r.has_val)
      f << '\t' << fmt12(r.val.accuracy) << '\t' << fmt12(r.val.wing_loss) << '\t'
        << fmt12(r.val.mae) << '\t' << fmt12(r.val.mse);
    else
      f << "\tnan\tnan\tnan\tnan";
    f << '\n';
  }
  if (!f) throw IoError("write failed for " + path);
}

Adam::Adam(std::vector<Tensor> params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  m_.resize(params_.size());
  v_.resize(params_.size());
  for (size_t i = 0; i < params_.size(); ++i) {
    m_[i].assign(static_cast<size_t>(params_[i].numel()), 0.0);
    v_[i].assign(static_cast<size_t>(params_[i].numel()), 0.0);
  }
}

void Adam::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    if (!p.has_grad()) continue;
    const std::vector<double>& g = p.grad();
    std::vector<double>& w = p.mutable_data();
    for (size_t j = 0; j < w.size(); ++j) {
      m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * g[j];
      v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * g[j] * g[j];
      const double ratio = (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + eps_);
      w[j] -= lr_ * ratio;
    }
    p.zero_grad();
  }
}

RunLog train_model(BuiltModel& model, const Dataset& train_set, const Dataset& val_set,
                   const TrainConfig& cfg, const EpochCallback& on_epoch) {
  if (cfg.epochs < 1) throw ContractError("epochs must be >= 1, got " + std::to_string(cfg.epochs));
  if (cfg.batch_size < 1)
    throw ContractError("batch_size must be >= 1, got " + std::to_string(cfg.batch_size));
  if (!(cfg.learning_rate >= 0.0)) throw ContractError("learning_rate must be >= 0");
  if (cfg.eval_every < 0) throw ContractError("eval_every must be >= 0");
  if (train_set.size() == 0) throw ContractError("training dataset is empty");
  if (cfg.eval_every > 0 && val_set.size() == 0)
    throw ContractError("validation dataset is empty but eval_every > 0");

  std::vector<Tensor> params;
  model.visit_params([&](const std::string&, Tensor& t) { params.push_back(t); });
  for (Tensor& p : params) p.zero_grad();
  Adam opt(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps);

  RngStream shuffle_rng(cfg.seed, 101);
  RngStream drop_rng(cfg.seed, 102);

  const int64_t n = train_set.size();
  std::vector<int64_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);

  std::vector<Tensor> targets;
  targets.reserve(static_cast<size_t>(n));
  for (const Sample& s : train_set.samples) targets.push_back(normalized_points(s));

  RunLog log;
  for (int64_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (int64_t i = n - 1; i > 0; --i)
      std::swap(order[static_cast<size_t>(i)],
                order[static_cast<size_t>(shuffle_rng.uniform_int(0, i))]);

    double wing_total = 0.0;
    for (int64_t start = 0; start < n; start += cfg.batch_size) {
      const int64_t b = std::min(cfg.batch_size, n - start);
      double batch_loss = 0.0;
      for (int64_t k = 0; k < b; ++k) {
        const int64_t idx = order[static_cast<size_t>(start + k)];
        ForwardCtx ctx;
        ctx.training = true;
        ctx.rng = &drop_rng;
        Tensor pred = model.forward(train_set.samples[static_cast<size_t>(idx)].image, ctx);
        Tensor loss = wing_loss(pred, targets[static_cast<size_t>(idx)]);
        batch_loss += loss.value();
        backward(loss, 1.0 / static_cast<double>(b));
      }
      batch_loss /= static_cast<double>(b);
      // A finite loss can still emit non-finite gradients (overflow upstream of
      // a saturating op); both cases end the run on the last finite weights.
      bool finite = std::isfinite(batch_loss);
      for (const Tensor& p : params) {
        if (!finite) break;
        if (!p.has_grad()) continue;
        for (double g : p.grad()) finite &= std::isfinite(g);
      }
      if (!finite) {
        for (Tensor& p : params) p.zero_grad();
        log.status = RunStatus::diverged;
        return log;
      }
      wing_total += batch_loss * static_cast<double>(b);
      opt.step();
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_wing = wing_total / static_cast<double>(n);
    if (cfg.eval_every > 0 && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs)) {
      rec.has_val = true;
      rec.val = evaluate(model, val_set);
    }
    log.epochs.push_back(rec);
    if (on_epoch && !on_epoch(rec)) return log;
  }
  return log;
}

MetricsReport evaluate(const BuiltModel& model, const Dataset& d) {
  if (d.size() == 0) throw ContractError("evaluate: empty dataset");
  const int64_t np = model.spec().head.n_points;
  const int64_t bsz = d.size();
  Tensor preds({bsz, 2, np});
  Tensor tgts({bsz, 2, np});
  for (int64_t i = 0; i < bsz; ++i) {
    ForwardCtx ctx;
    Tensor y = model.forward(d.samples[static_cast<size_t>(i)].image, ctx);
    Tensor t = normalized_points(d.samples[static_cast<size_t>(i)]);
    if (t.numel() != 2 * np)
      throw ShapeError("dataset has " + std::to_string(t.numel() / 2) + " points, model expects " +
                       std::to_string(np));
    std::copy(y.data().begin(), y.data().end(),
              preds.mutable_data().begin() + static_cast<ptrdiff_t>(i * 2 * np));
    std::copy(t.data().begin(), t.data().end(),
              tgts.mutable_data().begin() + static_cast<ptrdiff_t>(i * 2 * np));
  }
  MetricsReport r;
  r.accuracy = accuracy(preds, tgts);
  r.wing_loss = wing_loss(preds, tgts).value();
  r.mae = mae(preds, tgts).value();
  r.mse = mse(preds, tgts).value();
  r.n_samples = bsz;
  return r;
}

void save_checkpoint(BuiltModel& model, const std::string& dir) {
  fs::create_directories(dir);

  std::ofstream man(fs::path(dir) / "manifest.tsv", std::ios::trunc);
  if (!man) throw IoError("cannot write manifest in " + dir);
  bool io_ok = true;
  model.visit_params([&](const std::string& name, Tensor& t) {
    man << name << "\tf64\t" << dims_str(t.shape()) << '\n';
    std::ofstream blob(fs::path(dir) / (name + ".bin"), std::ios::binary | std::ios::trunc);
    blob.write(reinterpret_cast<const char*>(t.data().data()),
               static_cast<std::streamsize>(t.numel() * sizeof(double)));
    if (!blob) io_ok = false;
  });
  if (!man || !io_ok) throw IoError("checkpoint write failed in " + dir);

  std::map<std::string, std::string> kv = model_spec_to_config(model.spec());
  const Shape& in = model.input_shape();
  kv["input.height"] = std::to_string(in[0]);
  kv["input.width"] = std::to_string(in[1]);
  kv["input.channels"] = std::to_string(in[2]);
  std::ofstream conf(fs::path(dir) / "model.conf", std::ios::trunc);
  for (const auto& [k, v] : kv) conf << k << '=' << v << '\n';
  if (!conf) throw IoError("cannot write model.conf in " + dir);
}

BuiltModel load_checkpoint(const std::string& dir) {
  std::ifstream conf(fs::path(dir) / "model.conf");
  if (!conf) throw CheckpointError("missing model.conf in " + dir);
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(conf, line)) {
    if (line.empty()) continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos) throw CheckpointError("malformed model.conf line: " + line);
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto take_dim = [&](const std::string& key) {
    auto it = kv.find(key);
    if (it == kv.end()) throw CheckpointError("model.conf missing " + key);
    int64_t v = std::stoll(it->second);
    kv.erase(it);
    return v;
  };
  const int64_t h = take_dim("input.height");
  const int64_t w = take_dim("input.width");
  const int64_t c = take_dim("input.channels");
  ModelSpec spec = model_spec_from_config(kv);

  BuiltModel model = build_model(spec, {h, w, c}, 0);
  std::map<std::string, Tensor> by_name;
  model.visit_params([&](const std::string& name, Tensor& t) { by_name.emplace(name, t); });

  std::ifstream man(fs::path(dir) / "manifest.tsv");
  if (!man) throw CheckpointError("missing manifest.tsv in " + dir);
  size_t rows = 0;
  while (std::getline(man, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string name, dtype, dims;
    if (!std::getline(row, name, '\t') || !std::getline(row, dtype, '\t') ||
        !std::getline(row, dims, '\t'))
      throw CheckpointError("malformed manifest row: " + line);
    auto it = by_name.find(name);
    if (it == by_name.end()) throw CheckpointError("manifest names unknown tensor " + name);
    if (dtype != "f64") throw CheckpointError("unsupported dtype " + dtype + " for " + name);
    if (dims != dims_str(it->second.shape()))
      throw CheckpointError("dims mismatch for " + name + ": manifest " + dims + ", model " +
                            dims_str(it->second.shape()));

    std::ifstream blob(fs::path(dir) / (name + ".bin"), std::ios::binary);
    if (!blob) throw CheckpointError("missing blob for " + name);
    std::vector<double>& dst = it->second.mutable_data();
    blob.read(reinterpret_cast<char*>(dst.data()),
              static_cast<std::streamsize>(dst.size() * sizeof(double)));
    if (static_cast<size_t>(blob.gcount()) != dst.size() * sizeof(double))
      throw CheckpointError("truncated blob for " + name);
    blob.peek();
    if (!blob.eof()) throw CheckpointError("oversized blob for " + name);
    ++rows;
  }
  if (rows != by_name.size())
    throw CheckpointError("manifest covers " + std::to_string(rows) + " of " +
                          std::to_string(by_name.size()) + " tensors");
  return model;
}

} // namespace tfl
