#include "tfl/hpo.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <mutex>
#include <sstream>
#include <thread>

#include "tfl/error.hpp"
#include "tfl/model.hpp"
#include "tfl/train.hpp"

namespace tfl {

namespace fs = std::filesystem;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

std::string fmt17(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

} // namespace

Dim Dim::uniform(double lo, double hi) {
  if (!(lo < hi)) throw ConfigError("uniform dim needs lo < hi");
  Dim d;
  d.kind = DimKind::uniform;
  d.lo = lo;
  d.hi = hi;
  return d;
}

Dim Dim::loguniform(double lo, double hi) {
  if (!(lo < hi)) throw ConfigError("loguniform dim needs lo < hi");
  if (!(lo > 0.0)) throw ConfigError("loguniform dim needs lo > 0");
  Dim d;
  d.kind = DimKind::loguniform;
  d.lo = lo;
  d.hi = hi;
  return d;
}

Dim Dim::integer(int64_t lo, int64_t hi) {
  if (!(lo < hi)) throw ConfigError("integer dim needs lo < hi");
  Dim d;
  d.kind = DimKind::integer;
  d.lo = static_cast<double>(lo);
  d.hi = static_cast<double>(hi);
  return d;
}

Dim Dim::categorical(std::vector<std::string> choices) {
  if (choices.empty()) throw ConfigError("categorical dim needs at least one choice");
  Dim d;
  d.kind = DimKind::categorical;
  d.choices = std::move(choices);
  return d;
}

void SearchSpace::add(const std::string& name, Dim d) {
  for (const auto& [n, _] : dims)
    if (n == name) throw ConfigError("duplicate search dimension " + name);
  dims.emplace_back(name, std::move(d));
}

const Dim& SearchSpace::at(const std::string& name) const {
  for (const auto& [n, d] : dims)
    if (n == name) return d;
  throw LookupError("unknown search dimension " + name);
}

std::string to_string(TrialStatus s) {
  switch (s) {
    case TrialStatus::running: return "running";
    case TrialStatus::pruned: return "pruned";
    case TrialStatus::complete: return "complete";
    case TrialStatus::failed: return "failed";
  }
  return "?";
}

TrialStatus trial_status_from(const std::string& s) {
  if (s == "running") return TrialStatus::running;
  if (s == "pruned") return TrialStatus::pruned;
  if (s == "complete") return TrialStatus::complete;
  if (s == "failed") return TrialStatus::failed;
  throw LookupError("unknown trial status " + s);
}

double Trial::objective() const {
  if (status == TrialStatus::failed || history.empty()) return kInf;
  return *std::min_element(history.begin(), history.end());
}

const Trial* Study::best() const {
  const Trial* out = nullptr;
  for (const Trial& t : trials) {
    if (t.status != TrialStatus::complete) continue;
    if (!out || t.objective() < out->objective()) out = &t;
  }
  return out;
}

// ---- TPE ----

namespace {

double to_unit(const Dim& d, double x) {
  if (d.kind == DimKind::loguniform) return (std::log(x) - std::log(d.lo)) / (std::log(d.hi) - std::log(d.lo));
  return (x - d.lo) / (d.hi - d.lo);
}

double from_unit(const Dim& d, double u) {
  u = std::clamp(u, 0.0, 1.0);
  switch (d.kind) {
    case DimKind::loguniform:
      return std::exp(std::log(d.lo) + u * (std::log(d.hi) - std::log(d.lo)));
    case DimKind::integer: {
      double v = d.lo + u * (d.hi - d.lo);
      return std::clamp(std::round(v), d.lo, d.hi);
    }
    default:
      return d.lo + u * (d.hi - d.lo);
  }
}

double prior_draw(const Dim& d, RngStream& rng) {
  switch (d.kind) {
    case DimKind::uniform: return rng.uniform(d.lo, d.hi);
    case DimKind::loguniform: return std::exp(rng.uniform(std::log(d.lo), std::log(d.hi)));
    case DimKind::integer: return static_cast<double>(rng.uniform_int(static_cast<int64_t>(d.lo), static_cast<int64_t>(d.hi)));
    case DimKind::categorical: break;
  }
  throw ContractError("prior_draw on categorical dim");
}

/// Mixture components: sorted unit-space centers with per-point bandwidths set
/// by the larger neighbor gap, clamped to [1e-3, 1]. A lone point gets 0.25.
struct Kde {
  std::vector<double> centers, bw;

  explicit Kde(std::vector<double> unit_values) : centers(std::move(unit_values)) {
    std::sort(centers.begin(), centers.end());
    const size_t n = centers.size();
    bw.resize(n, 0.25);
    if (n > 1) {
      for (size_t i = 0; i < n; ++i) {
        double left = i > 0 ? centers[i] - centers[i - 1] : 0.0;
        double right = i + 1 < n ? centers[i + 1] - centers[i] : 0.0;
        bw[i] = std::clamp(std::max(left, right), 1e-3, 1.0);
      }
    }
  }

  double sample(RngStream& rng) const {
    size_t i = static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(centers.size()) - 1));
    return std::clamp(rng.normal(centers[i], bw[i]), 0.0, 1.0);
  }

  double log_pdf(double x) const {
    double acc = 0.0;
    for (size_t i = 0; i < centers.size(); ++i) {
      double z = (x - centers[i]) / bw[i];
      acc += std::exp(-0.5 * z * z) / (bw[i] * std::sqrt(2.0 * 3.14159265358979323846));
    }
    return std::log(acc / static_cast<double>(centers.size()));
  }
};

/// Add-one smoothed choice frequencies.
struct CatModel {
  std::vector<double> p;

  CatModel(const Dim& d, const std::vector<const Trial*>& set, const std::string& name) {
    std::vector<double> counts(d.choices.size(), 1.0);
    for (const Trial* t : set) {
      const std::string& c = std::get<std::string>(t->params.at(name));
      auto it = std::find(d.choices.begin(), d.choices.end(), c);
      if (it != d.choices.end()) counts[static_cast<size_t>(it - d.choices.begin())] += 1.0;
    }
    double total = 0.0;
    for (double c : counts) total += c;
    p.resize(counts.size());
    for (size_t i = 0; i < counts.size(); ++i) p[i] = counts[i] / total;
  }

  size_t sample(RngStream& rng) const {
    double u = rng.uniform(), run = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
      run += p[i];
      if (u < run) return i;
    }
    return p.size() - 1;
  }
};

} // namespace

ParamMap tpe_suggest(const Study& study, RngStream& rng) {
  if (study.space.dims.empty()) throw ContractError("empty search space");

  std::vector<const Trial*> done;
  for (const Trial& t : study.trials)
    if (t.status == TrialStatus::complete) done.push_back(&t);

  ParamMap out;
  if (static_cast<int64_t>(done.size()) < kTpeStartup) {
    for (const auto& [name, d] : study.space.dims) {
      if (d.kind == DimKind::categorical)
        out[name] = d.choices[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(d.choices.size()) - 1))];
      else
        out[name] = prior_draw(d, rng);
    }
    return out;
  }

  std::sort(done.begin(), done.end(), [](const Trial* a, const Trial* b) {
    double oa = a->objective(), ob = b->objective();
    return oa != ob ? oa < ob : a->id < b->id;
  });
  const size_t n_good = static_cast<size_t>(
      std::max<int64_t>(1, static_cast<int64_t>(std::ceil(kTpeGamma * static_cast<double>(done.size())))));
  std::vector<const Trial*> good(done.begin(), done.begin() + static_cast<ptrdiff_t>(n_good));
  std::vector<const Trial*> rest(done.begin() + static_cast<ptrdiff_t>(n_good), done.end());

  // Per-dimension density models.
  struct DimModel {
    std::unique_ptr<Kde> l, g;
    std::unique_ptr<CatModel> lc, gc;
  };
  std::vector<DimModel> models;
  for (const auto& [name, d] : study.space.dims) {
    DimModel m;
    if (d.kind == DimKind::categorical) {
      m.lc = std::make_unique<CatModel>(d, good, name);
      m.gc = std::make_unique<CatModel>(d, rest, name);
    } else {
      auto units = [&](const std::vector<const Trial*>& set) {
        std::vector<double> u;
        for (const Trial* t : set) u.push_back(to_unit(d, std::get<double>(t->params.at(name))));
        return u;
      };
      m.l = std::make_unique<Kde>(units(good));
      m.g = std::make_unique<Kde>(units(rest));
    }
    models.push_back(std::move(m));
  }

  double best_score = -kInf;
  ParamMap best;
  for (int64_t c = 0; c < kTpeCandidates; ++c) {
    ParamMap cand;
    double score = 0.0;
    for (size_t i = 0; i < study.space.dims.size(); ++i) {
      const auto& [name, d] = study.space.dims[i];
      if (d.kind == DimKind::categorical) {
        size_t pick = models[i].lc->sample(rng);
        cand[name] = d.choices[pick];
        score += std::log(models[i].lc->p[pick]) - std::log(models[i].gc->p[pick]);
      } else {
        double u = models[i].l->sample(rng);
        cand[name] = from_unit(d, u);
        score += models[i].l->log_pdf(u) - models[i].g->log_pdf(u);
      }
    }
    if (score > best_score) {
      best_score = score;
      best = std::move(cand);
    }
  }
  return best;
}

// ---- ASHA ----

std::vector<int64_t> asha_rungs(int64_t max_epochs) {
  std::vector<int64_t> rungs;
  for (int64_t e = kAshaR; e <= max_epochs; e *= kAshaEta) rungs.push_back(e);
  return rungs;
}

bool asha_decide(const Study& study, const Trial& trial, int64_t epoch) {
  if (static_cast<int64_t>(trial.history.size()) < epoch)
    throw ContractError("trial " + std::to_string(trial.id) + " has no value at epoch " +
                        std::to_string(epoch));
  std::vector<int64_t> rungs = asha_rungs(study.max_epochs);
  if (std::find(rungs.begin(), rungs.end(), epoch) == rungs.end()) return true;

  auto at_rung = [epoch](const Trial& t) {
    double v = kInf;
    for (int64_t e = 0; e < epoch; ++e) v = std::min(v, t.history[static_cast<size_t>(e)]);
    return v;
  };

  const double own = at_rung(trial);
  int64_t k = 0, rank = 1;
  for (const Trial& t : study.trials) {
    if (static_cast<int64_t>(t.history.size()) < epoch) continue;
    ++k;
    if (t.id == trial.id) continue;
    double v = at_rung(t);
    if (v < own || (v == own && t.id < trial.id)) ++rank;
  }
  return rank <= k / kAshaEta;
}

// ---- study runner ----

std::map<std::string, std::string> params_to_config(const SearchSpace& space, const ParamMap& params,
                                                    const std::map<std::string, std::string>& base) {
  std::map<std::string, std::string> out = base;
  for (const auto& [name, value] : params) {
    const Dim& d = space.at(name);
    if (d.kind == DimKind::categorical)
      out[name] = std::get<std::string>(value);
    else if (d.kind == DimKind::integer)
      out[name] = std::to_string(static_cast<int64_t>(std::llround(std::get<double>(value))));
    else
      out[name] = fmt17(std::get<double>(value));
  }
  return out;
}

namespace {

std::string params_serialize(const ParamMap& params) {
  std::string out;
  for (const auto& [name, value] : params) {
    if (!out.empty()) out += ';';
    out += name + '=';
    if (std::holds_alternative<double>(value))
      out += fmt17(std::get<double>(value));
    else
      out += std::get<std::string>(value);
  }
  return out;
}

ParamMap params_parse(const SearchSpace& space, const std::string& s) {
  ParamMap out;
  std::istringstream in(s);
  std::string item;
  while (std::getline(in, item, ';')) {
    if (item.empty()) continue;
    size_t eq = item.find('=');
    if (eq == std::string::npos) throw IoError("malformed params field: " + item);
    std::string name = item.substr(0, eq), value = item.substr(eq + 1);
    if (space.at(name).kind == DimKind::categorical)
      out[name] = value;
    else
      out[name] = std::stod(value);
  }
  return out;
}

struct StudyStore {
  Study study;
  std::mutex mu;
  std::string dir; // empty disables files

  void write_trials_locked() {
    if (dir.empty()) return;
    std::ofstream f(fs::path(dir) / "trials.tsv", std::ios::trunc);
    f << "id\tstatus\tobjective\tparams\n";
    for (const Trial& t : study.trials)
      f << t.id << '\t' << to_string(t.status) << '\t' << fmt17(t.objective()) << '\t'
        << params_serialize(t.params) << '\n';
    if (!f) throw IoError("cannot write trials.tsv in " + dir);
  }

  void append_report_locked(int64_t id, int64_t epoch, double value) {
    if (dir.empty()) return;
    fs::path p = fs::path(dir) / "study.tsv";
    bool fresh = !fs::exists(p);
    std::ofstream f(p, std::ios::app);
    if (fresh) f << "trial\tepoch\tvalue\n";
    f << id << '\t' << epoch << '\t' << fmt17(value) << '\n';
    if (!f) throw IoError("cannot write study.tsv in " + dir);
  }
};

void resume_study(StudyStore& store) {
  fs::path tp = fs::path(store.dir) / "trials.tsv";
  if (!fs::exists(tp)) return;
  std::ifstream tf(tp);
  std::string line;
  std::getline(tf, line); // header
  while (std::getline(tf, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string id_s, status_s, obj_s, params_s;
    std::getline(row, id_s, '\t');
    std::getline(row, status_s, '\t');
    std::getline(row, obj_s, '\t');
    std::getline(row, params_s, '\t');
    Trial t;
    t.id = std::stoll(id_s);
    t.status = trial_status_from(status_s);
    // A trial caught mid-run by a crash cannot be resumed.
    if (t.status == TrialStatus::running) t.status = TrialStatus::failed;
    t.params = params_parse(store.study.space, params_s);
    store.study.trials.push_back(std::move(t));
  }

  std::ifstream sf(fs::path(store.dir) / "study.tsv");
  if (sf) {
    std::getline(sf, line);
    while (std::getline(sf, line)) {
      if (line.empty()) continue;
      std::istringstream row(line);
      std::string id_s, epoch_s, value_s;
      std::getline(row, id_s, '\t');
      std::getline(row, epoch_s, '\t');
      std::getline(row, value_s, '\t');
      int64_t id = std::stoll(id_s);
      for (Trial& t : store.study.trials)
        if (t.id == id) t.history.push_back(std::stod(value_s));
    }
  }
}

void run_one_trial(StudyStore& store, const StudyConfig& cfg, const Dataset& train_set,
                   const Dataset& val_set, size_t slot) {
  int64_t id;
  std::map<std::string, std::string> conf;
  {
    std::lock_guard<std::mutex> lock(store.mu);
    Trial& t = store.study.trials[slot];
    id = t.id;
    conf = params_to_config(store.study.space, t.params, cfg.base);
  }

  double lr = 1e-3;
  std::map<std::string, std::string> model_keys;
  for (const auto& [k, v] : conf) {
    if (k.rfind("model.", 0) == 0)
      model_keys[k] = v;
    else if (k == "train.learning_rate")
      lr = std::stod(v);
    else
      throw ConfigError("unknown study config key " + k);
  }

  TrainConfig tc;
  tc.epochs = cfg.epochs_per_trial;
  tc.batch_size = cfg.batch_size;
  tc.learning_rate = lr;
  tc.seed = cfg.seed ^ RngStream::mix(static_cast<uint64_t>(id) + 1);
  tc.eval_every = 1;

  TrialStatus final_status = TrialStatus::complete;
  try {
    ModelSpec spec = model_spec_from_config(model_keys);
    BuiltModel model = build_model(spec, {train_set.height, train_set.width, 3},
                                   tc.seed);
    bool pruned = false;
    auto on_epoch = [&](const EpochRecord& rec) {
      std::lock_guard<std::mutex> lock(store.mu);
      Trial& t = store.study.trials[slot];
      t.history.push_back(rec.val.wing_loss);
      store.append_report_locked(id, rec.epoch, rec.val.wing_loss);
      if (!asha_decide(store.study, t, rec.epoch)) {
        pruned = true;
        return false;
      }
      return true;
    };
    RunLog log = train_model(model, train_set, val_set, tc, on_epoch);
    if (log.status == RunStatus::diverged)
      final_status = TrialStatus::failed;
    else if (pruned)
      final_status = TrialStatus::pruned;
  } catch (const Error&) {
    final_status = TrialStatus::failed;
  }

  std::lock_guard<std::mutex> lock(store.mu);
  store.study.trials[slot].status = final_status;
  store.write_trials_locked();
}

} // namespace

Study run_study(const SearchSpace& space, const Dataset& train_set, const Dataset& val_set,
                const StudyConfig& cfg) {
  if (cfg.budget_trials < 1) throw ContractError("budget_trials must be >= 1");
  if (cfg.epochs_per_trial < 1) throw ContractError("epochs_per_trial must be >= 1");
  if (cfg.jobs < 1) throw ContractError("jobs must be >= 1");
  if (space.dims.empty()) throw ContractError("empty search space");

  StudyStore store;
  store.study.space = space;
  store.study.max_epochs = cfg.epochs_per_trial;
  store.dir = cfg.out_dir;
  if (!store.dir.empty()) {
    fs::create_directories(store.dir);
    resume_study(store);
  }

  int64_t next_id = 1;
  for (const Trial& t : store.study.trials) next_id = std::max(next_id, t.id + 1);

  auto claim = [&]() -> int64_t {
    // Suggest under the lock: the sampler reads completed-trial history.
    std::lock_guard<std::mutex> lock(store.mu);
    if (next_id > cfg.budget_trials) return -1;
    int64_t id = next_id++;
    RngStream rng(cfg.seed, 0xA000 + static_cast<uint64_t>(id));
    Trial t;
    t.id = id;
    t.params = tpe_suggest(store.study, rng);
    store.study.trials.push_back(std::move(t));
    store.write_trials_locked();
    return static_cast<int64_t>(store.study.trials.size()) - 1;
  };

  auto worker = [&]() {
    for (;;) {
      int64_t slot = claim();
      if (slot < 0) return;
      run_one_trial(store, cfg, train_set, val_set, static_cast<size_t>(slot));
    }
  };

  if (cfg.jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int64_t j = 0; j < cfg.jobs; ++j) pool.emplace_back(worker);
    for (std::thread& th : pool) th.join();
  }
  return std::move(store.study);
}

} // namespace tfl
