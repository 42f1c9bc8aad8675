#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

#include "tfl/config.hpp"
#include "tfl/image_io.hpp"

namespace fs = std::filesystem;
using namespace tfl;

namespace {

// Exit codes: 0 success, 1 usage (bad flags/config/missing inputs), 2 runtime.
constexpr int kUsage = 1;
constexpr int kRuntime = 2;

int usage_fail(const std::string& msg) {
  std::cerr << "usage error: " << msg << "\n";
  return kUsage;
}

int run_fail(const std::string& msg) {
  std::cerr << "error: " << msg << "\n";
  return kRuntime;
}

void merge_sets(ConfigMap& cfg, const std::vector<std::string>& sets) {
  for (const std::string& s : sets) {
    size_t eq = s.find('=');
    if (eq == std::string::npos || eq == 0)
      throw ConfigError("--set wants key=value, got '" + s + "'");
    cfg[s.substr(0, eq)] = s.substr(eq + 1);
  }
}

ConfigMap load_merged(const std::string& config_path, const std::vector<std::string>& sets) {
  ConfigMap cfg;
  if (!config_path.empty()) cfg = parse_config_file(config_path);
  merge_sets(cfg, sets);
  return cfg;
}

void require_file(const fs::path& p) {
  if (!fs::exists(p)) throw IoError("missing file " + p.string());
}

void write_metrics(const std::string& path, const MetricsReport& r) {
  std::ofstream f(path, std::ios::trunc);
  f << MetricsReport::tsv_header() << '\n' << r.tsv_row() << '\n';
  if (!f) throw IoError("cannot write " + path);
}

void write_resolved(const std::string& out_dir, ConfigMap cfg,
                    const std::map<std::string, std::string>& paths) {
  for (const auto& [k, v] : paths) cfg[k] = v;
  fs::create_directories(out_dir);
  write_config((fs::path(out_dir) / "config.resolved").string(), cfg);
}

struct SynthArgs {
  std::string out, config;
  std::vector<std::string> sets;
  int64_t count = 100, height = 96, width = 128;
  uint64_t seed = 0;
  bool count_set = false, height_set = false, width_set = false, seed_set = false;
};

int cmd_synth(const SynthArgs& a) {
  ConfigMap cfg;
  int64_t count, height, width;
  uint64_t seed;
  try {
    cfg = load_merged(a.config, a.sets);
    validate_config_keys(cfg);
    if (a.count_set) cfg["synth.count"] = std::to_string(a.count);
    if (a.height_set) cfg["synth.height"] = std::to_string(a.height);
    if (a.width_set) cfg["synth.width"] = std::to_string(a.width);
    if (a.seed_set) cfg["seed"] = std::to_string(a.seed);
    count = config_int(cfg, "synth.count", a.count);
    height = config_int(cfg, "synth.height", a.height);
    width = config_int(cfg, "synth.width", a.width);
    seed = static_cast<uint64_t>(config_int(cfg, "seed", 0));
    if (count < 0) throw ConfigError("synth.count must be >= 0");
    if (height < 24 || width < 32)
      throw ConfigError("synth dims must be at least height 24, width 32");
  } catch (const Error& e) {
    return usage_fail(e.what());
  }

  try {
    RngStream rng(seed);
    Dataset d = synth_generate(count, height, width, rng);
    write_dataset(d, a.out);
    write_resolved(a.out, cfg, {{"out.dir", a.out}});
    std::cout << "wrote " << d.size() << " samples to " << a.out << "\n";
    return 0;
  } catch (const Error& e) {
    return run_fail(e.what());
  }
}

struct AugmentArgs {
  std::string data, out;
  uint64_t seed = 0;
};

int cmd_augment(const AugmentArgs& a) {
  try {
    require_file(fs::path(a.data) / "annotations.csv");
  } catch (const Error& e) {
    return usage_fail(e.what());
  }

  try {
    Dataset d = load_dataset(a.data);
    RngStream rng(a.seed);
    Dataset aug = augment_dataset(d, rng);
    write_dataset(aug, a.out);
    write_resolved(a.out, {{"seed", std::to_string(a.seed)}},
                   {{"data.dir", a.data}, {"out.dir", a.out}});
    std::cout << "wrote " << aug.size() << " samples to " << a.out << "\n";
    return 0;
  } catch (const Error& e) {
    return run_fail(e.what());
  }
}

struct TrainArgs {
  std::string data, out, config, catalog;
  std::vector<std::string> sets;
  int64_t epochs = 0, batch_size = 0;
  double lr = 0.0, val_fraction = 0.0;
  uint64_t seed = 0;
  bool epochs_set = false, batch_set = false, lr_set = false, vf_set = false, seed_set = false,
       augment = false;
};

int cmd_train(const TrainArgs& a) {
  ConfigMap cfg;
  ModelSpec spec;
  TrainConfig tc;
  double vf;
  bool aug;
  try {
    cfg = load_merged(a.config, a.sets);
    if (!a.catalog.empty()) cfg["model.catalog"] = a.catalog;
    if (a.epochs_set) cfg["train.epochs"] = std::to_string(a.epochs);
    if (a.batch_set) cfg["train.batch_size"] = std::to_string(a.batch_size);
    if (a.lr_set) cfg["train.learning_rate"] = std::to_string(a.lr);
    if (a.vf_set) cfg["train.val_fraction"] = std::to_string(a.val_fraction);
    if (a.seed_set) cfg["seed"] = std::to_string(a.seed);
    if (a.augment) cfg["train.augment"] = "1";
    validate_config_keys(cfg);

    spec = spec_from_config(cfg);
    tc = train_config_from(cfg);
    vf = config_double(cfg, "train.val_fraction", 0.2);
    aug = config_bool(cfg, "train.augment", false);
    if (tc.epochs < 1) throw ConfigError("train.epochs must be >= 1");
    if (tc.batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (tc.learning_rate < 0.0) throw ConfigError("train.learning_rate must be >= 0");
    if (vf < 0.0 || vf >= 1.0) throw ConfigError("train.val_fraction must be in [0, 1)");
    require_file(fs::path(a.data) / "annotations.csv");
  } catch (const Error& e) {
    return usage_fail(e.what());
  }

  try {
    write_resolved(a.out, cfg, {{"data.dir", a.data}, {"out.dir", a.out}});
    Dataset all = load_dataset(a.data);
    RngStream split_rng(tc.seed, 201);
    auto [tr, va] = split_dataset(all, vf, split_rng);
    if (aug) {
      RngStream aug_rng(tc.seed, 202);
      tr = augment_dataset(tr, aug_rng);
    }

    BuiltModel model = build_model(spec, {all.height, all.width, 3}, tc.seed);
    auto on_epoch = [](const EpochRecord& r) {
      std::cout << "epoch " << r.epoch << " train_wing " << r.train_wing;
      if (r.has_val) std::cout << " val_mae " << r.val.mae;
      std::cout << "\n";
      return true;
    };
    RunLog log = train_model(model, tr, va, tc, on_epoch);
    log.write_tsv((fs::path(a.out) / "runlog.tsv").string());
    save_checkpoint(model, (fs::path(a.out) / "checkpoint").string());

    if (log.status == RunStatus::diverged) return run_fail("training diverged");
    if (va.size() > 0) {
      MetricsReport final = evaluate(model, va);
      write_metrics((fs::path(a.out) / "metrics.tsv").string(), final);
      std::cout << MetricsReport::tsv_header() << "\n" << final.tsv_row() << "\n";
    }
    return 0;
  } catch (const Error& e) {
    return run_fail(e.what());
  }
}

struct EvalArgs {
  std::string checkpoint, data, out = ".";
};

int cmd_eval(const EvalArgs& a) {
  try {
    require_file(fs::path(a.checkpoint) / "manifest.tsv");
    require_file(fs::path(a.data) / "annotations.csv");
  } catch (const Error& e) {
    return usage_fail(e.what());
  }

  try {
    write_resolved(a.out, {}, {{"checkpoint.dir", a.checkpoint}, {"data.dir", a.data},
                               {"out.dir", a.out}});
    BuiltModel model = load_checkpoint(a.checkpoint);
    Dataset d = load_dataset(a.data);
    MetricsReport r = evaluate(model, d);
    std::cout << MetricsReport::tsv_header() << "\n" << r.tsv_row() << "\n";
    write_metrics((fs::path(a.out) / "metrics.tsv").string(), r);
    return 0;
  } catch (const Error& e) {
    return run_fail(e.what());
  }
}

struct SearchArgs {
  std::string data, out, config, catalog;
  std::vector<std::string> sets;
  int64_t trials = 8, epochs = 5, jobs = 1, batch_size = 32;
  double val_fraction = 0.2;
  uint64_t seed = 0;
  bool trials_set = false, epochs_set = false, jobs_set = false, batch_set = false,
       seed_set = false;
};

int cmd_search(const SearchArgs& a) {
  ConfigMap cfg;
  SearchSpace space;
  StudyConfig sc;
  double vf;
  try {
    cfg = load_merged(a.config, a.sets);
    if (!a.catalog.empty()) cfg["model.catalog"] = a.catalog;
    if (a.trials_set) cfg["search.trials"] = std::to_string(a.trials);
    if (a.epochs_set) cfg["search.epochs"] = std::to_string(a.epochs);
    if (a.jobs_set) cfg["search.jobs"] = std::to_string(a.jobs);
    if (a.batch_set) cfg["train.batch_size"] = std::to_string(a.batch_size);
    if (a.seed_set) cfg["seed"] = std::to_string(a.seed);
    validate_config_keys(cfg);

    space = space_from_config(cfg);
    sc.budget_trials = config_int(cfg, "search.trials", a.trials);
    sc.epochs_per_trial = config_int(cfg, "search.epochs", a.epochs);
    sc.jobs = config_int(cfg, "search.jobs", a.jobs);
    sc.batch_size = config_int(cfg, "train.batch_size", a.batch_size);
    sc.seed = static_cast<uint64_t>(config_int(cfg, "seed", 0));
    sc.base = search_base_from_config(cfg);
    sc.out_dir = a.out;
    vf = config_double(cfg, "train.val_fraction", a.val_fraction);
    if (sc.budget_trials < 1) throw ConfigError("search.trials must be >= 1");
    if (sc.epochs_per_trial < 1) throw ConfigError("search.epochs must be >= 1");
    if (sc.jobs < 1) throw ConfigError("search.jobs must be >= 1");
    if (vf <= 0.0 || vf >= 1.0) throw ConfigError("train.val_fraction must be in (0, 1)");
    require_file(fs::path(a.data) / "annotations.csv");
  } catch (const Error& e) {
    return usage_fail(e.what());
  }

  try {
    write_resolved(a.out, cfg, {{"data.dir", a.data}, {"out.dir", a.out}});
    Dataset all = load_dataset(a.data);
    RngStream split_rng(sc.seed, 201);
    auto [tr, va] = split_dataset(all, vf, split_rng);

    Study study = run_study(space, tr, va, sc);
    for (const Trial& t : study.trials)
      std::cout << "trial " << t.id << " " << to_string(t.status) << " objective "
                << t.objective() << "\n";
    const Trial* best = study.best();
    if (!best) return run_fail("no trial completed");
    std::cout << "best trial " << best->id << " objective " << best->objective() << "\n";

    // Rebuild the winner deterministically: same per-trial seed, same epochs.
    auto conf = params_to_config(study.space, best->params, sc.base);
    double lr = 1e-3;
    std::map<std::string, std::string> model_keys;
    for (const auto& [k, v] : conf) {
      if (k.rfind("model.", 0) == 0)
        model_keys[k] = v;
      else if (k == "train.learning_rate")
        lr = std::stod(v);
    }
    TrainConfig tc;
    tc.epochs = sc.epochs_per_trial;
    tc.batch_size = sc.batch_size;
    tc.learning_rate = lr;
    tc.seed = sc.seed ^ RngStream::mix(static_cast<uint64_t>(best->id) + 1);
    tc.eval_every = 1;
    BuiltModel model =
        build_model(model_spec_from_config(model_keys), {all.height, all.width, 3}, tc.seed);
    train_model(model, tr, va, tc);
    save_checkpoint(model, (fs::path(a.out) / "checkpoint").string());
    return 0;
  } catch (const Error& e) {
    return run_fail(e.what());
  }
}

struct DreamArgs {
  std::string checkpoint, out, config, layer;
  std::vector<std::string> sets;
  int64_t channel = 0, steps = 50;
  double step_size = 1e-2;
  uint64_t seed = 0;
  bool channel_set = false, steps_set = false, step_size_set = false, seed_set = false;
};

int cmd_dream(const DreamArgs& a) {
  ConfigMap cfg;
  DreamConfig dc;
  try {
    cfg = load_merged(a.config, a.sets);
    if (!a.layer.empty()) cfg["dream.layer"] = a.layer;
    if (a.channel_set) cfg["dream.channel"] = std::to_string(a.channel);
    if (a.steps_set) cfg["dream.steps"] = std::to_string(a.steps);
    if (a.step_size_set) cfg["dream.step_size"] = std::to_string(a.step_size);
    if (a.seed_set) cfg["seed"] = std::to_string(a.seed);
    validate_config_keys(cfg);
    dc = dream_config_from(cfg);
    if (dc.layer.empty()) throw ConfigError("dream.layer is required");
    if (dc.steps < 1) throw ConfigError("dream.steps must be >= 1");
    if (!(dc.step_size > 0.0)) throw ConfigError("dream.step_size must be > 0");
    require_file(fs::path(a.checkpoint) / "manifest.tsv");
  } catch (const Error& e) {
    return usage_fail(e.what());
  }

  try {
    BuiltModel model = load_checkpoint(a.checkpoint);
    DreamResult r = activation_maximize(model, dc);
    fs::create_directories(a.out);
    write_png8((fs::path(a.out) / "dream.png").string(), r.image);
    write_trace_tsv((fs::path(a.out) / "dream_trace.tsv").string(), r);
    write_resolved(a.out, cfg, {{"checkpoint.dir", a.checkpoint}, {"out.dir", a.out}});
    std::cout << "objective " << r.trace.front() << " -> " << r.trace.back()
              << (r.stalled ? " (stalled)" : "") << "\n";
    return 0;
  } catch (const Error& e) {
    return run_fail(e.what());
  }
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"Facial landmark model toolkit: data synthesis, training, search, dreaming"};
  app.require_subcommand(1);
  int rc = 0;

  SynthArgs sy;
  CLI::App* synth = app.add_subcommand("synth", "Generate a synthetic landmark dataset");
  synth->add_option("--out", sy.out, "Output dataset directory")->required();
  synth->add_option("--config", sy.config, "Config file");
  synth->add_option("--set", sy.sets, "Override config key=value");
  synth->add_option("--count", sy.count, "Sample count")->capture_default_str();
  synth->add_option("--height", sy.height, "Image height")->capture_default_str();
  synth->add_option("--width", sy.width, "Image width")->capture_default_str();
  synth->add_option("--seed", sy.seed, "Random seed")->capture_default_str();
  synth->callback([&] {
    sy.count_set = synth->count("--count") > 0;
    sy.height_set = synth->count("--height") > 0;
    sy.width_set = synth->count("--width") > 0;
    sy.seed_set = synth->count("--seed") > 0;
    rc = cmd_synth(sy);
  });

  AugmentArgs au;
  CLI::App* augment = app.add_subcommand("augment", "Rotation-augment a dataset to triple size");
  augment->add_option("--data", au.data, "Input dataset directory")->required();
  augment->add_option("--out", au.out, "Output dataset directory")->required();
  augment->add_option("--seed", au.seed, "Random seed")->capture_default_str();
  augment->callback([&] { rc = cmd_augment(au); });

  TrainArgs tr;
  CLI::App* train = app.add_subcommand("train", "Train a model on a dataset");
  train->add_option("--data", tr.data, "Dataset directory")->required();
  train->add_option("--out", tr.out, "Output directory")->required();
  train->add_option("--config", tr.config, "Config file");
  train->add_option("--set", tr.sets, "Override config key=value");
  train->add_option("--catalog", tr.catalog, "Catalog model id, e.g. A-3");
  train->add_option("--epochs", tr.epochs, "Training epochs");
  train->add_option("--batch-size", tr.batch_size, "Mini-batch size");
  train->add_option("--lr", tr.lr, "Learning rate");
  train->add_option("--val-fraction", tr.val_fraction, "Validation split fraction");
  train->add_option("--seed", tr.seed, "Random seed");
  train->add_flag("--augment", tr.augment, "Rotation-augment the training split");
  train->callback([&] {
    tr.epochs_set = train->count("--epochs") > 0;
    tr.batch_set = train->count("--batch-size") > 0;
    tr.lr_set = train->count("--lr") > 0;
    tr.vf_set = train->count("--val-fraction") > 0;
    tr.seed_set = train->count("--seed") > 0;
    rc = cmd_train(tr);
  });

  EvalArgs ev;
  CLI::App* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "Checkpoint directory")->required();
  eval_cmd->add_option("--data", ev.data, "Dataset directory")->required();
  eval_cmd->add_option("--out", ev.out, "Output directory")->capture_default_str();
  eval_cmd->callback([&] { rc = cmd_eval(ev); });

  SearchArgs se;
  CLI::App* search = app.add_subcommand("search", "Hyperparameter search with TPE and ASHA");
  search->add_option("--data", se.data, "Dataset directory")->required();
  search->add_option("--out", se.out, "Output directory")->required();
  search->add_option("--config", se.config, "Config file");
  search->add_option("--set", se.sets, "Override config key=value");
  search->add_option("--catalog", se.catalog, "Catalog model id for the search base");
  search->add_option("--trials", se.trials, "Trial budget")->capture_default_str();
  search->add_option("--epochs", se.epochs, "Epochs per trial")->capture_default_str();
  search->add_option("--jobs", se.jobs, "Concurrent trials")->capture_default_str();
  search->add_option("--batch-size", se.batch_size, "Mini-batch size")->capture_default_str();
  search->add_option("--seed", se.seed, "Random seed")->capture_default_str();
  search->callback([&] {
    se.trials_set = search->count("--trials") > 0;
    se.epochs_set = search->count("--epochs") > 0;
    se.jobs_set = search->count("--jobs") > 0;
    se.batch_set = search->count("--batch-size") > 0;
    se.seed_set = search->count("--seed") > 0;
    rc = cmd_search(se);
  });

  DreamArgs dr;
  CLI::App* dream = app.add_subcommand("dream", "Activation maximization on a checkpoint");
  dream->add_option("--checkpoint", dr.checkpoint, "Checkpoint directory")->required();
  dream->add_option("--out", dr.out, "Output directory")->required();
  dream->add_option("--config", dr.config, "Config file");
  dream->add_option("--set", dr.sets, "Override config key=value");
  dream->add_option("--layer", dr.layer, "Target layer record name");
  dream->add_option("--channel", dr.channel, "Target channel")->capture_default_str();
  dream->add_option("--steps", dr.steps, "Ascent steps")->capture_default_str();
  dream->add_option("--step-size", dr.step_size, "Ascent step size")->capture_default_str();
  dream->add_option("--seed", dr.seed, "Random seed")->capture_default_str();
  dream->callback([&] {
    dr.channel_set = dream->count("--channel") > 0;
    dr.steps_set = dream->count("--steps") > 0;
    dr.step_size_set = dream->count("--step-size") > 0;
    dr.seed_set = dream->count("--seed") > 0;
    rc = cmd_dream(dr);
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : kUsage;
  }
  return rc;
}
