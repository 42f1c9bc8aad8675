#include "tfl/config.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "tfl/error.hpp"

namespace tfl {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

const std::set<std::string>& registry() {
  static const std::set<std::string> keys = [] {
    std::set<std::string> k;
    for (const auto& [key, _] : model_spec_to_config(ModelSpec{})) k.insert(key);
    k.insert({"seed",
              "model.catalog",
              "train.epochs",
              "train.batch_size",
              "train.learning_rate",
              "train.beta1",
              "train.beta2",
              "train.eps",
              "train.eval_every",
              "train.val_fraction",
              "train.augment",
              "search.trials",
              "search.epochs",
              "search.jobs",
              "dream.layer",
              "dream.channel",
              "dream.steps",
              "dream.step_size",
              "dream.normalize_grad",
              "synth.count",
              "synth.height",
              "synth.width",
              "data.dir",
              "out.dir",
              "checkpoint.dir"});
    return k;
  }();
  return keys;
}

} // namespace

ConfigMap parse_config_text(const std::string& text, const std::string& origin) {
  ConfigMap kv;
  std::istringstream in(text);
  std::string line;
  int64_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + " line " + std::to_string(lineno) + ": expected key=value, got '" +
                        t + "'");
    std::string key = trim(t.substr(0, eq));
    if (key.empty())
      throw ConfigError(origin + " line " + std::to_string(lineno) + ": empty key");
    kv[key] = trim(t.substr(eq + 1));
  }
  return kv;
}

ConfigMap parse_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read config file " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config_text(ss.str(), path);
}

void validate_config_keys(const ConfigMap& kv) {
  for (const auto& [key, _] : kv) {
    if (registry().count(key)) continue;
    if (key.rfind("search.dim.", 0) == 0) {
      std::string target = key.substr(11);
      if (target == "train.learning_rate" || registry().count(target)) continue;
      throw LookupError("search dimension targets unknown key " + target);
    }
    throw LookupError("unknown config key " + key);
  }
}

void write_config(const std::string& path, const ConfigMap& kv) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write " + path);
  for (const auto& [k, v] : kv) f << k << '=' << v << '\n';
  if (!f) throw IoError("write failed for " + path);
}

int64_t config_int(const ConfigMap& kv, const std::string& key, int64_t fallback) {
  auto it = kv.find(key);
  if (it == kv.end()) return fallback;
  try {
    size_t used = 0;
    int64_t v = std::stoll(it->second, &used);
    if (used != it->second.size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    throw ConfigError(key + " wants an integer, got '" + it->second + "'");
  }
}

double config_double(const ConfigMap& kv, const std::string& key, double fallback) {
  auto it = kv.find(key);
  if (it == kv.end()) return fallback;
  try {
    size_t used = 0;
    double v = std::stod(it->second, &used);
    if (used != it->second.size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    throw ConfigError(key + " wants a number, got '" + it->second + "'");
  }
}

bool config_bool(const ConfigMap& kv, const std::string& key, bool fallback) {
  auto it = kv.find(key);
  if (it == kv.end()) return fallback;
  if (it->second == "1" || it->second == "true") return true;
  if (it->second == "0" || it->second == "false") return false;
  throw ConfigError(key + " wants 0/1/true/false, got '" + it->second + "'");
}

std::string config_str(const ConfigMap& kv, const std::string& key, const std::string& fallback) {
  auto it = kv.find(key);
  return it == kv.end() ? fallback : it->second;
}

ModelSpec spec_from_config(const ConfigMap& kv) {
  ModelSpec spec;
  auto it = kv.find("model.catalog");
  if (it != kv.end()) spec = catalog(it->second);

  ConfigMap model_keys;
  for (const auto& [k, v] : kv)
    if (k.rfind("model.", 0) == 0 && k != "model.catalog") model_keys[k] = v;
  if (model_keys.empty()) return spec;

  // Overlay: serialize the base spec, apply overrides, parse back.
  std::map<std::string, std::string> merged = model_spec_to_config(spec);
  for (const auto& [k, v] : model_keys) {
    if (!merged.count(k)) throw LookupError("unknown config key " + k);
    merged[k] = v;
  }
  return model_spec_from_config(merged);
}

TrainConfig train_config_from(const ConfigMap& kv) {
  TrainConfig cfg;
  cfg.epochs = config_int(kv, "train.epochs", cfg.epochs);
  cfg.batch_size = config_int(kv, "train.batch_size", cfg.batch_size);
  cfg.learning_rate = config_double(kv, "train.learning_rate", cfg.learning_rate);
  cfg.beta1 = config_double(kv, "train.beta1", cfg.beta1);
  cfg.beta2 = config_double(kv, "train.beta2", cfg.beta2);
  cfg.eps = config_double(kv, "train.eps", cfg.eps);
  cfg.eval_every = config_int(kv, "train.eval_every", cfg.eval_every);
  cfg.seed = static_cast<uint64_t>(config_int(kv, "seed", 0));
  return cfg;
}

DreamConfig dream_config_from(const ConfigMap& kv) {
  DreamConfig cfg;
  cfg.layer = config_str(kv, "dream.layer", cfg.layer);
  cfg.channel = config_int(kv, "dream.channel", cfg.channel);
  cfg.steps = config_int(kv, "dream.steps", cfg.steps);
  cfg.step_size = config_double(kv, "dream.step_size", cfg.step_size);
  cfg.normalize_grad = config_bool(kv, "dream.normalize_grad", cfg.normalize_grad);
  cfg.seed = static_cast<uint64_t>(config_int(kv, "seed", 0));
  return cfg;
}

namespace {

Dim dim_from_string(const std::string& key, const std::string& value) {
  size_t colon = value.find(':');
  if (colon == std::string::npos)
    throw ConfigError(key + " wants kind:args, got '" + value + "'");
  std::string kind = value.substr(0, colon);
  std::string args = value.substr(colon + 1);
  std::vector<std::string> parts;
  std::istringstream in(args);
  std::string item;
  while (std::getline(in, item, ',')) parts.push_back(trim(item));

  auto num = [&](const std::string& s) {
    try {
      return std::stod(s);
    } catch (const std::exception&) {
      throw ConfigError(key + ": bad bound '" + s + "'");
    }
  };
  if (kind == "categorical") {
    if (parts.empty()) throw ConfigError(key + ": categorical needs choices");
    return Dim::categorical(parts);
  }
  if (parts.size() != 2) throw ConfigError(key + ": " + kind + " wants lo,hi");
  if (kind == "uniform") return Dim::uniform(num(parts[0]), num(parts[1]));
  if (kind == "loguniform") return Dim::loguniform(num(parts[0]), num(parts[1]));
  if (kind == "integer")
    return Dim::integer(static_cast<int64_t>(num(parts[0])), static_cast<int64_t>(num(parts[1])));
  throw ConfigError(key + ": unknown dimension kind " + kind);
}

} // namespace

SearchSpace space_from_config(const ConfigMap& kv) {
  SearchSpace sp;
  for (const auto& [key, value] : kv) {
    if (key.rfind("search.dim.", 0) != 0) continue;
    sp.add(key.substr(11), dim_from_string(key, value));
  }
  if (sp.dims.empty()) {
    sp.add("model.stem_depth", Dim::integer(1, 4));
    sp.add("model.stem_width", Dim::integer(8, 64));
    sp.add("model.cardinality", Dim::categorical({"1", "2", "4", "8"}));
    sp.add("model.dropout", Dim::uniform(0.0, 0.5));
    sp.add("train.learning_rate", Dim::loguniform(1e-4, 1e-2));
  }
  return sp;
}

std::map<std::string, std::string> search_base_from_config(const ConfigMap& kv) {
  // Canonical full model config; catalog shorthand expands here.
  std::map<std::string, std::string> base = model_spec_to_config(spec_from_config(kv));
  auto it = kv.find("train.learning_rate");
  if (it != kv.end()) base["train.learning_rate"] = it->second;
  return base;
}

} // namespace tfl
