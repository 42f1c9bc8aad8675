#pragma once

#include <map>
#include <string>

#include "tfl/dream.hpp"
#include "tfl/hpo.hpp"
#include "tfl/model.hpp"
#include "tfl/train.hpp"

namespace tfl {

using ConfigMap = std::map<std::string, std::string>;

/// Flat dotted-key file: one `key=value` per line, `#` comments, blank lines
/// ignored, surrounding whitespace trimmed.
ConfigMap parse_config_file(const std::string& path);
ConfigMap parse_config_text(const std::string& text, const std::string& origin);

/// Rejects any key outside the registry (model.*, train.*, search.*, dream.*,
/// synth.*, data/out/checkpoint paths, seed), naming the offender.
void validate_config_keys(const ConfigMap& kv);

/// Sorted `key=value` lines; the resolved-config artifact every run writes.
void write_config(const std::string& path, const ConfigMap& kv);

// Typed lookups with defaults. Malformed values raise ConfigError naming the key.
int64_t config_int(const ConfigMap& kv, const std::string& key, int64_t fallback);
double config_double(const ConfigMap& kv, const std::string& key, double fallback);
bool config_bool(const ConfigMap& kv, const std::string& key, bool fallback);
std::string config_str(const ConfigMap& kv, const std::string& key, const std::string& fallback);

/// ModelSpec from `model.catalog` (if present) overlaid with model.* keys.
ModelSpec spec_from_config(const ConfigMap& kv);

/// TrainConfig from train.* keys plus the shared `seed`.
TrainConfig train_config_from(const ConfigMap& kv);

/// DreamConfig from dream.* keys plus the shared `seed`.
DreamConfig dream_config_from(const ConfigMap& kv);

/// Search space from `search.dim.<target>=<kind>:<args>` entries, e.g.
///   search.dim.model.stem_width=integer:8,64
///   search.dim.train.learning_rate=loguniform:1e-4,1e-2
///   search.dim.model.stem=categorical:conv,resnext
/// With no entries, the documented default space.
SearchSpace space_from_config(const ConfigMap& kv);

/// The model./train.learning_rate base every search trial starts from.
std::map<std::string, std::string> search_base_from_config(const ConfigMap& kv);

} // namespace tfl
