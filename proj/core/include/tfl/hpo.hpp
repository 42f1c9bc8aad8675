#pragma once

#include <map>
#include <string>
#include <variant>
#include <vector>

#include "tfl/data.hpp"
#include "tfl/rng.hpp"

namespace tfl {

// Tree-structured Parzen Estimator constants. The sampler stays on the prior
// until kTpeStartup trials have completed, then splits history at the
// kTpeGamma quantile and rates kTpeCandidates draws from the good-set model.
inline constexpr int64_t kTpeStartup = 10;
inline constexpr double kTpeGamma = 0.25;
inline constexpr int64_t kTpeCandidates = 24;

// Successive-halving schedule: rungs at kAshaR * kAshaEta^k epochs.
inline constexpr int64_t kAshaR = 2;
inline constexpr int64_t kAshaEta = 3;

enum class DimKind { uniform, loguniform, integer, categorical };

/// One search dimension. Numeric kinds carry [lo, hi]; categorical carries its
/// choice list. Construct through the factories, which validate bounds.
struct Dim {
  DimKind kind = DimKind::uniform;
  double lo = 0.0, hi = 1.0;
  std::vector<std::string> choices;

  static Dim uniform(double lo, double hi);
  static Dim loguniform(double lo, double hi); // lo > 0
  static Dim integer(int64_t lo, int64_t hi);
  static Dim categorical(std::vector<std::string> choices);
};

/// Ordered, uniquely named dimensions.
struct SearchSpace {
  std::vector<std::pair<std::string, Dim>> dims;
  void add(const std::string& name, Dim d);
  const Dim& at(const std::string& name) const;
};

using ParamValue = std::variant<double, std::string>;
using ParamMap = std::map<std::string, ParamValue>;

enum class TrialStatus { running, pruned, complete, failed };
std::string to_string(TrialStatus s);
TrialStatus trial_status_from(const std::string& s);

struct Trial {
  int64_t id = 0;
  ParamMap params;
  std::vector<double> history; // per-epoch validation wing loss
  TrialStatus status = TrialStatus::running;

  /// Best (lowest) reported value; +infinity for failed or empty history.
  double objective() const;
};

struct Study {
  SearchSpace space;
  std::vector<Trial> trials;
  int64_t max_epochs = 20; // caps the rung schedule

  /// Lowest-objective complete trial, or nullptr if none completed.
  const Trial* best() const;
};

/// Next parameter set. Below kTpeStartup completed trials this samples each
/// dimension from its prior; afterwards it draws kTpeCandidates points from
/// the good-set density and returns the best l(x)/g(x) ratio.
ParamMap tpe_suggest(const Study& study, RngStream& rng);

/// Rung epochs for a given epoch cap: kAshaR * kAshaEta^k, capped.
std::vector<int64_t> asha_rungs(int64_t max_epochs);

/// True = continue, false = prune. Off-rung epochs always continue. At a rung
/// the trial survives iff its best-so-far value ranks in the top floor(k/eta)
/// of the k trials that have reached that epoch, ties to the lower id.
bool asha_decide(const Study& study, const Trial& trial, int64_t epoch);

struct StudyConfig {
  int64_t budget_trials = 8;
  int64_t epochs_per_trial = 5;
  int64_t batch_size = 32;
  uint64_t seed = 0;
  int64_t jobs = 1;
  std::string out_dir; // empty disables persistence/resume
  /// Base model./train. keys every trial starts from before its params apply.
  std::map<std::string, std::string> base;
};

/// Runs trials to budget: suggest, build, train with per-epoch ASHA checks.
/// Invalid specs and diverged runs become failed trials with +inf objective.
/// With out_dir set, study.tsv and trials.tsv persist progress and a rerun
/// resumes after the last recorded trial. Deterministic when jobs == 1.
Study run_study(const SearchSpace& space, const Dataset& train_set, const Dataset& val_set,
                const StudyConfig& cfg);

/// Serializes params using the space's dim kinds (integers print as integers),
/// merged over the base config.
std::map<std::string, std::string> params_to_config(const SearchSpace& space, const ParamMap& params,
                                                    const std::map<std::string, std::string>& base);

} // namespace tfl
