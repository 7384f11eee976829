#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include "semshift/datagen.hpp"
#include "semshift/trainer.hpp"

namespace semshift {

/// Invalid or unknown configuration content. The message names the offending
/// key path, e.g. "training.loss_weights.gadv".
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DatasetSection {
  DomainSpec source = toy_source_spec();
  DomainSpec target = toy_target_spec();
  Resolution resolution{48, 48};
  std::size_t n_source = 400;
  /// Target training pool; labeled_budget of it is labeled, the rest is not.
  std::size_t n_target_train = 200;
  std::size_t labeled_budget = 20;
  std::size_t n_target_val = 100;
  /// Exported dataset to load instead of rendering in memory. Empty renders
  /// from the specs above.
  std::filesystem::path directory;

  SplitPlan split_plan(std::uint64_t seed) const;
};

/// Everything that determines a run. JSON layout:
///
///   { "seed": 0,
///     "dataset":  { "source": {DomainSpec}, "target": {DomainSpec},
///                   "resolution": {"height", "width"}, "n_source",
///                   "n_target_train", "labeled_budget", "n_target_val",
///                   "directory" },
///     "model":    { "num_classes", "feature_channels", "output_stride",
///                   "generator_widths", "global_discriminator_widths",
///                   "semantic_hidden" },
///     "training": { "mode", "loss_weights": {"seg", "gadv", "sadv", "gd", "sd"},
///                   "reduction", "generator_optimizer": {"lr", "momentum",
///                   "weight_decay"}, "discriminator_optimizer": {"lr",
///                   "beta1", "beta2"}, "lr_power", "max_iterations",
///                   "eval_every", "instrument" },
///     "output":   { "run_dir" } }
///
/// Every key is optional; omitted keys take the defaults of DatasetSection and
/// TrainConfig. "sadv" may be null to select the mode's default.
struct ExperimentConfig {
  DatasetSection dataset;
  /// training.seed is the top-level "seed": it drives initialization,
  /// sampling and the split permutation.
  TrainConfig training;
  /// Whether training.weights.sadv was set explicitly rather than taken
  /// from the mode default.
  bool lambda_sadv_explicit = false;
  /// Empty selects default_run_dir().
  std::filesystem::path run_dir;

  ExperimentConfig();

  /// Throws ConfigError on inconsistent values (mode vs budget, class counts,
  /// feasibility of the domain specs).
  void validate() const;
  /// The run directory after applying defaults.
  std::filesystem::path resolved_run_dir() const;
};

/// Parses a config document. Unknown keys, wrong types and invalid values
/// throw ConfigError.
ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Fully expanded JSON with every default filled in.
std::string to_json(const ExperimentConfig& config);

/// Hash of the resolved config without the output section. Checkpoints carry
/// it so they cannot be resumed or evaluated under a different setup.
std::uint64_t fingerprint(const ExperimentConfig& config);

/// $SEMSHIFT_RUN_ROOT, or "runs" when unset.
std::filesystem::path run_root();
/// run_root() / "<mode>_b<budget>_s<seed>".
std::filesystem::path default_run_dir(const ExperimentConfig& config);

/// Switches mode, moving λ_sadv to the new mode's default unless it was set
/// explicitly.
void set_mode(ExperimentConfig& config, Mode mode);
void set_lambda_sadv(ExperimentConfig& config, double value);

}  // namespace semshift
