#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "semshift/config.hpp"
#include "semshift/trainer.hpp"

namespace semshift {

inline constexpr const char* kConfigSnapshotName = "config.json";
inline constexpr const char* kRunSummaryName = "summary.json";
inline constexpr const char* kDivergedName = "diverged.json";

struct GenerateReport {
  std::filesystem::path directory;
  std::size_t images = 0;
  std::uint64_t manifest_hash = 0;  // fnv1a64 of the manifest bytes
};

/// Renders the configured splits into `out_dir` (images, labels, manifest and
/// a resolved config). Refuses a non-empty directory unless `force`, which
/// clears it first.
GenerateReport run_generate(const ExperimentConfig& config, const std::filesystem::path& out_dir, bool force);

/// The configured dataset: imported from dataset.directory when set,
/// otherwise rendered in memory. Throws ConfigError if an imported dataset
/// disagrees with the configured budget or resolution.
DatasetBundle load_dataset(const ExperimentConfig& config);

struct TrainOptions {
  bool resume = false;
  std::int64_t stop_at = -1;
  std::function<void(const EvalRecord&)> on_eval;
};

/// Trains in the resolved run directory, which receives config.json,
/// metrics.jsonl, the checkpoints and summary.json. On divergence writes
/// diverged.json and rethrows TrainingDiverged.
TrainResult run_train(const ExperimentConfig& config, const TrainOptions& options = {});

enum class SweepAxis { LabeledBudget, LambdaSadv };

const char* axis_name(SweepAxis axis);
/// Accepts "labeled_budget"/"budget" and "lambda_sadv".
SweepAxis parse_axis(const std::string& name);

struct SweepSpec {
  SweepAxis axis = SweepAxis::LabeledBudget;
  std::vector<double> values;
  std::vector<Mode> modes;
  std::vector<std::uint64_t> seeds;
};

struct SweepCell {
  double value = 0;
  Mode mode = Mode::GA;
  std::uint64_t seed = 0;
  bool skipped = false;  // invalid combination, e.g. GA_CSA at budget 0
  std::string reason;
  double final_miou = 0;
  double best_miou = 0;
  std::filesystem::path run_dir;
};

struct SweepResult {
  std::vector<SweepCell> cells;
  /// Axis value per row, one column per mode holding the mean final mIoU over
  /// seeds, "NA" for skipped cells. Tab-separated with a header row.
  std::string table;
  /// One line per mode, budget axis only.
  std::vector<std::string> monotonicity;
};

/// One run per (value, mode, seed) under out_dir, which also receives
/// summary.tsv (the table), runs.tsv (one row per run) and, for the budget
/// axis, monotonicity.txt.
SweepResult run_sweep(const ExperimentConfig& base, const SweepSpec& spec, const std::filesystem::path& out_dir,
                      const std::function<void(const SweepCell&)>& progress = {});

enum class EvalSplit { SourceTrain, TargetLabeled, TargetVal };

const char* split_name(EvalSplit split);
/// Unlabeled targets are rejected: their labels are sealed.
EvalSplit parse_split(const std::string& name);

struct EvalOptions {
  std::filesystem::path run_dir;
  std::string checkpoint = "best.ckpt";
  EvalSplit split = EvalSplit::TargetVal;
  /// When set, receives <domain>_<id>_pred.ppm and _gt.ppm color maps.
  std::filesystem::path predictions_dir;
};

struct EvalReport {
  EvalResult result;
  std::size_t images = 0;
  std::string json;  // deterministic rendering of the report
};

/// Loads the run's config snapshot and checkpoint (fingerprints must match)
/// and scores the chosen split.
EvalReport run_eval(const EvalOptions& options);

/// Shortest round-trip decimal form of a double.
std::string format_double(double v);

}  // namespace semshift
