#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "semshift/checkpoint.hpp"
#include "semshift/datagen.hpp"
#include "semshift/losses.hpp"
#include "semshift/metrics.hpp"
#include "semshift/models.hpp"
#include "semshift/optim.hpp"

namespace semshift {

enum class Mode { SourceOnly, Oracle, GA, GA_FCSA, GA_CSA };

const char* mode_name(Mode mode);
/// Accepts the names printed by mode_name. Throws std::invalid_argument.
Mode parse_mode(const std::string& name);

bool uses_global_adaptation(Mode mode);
bool uses_semantic_adaptation(Mode mode);

struct LossWeights {
  double seg = 1.0;
  double gadv = 0.001;
  double sadv = 0.01;
  double gd = 1.0;
  double sd = 1.0;
  void validate() const;
};

/// Default semantic adversarial weight of each semantic mode.
double default_lambda_sadv(Mode mode);

struct TrainConfig {
  Mode mode = Mode::GA_CSA;
  LossWeights weights;
  Reduction reduction = Reduction::Mean;
  std::size_t num_classes = 4;
  GeneratorConfig generator;
  GlobalDiscriminatorConfig global_discriminator;
  std::size_t semantic_hidden = kSemanticHiddenWidth;

  double g_lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double lr_power = 0.9;
  double d_lr = 1e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.99;

  std::int64_t max_iterations = 3000;
  std::int64_t eval_every = 0;  // 0 selects max_iterations / 20
  std::uint64_t seed = 0;
  /// Per-step parameter hashing and loss-term bookkeeping.
  bool instrument = false;

  std::int64_t eval_interval() const;
  /// Throws std::invalid_argument on an inconsistent configuration, e.g. a
  /// mode that needs labeled target data with a zero budget.
  void validate(std::size_t labeled_budget) const;
};

/// The four networks of one run. Semantic discriminators exist only in the
/// matching modes.
template <std::floating_point T>
struct Models {
  Generator<T> g;
  ClassifierHead<T> ch;
  GlobalDiscriminator<T> dg;
  std::optional<SemanticDiscriminatorFC<T>> ds_fc;
  std::optional<SemanticDiscriminatorConv<T>> ds_conv;

  explicit Models(const TrainConfig& config);

  ParameterList<T> generator_parameters() const;      // G and CH
  ParameterList<T> discriminator_parameters() const;  // D_g and D_s

  /// Score map P[c,H,W] for one image.
  Tensor<T> scores(const Tensor<T>& image) const;
  LabelMap predict(const Image& image) const;

  void save(Checkpoint& ck) const;
  void load(const Checkpoint& ck);
};

struct EvalResult {
  ConfusionMatrix confusion;
  IouReport iou;
};

template <std::floating_point T>
EvalResult evaluate(const Models<T>& models, const std::vector<Sample>& samples);

struct LossTerm {
  std::string name;
  double value = 0.0;
};

struct StepReport {
  std::vector<LossTerm> terms;  // unweighted values, in evaluation order
  double total = 0.0;           // weighted sum that was backpropagated
};

/// One iteration's inputs. Pointers reference cached tensors owned by the
/// trainer; optional parts are null when absent.
template <std::floating_point T>
struct Batch {
  const Tensor<T>* source_image = nullptr;
  const LabelMap* source_label = nullptr;
  const LabelMap* source_small = nullptr;
  const Tensor<T>* labeled_image = nullptr;
  const LabelMap* labeled_label = nullptr;
  const LabelMap* labeled_small = nullptr;
  const Tensor<T>* unlabeled_image = nullptr;  // target stream for D_g
};

/// Detached generator outputs consumed by the discriminator step.
template <std::floating_point T>
struct DiscriminatorBatch {
  Tensor<T> source_scores, target_scores;      // P_s, P_tu
  Tensor<T> source_features, labeled_features;  // F_s, F_tl (may be undefined)
  const LabelMap* source_small = nullptr;
  const LabelMap* labeled_small = nullptr;
};

struct EvalRecord {
  std::int64_t iteration = 0;
  std::map<std::string, double> losses;  // window means of each term
  double lr_g = 0, lr_d = 0;
  double val_miou = 0;
  std::map<std::size_t, double> per_class_iou;
};

struct InstrumentReport {
  std::int64_t generator_steps = 0;
  std::int64_t discriminator_steps = 0;
  /// Steps in which the parameters of the other side changed.
  std::int64_t generator_touched_in_discriminator_step = 0;
  std::int64_t discriminator_touched_in_generator_step = 0;
  std::uint64_t sealed_label_reads = 0;
  std::size_t generator_terms = 0;      // per step, last observed
  std::size_t discriminator_terms = 0;  // per step, last observed
};

struct TrainResult {
  std::vector<EvalRecord> log;
  double final_miou = 0;
  double best_miou = 0;
  std::int64_t best_iteration = 0;
  std::int64_t iterations_run = 0;
  InstrumentReport instrument;
};

/// Raised when a loss stops being finite.
class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunOptions {
  /// Metrics log and checkpoints go here; empty disables all file output.
  std::filesystem::path out_dir;
  /// Continue from out_dir/latest.ckpt.
  bool resume = false;
  /// Stop after this many iterations (still saving latest.ckpt); negative
  /// runs to max_iterations. The schedule always uses max_iterations.
  std::int64_t stop_at = -1;
  std::uint64_t fingerprint = 0;
  std::function<void(const EvalRecord&)> on_eval;
};

inline constexpr const char* kMetricsLogName = "metrics.jsonl";

template <std::floating_point T>
class Trainer {
 public:
  /// Keeps a reference to `data`, which must outlive the trainer.
  Trainer(TrainConfig config, const DatasetBundle& data);

  const TrainConfig& config() const { return config_; }
  Models<T>& models() { return models_; }
  const Models<T>& models() const { return models_; }
  std::int64_t iteration() const { return iteration_; }

  /// Single-step building blocks; both update only their own side.
  StepReport generator_step(const Batch<T>& batch, double lr, DiscriminatorBatch<T>* keep = nullptr);
  StepReport discriminator_step(const DiscriminatorBatch<T>& batch, double lr);

  /// The batch sampled for iteration i (stateless in i).
  Batch<T> batch_for(std::int64_t i);
  /// One generator step followed by one discriminator step.
  std::pair<StepReport, StepReport> run_iteration();

  TrainResult run(const RunOptions& options = {});

  void save_state(Checkpoint& ck) const;
  void load_state(const Checkpoint& ck);

 private:
  struct Cached {
    Tensor<T> image;
    const LabelMap* label = nullptr;
    LabelMap small;
  };

  std::size_t pick(std::uint64_t stream, std::int64_t i, std::size_t n);
  EvalRecord make_record(std::int64_t iteration, const EvalResult& eval) const;

  TrainConfig config_;
  const DatasetBundle& data_;
  Models<T> models_;
  SgdNesterov<T> g_opt_;
  Adam<T> d_opt_;
  std::vector<Cached> source_, labeled_;
  std::vector<Tensor<T>> unlabeled_;
  std::map<std::uint64_t, std::pair<std::int64_t, std::vector<std::size_t>>> permutations_;
  std::int64_t iteration_ = 0;
  std::vector<LossTerm> window_sums_;
  std::int64_t window_count_ = 0;
  double best_miou_ = -1;
  std::int64_t best_iteration_ = 0;
  InstrumentReport instrument_;
};

/// Writes an EvalRecord as one JSON line.
std::string to_json_line(const EvalRecord& record);

}  // namespace semshift
