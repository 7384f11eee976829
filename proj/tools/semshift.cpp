// Command-line runner: generate, train, sweep, eval.
//
// Exit codes: 0 success, 1 usage or config error, 2 runtime failure
// (divergence, I/O, corrupt checkpoints).

#include <cstdio>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "semshift/checkpoint.hpp"
#include "semshift/experiment.hpp"

using namespace semshift;
namespace fs = std::filesystem;

namespace {

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> mode;
  std::optional<std::size_t> budget;
  std::optional<double> lambda_sadv;
  std::string out;
};

void add_common(CLI::App* app, Overrides& o) {
  app->add_option("--config", o.config, "Experiment config (JSON); defaults apply when omitted");
  app->add_option("--seed", o.seed, "Override the experiment seed");
  app->add_option("--out", o.out, "Output directory");
}

void add_training(CLI::App* app, Overrides& o) {
  app->add_option("--mode", o.mode, "SourceOnly, Oracle, GA, GA_FCSA or GA_CSA");
  app->add_option("--budget", o.budget, "Labeled target images");
  app->add_option("--lambda-sadv", o.lambda_sadv, "Semantic adversarial weight");
}

ExperimentConfig resolve(const Overrides& o) {
  ExperimentConfig c = o.config.empty() ? ExperimentConfig{} : load_config(o.config);
  if (o.seed) c.training.seed = *o.seed;
  if (o.mode) {
    try {
      set_mode(c, parse_mode(*o.mode));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("--mode: ") + e.what());
    }
  }
  if (o.budget) c.dataset.labeled_budget = *o.budget;
  if (o.lambda_sadv) set_lambda_sadv(c, *o.lambda_sadv);
  c.validate();
  return c;
}

template <typename T>
std::vector<T> parse_list(const std::string& text, const char* what, T (*convert)(const std::string&)) {
  std::vector<T> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) {
    if (item.empty()) continue;
    try {
      out.push_back(convert(item));
    } catch (const std::exception&) {
      throw ConfigError(std::string(what) + ": cannot parse '" + item + "'");
    }
  }
  if (out.empty()) throw ConfigError(std::string(what) + ": empty list");
  return out;
}

double to_double(const std::string& s) {
  std::size_t used = 0;
  const double v = std::stod(s, &used);
  if (used != s.size()) throw std::invalid_argument(s);
  return v;
}

std::uint64_t to_u64(const std::string& s) {
  std::size_t used = 0;
  const auto v = std::stoull(s, &used);
  if (used != s.size() || s.front() == '-') throw std::invalid_argument(s);
  return v;
}

Mode to_mode(const std::string& s) { return parse_mode(s); }

void print_record(const EvalRecord& r) {
  std::printf("iter %6lld  val mIoU %.4f", static_cast<long long>(r.iteration), r.val_miou);
  for (const auto& [k, v] : r.losses) std::printf("  %s %.4f", k.c_str(), v);
  std::printf("\n");
  std::fflush(stdout);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Semi-supervised domain adaptation for semantic segmentation on synthetic domains"};
  app.require_subcommand(1);

  Overrides gen_o, train_o, sweep_o;
  bool force = false;
  auto* gen = app.add_subcommand("generate", "Render the configured dataset to disk");
  add_common(gen, gen_o);
  add_training(gen, gen_o);
  gen->add_flag("--force", force, "Replace a non-empty output directory");

  bool resume = false, quiet = false;
  std::int64_t stop_at = -1;
  auto* train = app.add_subcommand("train", "Train one model");
  add_common(train, train_o);
  add_training(train, train_o);
  train->add_flag("--resume", resume, "Continue from the run directory's latest checkpoint");
  train->add_option("--stop-at", stop_at, "Stop after this iteration (the schedule still uses max_iterations)");
  train->add_flag("--quiet", quiet, "Only print the final summary");

  std::string axis = "labeled_budget", values, modes = "SourceOnly,GA,GA_CSA", seeds;
  auto* sweep = app.add_subcommand("sweep", "Grid over labeled budget or lambda_sadv");
  add_common(sweep, sweep_o);
  add_training(sweep, sweep_o);
  sweep->add_option("--axis", axis, "labeled_budget or lambda_sadv")->capture_default_str();
  sweep->add_option("--values", values, "Comma-separated axis values")->required();
  sweep->add_option("--modes", modes, "Comma-separated modes")->capture_default_str();
  sweep->add_option("--seeds", seeds, "Comma-separated seeds (default: the config seed)");

  std::string run_dir, checkpoint = "best.ckpt", split = "target_val", predictions;
  auto* eval = app.add_subcommand("eval", "Score a checkpoint on a dataset split");
  eval->add_option("--run", run_dir, "Run directory holding config.json and checkpoints")->required();
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file name in the run directory")->capture_default_str();
  eval->add_option("--split", split, "source_train, target_labeled or target_val")->capture_default_str();
  eval->add_option("--out", predictions, "Write color-coded predictions here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (*gen) {
      const auto c = resolve(gen_o);
      const fs::path out = gen_o.out.empty() ? run_root() / "dataset" : fs::path(gen_o.out);
      const auto r = run_generate(c, out, force);
      std::printf("wrote %zu images to %s (manifest %016llx)\n", r.images, r.directory.string().c_str(),
                  static_cast<unsigned long long>(r.manifest_hash));
    } else if (*train) {
      ExperimentConfig c;
      if (resume && train_o.config.empty()) {
        // Resume from the snapshot alone.
        if (train_o.out.empty()) throw ConfigError("--resume needs --config or --out");
        if (train_o.seed || train_o.mode || train_o.budget || train_o.lambda_sadv) {
          throw ConfigError("overrides cannot be combined with resuming from a snapshot");
        }
        c = load_config(fs::path(train_o.out) / kConfigSnapshotName);
      } else {
        c = resolve(train_o);
        if (!train_o.out.empty()) c.run_dir = train_o.out;
      }
      TrainOptions opts;
      opts.resume = resume;
      opts.stop_at = stop_at;
      if (!quiet) opts.on_eval = print_record;
      const auto r = run_train(c, opts);
      std::printf("%s: final mIoU %.4f, best %.4f at iteration %lld\n", c.resolved_run_dir().string().c_str(),
                  r.final_miou, r.best_miou, static_cast<long long>(r.best_iteration));
    } else if (*sweep) {
      const auto c = resolve(sweep_o);
      SweepSpec spec;
      try {
        spec.axis = parse_axis(axis);
      } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
      }
      spec.values = parse_list<double>(values, "--values", to_double);
      spec.modes = parse_list<Mode>(modes, "--modes", to_mode);
      spec.seeds = seeds.empty() ? std::vector<std::uint64_t>{c.training.seed}
                                 : parse_list<std::uint64_t>(seeds, "--seeds", to_u64);
      const fs::path out = sweep_o.out.empty() ? run_root() / ("sweep_" + std::string(axis_name(spec.axis)))
                                               : fs::path(sweep_o.out);
      const auto r = run_sweep(c, spec, out, [](const SweepCell& cell) {
        if (cell.skipped) {
          std::printf("skip %-10s value %g seed %llu: %s\n", mode_name(cell.mode), cell.value,
                      static_cast<unsigned long long>(cell.seed), cell.reason.c_str());
        } else {
          std::printf("done %-10s value %g seed %llu: final mIoU %.4f\n", mode_name(cell.mode), cell.value,
                      static_cast<unsigned long long>(cell.seed), cell.final_miou);
        }
        std::fflush(stdout);
      });
      std::printf("\n%s", r.table.c_str());
      for (const auto& line : r.monotonicity) std::printf("%s\n", line.c_str());
    } else if (*eval) {
      EvalOptions opts;
      opts.run_dir = run_dir;
      opts.checkpoint = checkpoint;
      try {
        opts.split = parse_split(split);
      } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
      }
      opts.predictions_dir = predictions;
      std::printf("%s", run_eval(opts).json.c_str());
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 1;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "invalid argument: %s\n", e.what());
    return 1;
  } catch (const TrainingDiverged& e) {
    std::fprintf(stderr, "training diverged: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
