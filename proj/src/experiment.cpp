#include "semshift/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <optional>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"
#include "semshift/checkpoint.hpp"
#include "semshift/image_io.hpp"

namespace semshift {

namespace fs = std::filesystem;

namespace {

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// Resolved snapshot: run_dir made explicit so the file alone reproduces the run.
ExperimentConfig resolved(const ExperimentConfig& config) {
  auto c = config;
  c.run_dir = config.resolved_run_dir();
  return c;
}

}  // namespace

std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

GenerateReport run_generate(const ExperimentConfig& config, const fs::path& out_dir, bool force) {
  config.validate();
  if (fs::exists(out_dir) && !fs::is_empty(out_dir)) {
    if (!force) throw ConfigError("output directory " + out_dir.string() + " is not empty (use --force)");
    fs::remove_all(out_dir);
  }
  fs::create_directories(out_dir);
  const auto& d = config.dataset;
  const auto bundle = make_splits(d.split_plan(config.training.seed), d.source, d.target, d.resolution);
  export_dataset(bundle, out_dir);
  auto snapshot = config;
  snapshot.dataset.directory = out_dir;
  write_text(out_dir / kConfigSnapshotName, to_json(snapshot));
  return {out_dir,
          bundle.source_train.size() + bundle.target_labeled.size() + bundle.target_unlabeled.size() +
              bundle.target_val.size(),
          fnv1a64(read_text(out_dir / kManifestName))};
}

DatasetBundle load_dataset(const ExperimentConfig& config) {
  const auto& d = config.dataset;
  if (d.directory.empty()) {
    return make_splits(d.split_plan(config.training.seed), d.source, d.target, d.resolution);
  }
  auto bundle = import_dataset(d.directory);
  if (bundle.target_labeled.size() != d.labeled_budget) {
    throw ConfigError("dataset at " + d.directory.string() + " has " + std::to_string(bundle.target_labeled.size()) +
                      " labeled target images but dataset.labeled_budget is " + std::to_string(d.labeled_budget));
  }
  for (const auto* split : {&bundle.source_train, &bundle.target_labeled, &bundle.target_val}) {
    for (const auto& s : *split) {
      if (s.image.height != d.resolution.height || s.image.width != d.resolution.width) {
        throw ConfigError("dataset at " + d.directory.string() + " does not match dataset.resolution");
      }
    }
  }
  return bundle;
}

TrainResult run_train(const ExperimentConfig& config, const TrainOptions& options) {
  config.validate();
  const auto snapshot = resolved(config);
  const auto dir = snapshot.run_dir;
  const auto fp = fingerprint(snapshot);
  if (options.resume) {
    if (!fs::exists(dir / kConfigSnapshotName)) throw ConfigError("nothing to resume in " + dir.string());
    if (fingerprint(parse_config(read_text(dir / kConfigSnapshotName))) != fp) {
      throw ConfigError("config differs from the snapshot in " + dir.string());
    }
  }
  fs::create_directories(dir);
  write_text(dir / kConfigSnapshotName, to_json(snapshot));
  fs::remove(dir / kDivergedName);

  const auto data = load_dataset(snapshot);
  Trainer<float> trainer(snapshot.training, data);
  RunOptions run;
  run.out_dir = dir;
  run.resume = options.resume;
  run.stop_at = options.stop_at;
  run.fingerprint = fp;
  EvalRecord last;
  run.on_eval = [&](const EvalRecord& r) {
    last = r;
    if (options.on_eval) options.on_eval(r);
  };
  TrainResult result;
  try {
    result = trainer.run(run);
  } catch (const TrainingDiverged& e) {
    nlohmann::ordered_json j;
    j["error"] = e.what();
    j["iteration"] = trainer.iteration();
    j["last_eval"] = last.iteration > 0 ? nlohmann::ordered_json::parse(to_json_line(last)) : nlohmann::ordered_json();
    write_text(dir / kDivergedName, j.dump(2) + "\n");
    throw;
  }

  nlohmann::ordered_json s;
  s["mode"] = mode_name(snapshot.training.mode);
  s["labeled_budget"] = snapshot.dataset.labeled_budget;
  s["lambda_sadv"] = snapshot.training.weights.sadv;
  s["seed"] = snapshot.training.seed;
  s["iteration"] = trainer.iteration();
  s["final_miou"] = result.final_miou;
  s["best_miou"] = result.best_miou;
  s["best_iteration"] = result.best_iteration;
  s["sealed_label_reads"] = data.sealed_label_reads();
  s["fingerprint"] = hex64(fp);
  write_text(dir / kRunSummaryName, s.dump(2) + "\n");
  return result;
}

const char* axis_name(SweepAxis axis) { return axis == SweepAxis::LabeledBudget ? "labeled_budget" : "lambda_sadv"; }

SweepAxis parse_axis(const std::string& name) {
  if (name == "labeled_budget" || name == "budget") return SweepAxis::LabeledBudget;
  if (name == "lambda_sadv") return SweepAxis::LambdaSadv;
  throw std::invalid_argument("unknown sweep axis '" + name + "' (expected labeled_budget or lambda_sadv)");
}

SweepResult run_sweep(const ExperimentConfig& base, const SweepSpec& spec, const fs::path& out_dir,
                      const std::function<void(const SweepCell&)>& progress) {
  if (spec.values.empty() || spec.modes.empty() || spec.seeds.empty()) {
    throw ConfigError("sweep needs at least one axis value, mode and seed");
  }
  for (double v : spec.values) {
    if (spec.axis == SweepAxis::LabeledBudget) {
      if (!(v >= 0) || v != std::floor(v)) throw ConfigError("labeled budgets must be nonnegative integers");
    } else if (!(v >= 0) || !std::isfinite(v)) {
      throw ConfigError("lambda_sadv values must be finite and nonnegative");
    }
  }
  fs::create_directories(out_dir);
  SweepResult result;
  for (double v : spec.values) {
    for (auto mode : spec.modes) {
      for (auto seed : spec.seeds) {
        SweepCell cell;
        cell.value = v;
        cell.mode = mode;
        cell.seed = seed;
        auto c = base;
        set_mode(c, mode);
        c.training.seed = seed;
        std::string tag;
        if (spec.axis == SweepAxis::LabeledBudget) {
          c.dataset.labeled_budget = static_cast<std::size_t>(v);
          tag = "b" + std::to_string(c.dataset.labeled_budget);
        } else {
          set_lambda_sadv(c, v);
          tag = "l" + format_double(v);
        }
        c.run_dir = out_dir / (std::string(mode_name(mode)) + "_" + tag + "_s" + std::to_string(seed));
        cell.run_dir = c.run_dir;
        try {
          c.validate();
        } catch (const ConfigError& e) {
          cell.skipped = true;
          cell.reason = e.what();
        }
        if (!cell.skipped) {
          const auto r = run_train(c);
          cell.final_miou = r.final_miou;
          cell.best_miou = r.best_miou;
        }
        if (progress) progress(cell);
        result.cells.push_back(std::move(cell));
      }
    }
  }

  std::ostringstream runs;
  runs << axis_name(spec.axis) << "\tmode\tseed\tfinal_miou\tbest_miou\trun_dir\n";
  for (const auto& c : result.cells) {
    runs << format_double(c.value) << '\t' << mode_name(c.mode) << '\t' << c.seed << '\t'
         << (c.skipped ? "NA" : format_double(c.final_miou)) << '\t' << (c.skipped ? "NA" : format_double(c.best_miou))
         << '\t' << (c.skipped ? "" : c.run_dir.string()) << '\n';
  }
  write_text(out_dir / "runs.tsv", runs.str());

  // Mean over seeds per (value, mode).
  std::map<std::pair<double, int>, std::pair<double, std::size_t>> means;
  for (const auto& c : result.cells) {
    auto& m = means[{c.value, static_cast<int>(c.mode)}];
    if (!c.skipped) {
      m.first += c.final_miou;
      ++m.second;
    }
  }
  auto mean_of = [&](double v, Mode mode) -> std::optional<double> {
    const auto& m = means.at({v, static_cast<int>(mode)});
    if (m.second == 0) return std::nullopt;
    return m.first / static_cast<double>(m.second);
  };
  std::ostringstream table;
  table << axis_name(spec.axis);
  for (auto mode : spec.modes) table << '\t' << mode_name(mode);
  table << '\n';
  for (double v : spec.values) {
    table << format_double(v);
    for (auto mode : spec.modes) {
      const auto m = mean_of(v, mode);
      table << '\t' << (m ? format_double(*m) : "NA");
    }
    table << '\n';
  }
  result.table = table.str();
  write_text(out_dir / "summary.tsv", result.table);

  if (spec.axis == SweepAxis::LabeledBudget) {
    std::vector<double> sorted = spec.values;
    std::sort(sorted.begin(), sorted.end());
    std::ostringstream mono;
    for (auto mode : spec.modes) {
      std::string line = std::string(mode_name(mode)) + ": ";
      std::optional<double> prev;
      double prev_v = 0;
      std::string drops;
      for (double v : sorted) {
        const auto m = mean_of(v, mode);
        if (!m) continue;
        if (prev && *m < *prev) {
          char buf[128];
          std::snprintf(buf, sizeof buf, " %s->%s drops %.2f points;", format_double(prev_v).c_str(),
                        format_double(v).c_str(), 100 * (*prev - *m));
          drops += buf;
        }
        prev = m;
        prev_v = v;
      }
      line += drops.empty() ? "non-decreasing" : "decreasing at" + drops.substr(0, drops.size() - 1);
      result.monotonicity.push_back(line);
      mono << line << '\n';
    }
    write_text(out_dir / "monotonicity.txt", mono.str());
  }
  return result;
}

const char* split_name(EvalSplit split) {
  switch (split) {
    case EvalSplit::SourceTrain: return "source_train";
    case EvalSplit::TargetLabeled: return "target_labeled";
    case EvalSplit::TargetVal: return "target_val";
  }
  return "?";
}

EvalSplit parse_split(const std::string& name) {
  for (auto s : {EvalSplit::SourceTrain, EvalSplit::TargetLabeled, EvalSplit::TargetVal}) {
    if (name == split_name(s)) return s;
  }
  if (name == "target_unlabeled") {
    throw std::invalid_argument("target_unlabeled labels are sealed and cannot be evaluated");
  }
  throw std::invalid_argument("unknown split '" + name + "' (expected source_train, target_labeled or target_val)");
}

EvalReport run_eval(const EvalOptions& options) {
  const auto config = parse_config(read_text(options.run_dir / kConfigSnapshotName));
  const auto ck = Checkpoint::load(options.run_dir / options.checkpoint, fingerprint(config));
  Models<float> models(config.training);
  models.load(ck);
  const auto data = load_dataset(config);
  const auto& samples = options.split == EvalSplit::SourceTrain     ? data.source_train
                        : options.split == EvalSplit::TargetLabeled ? data.target_labeled
                                                                    : data.target_val;
  if (samples.empty()) throw ConfigError(std::string("split ") + split_name(options.split) + " is empty");

  EvalReport report{evaluate(models, samples), samples.size(), {}};
  if (!options.predictions_dir.empty()) {
    fs::create_directories(options.predictions_dir);
    for (const auto& s : samples) {
      const auto stem = std::string(domain_name(s.domain)) + "_" + std::to_string(s.id);
      write_ppm(options.predictions_dir / (stem + "_pred.ppm"), colorize_labels(models.predict(s.image)));
      write_ppm(options.predictions_dir / (stem + "_gt.ppm"), colorize_labels(s.label));
    }
  }
  nlohmann::ordered_json j;
  j["run_dir"] = options.run_dir.string();
  j["checkpoint"] = options.checkpoint;
  j["split"] = split_name(options.split);
  j["images"] = samples.size();
  j["miou"] = report.result.iou.mean;
  nlohmann::ordered_json per = nlohmann::ordered_json::object();
  for (const auto& [k, v] : report.result.iou.per_class) per[std::to_string(k)] = v;
  j["per_class_iou"] = per;
  report.json = j.dump(2) + "\n";
  return report;
}

}  // namespace semshift
