#include "semshift/config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "semshift/checkpoint.hpp"

namespace semshift {

namespace {

using Json = nlohmann::ordered_json;

// Reads one JSON object, tracking consumed keys so leftovers can be rejected.
class Section {
 public:
  Section(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail(path_.empty() ? "config" : path_, "expected an object");
  }

  [[noreturn]] static void fail(const std::string& key, const std::string& what) {
    throw ConfigError(key + ": " + what);
  }

  std::string key(const std::string& name) const { return path_.empty() ? name : path_ + "." + name; }

  const Json* find(const std::string& name) {
    seen_.insert(name);
    const auto it = j_.find(name);
    return it == j_.end() ? nullptr : &*it;
  }

  Section child(const std::string& name) {
    static const Json empty = Json::object();
    const auto* v = find(name);
    return Section(v ? *v : empty, key(name));
  }

  void number(const std::string& name, double& out) {
    if (const auto* v = find(name)) {
      if (!v->is_number()) fail(key(name), "expected a number");
      out = v->get<double>();
    }
  }

  template <typename U>
  void count(const std::string& name, U& out) {
    if (const auto* v = find(name)) {
      if (!v->is_number_unsigned()) fail(key(name), "expected a nonnegative integer");
      out = static_cast<U>(v->get<std::uint64_t>());
    }
  }

  void integer(const std::string& name, std::int64_t& out) {
    if (const auto* v = find(name)) {
      if (!v->is_number_integer()) fail(key(name), "expected an integer");
      out = v->get<std::int64_t>();
    }
  }

  void boolean(const std::string& name, bool& out) {
    if (const auto* v = find(name)) {
      if (!v->is_boolean()) fail(key(name), "expected true or false");
      out = v->get<bool>();
    }
  }

  void string(const std::string& name, std::string& out) {
    if (const auto* v = find(name)) {
      if (!v->is_string()) fail(key(name), "expected a string");
      out = v->get<std::string>();
    }
  }

  void counts(const std::string& name, std::vector<std::size_t>& out) {
    if (const auto* v = find(name)) {
      if (!v->is_array()) fail(key(name), "expected an array of nonnegative integers");
      out.clear();
      for (const auto& e : *v) {
        if (!e.is_number_unsigned()) fail(key(name), "expected an array of nonnegative integers");
        out.push_back(e.get<std::size_t>());
      }
    }
  }

  void numbers(const std::string& name, std::vector<double>& out) {
    if (const auto* v = find(name)) {
      if (!v->is_array()) fail(key(name), "expected an array of numbers");
      out.clear();
      for (const auto& e : *v) {
        if (!e.is_number()) fail(key(name), "expected an array of numbers");
        out.push_back(e.get<double>());
      }
    }
  }

  /// Rejects keys that no reader asked for.
  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) fail(key(k), "unknown key");
    }
  }

 private:
  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void read_domain(Section s, DomainSpec& spec) {
  if (const auto* v = s.find("palette")) {
    if (!v->is_array()) Section::fail(s.key("palette"), "expected an array of [r, g, b] triples");
    spec.palette.clear();
    for (const auto& c : *v) {
      if (!c.is_array() || c.size() != 3 || !c[0].is_number() || !c[1].is_number() || !c[2].is_number()) {
        Section::fail(s.key("palette"), "expected an array of [r, g, b] triples");
      }
      spec.palette.push_back({c[0].get<double>(), c[1].get<double>(), c[2].get<double>()});
    }
  }
  s.number("palette_hue_shift", spec.palette_hue_shift);
  s.number("noise_sigma", spec.noise_sigma);
  std::vector<double> range{spec.shape_scale_range.first, spec.shape_scale_range.second};
  s.numbers("shape_scale_range", range);
  if (range.size() != 2) Section::fail(s.key("shape_scale_range"), "expected [min, max]");
  spec.shape_scale_range = {range[0], range[1]};
  s.numbers("class_frequency", spec.class_frequency);
  s.count("seed", spec.seed);
  s.finish();
}

Json domain_json(const DomainSpec& spec) {
  Json j;
  Json palette = Json::array();
  for (const auto& c : spec.palette) palette.push_back({c.r, c.g, c.b});
  j["palette"] = palette;
  j["palette_hue_shift"] = spec.palette_hue_shift;
  j["noise_sigma"] = spec.noise_sigma;
  j["shape_scale_range"] = {spec.shape_scale_range.first, spec.shape_scale_range.second};
  j["class_frequency"] = spec.class_frequency;
  j["seed"] = spec.seed;
  return j;
}

const char* reduction_name(Reduction r) { return r == Reduction::Mean ? "mean" : "sum"; }

Json config_json(const ExperimentConfig& c, bool with_output) {
  const auto& t = c.training;
  const auto& d = c.dataset;
  Json j;
  j["seed"] = t.seed;
  Json ds;
  ds["source"] = domain_json(d.source);
  ds["target"] = domain_json(d.target);
  ds["resolution"] = {{"height", d.resolution.height}, {"width", d.resolution.width}};
  ds["n_source"] = d.n_source;
  ds["n_target_train"] = d.n_target_train;
  ds["labeled_budget"] = d.labeled_budget;
  ds["n_target_val"] = d.n_target_val;
  ds["directory"] = d.directory.string();
  j["dataset"] = ds;
  Json m;
  m["num_classes"] = t.num_classes;
  m["feature_channels"] = t.generator.feature_channels;
  m["output_stride"] = t.generator.output_stride;
  m["generator_widths"] = t.generator.hidden_widths;
  m["global_discriminator_widths"] = t.global_discriminator.hidden_widths;
  m["semantic_hidden"] = t.semantic_hidden;
  j["model"] = m;
  Json tr;
  tr["mode"] = mode_name(t.mode);
  tr["loss_weights"] = {{"seg", t.weights.seg},
                        {"gadv", t.weights.gadv},
                        {"sadv", t.weights.sadv},
                        {"gd", t.weights.gd},
                        {"sd", t.weights.sd}};
  tr["reduction"] = reduction_name(t.reduction);
  tr["generator_optimizer"] = {{"lr", t.g_lr}, {"momentum", t.momentum}, {"weight_decay", t.weight_decay}};
  tr["discriminator_optimizer"] = {{"lr", t.d_lr}, {"beta1", t.adam_beta1}, {"beta2", t.adam_beta2}};
  tr["lr_power"] = t.lr_power;
  tr["max_iterations"] = t.max_iterations;
  tr["eval_every"] = t.eval_every;
  tr["instrument"] = t.instrument;
  j["training"] = tr;
  if (with_output) j["output"] = {{"run_dir", c.run_dir.string()}};
  return j;
}

}  // namespace

SplitPlan DatasetSection::split_plan(std::uint64_t seed) const {
  return SplitPlan{n_source, labeled_budget, n_target_train - labeled_budget, n_target_val, seed};
}

ExperimentConfig::ExperimentConfig() { training.weights.sadv = default_lambda_sadv(training.mode); }

void ExperimentConfig::validate() const {
  const auto& d = dataset;
  const auto& t = training;
  auto check = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  check(d.labeled_budget <= d.n_target_train, "dataset.labeled_budget exceeds dataset.n_target_train");
  check(d.n_target_val > 0, "dataset.n_target_val must be positive");
  check(t.mode == Mode::Oracle || d.n_source > 0, "dataset.n_source must be positive outside Oracle mode");
  check(d.source.num_classes() == t.num_classes && d.target.num_classes() == t.num_classes,
        "model.num_classes must equal the palette size of both domains");
  check(t.generator.feature_channels > 0, "model.feature_channels must be positive");
  check(d.resolution.height > 0 && d.resolution.width > 0, "dataset.resolution must be positive");
  const auto s = t.generator.output_stride;
  check(s > 0 && d.resolution.height % s == 0 && d.resolution.width % s == 0,
        "dataset.resolution must be divisible by model.output_stride");
  check(t.semantic_hidden > 0, "model.semantic_hidden must be positive");
  for (auto w : t.global_discriminator.hidden_widths) check(w > 0, "model.global_discriminator_widths must be positive");
  for (auto w : t.generator.hidden_widths) check(w > 0, "model.generator_widths must be positive");
  try {
    d.source.validate();
    d.target.validate();
    t.validate(d.labeled_budget);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

std::filesystem::path ExperimentConfig::resolved_run_dir() const {
  return run_dir.empty() ? default_run_dir(*this) : run_dir;
}

ExperimentConfig parse_config(const std::string& json_text) {
  Json j;
  try {
    j = Json::parse(json_text);
  } catch (const Json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig c;
  auto& t = c.training;
  auto& d = c.dataset;
  Section root(j, "");
  root.count("seed", t.seed);

  auto ds = root.child("dataset");
  read_domain(ds.child("source"), d.source);
  read_domain(ds.child("target"), d.target);
  auto res = ds.child("resolution");
  res.count("height", d.resolution.height);
  res.count("width", d.resolution.width);
  res.finish();
  ds.count("n_source", d.n_source);
  ds.count("n_target_train", d.n_target_train);
  ds.count("labeled_budget", d.labeled_budget);
  ds.count("n_target_val", d.n_target_val);
  std::string dir;
  ds.string("directory", dir);
  d.directory = dir;
  ds.finish();

  auto m = root.child("model");
  m.count("num_classes", t.num_classes);
  m.count("feature_channels", t.generator.feature_channels);
  m.count("output_stride", t.generator.output_stride);
  m.counts("generator_widths", t.generator.hidden_widths);
  m.counts("global_discriminator_widths", t.global_discriminator.hidden_widths);
  m.count("semantic_hidden", t.semantic_hidden);
  m.finish();

  auto tr = root.child("training");
  std::string mode = mode_name(t.mode);
  tr.string("mode", mode);
  try {
    t.mode = parse_mode(mode);
  } catch (const std::invalid_argument& e) {
    Section::fail("training.mode", e.what());
  }
  auto w = tr.child("loss_weights");
  w.number("seg", t.weights.seg);
  w.number("gadv", t.weights.gadv);
  w.number("gd", t.weights.gd);
  w.number("sd", t.weights.sd);
  t.weights.sadv = default_lambda_sadv(t.mode);
  if (const auto* v = w.find("sadv"); v && !v->is_null()) {
    if (!v->is_number()) Section::fail("training.loss_weights.sadv", "expected a number or null");
    t.weights.sadv = v->get<double>();
    c.lambda_sadv_explicit = true;
  }
  w.finish();
  std::string reduction = reduction_name(t.reduction);
  tr.string("reduction", reduction);
  if (reduction == "mean") {
    t.reduction = Reduction::Mean;
  } else if (reduction == "sum") {
    t.reduction = Reduction::Sum;
  } else {
    Section::fail("training.reduction", "expected \"mean\" or \"sum\"");
  }
  auto go = tr.child("generator_optimizer");
  go.number("lr", t.g_lr);
  go.number("momentum", t.momentum);
  go.number("weight_decay", t.weight_decay);
  go.finish();
  auto dop = tr.child("discriminator_optimizer");
  dop.number("lr", t.d_lr);
  dop.number("beta1", t.adam_beta1);
  dop.number("beta2", t.adam_beta2);
  dop.finish();
  tr.number("lr_power", t.lr_power);
  tr.integer("max_iterations", t.max_iterations);
  tr.integer("eval_every", t.eval_every);
  tr.boolean("instrument", t.instrument);
  tr.finish();

  auto out = root.child("output");
  std::string run_dir;
  out.string("run_dir", run_dir);
  c.run_dir = run_dir;
  out.finish();
  root.finish();

  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  return parse_config(text.str());
}

std::string to_json(const ExperimentConfig& config) { return config_json(config, true).dump(2) + "\n"; }

std::uint64_t fingerprint(const ExperimentConfig& config) { return fnv1a64(config_json(config, false).dump()); }

std::filesystem::path run_root() {
  const char* env = std::getenv("SEMSHIFT_RUN_ROOT");
  return env && *env ? std::filesystem::path(env) : std::filesystem::path("runs");
}

std::filesystem::path default_run_dir(const ExperimentConfig& config) {
  return run_root() / (std::string(mode_name(config.training.mode)) + "_b" +
                       std::to_string(config.dataset.labeled_budget) + "_s" + std::to_string(config.training.seed));
}

void set_mode(ExperimentConfig& config, Mode mode) {
  config.training.mode = mode;
  if (!config.lambda_sadv_explicit) config.training.weights.sadv = default_lambda_sadv(mode);
}

void set_lambda_sadv(ExperimentConfig& config, double value) {
  config.training.weights.sadv = value;
  config.lambda_sadv_explicit = true;
}

}  // namespace semshift
