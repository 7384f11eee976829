#include "semshift/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "json.hpp"
#include "semshift/ops.hpp"
#include "semshift/rng.hpp"

namespace semshift {

namespace {

constexpr std::uint64_t kSourceStream = 1;
constexpr std::uint64_t kLabeledStream = 2;
constexpr std::uint64_t kTargetStream = 3;

constexpr const char* kLatest = "latest.ckpt";
constexpr const char* kBest = "best.ckpt";
constexpr const char* kFinal = "final.ckpt";

template <std::floating_point T>
std::uint64_t hash_parameters(const ParameterList<T>& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : params) {
    const auto v = p.tensor.values();
    const auto* bytes = reinterpret_cast<const unsigned char*>(v.data());
    const std::size_t n = v.size_bytes();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
      std::uint64_t word;
      std::memcpy(&word, bytes + i, 8);
      h = (h ^ word) * 0x100000001b3ULL;
      h ^= h >> 29;
    }
    for (; i < n; ++i) h = (h ^ bytes[i]) * 0x100000001b3ULL;
  }
  return h;
}

template <std::floating_point T>
Tensor<T> weighted(double lambda, const Tensor<T>& term) {
  return ops::scale(term, static_cast<T>(lambda));
}

template <std::floating_point T>
Tensor<T> accumulate_terms(const std::vector<std::pair<double, Tensor<T>>>& parts) {
  Tensor<T> total;
  for (const auto& [lambda, term] : parts) {
    const auto w = weighted(lambda, term);
    total = total.defined() ? ops::add(total, w) : w;
  }
  return total;
}

void check_finite(const StepReport& report, std::int64_t iteration, const char* side) {
  if (std::isfinite(report.total)) return;
  std::ostringstream msg;
  msg << "non-finite " << side << " loss at iteration " << iteration << ":";
  for (const auto& t : report.terms) msg << ' ' << t.name << '=' << t.value;
  throw TrainingDiverged(msg.str());
}

}  // namespace

const char* mode_name(Mode mode) {
  switch (mode) {
    case Mode::SourceOnly: return "SourceOnly";
    case Mode::Oracle: return "Oracle";
    case Mode::GA: return "GA";
    case Mode::GA_FCSA: return "GA_FCSA";
    case Mode::GA_CSA: return "GA_CSA";
  }
  return "?";
}

Mode parse_mode(const std::string& name) {
  for (auto m : {Mode::SourceOnly, Mode::Oracle, Mode::GA, Mode::GA_FCSA, Mode::GA_CSA}) {
    if (name == mode_name(m)) return m;
  }
  throw std::invalid_argument("unknown mode '" + name + "' (expected SourceOnly, Oracle, GA, GA_FCSA or GA_CSA)");
}

bool uses_global_adaptation(Mode mode) {
  return mode == Mode::GA || mode == Mode::GA_FCSA || mode == Mode::GA_CSA;
}

bool uses_semantic_adaptation(Mode mode) { return mode == Mode::GA_FCSA || mode == Mode::GA_CSA; }

double default_lambda_sadv(Mode mode) { return mode == Mode::GA_FCSA ? 1.0 : 0.01; }

void LossWeights::validate() const {
  for (double v : {seg, gadv, sadv, gd, sd}) {
    if (!(v >= 0) || !std::isfinite(v)) throw std::invalid_argument("loss weights must be finite and nonnegative");
  }
}

std::int64_t TrainConfig::eval_interval() const {
  return eval_every > 0 ? eval_every : std::max<std::int64_t>(1, max_iterations / 20);
}

void TrainConfig::validate(std::size_t labeled_budget) const {
  weights.validate();
  if (max_iterations <= 0) throw std::invalid_argument("max_iterations must be positive");
  if (eval_every < 0) throw std::invalid_argument("eval_every must be nonnegative");
  if (num_classes < 2) throw std::invalid_argument("num_classes must be at least 2");
  if (!(g_lr > 0) || !(d_lr > 0)) throw std::invalid_argument("learning rates must be positive");
  if (!(lr_power >= 0)) throw std::invalid_argument("lr_power must be nonnegative");
  if (labeled_budget == 0 && (mode == Mode::Oracle || uses_semantic_adaptation(mode))) {
    throw std::invalid_argument(std::string("mode ") + mode_name(mode) +
                                " needs labeled target images but the labeled budget is 0");
  }
}

// ---- Models ----

template <std::floating_point T>
Models<T>::Models(const TrainConfig& config)
    : g(config.generator, config.seed),
      ch(config.generator.feature_channels, config.num_classes, config.seed),
      dg(config.num_classes, config.global_discriminator, config.seed) {
  const auto n = config.generator.feature_channels;
  if (config.mode == Mode::GA_FCSA) ds_fc.emplace(n, config.num_classes, config.seed, config.semantic_hidden);
  if (config.mode == Mode::GA_CSA) ds_conv.emplace(n, config.num_classes, config.seed, config.semantic_hidden);
}

template <std::floating_point T>
ParameterList<T> Models<T>::generator_parameters() const {
  auto out = g.parameters();
  for (auto& p : ch.parameters()) out.push_back(std::move(p));
  return out;
}

template <std::floating_point T>
ParameterList<T> Models<T>::discriminator_parameters() const {
  auto out = dg.parameters();
  if (ds_fc) {
    for (auto& p : ds_fc->parameters()) out.push_back(std::move(p));
  }
  if (ds_conv) {
    for (auto& p : ds_conv->parameters()) out.push_back(std::move(p));
  }
  return out;
}

template <std::floating_point T>
Tensor<T> Models<T>::scores(const Tensor<T>& image) const {
  return ch.forward(g.forward(image), image.dim(1), image.dim(2));
}

template <std::floating_point T>
LabelMap Models<T>::predict(const Image& image) const {
  NoGradGuard no_grad;
  const auto p = scores(image_tensor<T>(image));
  const auto C = p.dim(0);
  const auto L = image.height * image.width;
  const auto v = p.values();
  LabelMap out(image.height, image.width);
  for (std::size_t l = 0; l < L; ++l) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < C; ++c) {
      if (v[c * L + l] > v[best * L + l]) best = c;
    }
    out.labels[l] = static_cast<std::uint8_t>(best);
  }
  return out;
}

template <std::floating_point T>
void Models<T>::save(Checkpoint& ck) const {
  for (const auto& p : generator_parameters()) ck.put(p.name, p.tensor);
  for (const auto& p : discriminator_parameters()) ck.put(p.name, p.tensor);
}

template <std::floating_point T>
void Models<T>::load(const Checkpoint& ck) {
  for (auto p : generator_parameters()) ck.read_into(p.name, p.tensor);
  for (auto p : discriminator_parameters()) ck.read_into(p.name, p.tensor);
}

template <std::floating_point T>
EvalResult evaluate(const Models<T>& models, const std::vector<Sample>& samples) {
  if (samples.empty()) throw std::invalid_argument("evaluate: no samples");
  EvalResult r{ConfusionMatrix(models.ch.num_classes()), {}};
  for (const auto& s : samples) r.confusion.accumulate(models.predict(s.image), s.label);
  r.iou = miou(r.confusion);
  return r;
}

// ---- Trainer ----

template <std::floating_point T>
Trainer<T>::Trainer(TrainConfig config, const DatasetBundle& data)
    : config_(std::move(config)),
      data_(data),
      models_(config_),
      g_opt_(models_.generator_parameters(), config_.momentum, config_.weight_decay),
      d_opt_(models_.discriminator_parameters(), config_.adam_beta1, config_.adam_beta2) {
  config_.validate(data.target_labeled.size());
  if (config_.mode != Mode::Oracle && data.source_train.empty()) {
    throw std::invalid_argument("training needs at least one source image");
  }
  if (data.target_val.empty()) throw std::invalid_argument("training needs a non-empty target_val split");
  if (uses_global_adaptation(config_.mode) && data.target_unlabeled.empty() && data.target_labeled.empty()) {
    throw std::invalid_argument("global adaptation needs target images");
  }
  const auto s = config_.generator.output_stride;
  auto cache = [&](const Sample& smp) {
    if (smp.label.height % s != 0 || smp.label.width % s != 0) {
      throw std::invalid_argument("image size must be divisible by the output stride");
    }
    return Cached{image_tensor<T>(smp.image), &smp.label,
                  downsample_labels(smp.label, smp.label.height / s, smp.label.width / s)};
  };
  for (const auto& smp : data.source_train) source_.push_back(cache(smp));
  for (const auto& smp : data.target_labeled) labeled_.push_back(cache(smp));
  for (const auto& smp : data.target_unlabeled) unlabeled_.push_back(image_tensor<T>(smp.image));
}

template <std::floating_point T>
std::size_t Trainer<T>::pick(std::uint64_t stream, std::int64_t i, std::size_t n) {
  const auto epoch = i / static_cast<std::int64_t>(n);
  auto& [cached_epoch, perm] = permutations_[stream];
  if (perm.size() != n || cached_epoch != epoch) {
    perm.resize(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::mt19937_64 rng(mix_seed(mix_seed(config_.seed, stream), static_cast<std::uint64_t>(epoch)));
    std::shuffle(perm.begin(), perm.end(), rng);
    cached_epoch = epoch;
  }
  return perm[static_cast<std::size_t>(i % static_cast<std::int64_t>(n))];
}

template <std::floating_point T>
Batch<T> Trainer<T>::batch_for(std::int64_t i) {
  Batch<T> b;
  if (config_.mode != Mode::Oracle) {
    const auto& s = source_[pick(kSourceStream, i, source_.size())];
    b.source_image = &s.image;
    b.source_label = s.label;
    b.source_small = &s.small;
  }
  if (config_.mode != Mode::SourceOnly && !labeled_.empty()) {
    const auto& t = labeled_[pick(kLabeledStream, i, labeled_.size())];
    b.labeled_image = &t.image;
    b.labeled_label = t.label;
    b.labeled_small = &t.small;
  }
  if (uses_global_adaptation(config_.mode)) {
    // With every target image labeled, D_g's target stream reuses those
    // images (labels unused).
    b.unlabeled_image = unlabeled_.empty() ? &labeled_[pick(kTargetStream, i, labeled_.size())].image
                                           : &unlabeled_[pick(kTargetStream, i, unlabeled_.size())];
  }
  return b;
}

template <std::floating_point T>
StepReport Trainer<T>::generator_step(const Batch<T>& batch, double lr, DiscriminatorBatch<T>* keep) {
  const auto& w = config_.weights;
  const auto red = config_.reduction;
  const auto c = config_.num_classes;
  g_opt_.zero_grad();
  for (auto p : models_.generator_parameters()) p.tensor.zero_grad();

  StepReport report;
  std::vector<std::pair<double, Tensor<T>>> parts;
  auto add = [&](const char* name, double lambda, Tensor<T> term) {
    report.terms.push_back({name, static_cast<double>(term.item())});
    parts.emplace_back(lambda, std::move(term));
  };

  Tensor<T> f_s, p_s, f_tl;
  if (batch.source_image) {
    f_s = models_.g.forward(*batch.source_image);
    p_s = models_.ch.forward(f_s, batch.source_image->dim(1), batch.source_image->dim(2));
    add("seg_s", w.seg, seg_loss(p_s, *batch.source_label, red));
  }
  if (batch.labeled_image) {
    f_tl = models_.g.forward(*batch.labeled_image);
    const auto p_tl = models_.ch.forward(f_tl, batch.labeled_image->dim(1), batch.labeled_image->dim(2));
    add("seg_tl", w.seg, seg_loss(p_tl, *batch.labeled_label, red));
  }
  if (uses_global_adaptation(config_.mode)) add("gadv", w.gadv, gadv_loss(models_.dg, p_s, red));
  if (config_.mode == Mode::GA_FCSA) {
    add("sadv", w.sadv, sadv_fc_loss(*models_.ds_fc, class_average(f_s, *batch.source_small, c), red));
  } else if (config_.mode == Mode::GA_CSA) {
    add("sadv", w.sadv, sadv_conv_loss(*models_.ds_conv, f_s, *batch.source_small, red));
  }
  if (parts.empty()) throw std::logic_error("generator step without loss terms");

  const auto total = accumulate_terms(parts);
  report.total = static_cast<double>(total.item());
  check_finite(report, iteration_, "generator");
  backward(total);
  g_opt_.step(lr);

  if (keep) {
    keep->source_scores = p_s.defined() ? p_s.detach() : Tensor<T>();
    keep->source_features = f_s.defined() ? f_s.detach() : Tensor<T>();
    keep->labeled_features = f_tl.defined() ? f_tl.detach() : Tensor<T>();
    keep->source_small = batch.source_small;
    keep->labeled_small = batch.labeled_small;
  }
  return report;
}

template <std::floating_point T>
StepReport Trainer<T>::discriminator_step(const DiscriminatorBatch<T>& batch, double lr) {
  StepReport report;
  if (!uses_global_adaptation(config_.mode)) return report;
  const auto& w = config_.weights;
  const auto red = config_.reduction;
  const auto c = config_.num_classes;
  for (auto p : models_.discriminator_parameters()) p.tensor.zero_grad();

  std::vector<std::pair<double, Tensor<T>>> parts;
  auto add = [&](const char* name, double lambda, Tensor<T> term) {
    report.terms.push_back({name, static_cast<double>(term.item())});
    parts.emplace_back(lambda, std::move(term));
  };
  add("gd_s", w.gd, gd_loss(models_.dg, batch.source_scores, DomainFlag::Source, red));
  add("gd_t", w.gd, gd_loss(models_.dg, batch.target_scores, DomainFlag::Target, red));
  if (config_.mode == Mode::GA_FCSA) {
    const auto& ds = *models_.ds_fc;
    add("sd_s", w.sd, sd_fc_loss(ds, class_average(batch.source_features, *batch.source_small, c), DomainFlag::Source, red));
    add("sd_tl", w.sd,
        sd_fc_loss(ds, class_average(batch.labeled_features, *batch.labeled_small, c), DomainFlag::Target, red));
  } else if (config_.mode == Mode::GA_CSA) {
    const auto& ds = *models_.ds_conv;
    add("sd_s", w.sd, sd_conv_loss(ds, batch.source_features, *batch.source_small, DomainFlag::Source, red));
    add("sd_tl", w.sd, sd_conv_loss(ds, batch.labeled_features, *batch.labeled_small, DomainFlag::Target, red));
  }
  const auto total = accumulate_terms(parts);
  report.total = static_cast<double>(total.item());
  check_finite(report, iteration_, "discriminator");
  backward(total);
  d_opt_.step(lr);
  return report;
}

template <std::floating_point T>
std::pair<StepReport, StepReport> Trainer<T>::run_iteration() {
  const auto i = iteration_;
  const auto max = config_.max_iterations;
  const double lr_g = poly_lr(config_.g_lr, i, max, config_.lr_power);
  const double lr_d = poly_lr(config_.d_lr, i, max, config_.lr_power);
  const auto batch = batch_for(i);
  const bool inst = config_.instrument;

  DiscriminatorBatch<T> db;
  if (batch.unlabeled_image) {
    // Target score map from the pre-update generator, like P_s.
    NoGradGuard no_grad;
    db.target_scores = models_.scores(*batch.unlabeled_image);
  }

  std::uint64_t g_before = 0, d_before = 0;
  if (inst) {
    g_before = hash_parameters(models_.generator_parameters());
    d_before = hash_parameters(models_.discriminator_parameters());
  }
  auto g_report = generator_step(batch, lr_g, &db);
  if (inst) {
    ++instrument_.generator_steps;
    if (hash_parameters(models_.discriminator_parameters()) != d_before) {
      ++instrument_.discriminator_touched_in_generator_step;
    }
    instrument_.generator_terms = g_report.terms.size();
    g_before = hash_parameters(models_.generator_parameters());
  }
  auto d_report = discriminator_step(db, lr_d);
  if (inst && uses_global_adaptation(config_.mode)) {
    ++instrument_.discriminator_steps;
    if (hash_parameters(models_.generator_parameters()) != g_before) {
      ++instrument_.generator_touched_in_discriminator_step;
    }
    instrument_.discriminator_terms = d_report.terms.size();
  }
  ++iteration_;
  return {std::move(g_report), std::move(d_report)};
}

template <std::floating_point T>
EvalRecord Trainer<T>::make_record(std::int64_t iteration, const EvalResult& eval) const {
  EvalRecord r;
  r.iteration = iteration;
  for (const auto& t : window_sums_) {
    r.losses[t.name] = window_count_ > 0 ? t.value / static_cast<double>(window_count_) : 0.0;
  }
  const auto last = std::max<std::int64_t>(0, iteration - 1);
  r.lr_g = poly_lr(config_.g_lr, last, config_.max_iterations, config_.lr_power);
  r.lr_d = poly_lr(config_.d_lr, last, config_.max_iterations, config_.lr_power);
  r.val_miou = eval.iou.mean;
  r.per_class_iou = eval.iou.per_class;
  return r;
}

std::string to_json_line(const EvalRecord& record) {
  nlohmann::ordered_json j;
  j["iteration"] = record.iteration;
  nlohmann::ordered_json losses = nlohmann::ordered_json::object();
  for (const auto& [k, v] : record.losses) losses[k] = v;
  j["losses"] = losses;
  j["lr_g"] = record.lr_g;
  j["lr_d"] = record.lr_d;
  j["val_miou"] = record.val_miou;
  nlohmann::ordered_json per = nlohmann::ordered_json::object();
  for (const auto& [k, v] : record.per_class_iou) per[std::to_string(k)] = v;
  j["per_class_iou"] = per;
  return j.dump();
}

template <std::floating_point T>
void Trainer<T>::save_state(Checkpoint& ck) const {
  models_.save(ck);
  g_opt_.save(ck, "opt.g.");
  d_opt_.save(ck, "opt.d.");
  nlohmann::ordered_json meta;
  meta["iteration"] = iteration_;
  meta["mode"] = mode_name(config_.mode);
  meta["best_miou"] = best_miou_;
  meta["best_iteration"] = best_iteration_;
  meta["window_count"] = window_count_;
  std::vector<std::string> names;
  std::vector<double> sums;
  for (const auto& t : window_sums_) {
    names.push_back(t.name);
    sums.push_back(t.value);
  }
  meta["window_terms"] = names;
  ck.put<double>("trainer.window_sums", {sums.size()}, sums);
  ck.set_metadata(meta.dump());
}

template <std::floating_point T>
void Trainer<T>::load_state(const Checkpoint& ck) {
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(ck.metadata());
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint metadata is not valid JSON: ") + e.what());
  }
  if (meta.value("mode", "") != mode_name(config_.mode)) throw CheckpointError("checkpoint was written for another mode");
  models_.load(ck);
  g_opt_.load(ck, "opt.g.");
  d_opt_.load(ck, "opt.d.");
  iteration_ = meta.at("iteration").get<std::int64_t>();
  if (iteration_ < 0 || iteration_ > config_.max_iterations) throw CheckpointError("checkpoint iteration out of range");
  best_miou_ = meta.at("best_miou").get<double>();
  best_iteration_ = meta.at("best_iteration").get<std::int64_t>();
  window_count_ = meta.at("window_count").get<std::int64_t>();
  const auto names = meta.at("window_terms").get<std::vector<std::string>>();
  std::vector<double> sums(names.size());
  ck.read_into<double>("trainer.window_sums", {names.size()}, sums);
  window_sums_.clear();
  for (std::size_t i = 0; i < names.size(); ++i) window_sums_.push_back({names[i], sums[i]});
}

template <std::floating_point T>
TrainResult Trainer<T>::run(const RunOptions& options) {
  namespace fs = std::filesystem;
  const bool files = !options.out_dir.empty();
  const auto log_path = options.out_dir / kMetricsLogName;
  if (files) fs::create_directories(options.out_dir);

  if (options.resume) {
    if (!files) throw std::invalid_argument("resume needs an output directory");
    load_state(Checkpoint::load(options.out_dir / kLatest, options.fingerprint));
    // Drop log records written after the checkpoint.
    std::vector<std::string> kept;
    std::ifstream in(log_path);
    for (std::string line; std::getline(in, line);) {
      if (line.empty()) continue;
      if (nlohmann::json::parse(line).at("iteration").get<std::int64_t>() <= iteration_) kept.push_back(line);
    }
    in.close();
    std::ofstream out(log_path, std::ios::trunc);
    for (const auto& l : kept) out << l << '\n';
  } else if (files) {
    std::ofstream(log_path, std::ios::trunc);
  }

  auto save = [&](const char* name) {
    if (!files) return;
    Checkpoint ck(options.fingerprint);
    save_state(ck);
    ck.save(options.out_dir / name);
  };

  TrainResult result;
  const auto max = config_.max_iterations;
  const auto end = options.stop_at >= 0 ? std::min(options.stop_at, max) : max;
  const auto every = config_.eval_interval();
  const auto start = iteration_;
  while (iteration_ < end) {
    const auto [g, d] = run_iteration();
    for (const auto* rep : {&g, &d}) {
      for (const auto& t : rep->terms) {
        auto it = std::find_if(window_sums_.begin(), window_sums_.end(),
                               [&](const LossTerm& x) { return x.name == t.name; });
        if (it == window_sums_.end()) {
          window_sums_.push_back({t.name, t.value});
        } else {
          it->value += t.value;
        }
      }
    }
    ++window_count_;
    if (iteration_ % every == 0 || iteration_ == max) {
      const auto eval = evaluate(models_, data_.target_val);
      auto record = make_record(iteration_, eval);
      window_sums_.clear();
      window_count_ = 0;
      const bool is_best = record.val_miou > best_miou_;
      if (is_best) {
        best_miou_ = record.val_miou;
        best_iteration_ = iteration_;
      }
      if (files) {
        std::ofstream(log_path, std::ios::app) << to_json_line(record) << '\n';
        if (is_best) save(kBest);
        save(kLatest);
      }
      if (options.on_eval) options.on_eval(record);
      result.final_miou = record.val_miou;
      result.log.push_back(std::move(record));
    }
  }
  if (iteration_ == max) {
    save(kFinal);
  } else if (iteration_ % every != 0) {
    save(kLatest);
  }
  result.best_miou = best_miou_;
  result.best_iteration = best_iteration_;
  result.iterations_run = iteration_ - start;
  instrument_.sealed_label_reads = data_.sealed_label_reads();
  result.instrument = instrument_;
  return result;
}

#define SEMSHIFT_INSTANTIATE(T)                                                       \
  template struct Models<T>;                                                          \
  template EvalResult evaluate<T>(const Models<T>&, const std::vector<Sample>&);      \
  template class Trainer<T>;

SEMSHIFT_INSTANTIATE(float)
SEMSHIFT_INSTANTIATE(double)

}  // namespace semshift
