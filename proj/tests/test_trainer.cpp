#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>

#include "semshift/trainer.hpp"

using namespace semshift;
namespace fs = std::filesystem;

namespace {

constexpr std::size_t kSide = 32;

DatasetBundle small_bundle(std::size_t labeled, std::size_t unlabeled = 6) {
  SplitPlan plan{8, labeled, unlabeled, 4, 11};
  return make_splits(plan, toy_source_spec(), toy_target_spec(), {kSide, kSide});
}

TrainConfig small_config(Mode mode, std::int64_t iterations = 12) {
  TrainConfig cfg;
  cfg.mode = mode;
  cfg.weights.sadv = default_lambda_sadv(mode);
  cfg.generator.feature_channels = 12;
  cfg.generator.hidden_widths = {6, 8, 8};
  cfg.global_discriminator.hidden_widths = {6, 8};
  cfg.semantic_hidden = 16;
  cfg.max_iterations = iterations;
  cfg.eval_every = 4;
  cfg.seed = 5;
  return cfg;
}

template <typename T>
std::vector<std::vector<T>> snapshot(const ParameterList<T>& params) {
  std::vector<std::vector<T>> out;
  for (const auto& p : params) out.emplace_back(p.tensor.values().begin(), p.tensor.values().end());
  return out;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("semshift_trainer_" + name)) {
    fs::remove_all(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::vector<std::string> term_names(const StepReport& r) {
  std::vector<std::string> out;
  for (const auto& t : r.terms) out.push_back(t.name);
  return out;
}

}  // namespace

TEST_CASE("mode names round-trip and validation rejects bad configs") {
  for (auto m : {Mode::SourceOnly, Mode::Oracle, Mode::GA, Mode::GA_FCSA, Mode::GA_CSA}) {
    CHECK(parse_mode(mode_name(m)) == m);
  }
  CHECK_THROWS_AS(parse_mode("ga"), std::invalid_argument);
  CHECK(default_lambda_sadv(Mode::GA_FCSA) == 1.0);
  CHECK(default_lambda_sadv(Mode::GA_CSA) == 0.01);

  const auto data = small_bundle(0);
  for (auto m : {Mode::Oracle, Mode::GA_FCSA, Mode::GA_CSA}) {
    CHECK_THROWS_AS(Trainer<double>(small_config(m), data), std::invalid_argument);
  }
  CHECK_NOTHROW(Trainer<double>(small_config(Mode::GA), data));

  auto cfg = small_config(Mode::GA);
  cfg.weights.gadv = -1;
  CHECK_THROWS_AS(cfg.validate(0), std::invalid_argument);
  cfg = small_config(Mode::GA);
  cfg.max_iterations = 0;
  CHECK_THROWS_AS(cfg.validate(0), std::invalid_argument);
  cfg = small_config(Mode::GA);
  cfg.eval_every = 0;
  cfg.max_iterations = 3000;
  CHECK(cfg.eval_interval() == 150);
}

TEST_CASE("semantic discriminators exist only in their modes") {
  CHECK_FALSE(Models<double>(small_config(Mode::GA)).ds_fc);
  CHECK_FALSE(Models<double>(small_config(Mode::GA)).ds_conv);
  CHECK(Models<double>(small_config(Mode::GA_FCSA)).ds_fc);
  CHECK(Models<double>(small_config(Mode::GA_CSA)).ds_conv);
  CHECK_FALSE(Models<double>(small_config(Mode::GA_CSA)).ds_fc);
}

TEST_CASE("SourceOnly and Oracle reduce to plain segmentation") {
  const auto data = small_bundle(3);
  SUBCASE("SourceOnly") {
    Trainer<double> tr(small_config(Mode::SourceOnly), data);
    const auto d_before = snapshot(tr.models().discriminator_parameters());
    const auto batch = tr.batch_for(0);
    CHECK(batch.source_image);
    CHECK_FALSE(batch.labeled_image);
    CHECK_FALSE(batch.unlabeled_image);
    const auto [g, d] = tr.run_iteration();
    CHECK(term_names(g) == std::vector<std::string>{"seg_s"});
    CHECK(g.total == g.terms[0].value);
    CHECK(d.terms.empty());
    CHECK(snapshot(tr.models().discriminator_parameters()) == d_before);
  }
  SUBCASE("Oracle") {
    Trainer<double> tr(small_config(Mode::Oracle), data);
    const auto batch = tr.batch_for(0);
    CHECK_FALSE(batch.source_image);
    CHECK(batch.labeled_image);
    const auto [g, d] = tr.run_iteration();
    CHECK(term_names(g) == std::vector<std::string>{"seg_tl"});
    CHECK(d.terms.empty());
  }
}

TEST_CASE("mode lattice: adaptation modes evaluate strictly more terms") {
  const auto data = small_bundle(3);
  auto count = [&](Mode m) {
    Trainer<double> tr(small_config(m), data);
    const auto [g, d] = tr.run_iteration();
    return std::pair{g.terms.size(), d.terms.size()};
  };
  const auto so = count(Mode::SourceOnly);
  const auto ga = count(Mode::GA);
  const auto fcsa = count(Mode::GA_FCSA);
  const auto csa = count(Mode::GA_CSA);
  CHECK(so.first + so.second == 1);
  CHECK(ga.first == 3);  // seg_s, seg_tl, gadv
  CHECK(ga.second == 2);
  CHECK(fcsa.first == 4);
  CHECK(fcsa.second == 4);
  CHECK(csa.first == 4);
  CHECK(csa.second == 4);
  CHECK(ga.first + ga.second > so.first + so.second);
  CHECK(csa.first + csa.second > ga.first + ga.second);
  CHECK(fcsa.first + fcsa.second > ga.first + ga.second);
}

TEST_CASE("with every weight zero a generator step is pure decay shrinkage") {
  const auto data = small_bundle(3);
  auto cfg = small_config(Mode::GA_CSA);
  cfg.weights = {0, 0, 0, 0, 0};
  Trainer<double> tr(cfg, data);
  const auto before = snapshot(tr.models().generator_parameters());
  const auto d_before = snapshot(tr.models().discriminator_parameters());
  const double lr = 0.3;
  tr.generator_step(tr.batch_for(0), lr);
  const auto after = snapshot(tr.models().generator_parameters());
  const double factor = 1.0 - lr * cfg.weight_decay;
  double worst = 0;
  for (std::size_t i = 0; i < before.size(); ++i) {
    for (std::size_t j = 0; j < before[i].size(); ++j) {
      worst = std::max(worst, std::abs(after[i][j] - factor * before[i][j]));
    }
  }
  CHECK(worst <= 1e-15);
  CHECK(snapshot(tr.models().discriminator_parameters()) == d_before);
}

TEST_CASE("uniform discriminators give the composed log-loss") {
  const auto data = small_bundle(3);
  for (auto mode : {Mode::GA, Mode::GA_FCSA, Mode::GA_CSA}) {
    CAPTURE(mode_name(mode));
    auto cfg = small_config(mode);
    cfg.weights.gd = 0.7;
    cfg.weights.sd = 1.3;
    Trainer<double> tr(cfg, data);
    // All-zero weights make every discriminator output uniform.
    for (auto p : tr.models().discriminator_parameters()) {
      for (auto& v : p.tensor.mutable_values()) v = 0;
    }
    DiscriminatorBatch<double> db;
    const auto batch = tr.batch_for(0);
    {
      NoGradGuard ng;
      db.target_scores = tr.models().scores(*batch.unlabeled_image);
    }
    tr.generator_step(batch, 0.0, &db);
    const auto report = tr.discriminator_step(db, 1e-4);
    const double c = static_cast<double>(cfg.num_classes);
    const double expected = 2 * std::numbers::ln2 * 0.7 + (mode == Mode::GA ? 0.0 : 2 * std::log(2 * c) * 1.3);
    CHECK(std::abs(report.total - expected) <= 1e-12);
  }
}

TEST_CASE("each step leaves the other side's parameters bit-identical") {
  const auto data = small_bundle(3);
  for (auto mode : {Mode::GA, Mode::GA_FCSA, Mode::GA_CSA}) {
    CAPTURE(mode_name(mode));
    Trainer<double> tr(small_config(mode), data);
    for (int i = 0; i < 3; ++i) {
      const auto batch = tr.batch_for(i);
      DiscriminatorBatch<double> db;
      {
        NoGradGuard ng;
        db.target_scores = tr.models().scores(*batch.unlabeled_image);
      }
      const auto g0 = snapshot(tr.models().generator_parameters());
      const auto d0 = snapshot(tr.models().discriminator_parameters());
      tr.generator_step(batch, 0.01, &db);
      const auto g1 = snapshot(tr.models().generator_parameters());
      CHECK(g1 != g0);
      CHECK(snapshot(tr.models().discriminator_parameters()) == d0);
      tr.discriminator_step(db, 1e-3);
      CHECK(snapshot(tr.models().generator_parameters()) == g1);
      CHECK(snapshot(tr.models().discriminator_parameters()) != d0);
    }
  }
}

TEST_CASE("instrumented runs report isolation and no sealed reads") {
  const auto data = small_bundle(3);
  auto cfg = small_config(Mode::GA_CSA, 10);
  cfg.instrument = true;
  Trainer<float> tr(cfg, data);
  const auto result = tr.run();
  const auto& inst = result.instrument;
  CHECK(inst.generator_steps == 10);
  CHECK(inst.discriminator_steps == 10);
  CHECK(inst.generator_touched_in_discriminator_step == 0);
  CHECK(inst.discriminator_touched_in_generator_step == 0);
  CHECK(inst.sealed_label_reads == 0);
  CHECK(inst.generator_terms == 4);
  CHECK(inst.discriminator_terms == 4);
  CHECK(result.iterations_run == 10);
  CHECK(result.log.size() == 3);  // iterations 4, 8, 10
  CHECK(result.log.back().iteration == 10);
}

TEST_CASE("batches are stateless in the iteration and cover each epoch") {
  const auto data = small_bundle(3);
  Trainer<double> a(small_config(Mode::GA_CSA), data);
  Trainer<double> b(small_config(Mode::GA_CSA), data);
  // Query b out of order.
  const auto late = b.batch_for(17);
  b.batch_for(2);
  CHECK(a.batch_for(17).source_image->values().data() != nullptr);
  CHECK(std::equal(a.batch_for(17).source_label->labels.begin(), a.batch_for(17).source_label->labels.end(),
                   late.source_label->labels.begin()));
  std::set<const LabelMap*> seen;
  for (int i = 0; i < 8; ++i) seen.insert(a.batch_for(i).source_label);
  CHECK(seen.size() == 8);
  std::set<const LabelMap*> labeled;
  for (int i = 3; i < 6; ++i) labeled.insert(a.batch_for(i).labeled_label);
  CHECK(labeled.size() == 3);
}

TEST_CASE("without an unlabeled pool the target stream reuses labeled images") {
  const auto data = small_bundle(4, 0);
  Trainer<double> tr(small_config(Mode::GA_CSA), data);
  const auto batch = tr.batch_for(0);
  REQUIRE(batch.unlabeled_image);
  CHECK_NOTHROW(tr.run_iteration());
}

TEST_CASE("identical configs give identical logs") {
  const auto data = small_bundle(3);
  auto run = [&] {
    Trainer<float> tr(small_config(Mode::GA_FCSA), data);
    std::string out;
    for (const auto& r : tr.run().log) out += to_json_line(r) + "\n";
    return out;
  };
  const auto first = run();
  CHECK(first == run());
  CHECK(first.find("\"val_miou\"") != std::string::npos);
}

TEST_CASE("stopping and resuming reproduces the uninterrupted run") {
  const auto data = small_bundle(3);
  TempDir full("full"), split("split");
  const auto cfg = small_config(Mode::GA_CSA, 12);
  RunOptions opts;
  opts.fingerprint = 77;

  opts.out_dir = full.path;
  Trainer<float>(cfg, data).run(opts);

  opts.out_dir = split.path;
  opts.stop_at = 6;  // not an eval boundary
  const auto partial = Trainer<float>(cfg, data).run(opts);
  CHECK(partial.iterations_run == 6);
  CHECK_FALSE(fs::exists(split.path / "final.ckpt"));
  opts.stop_at = -1;
  opts.resume = true;
  const auto rest = Trainer<float>(cfg, data).run(opts);
  CHECK(rest.iterations_run == 6);

  CHECK(read_file(split.path / kMetricsLogName) == read_file(full.path / kMetricsLogName));
  const auto a = Checkpoint::load(full.path / "final.ckpt");
  const auto b = Checkpoint::load(split.path / "final.ckpt");
  Models<float> ma(cfg), mb(cfg);
  ma.load(a);
  mb.load(b);
  CHECK(snapshot(ma.generator_parameters()) == snapshot(mb.generator_parameters()));
  CHECK(snapshot(ma.discriminator_parameters()) == snapshot(mb.discriminator_parameters()));
  CHECK(fs::exists(full.path / "best.ckpt"));

  opts.fingerprint = 78;
  CHECK_THROWS_AS(Trainer<float>(cfg, data).run(opts), CheckpointError);
}

TEST_CASE("a non-finite loss aborts with a diagnostic") {
  const auto data = small_bundle(3);
  Trainer<double> tr(small_config(Mode::GA_CSA), data);
  auto p = tr.models().generator_parameters().front().tensor;
  p.mutable_values()[0] = std::numeric_limits<double>::quiet_NaN();
  try {
    tr.run_iteration();
    FAIL("expected TrainingDiverged");
  } catch (const TrainingDiverged& e) {
    const std::string msg = e.what();
    CHECK(msg.find("iteration 0") != std::string::npos);
    CHECK(msg.find("seg_s=") != std::string::npos);
  }
}

TEST_CASE("evaluation scores argmax predictions against the validation labels") {
  const auto data = small_bundle(3);
  Models<double> m(small_config(Mode::SourceOnly));
  // A zeroed head predicts uniform scores; ties resolve to class 0.
  for (auto p : m.ch.parameters()) {
    for (auto& v : p.tensor.mutable_values()) v = 0;
  }
  const auto r = evaluate(m, data.target_val);
  ConfusionMatrix expected(4);
  for (const auto& s : data.target_val) expected.accumulate(LabelMap(kSide, kSide, 0), s.label);
  CHECK(r.confusion == expected);
  CHECK(r.iou.mean == miou(expected).mean);
}
