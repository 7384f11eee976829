#include "doctest.h"

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "json.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path kWork = fs::temp_directory_path() / "semshift_cli_test";

struct Outcome {
  int status;
  std::string output;
};

// Runs the CLI with stdout and stderr captured.
Outcome cli(const std::string& args) {
  const auto log = kWork / "last_output.txt";
  const std::string cmd = std::string(SEMSHIFT_CLI) + " " + args + " > " + log.string() + " 2>&1";
  const int raw = std::system(cmd.c_str());
  std::ifstream in(log);
  std::ostringstream s;
  s << in.rdbuf();
  return {WIFEXITED(raw) ? WEXITSTATUS(raw) : -1, s.str()};
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path write_config(const std::string& name, const std::string& extra_training = "") {
  const auto path = kWork / name;
  std::ofstream(path) << R"({
    "seed": 2,
    "dataset": {"resolution": {"height": 32, "width": 32}, "n_source": 5, "n_target_train": 5,
                "labeled_budget": 2, "n_target_val": 2},
    "model": {"feature_channels": 8, "generator_widths": [4, 8, 8],
              "global_discriminator_widths": [4, 8], "semantic_hidden": 8},
    "training": {"max_iterations": 6, "eval_every": 3)"
                      << extra_training << "}}";
  return path;
}

struct Workspace {
  Workspace() {
    fs::remove_all(kWork);
    fs::create_directories(kWork);
  }
  ~Workspace() { fs::remove_all(kWork); }
};

}  // namespace

TEST_CASE("usage errors exit with 1, help with 0") {
  Workspace ws;
  CHECK(cli("").status == 1);
  CHECK(cli("--help").status == 0);
  CHECK(cli("train --no-such-flag").status == 1);
  CHECK(cli("sweep").status == 1);  // --values is required
  const auto bad_mode = cli("train --mode Bogus --out " + (kWork / "r").string());
  CHECK(bad_mode.status == 1);
  CHECK(bad_mode.output.find("--mode") != std::string::npos);
  const auto bad_budget = cli("train --mode GA_CSA --budget 0 --out " + (kWork / "r").string());
  CHECK(bad_budget.status == 1);
  CHECK_FALSE(fs::exists(kWork / "r"));

  std::ofstream(kWork / "unknown.json") << R"({"training": {"iterations": 5}})";
  const auto unknown = cli("train --config " + (kWork / "unknown.json").string());
  CHECK(unknown.status == 1);
  CHECK(unknown.output.find("training.iterations") != std::string::npos);
  CHECK(cli("eval --run " + (kWork / "nowhere").string() + " --split target_unlabeled").status == 1);
}

TEST_CASE("generate, train, resume and eval through the CLI") {
  Workspace ws;
  const auto config = write_config("tiny.json");
  const auto data = kWork / "data";
  const auto gen = cli("generate --config " + config.string() + " --out " + data.string());
  REQUIRE(gen.status == 0);
  CHECK(gen.output.find("wrote 12 images") != std::string::npos);
  CHECK(cli("generate --config " + config.string() + " --out " + data.string()).status == 1);
  const auto again = cli("generate --config " + config.string() + " --out " + data.string() + " --force");
  CHECK(again.status == 0);
  CHECK(again.output == gen.output);

  const auto run = kWork / "run";
  const auto trained = cli("train --config " + config.string() + " --out " + run.string() + " --mode GA --seed 4");
  REQUIRE(trained.status == 0);
  CHECK(trained.output.find("iter      3") != std::string::npos);
  const auto snapshot = nlohmann::json::parse(read_file(run / "config.json"));
  CHECK(snapshot.at("seed") == 4);
  CHECK(snapshot.at("training").at("mode") == "GA");
  CHECK(snapshot.at("training").at("loss_weights").at("sadv") == 0.01);

  // Resume from the snapshot alone after an interrupted run.
  const auto part = kWork / "part";
  CHECK(cli("train --quiet --config " + config.string() + " --out " + part.string() +
            " --mode GA --seed 4 --stop-at 4")
            .status == 0);
  CHECK(cli("train --resume --seed 1 --out " + part.string()).status == 1);
  CHECK(cli("train --resume --quiet --out " + part.string()).status == 0);
  CHECK(read_file(part / "metrics.jsonl") == read_file(run / "metrics.jsonl"));

  const auto report = cli("eval --run " + run.string() + " --checkpoint final.ckpt --out " + (kWork / "pred").string());
  REQUIRE(report.status == 0);
  CHECK(nlohmann::json::parse(report.output).at("images") == 2);
  CHECK(cli("eval --run " + run.string() + " --checkpoint final.ckpt").output == report.output);

  std::ofstream(run / "broken.ckpt") << "garbage";
  const auto broken = cli("eval --run " + run.string() + " --checkpoint broken.ckpt");
  CHECK(broken.status == 2);
  CHECK(broken.output.find("error") != std::string::npos);
}

TEST_CASE("divergence exits with 2 and leaves a diagnostic") {
  Workspace ws;
  const auto config =
      write_config("hot.json", R"(, "mode": "SourceOnly", "generator_optimizer": {"lr": 1e30, "momentum": 0.9})");
  const auto run = kWork / "hot";
  const auto r = cli("train --quiet --budget 0 --config " + config.string() + " --out " + run.string());
  CHECK(r.status == 2);
  CHECK(r.output.find("diverged") != std::string::npos);
  REQUIRE(fs::exists(run / "diverged.json"));
  const auto diag = nlohmann::json::parse(read_file(run / "diverged.json"));
  CHECK(diag.at("error").get<std::string>().find("non-finite") != std::string::npos);
}

TEST_CASE("sweep prints and writes the summary table") {
  Workspace ws;
  const auto config = write_config("tiny.json");
  const auto out = kWork / "sweep";
  const auto r = cli("sweep --config " + config.string() + " --values 0,2 --modes SourceOnly,GA_CSA --seeds 1,2 --out " +
                     out.string());
  REQUIRE(r.status == 0);
  const auto table = read_file(out / "summary.tsv");
  CHECK(r.output.find(table) != std::string::npos);
  CHECK(table.find("NA") != std::string::npos);
  CHECK(r.output.find("skip GA_CSA") != std::string::npos);
  CHECK(cli("sweep --config " + config.string() + " --values 1,x --out " + out.string()).status == 1);
  CHECK(cli("sweep --config " + config.string() + " --axis depth --values 1 --out " + out.string()).status == 1);
}
