#include "doctest.h"

#include "ctrl/experiment.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace ctrl;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json tiny_config() {
  return json::parse(R"({
    "name": "tiny",
    "seed": 11,
    "world": {"preset": "w1", "steps": 24},
    "dataset": {"size": 400},
    "classifier": {"hidden": [8], "epochs": 3},
    "finetune": {"gamma": 2.0, "batch": 32, "updates": 6, "checkpoint_every": 2,
                 "lr_final_fraction": 0.5, "model": {"hidden": [12, 12]}},
    "baselines": {"methods": ["pretrained", "doob", "reconstruction", "smc", "best_of_n", "classifier_free"],
                  "smc_particles": 64, "best_of_n_candidates": 3,
                  "classifier_free": {"budget": 200, "steps": 20, "batch": 32, "model": {"hidden": [8]}},
                  "mixing": [[1, 0], [1, 2]]},
    "evaluation": {"samples": 110, "bins": 20}
  })");
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("ctrl_lab_it_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Every deterministic artifact of a run (wall-clock timings excluded).
std::vector<std::string> artifacts(const fs::path& dir) {
  std::vector<std::string> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string name = e.path().filename().string();
    if (name == "train_timing.csv") continue;
    out.push_back(name);
  }
  std::sort(out.begin(), out.end());
  return out;
}

void check_same_outputs(const fs::path& a, const fs::path& b) {
  const auto files = artifacts(a);
  CHECK(files == artifacts(b));
  for (const auto& f : files) {
    INFO("file " << f);
    CHECK(slurp(a / f) == slurp(b / f));
  }
}

struct Runs {
  fs::path reference;
  Runs() {
    reference = scratch("reference");
    Experiment(ExperimentConfig::from_json(tiny_config()), reference).run();
  }
};

const Runs& runs() {
  static Runs r;
  return r;
}

}  // namespace

TEST_CASE("config parsing is strict and round-trips") {
  const ExperimentConfig c = ExperimentConfig::from_json(tiny_config());
  CHECK(c.steps == 24);
  CHECK(c.baselines.mixing.size() == 2);
  const ExperimentConfig again = ExperimentConfig::from_json(c.to_json());
  CHECK(again.to_json() == c.to_json());
  CHECK(again.hash() == c.hash());

  json j = tiny_config();
  j["workers"] = 3;
  j["output"] = "elsewhere";
  CHECK(ExperimentConfig::from_json(j).hash() == c.hash());
  j["seed"] = 12;
  CHECK(ExperimentConfig::from_json(j).hash() != c.hash());

  auto rejects = [](json bad) { CHECK_THROWS_AS(ExperimentConfig::from_json(bad), ConfigError); };
  json bad = tiny_config();
  bad["classifier"]["depth"] = 3;
  rejects(bad);
  bad = tiny_config();
  bad["colour"] = "blue";
  rejects(bad);
  bad = tiny_config();
  bad["baselines"]["methods"] = {"doob", "magic"};
  rejects(bad);
  bad = tiny_config();
  bad["baselines"]["methods"] = {"doob", "doob"};
  rejects(bad);
  bad = tiny_config();
  bad["world"]["preset"] = "w9";
  rejects(bad);
  bad = tiny_config();
  bad["finetune"]["gamma"] = -1.0;
  rejects(bad);
  bad = tiny_config();
  bad["finetune"]["reward"] = "vibes";
  rejects(bad);
  bad = tiny_config();
  bad["dataset"]["mode"] = "context_free";
  rejects(bad);  // classifier still uses the context
  bad["classifier"]["use_context"] = false;
  CHECK_NOTHROW(ExperimentConfig::from_json(bad));
  bad = tiny_config();
  bad["dataset"]["mode"] = "per_axis";
  rejects(bad);
  bad = tiny_config();
  bad["finetune"]["updates"] = "many";
  rejects(bad);
}

TEST_CASE("custom world definitions are accepted") {
  json j = tiny_config();
  j["world"] = {{"definition", make_world_w1(24).to_json()}};
  const ExperimentConfig c = ExperimentConfig::from_json(j);
  CHECK(c.world == "custom");
  CHECK(c.steps == 24);
  const fs::path dir = scratch("custom");
  Experiment e(c, dir);
  e.run({"world"});
  CHECK(json::parse(slurp(dir / "world.json")) == make_world_w1(24).to_json());
}

TEST_CASE("dry-run plan lists stages without computing") {
  const fs::path dir = scratch("plan");
  Experiment e(ExperimentConfig::from_json(tiny_config()), dir);
  const std::string plan = e.plan({});
  for (const auto& s : stage_names()) CHECK(plan.find("stage " + s) != std::string::npos);
  CHECK(plan.find("samples_smc.csv") != std::string::npos);
  CHECK_FALSE(fs::exists(dir));
  CHECK_THROWS_AS(e.plan({"bake"}), ConfigError);
}

TEST_CASE("full pipeline writes every artifact and marks stages done") {
  const fs::path dir = runs().reference;
  const json m = json::parse(slurp(dir / "manifest.json"));
  CHECK(m["code_version"] == "ctrl-lab 0.1.0");
  CHECK(m["config_hash"] == ExperimentConfig::from_json(tiny_config()).hash());
  for (const auto& s : stage_names()) {
    INFO(s);
    CHECK(m["stages"][s]["status"] == "done");
    for (const auto& a : m["stages"][s]["artifacts"]) CHECK(fs::exists(dir / a.get<std::string>()));
  }
  CHECK_FALSE(fs::exists(dir / "finetune_progress.ckpt"));

  const auto samples = load_samples_csv(dir / "samples_smc.csv", 1);
  REQUIRE(samples.size() == 8);
  for (const auto& cs : samples) CHECK(cs.samples.cols() == 110);

  std::istringstream log(slurp(dir / "train_log.csv"));
  std::string line;
  int rows = -1;
  while (std::getline(log, line)) ++rows;
  CHECK(rows == 6);

  const std::string summary = slurp(dir / "metrics_summary.csv");
  for (const char* label : {"CTRL", "Doob-exact", "Reconstruction", "SMC", "Best-of-N", "Classifier-Free-toy",
                            "Pre-trained", "Mix(1,0)", "Mix(1,2)"})
    CHECK(summary.find(label) != std::string::npos);
  CHECK(fs::exists(dir / "hist_ctrl_c0_y3.svg"));
}

TEST_CASE("same config and seed give byte-identical outputs") {
  const fs::path again = scratch("again");
  Experiment(ExperimentConfig::from_json(tiny_config()), again).run();
  check_same_outputs(runs().reference, again);
}

TEST_CASE("worker count does not change outputs") {
  json j = tiny_config();
  j["workers"] = 3;
  const fs::path dir = scratch("workers");
  Experiment(ExperimentConfig::from_json(j), dir).run();
  // config.json records the worker count itself.
  for (const auto& f : artifacts(runs().reference)) {
    if (f == "config.json") continue;
    INFO("file " << f);
    CHECK(slurp(runs().reference / f) == slurp(dir / f));
  }
}

TEST_CASE("interrupted fine-tuning resumes to identical outputs") {
  const fs::path dir = scratch("resume");
  {
    Experiment e(ExperimentConfig::from_json(tiny_config()), dir);
    e.interrupt_after(4);
    CHECK_THROWS(e.run());
    const json m = e.manifest();
    CHECK(m["stages"]["classifier"]["status"] == "done");
    CHECK(m["stages"]["finetune"]["status"] == "failed");
    CHECK(m["stages"]["finetune"]["error"].get<std::string>().find("interrupted") != std::string::npos);
    CHECK(fs::exists(dir / "finetune_progress.ckpt"));
    CHECK_FALSE(fs::exists(dir / "finetune.ckpt"));
  }
  Experiment::open(dir).resume();
  check_same_outputs(runs().reference, dir);
}

TEST_CASE("single stages re-run idempotently") {
  const fs::path dir = scratch("stages");
  Experiment e(ExperimentConfig::from_json(tiny_config()), dir);
  CHECK_THROWS_AS(e.run({"classifier"}), ConfigError);  // dataset missing
  e.run({"classifier", "dataset", "world"});            // reordered by dependency
  const std::string first = slurp(dir / "classifier.json");
  e.run({"classifier"});
  CHECK(slurp(dir / "classifier.json") == first);
  CHECK(slurp(dir / "classifier.json") == slurp(runs().reference / "classifier.json"));
}

TEST_CASE("a directory holding another config is refused") {
  json j = tiny_config();
  j["seed"] = 99;
  const fs::path dir = scratch("refuse");
  Experiment(ExperimentConfig::from_json(tiny_config()), dir).run({"world"});
  CHECK_THROWS_AS(Experiment(ExperimentConfig::from_json(j), dir).run({"world"}), ConfigError);
}

TEST_CASE("compare builds one row per method and refuses mismatched worlds") {
  const fs::path a = runs().reference;
  const std::string one = compare_runs({a});
  std::istringstream in(one);
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  REQUIRE(lines.size() == 1 + 9);
  CHECK(lines[0] == "run,method,accuracy,accuracy_se,macro_f1,mean_tv,mean_w1");
  CHECK(lines[1].find(",CTRL,") != std::string::npos);
  CHECK(lines[7].find(",Pre-trained,") != std::string::npos);

  const fs::path b = scratch("copy");
  fs::copy(a, b);
  const std::string two = compare_runs({a, b});
  std::istringstream in2(two);
  std::vector<std::string> rows;
  while (std::getline(in2, line)) rows.push_back(line.substr(line.find(',') + 1));
  REQUIRE(rows.size() == 1 + 18);
  for (int i = 1; i <= 9; ++i) CHECK(rows[static_cast<std::size_t>(i)] == rows[static_cast<std::size_t>(i + 9)]);

  std::ofstream(b / "world.json") << make_world_w2(24).to_json().dump(2) << "\n";
  CHECK_THROWS_AS(compare_runs({a, b}), ConfigError);
}
