// Command line runner for config-driven experiments.
//
//   ctrl_lab validate --config configs/w1-gamma1.json
//   ctrl_lab run --config configs/w1-gamma1.json --output runs/a
//   ctrl_lab run --config configs/w1-gamma1.json --stages world,dataset,classifier
//   ctrl_lab run --config configs/w1-gamma1.json --stages ""      # dry run: print the plan
//   ctrl_lab resume --output runs/a
//   ctrl_lab compare runs/a runs/b
//
// CTRL_LAB_WORKERS sets the worker count when the config leaves "workers" at 0.

#include "ctrl/experiment.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <sstream>

namespace {

std::vector<std::string> split_stages(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

ctrl::ExperimentConfig load(const std::string& path, const std::optional<std::uint64_t>& seed) {
  ctrl::ExperimentConfig cfg = ctrl::ExperimentConfig::load(path);
  if (seed) cfg.seed = *seed;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ctrl_lab: conditioning toy diffusions by KL-regularized control"};
  app.require_subcommand(1);

  std::string config_path, output;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> stages;

  auto* validate = app.add_subcommand("validate", "Check a config and print its resolved form and hash");
  validate->add_option("-c,--config", config_path, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  validate->add_option("--seed", seed, "Override the global seed");

  auto* run = app.add_subcommand("run", "Run pipeline stages");
  run->add_option("-c,--config", config_path, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  run->add_option("-o,--output", output, "Output directory (default: the config's output)");
  run->add_option("--seed", seed, "Override the global seed");
  run->add_option("-s,--stages", stages,
                  "Comma-separated stages (world,dataset,classifier,finetune,baselines,evaluate); "
                  "an empty list prints the plan without computing");

  auto* resume = app.add_subcommand("resume", "Finish the stages of a run that are not marked done");
  resume->add_option("-o,--output", output, "Run directory")->required()->check(CLI::ExistingDirectory);

  std::vector<std::string> dirs;
  auto* compare = app.add_subcommand("compare", "Method-vs-metric table over run directories");
  compare->add_option("runs", dirs, "Run directories")->required()->check(CLI::ExistingDirectory);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*validate) {
      const auto cfg = load(config_path, seed);
      std::cout << "config ok, hash " << cfg.hash() << "\n" << cfg.to_json().dump(2) << "\n";
    } else if (*run) {
      ctrl::Experiment exp(load(config_path, seed), output);
      if (stages && split_stages(*stages).empty()) {
        std::cout << exp.plan({});
        return 0;
      }
      exp.run(stages ? split_stages(*stages) : std::vector<std::string>{}, &std::cerr);
      std::cout << "run complete: " << exp.directory().string() << "\n";
    } else if (*resume) {
      auto exp = ctrl::Experiment::open(output);
      exp.resume(&std::cerr);
      std::cout << "run complete: " << exp.directory().string() << "\n";
    } else if (*compare) {
      std::vector<std::filesystem::path> paths(dirs.begin(), dirs.end());
      std::cout << ctrl::compare_runs(paths);
    }
  } catch (const ctrl::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
