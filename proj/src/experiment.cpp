#include "ctrl/experiment.hpp"

#include "ctrl/json_util.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

namespace ctrl {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kCodeVersion = "ctrl-lab 0.1.0";

const std::vector<std::string>& method_order() {
  static const std::vector<std::string> m{"ctrl", "doob", "reconstruction", "smc", "best_of_n", "classifier_free",
                                          "pretrained"};
  return m;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write " + tmp.string());
    out << text;
    if (!out) throw ConfigError("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

std::string dataset_mode_name(DatasetMode m) {
  switch (m) {
    case DatasetMode::Joint: return "joint";
    case DatasetMode::ContextFree: return "context_free";
    case DatasetMode::PerAxis: return "per_axis";
  }
  return "joint";
}

DatasetMode parse_dataset_mode(const std::string& s) {
  if (s == "joint") return DatasetMode::Joint;
  if (s == "context_free") return DatasetMode::ContextFree;
  if (s == "per_axis") return DatasetMode::PerAxis;
  throw ConfigError("dataset.mode must be joint, context_free or per_axis, got '" + s + "'");
}

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

void check_hidden(const std::vector<int>& hidden, const std::string& where) {
  require(!hidden.empty(), where + ": hidden must list at least one width");
  for (int w : hidden) require(w >= 1, where + ": hidden widths must be positive");
}

AugmentedDriftConfig parse_model(const json& j, AugmentedDriftConfig m, const std::string& where) {
  check_keys(j, {"hidden", "label_embedding", "context_embedding", "embedding_init_std", "net_learning_rate",
                 "embedding_learning_rate"},
             where);
  m.hidden = get_or(j, "hidden", m.hidden);
  m.label_embedding = get_or(j, "label_embedding", m.label_embedding);
  m.context_embedding = get_or(j, "context_embedding", m.context_embedding);
  m.embedding_init_std = get_or(j, "embedding_init_std", m.embedding_init_std);
  m.net_learning_rate = get_or(j, "net_learning_rate", m.net_learning_rate);
  m.embedding_learning_rate = get_or(j, "embedding_learning_rate", m.embedding_learning_rate);
  check_hidden(m.hidden, where);
  require(m.label_embedding >= 1 && m.context_embedding >= 1, where + ": embedding sizes must be positive");
  require(m.embedding_init_std >= 0.0, where + ": embedding_init_std must be nonnegative");
  require(m.net_learning_rate >= 0.0 && m.embedding_learning_rate >= 0.0, where + ": learning rates must be nonnegative");
  return m;
}

json model_json(const AugmentedDriftConfig& m) {
  return {{"hidden", m.hidden},
          {"label_embedding", m.label_embedding},
          {"context_embedding", m.context_embedding},
          {"embedding_init_std", m.embedding_init_std},
          {"net_learning_rate", m.net_learning_rate},
          {"embedding_learning_rate", m.embedding_learning_rate}};
}

AugmentedDriftConfig default_model() {
  AugmentedDriftConfig m;
  m.embedding_init_std = 1.0;
  m.net_learning_rate = 3e-3;
  return m;
}

std::string mix_name(double g1, double g2) { return "mix_" + fmt(g1) + "_" + fmt(g2); }

bool is_mix(const std::string& method) { return method.rfind("mix_", 0) == 0; }

// Stage status helpers.
json& stage_entry(json& m, const std::string& stage) {
  if (!m["stages"].contains(stage)) m["stages"][stage] = {{"status", "pending"}};
  return m["stages"][stage];
}

bool stage_done(const json& m, const std::string& stage) {
  return m.contains("stages") && m["stages"].contains(stage) && m["stages"][stage].value("status", "") == "done";
}

std::vector<std::string> csv_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream ss(line);
  while (std::getline(ss, cur, ',')) out.push_back(cur);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string samples_file(const std::string& method) { return "samples_" + method + ".csv"; }

}  // namespace

// ---------------------------------------------------------------------------
// Config

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  check_keys(j, {"name", "seed", "workers", "world", "dataset", "classifier", "finetune", "baselines", "evaluation",
                 "output"},
             "config");
  ExperimentConfig c;
  try {
    c.name = get_or<std::string>(j, "name", c.name);
    c.seed = get_or<std::uint64_t>(j, "seed", c.seed);
    c.workers = get_or(j, "workers", c.workers);
    c.output = get_or<std::string>(j, "output", c.output.string());
    require(c.workers >= 0, "workers must be nonnegative");

    if (j.contains("world")) {
      const json& w = j.at("world");
      check_keys(w, {"preset", "steps", "horizon", "definition"}, "world");
      c.steps = get_or(w, "steps", c.steps);
      c.horizon = get_or(w, "horizon", c.horizon);
      if (w.contains("definition")) {
        require(!w.contains("preset") || w.at("preset") == "custom", "world: give either a preset or a definition");
        c.world = "custom";
        c.world_definition = w.at("definition");
        DiffusionWorld::from_json(c.world_definition);  // validates
        if (!w.contains("steps")) c.steps = get_or(c.world_definition, "steps", c.steps);
        if (!w.contains("horizon")) c.horizon = get_or(c.world_definition, "horizon", c.horizon);
      } else {
        c.world = get_or<std::string>(w, "preset", c.world);
        require(c.world == "w1" || c.world == "w2", "world.preset must be w1 or w2 (or give a definition)");
      }
    }
    require(c.steps >= 1, "world.steps must be at least 1");
    require(c.horizon > 0.0 && std::isfinite(c.horizon), "world.horizon must be positive");

    if (j.contains("dataset")) {
      const json& d = j.at("dataset");
      check_keys(d, {"size", "mode", "train_fraction"}, "dataset");
      c.dataset_size = get_or(d, "size", c.dataset_size);
      c.dataset_mode = parse_dataset_mode(get_or<std::string>(d, "mode", "joint"));
      c.train_fraction = get_or(d, "train_fraction", c.train_fraction);
    }
    require(c.dataset_size >= 10, "dataset.size must be at least 10");
    require(c.train_fraction > 0.0 && c.train_fraction < 1.0, "dataset.train_fraction must lie in (0, 1)");

    if (j.contains("classifier")) {
      const json& k = j.at("classifier");
      check_keys(k, {"hidden", "use_context", "factored", "calibrate", "epochs", "batch", "learning_rate",
                     "weight_decay"},
                 "classifier");
      auto& s = c.classifier;
      s.hidden = get_or(k, "hidden", s.hidden);
      s.use_context = get_or(k, "use_context", s.use_context);
      s.factored = get_or(k, "factored", s.factored);
      s.calibrate = get_or(k, "calibrate", s.calibrate);
      s.train.epochs = get_or(k, "epochs", s.train.epochs);
      s.train.batch = get_or(k, "batch", s.train.batch);
      s.train.optimizer.learning_rate = get_or(k, "learning_rate", s.train.optimizer.learning_rate);
      s.train.optimizer.weight_decay = get_or(k, "weight_decay", s.train.optimizer.weight_decay);
    }
    check_hidden(c.classifier.hidden, "classifier");
    require(c.classifier.train.epochs >= 1 && c.classifier.train.batch >= 1,
            "classifier: epochs and batch must be positive");
    require(c.classifier.train.optimizer.learning_rate > 0.0, "classifier.learning_rate must be positive");
    require(c.classifier.train.optimizer.weight_decay >= 0.0, "classifier.weight_decay must be nonnegative");
    if (c.dataset_mode == DatasetMode::ContextFree)
      require(!c.classifier.use_context, "a context_free dataset needs classifier.use_context = false");
    if (c.dataset_mode == DatasetMode::PerAxis)
      require(c.classifier.factored, "a per_axis dataset needs classifier.factored = true");

    c.finetune.model = default_model();
    c.finetune.train.gamma = 1.0;
    c.finetune.train.checkpoint_every = 50;
    c.finetune.train.lr_final_fraction = 0.1;
    c.finetune.train.average_decay = 0.98;
    if (j.contains("finetune")) {
      const json& f = j.at("finetune");
      check_keys(f, {"reward", "gamma", "batch", "updates", "truncation_max", "weight_decay", "lr_final_fraction",
                     "average_decay", "checkpoint_every", "model"},
                 "finetune");
      auto& t = c.finetune.train;
      c.finetune.reward = get_or<std::string>(f, "reward", c.finetune.reward);
      t.gamma = get_or(f, "gamma", t.gamma);
      t.batch = get_or(f, "batch", t.batch);
      t.updates = get_or(f, "updates", t.updates);
      t.truncation_max = get_or(f, "truncation_max", t.truncation_max);
      t.optimizer.weight_decay = get_or(f, "weight_decay", t.optimizer.weight_decay);
      t.checkpoint_every = get_or(f, "checkpoint_every", t.checkpoint_every);
      t.lr_final_fraction = get_or(f, "lr_final_fraction", t.lr_final_fraction);
      t.average_decay = get_or(f, "average_decay", t.average_decay);
      if (f.contains("model")) c.finetune.model = parse_model(f.at("model"), c.finetune.model, "finetune.model");
    }
    const auto& t = c.finetune.train;
    require(c.finetune.reward == "classifier" || c.finetune.reward == "oracle",
            "finetune.reward must be classifier or oracle");
    require(t.gamma >= 0.0 && std::isfinite(t.gamma), "finetune.gamma must be nonnegative");
    require(t.batch >= 1 && t.updates >= 0, "finetune: batch must be positive and updates nonnegative");
    require(t.truncation_max >= -1, "finetune.truncation_max must be -1 (full) or nonnegative");
    require(t.checkpoint_every >= 0, "finetune.checkpoint_every must be nonnegative");
    require(t.optimizer.weight_decay >= 0.0, "finetune.weight_decay must be nonnegative");
    require(t.lr_final_fraction >= 0.0 && t.lr_final_fraction <= 1.0, "finetune.lr_final_fraction must lie in [0, 1]");
    require(t.average_decay >= 0.0 && t.average_decay < 1.0, "finetune.average_decay must lie in [0, 1)");

    c.baselines.classifier_free_model = AugmentedDriftConfig{};
    if (j.contains("baselines")) {
      const json& b = j.at("baselines");
      check_keys(b, {"methods", "smc_particles", "best_of_n_candidates", "classifier_free", "mixing"}, "baselines");
      auto& s = c.baselines;
      s.methods = get_or(b, "methods", s.methods);
      s.smc_particles = get_or(b, "smc_particles", s.smc_particles);
      s.best_of_n_candidates = get_or(b, "best_of_n_candidates", s.best_of_n_candidates);
      if (b.contains("classifier_free")) {
        const json& cf = b.at("classifier_free");
        check_keys(cf, {"budget", "steps", "batch", "tau_min", "learning_rate", "weight_decay", "model"},
                   "baselines.classifier_free");
        s.classifier_free.budget = get_or(cf, "budget", s.classifier_free.budget);
        s.classifier_free.steps = get_or(cf, "steps", s.classifier_free.steps);
        s.classifier_free.batch = get_or(cf, "batch", s.classifier_free.batch);
        s.classifier_free.tau_min = get_or(cf, "tau_min", s.classifier_free.tau_min);
        s.classifier_free.optimizer.learning_rate =
            get_or(cf, "learning_rate", s.classifier_free.optimizer.learning_rate);
        s.classifier_free.optimizer.weight_decay = get_or(cf, "weight_decay", s.classifier_free.optimizer.weight_decay);
        if (cf.contains("model"))
          s.classifier_free_model =
              parse_model(cf.at("model"), s.classifier_free_model, "baselines.classifier_free.model");
      }
      if (b.contains("mixing")) {
        for (const auto& p : b.at("mixing")) {
          require(p.is_array() && p.size() == 2, "baselines.mixing entries are [gamma1, gamma2] pairs");
          s.mixing.emplace_back(p[0].get<double>(), p[1].get<double>());
        }
      }
    }
    auto& s = c.baselines;
    std::set<std::string> seen;
    for (const auto& m : s.methods) {
      require(known_method(m), "baselines.methods: unknown method '" + m + "'");
      require(m != "ctrl", "baselines.methods: ctrl is always sampled by the evaluate stage");
      require(seen.insert(m).second, "baselines.methods: duplicate method '" + m + "'");
    }
    require(s.smc_particles >= 2, "baselines.smc_particles must be at least 2");
    require(s.best_of_n_candidates >= 1, "baselines.best_of_n_candidates must be at least 1");
    require(s.classifier_free.budget >= 0 && s.classifier_free.steps >= 0 && s.classifier_free.batch >= 1,
            "baselines.classifier_free: budget and steps nonnegative, batch positive");
    require(s.classifier_free.tau_min > 0.0, "baselines.classifier_free.tau_min must be positive");
    for (const auto& [g1, g2] : s.mixing)
      require(std::isfinite(g1) && std::isfinite(g2), "baselines.mixing values must be finite");

    if (j.contains("evaluation")) {
      const json& e = j.at("evaluation");
      check_keys(e, {"samples", "gamma", "bins", "seed"}, "evaluation");
      c.evaluation.samples = get_or(e, "samples", c.evaluation.samples);
      c.evaluation.gamma = get_or(e, "gamma", c.evaluation.gamma);
      c.evaluation.bins = get_or(e, "bins", c.evaluation.bins);
      c.evaluation.seed = get_or<std::uint64_t>(e, "seed", c.evaluation.seed);
    }
    require(c.evaluation.samples >= 1, "evaluation.samples must be positive");
    require(c.evaluation.bins >= 2, "evaluation.bins must be at least 2");
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return from_json(j);
}

json ExperimentConfig::to_json() const {
  json world_j = {{"steps", steps}, {"horizon", horizon}};
  if (world == "custom")
    world_j["definition"] = world_definition;
  else
    world_j["preset"] = world;
  json mixing = json::array();
  for (const auto& [g1, g2] : baselines.mixing) mixing.push_back({g1, g2});
  const auto& cf = baselines.classifier_free;
  return {{"name", name},
          {"seed", seed},
          {"workers", workers},
          {"output", output.string()},
          {"world", world_j},
          {"dataset", {{"size", dataset_size}, {"mode", dataset_mode_name(dataset_mode)}, {"train_fraction", train_fraction}}},
          {"classifier",
           {{"hidden", classifier.hidden},
            {"use_context", classifier.use_context},
            {"factored", classifier.factored},
            {"calibrate", classifier.calibrate},
            {"epochs", classifier.train.epochs},
            {"batch", classifier.train.batch},
            {"learning_rate", classifier.train.optimizer.learning_rate},
            {"weight_decay", classifier.train.optimizer.weight_decay}}},
          {"finetune",
           {{"reward", finetune.reward},
            {"gamma", finetune.train.gamma},
            {"batch", finetune.train.batch},
            {"updates", finetune.train.updates},
            {"truncation_max", finetune.train.truncation_max},
            {"weight_decay", finetune.train.optimizer.weight_decay},
            {"lr_final_fraction", finetune.train.lr_final_fraction},
            {"average_decay", finetune.train.average_decay},
            {"checkpoint_every", finetune.train.checkpoint_every},
            {"model", model_json(finetune.model)}}},
          {"baselines",
           {{"methods", baselines.methods},
            {"smc_particles", baselines.smc_particles},
            {"best_of_n_candidates", baselines.best_of_n_candidates},
            {"classifier_free",
             {{"budget", cf.budget},
              {"steps", cf.steps},
              {"batch", cf.batch},
              {"tau_min", cf.tau_min},
              {"learning_rate", cf.optimizer.learning_rate},
              {"weight_decay", cf.optimizer.weight_decay},
              {"model", model_json(baselines.classifier_free_model)}}},
            {"mixing", mixing}}},
          {"evaluation",
           {{"samples", evaluation.samples},
            {"gamma", evaluation.gamma},
            {"bins", evaluation.bins},
            {"seed", evaluation.seed}}}};
}

std::string ExperimentConfig::hash() const {
  json j = to_json();
  j.erase("output");
  j.erase("workers");
  std::ostringstream ss;
  ss << std::hex << std::setw(16) << std::setfill('0') << fnv1a(j.dump());
  return ss.str();
}

bool known_method(const std::string& method) {
  const auto& m = method_order();
  return std::find(m.begin(), m.end(), method) != m.end();
}

std::string method_label(const std::string& method) {
  static const std::map<std::string, std::string> labels{
      {"ctrl", "CTRL"},           {"doob", "Doob-exact"},
      {"reconstruction", "Reconstruction"}, {"smc", "SMC"},
      {"best_of_n", "Best-of-N"}, {"classifier_free", "Classifier-Free-toy"},
      {"pretrained", "Pre-trained"}};
  auto it = labels.find(method);
  if (it != labels.end()) return it->second;
  if (is_mix(method)) {
    std::string rest = method.substr(4);
    std::replace(rest.begin(), rest.end(), '_', ',');
    return "Mix(" + rest + ")";
  }
  return method;
}

// ---------------------------------------------------------------------------
// Experiment

Experiment::Experiment(ExperimentConfig config, fs::path output)
    : config_(std::move(config)), dir_(output.empty() ? config_.output : std::move(output)) {}

Experiment Experiment::open(const fs::path& directory) {
  return Experiment(ExperimentConfig::load(directory / "config.json"), directory);
}

std::vector<std::pair<int, int>> Experiment::conditions() const {
  std::vector<std::pair<int, int>> out;
  for (int c = 0; c < world_->num_contexts(); ++c)
    for (int y = 0; y < world_->num_labels(); ++y) out.emplace_back(c, y);
  return out;
}

double Experiment::eval_gamma() const {
  return config_.evaluation.gamma >= 0.0 ? config_.evaluation.gamma : config_.finetune.train.gamma;
}

namespace {

std::vector<std::string> stage_artifacts(const ExperimentConfig& c, const std::string& stage) {
  if (stage == "world") return {"world.json"};
  if (stage == "dataset") return {"dataset.txt"};
  if (stage == "classifier") return {"classifier.json", "calibration.json", "classifier_log.csv"};
  if (stage == "finetune") return {"finetune.ckpt", "train_log.csv", "train_timing.csv"};
  if (stage == "baselines") {
    std::vector<std::string> out;
    for (const auto& m : c.baselines.methods) out.push_back(samples_file(m));
    if (std::find(c.baselines.methods.begin(), c.baselines.methods.end(), "classifier_free") !=
        c.baselines.methods.end()) {
      out.push_back("cf.ckpt");
      out.push_back("cf_log.csv");
    }
    return out;
  }
  std::vector<std::string> out{samples_file("ctrl")};
  for (const auto& [g1, g2] : c.baselines.mixing) out.push_back(samples_file(mix_name(g1, g2)));
  out.insert(out.end(), {"metrics.csv", "metrics_summary.csv", "summary.txt"});
  return out;
}

std::vector<std::string> prerequisites(const ExperimentConfig& c, const std::string& stage) {
  const auto& m = c.baselines.methods;
  auto uses = [&](const char* name) { return std::find(m.begin(), m.end(), name) != m.end(); };
  if (stage == "dataset") return {"world"};
  if (stage == "classifier") return {"dataset"};
  if (stage == "finetune") {
    if (c.finetune.reward == "classifier") return {"world", "classifier"};
    return {"world"};
  }
  if (stage == "baselines") {
    if (uses("reconstruction") || uses("smc") || uses("best_of_n")) return {"world", "classifier"};
    return {"world"};
  }
  if (stage == "evaluate") {
    if (m.empty()) return {"finetune"};
    return {"finetune", "baselines"};
  }
  return {};
}

std::vector<std::string> ordered_selection(const std::vector<std::string>& stages) {
  const auto& all = stage_names();
  for (const auto& s : stages)
    if (std::find(all.begin(), all.end(), s) == all.end())
      throw ConfigError("unknown stage '" + s + "' (stages: world, dataset, classifier, finetune, baselines, evaluate)");
  if (stages.empty()) return all;
  std::vector<std::string> out;
  for (const auto& s : all)
    if (std::find(stages.begin(), stages.end(), s) != stages.end()) out.push_back(s);
  return out;
}

}  // namespace

std::string Experiment::plan(const std::vector<std::string>& stages) const {
  const auto selected = ordered_selection(stages);
  std::ostringstream out;
  out << "experiment " << config_.name << " (config " << config_.hash() << ")\n";
  out << "output: " << dir_.string() << "\n";
  out << "world: " << config_.world << ", " << config_.steps << " steps, horizon " << fmt(config_.horizon) << "\n";
  out << "seed: " << config_.seed << ", workers: " << (config_.workers > 0 ? config_.workers : default_workers())
      << "\n";
  for (const auto& s : selected) {
    out << "stage " << s;
    const auto pre = prerequisites(config_, s);
    if (!pre.empty()) {
      out << " (needs";
      for (const auto& p : pre) out << " " << p;
      out << ")";
    }
    out << " ->";
    for (const auto& a : stage_artifacts(config_, s)) out << " " << a;
    out << "\n";
  }
  out << "resolved config:\n" << config_.to_json().dump(2) << "\n";
  return out.str();
}

json Experiment::read_manifest() const {
  const fs::path p = dir_ / "manifest.json";
  if (!fs::exists(p)) return json{{"stages", json::object()}};
  try {
    return json::parse(read_text(p));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("corrupt manifest " + p.string() + ": " + e.what());
  }
}

json Experiment::manifest() const { return read_manifest(); }

void Experiment::write_manifest(const json& m) const { write_text(dir_ / "manifest.json", m.dump(2) + "\n"); }

void Experiment::run(const std::vector<std::string>& stages, std::ostream* log) {
  const auto selected = ordered_selection(stages);
  fs::create_directories(dir_);
  const fs::path cfg = dir_ / "config.json";
  if (fs::exists(cfg)) {
    const ExperimentConfig existing = ExperimentConfig::load(cfg);
    if (existing.hash() != config_.hash())
      throw ConfigError(dir_.string() + " holds a run of a different config (" + existing.hash() + " vs " +
                        config_.hash() + "); choose another output directory");
  } else {
    write_text(cfg, config_.to_json().dump(2) + "\n");
  }
  for (const auto& s : selected) run_stage(s, log, false);
}

void Experiment::resume(std::ostream* log) {
  const json m = read_manifest();
  if (!fs::exists(dir_ / "config.json")) throw ConfigError(dir_.string() + " is not a run directory");
  if (m.contains("config_hash") && m["config_hash"] != config_.hash())
    throw ConfigError("manifest config hash does not match config.json");
  for (const auto& s : stage_names())
    if (!stage_done(m, s)) run_stage(s, log, true);
}

void Experiment::run_stage(const std::string& stage, std::ostream* log, bool resuming) {
  json m = read_manifest();
  m["config_hash"] = config_.hash();
  m["code_version"] = kCodeVersion;
  m["name"] = config_.name;
  for (const auto& p : prerequisites(config_, stage))
    if (!stage_done(m, p))
      throw ConfigError("stage " + stage + " needs stage " + p + "; run it first");

  json& e = stage_entry(m, stage);
  e["status"] = "running";
  e.erase("error");
  write_manifest(m);
  if (log) *log << "[" << stage << "] start\n" << std::flush;
  try {
    if (stage != "world") load_world();
    if (stage == "world") stage_world();
    else if (stage == "dataset") stage_dataset();
    else if (stage == "classifier") stage_classifier();
    else if (stage == "finetune") stage_finetune(resuming);
    else if (stage == "baselines") stage_baselines();
    else stage_evaluate();
  } catch (const std::exception& ex) {
    json f = read_manifest();
    json& fe = stage_entry(f, stage);
    fe["status"] = "failed";
    fe["error"] = ex.what();
    write_manifest(f);
    if (log) *log << "[" << stage << "] failed: " << ex.what() << "\n" << std::flush;
    throw;
  }
  json done = read_manifest();
  json& de = stage_entry(done, stage);
  de["status"] = "done";
  de["artifacts"] = stage_artifacts(config_, stage);
  json seeds = json::object();
  const std::uint64_t s = config_.seed;
  if (stage == "dataset") seeds["dataset"] = derive_seed(s, "dataset");
  if (stage == "classifier") {
    seeds["init"] = derive_seed(s, "classifier-init");
    seeds["train"] = derive_seed(s, "classifier-train");
  }
  if (stage == "finetune") {
    seeds["init"] = derive_seed(s, "ctrl-init");
    seeds["train"] = derive_seed(s, "finetune");
  }
  if (stage == "baselines" || stage == "evaluate")
    seeds["sampling"] = derive_seed(s, "evaluate", config_.evaluation.seed);
  if (stage == "baselines") seeds["classifier_free"] = derive_seed(s, "classifier-free");
  de["seeds"] = seeds;
  write_manifest(done);
  if (log) *log << "[" << stage << "] done\n" << std::flush;
}

void Experiment::load_world() {
  if (world_) return;
  const fs::path p = dir_ / "world.json";
  if (!fs::exists(p)) throw ConfigError("missing " + p.string() + "; run the world stage");
  world_ = std::make_unique<DiffusionWorld>(DiffusionWorld::from_json(json::parse(read_text(p))));
}

void Experiment::stage_world() {
  if (config_.world == "custom") {
    json def = config_.world_definition;
    def["steps"] = config_.steps;
    def["horizon"] = config_.horizon;
    world_ = std::make_unique<DiffusionWorld>(DiffusionWorld::from_json(def));
  } else {
    world_ = std::make_unique<DiffusionWorld>(make_world(config_.world, config_.steps, config_.horizon));
  }
  write_text(dir_ / "world.json", world_->to_json().dump(2) + "\n");
}

void Experiment::stage_dataset() {
  const OfflineDataset data = OfflineDataset::generate(*world_, config_.dataset_size, derive_seed(config_.seed, "dataset"),
                                                       config_.dataset_mode, config_.train_fraction);
  data.save(dir_ / "dataset.txt");
}

void Experiment::stage_classifier() {
  const OfflineDataset data = OfflineDataset::load(dir_ / "dataset.txt");
  const auto& s = config_.classifier;
  std::vector<ClassifierModel> models;
  if (s.factored) {
    for (int a = 0; a < world_->oracle().axes(); ++a)
      models.emplace_back(world_->dim(), world_->num_contexts(), s.use_context, world_->oracle().axis(a).classes(), a,
                          s.hidden, derive_seed(config_.seed, "classifier-init", static_cast<std::uint64_t>(a)));
  } else {
    models.emplace_back(world_->dim(), world_->num_contexts(), s.use_context, world_->num_labels(), -1, s.hidden,
                        derive_seed(config_.seed, "classifier-init"));
  }
  std::string log = "model,epoch,loss\n";
  json calibration = json::array();
  json saved = json::array();
  for (std::size_t i = 0; i < models.size(); ++i) {
    ClassifierTrainConfig tc = s.train;
    tc.seed = derive_seed(config_.seed, "classifier-train", i);
    const ClassifierTrainReport r = train_mle(data, models[i], tc);
    for (std::size_t e = 0; e < r.epoch_loss.size(); ++e)
      log += std::to_string(i) + "," + std::to_string(e + 1) + "," + fmt17(r.epoch_loss[e]) + "\n";
    json cal = {{"model", i}, {"axis", models[i].axis()}};
    if (s.calibrate && !data.validation().empty()) {
      const TemperatureFit fit = calibrate_temperature(models[i], data);
      cal["temperature"] = fit.temperature;
      cal["nll_before"] = fit.nll_before;
      cal["nll_after"] = fit.nll_after;
      cal["ece_before"] = fit.ece_before;
      cal["ece_after"] = fit.ece_after;
      cal["warnings"] = fit.warnings;
    } else {
      cal["temperature"] = 1.0;
      cal["warnings"] = std::vector<std::string>{s.calibrate ? "empty validation split; not calibrated" : "calibration disabled"};
    }
    calibration.push_back(cal);
    saved.push_back(models[i].to_json());
  }
  write_text(dir_ / "classifier.json",
             json{{"kind", s.factored ? "factored" : "joint"}, {"models", saved}}.dump(1) + "\n");
  write_text(dir_ / "calibration.json", calibration.dump(2) + "\n");
  write_text(dir_ / "classifier_log.csv", log);
}

std::unique_ptr<LabelLikelihood> Experiment::load_classifier() const {
  const fs::path p = dir_ / "classifier.json";
  if (!fs::exists(p)) throw ConfigError("missing " + p.string() + "; run the classifier stage");
  const json j = json::parse(read_text(p));
  std::vector<ClassifierModel> models;
  for (const auto& m : j.at("models")) models.push_back(ClassifierModel::from_json(m));
  if (j.at("kind") == "factored") return std::make_unique<FactoredClassifier>(std::move(models));
  if (models.size() != 1) throw ConfigError("joint classifier file must hold one model");
  return std::make_unique<ClassifierModel>(std::move(models.front()));
}

void Experiment::stage_finetune(bool resuming) {
  AugmentedDriftConfig mc = config_.finetune.model;
  mc.seed = derive_seed(config_.seed, "ctrl-init");
  AugmentedDrift aug(*world_, mc);

  std::unique_ptr<LabelLikelihood> classifier;
  OracleLikelihood oracle(world_->oracle(), world_->dim());
  const LabelLikelihood* reward = &oracle;
  if (config_.finetune.reward == "classifier") {
    classifier = load_classifier();
    reward = classifier.get();
  }

  FinetuneConfig tc = config_.finetune.train;
  tc.seed = derive_seed(config_.seed, "finetune");
  tc.workers = config_.workers;
  tc.checkpoint_every = 0;
  const ExploratoryDistribution explore = ExploratoryDistribution::uniform(world_->num_contexts(), world_->num_labels());

  const fs::path progress = dir_ / "finetune_progress.ckpt";
  const fs::path log_path = dir_ / "train_log.csv";
  const fs::path timing_path = dir_ / "train_timing.csv";
  std::optional<Checkpoint> state;
  std::string log = "update,mean_reward,mean_kl,grad_norm,truncation\n";
  std::string timing = "update,wallclock\n";
  if (resuming && fs::exists(progress)) {
    state = load_checkpoint(progress);
    if (state->meta["config_hash"] != config_.hash())
      throw ConfigError("finetune progress checkpoint belongs to a different config");
    // Keep only the log rows covered by the checkpoint.
    auto keep = [&](const fs::path& p, std::string& out) {
      if (!fs::exists(p)) return;
      std::istringstream in(read_text(p));
      std::string line;
      std::getline(in, line);
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (std::stoll(line.substr(0, line.find(','))) < state->next_update) out += line + "\n";
      }
    };
    keep(log_path, log);
    keep(timing_path, timing);
  } else if (fs::exists(progress)) {
    fs::remove(progress);
  }

  const int every = config_.finetune.train.checkpoint_every > 0 ? config_.finetune.train.checkpoint_every
                                                                 : std::max(1, config_.finetune.train.updates);
  int done = state ? static_cast<int>(state->next_update) : 0;
  if (state) restore_checkpoint(aug, *state, tc.optimizer);
  Checkpoint last = state ? *state : Checkpoint{};
  bool have_last = state.has_value();
  while (done < config_.finetune.train.updates || !have_last) {
    const int end = std::min(config_.finetune.train.updates, done + every);
    FinetuneConfig seg = tc;
    seg.stop_at = end;
    FinetuneResult r = finetune(aug, *reward, explore, seg, have_last ? &last : nullptr);
    for (const auto& row : r.log) {
      log += std::to_string(row.update) + "," + fmt17(row.mean_reward) + "," + fmt17(row.mean_kl) + "," +
             fmt17(row.grad_norm) + "," + std::to_string(row.truncation) + "\n";
      timing += std::to_string(row.update) + "," + fmt(row.wallclock) + "\n";
    }
    last = std::move(r.final_state);
    last.meta["config_hash"] = config_.hash();
    have_last = true;
    done = end;
    save_checkpoint(progress, last);
    write_text(log_path, log);
    write_text(timing_path, timing);
    if (interrupt_after_ >= 0 && done >= interrupt_after_ && done < config_.finetune.train.updates)
      throw std::runtime_error("interrupted after " + std::to_string(done) + " updates");
  }
  save_checkpoint(dir_ / "finetune.ckpt", last);
  fs::remove(progress);
}

void Experiment::write_samples(const std::string& method, const std::vector<ConditionSamples>& samples) const {
  std::ostringstream out;
  out << "method,context,label";
  const int d = world_->dim();
  for (int i = 0; i < d; ++i) out << ",x" << i;
  out << "\n";
  for (const auto& cs : samples)
    for (Eigen::Index k = 0; k < cs.samples.cols(); ++k) {
      out << method << "," << cs.context << "," << cs.label;
      for (int i = 0; i < d; ++i) out << "," << fmt17(cs.samples(i, k));
      out << "\n";
    }
  write_text(dir_ / samples_file(method), out.str());
}

std::vector<ConditionSamples> load_samples_csv(const fs::path& path, int dim) {
  std::istringstream in(read_text(path));
  std::string line;
  if (!std::getline(in, line) || line.rfind("method,context,label", 0) != 0)
    throw ConfigError(path.string() + ": not a sample file");
  if (static_cast<int>(csv_fields(line).size()) != 3 + dim)
    throw ConfigError(path.string() + ": expected " + std::to_string(dim) + " coordinates");
  std::vector<std::pair<int, int>> order;
  std::map<std::pair<int, int>, std::vector<double>> values;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = csv_fields(line);
    if (static_cast<int>(f.size()) != 3 + dim) throw ConfigError(path.string() + ": malformed row '" + line + "'");
    const std::pair<int, int> key{std::stoi(f[1]), std::stoi(f[2])};
    auto [it, fresh] = values.try_emplace(key);
    if (fresh) order.push_back(key);
    for (int i = 0; i < dim; ++i) it->second.push_back(std::stod(f[3 + i]));
  }
  std::vector<ConditionSamples> out;
  for (const auto& key : order) {
    const auto& v = values[key];
    ConditionSamples cs;
    cs.context = key.first;
    cs.label = key.second;
    cs.samples = Eigen::Map<const Matrix>(v.data(), dim, static_cast<Eigen::Index>(v.size()) / dim);
    out.push_back(std::move(cs));
  }
  return out;
}

std::vector<ConditionSamples> Experiment::read_samples(const std::string& method) const {
  return load_samples_csv(dir_ / samples_file(method), world_->dim());
}

namespace {

Matrix rollout_terminal(const DiffusionWorld& world, const DriftFn& drift, int context, int label, int n,
                        std::uint64_t seed, int workers) {
  RolloutOptions opts;
  opts.record = false;
  opts.workers = workers;
  return rollout(drift, world.schedule(), world.grid(), InitialLaw::standard_gaussian(), world.dim(),
                 std::vector<int>(static_cast<std::size_t>(n), context),
                 std::vector<int>(static_cast<std::size_t>(n), label), seed, opts)
      .terminal;
}

}  // namespace

void Experiment::stage_baselines() {
  const int n = config_.evaluation.samples;
  const double gamma = eval_gamma();
  const int workers = config_.workers;
  const std::uint64_t base = derive_seed(config_.seed, "evaluate", config_.evaluation.seed);
  std::unique_ptr<LabelLikelihood> classifier;
  if (fs::exists(dir_ / "classifier.json")) classifier = load_classifier();
  auto need_classifier = [&](const std::string& m) -> const LabelLikelihood& {
    if (!classifier) throw ConfigError(m + " needs the classifier stage");
    return *classifier;
  };

  for (const auto& method : config_.baselines.methods) {
    std::vector<ConditionSamples> out;
    std::optional<AugmentedDrift> cf;
    if (method == "classifier_free") {
      AugmentedDriftConfig mc = config_.baselines.classifier_free_model;
      mc.seed = derive_seed(config_.seed, "classifier-free-init");
      cf.emplace(*world_, mc);
      ClassifierFreeConfig cc = config_.baselines.classifier_free;
      cc.seed = derive_seed(config_.seed, "classifier-free");
      OracleLikelihood labeller(world_->oracle(), world_->dim());
      const ClassifierFreeReport r = classifier_free_toy_baseline(*cf, labeller, cc);
      std::string log = "step,loss\n";
      for (std::size_t i = 0; i < r.loss.size(); ++i) log += std::to_string(i) + "," + fmt17(r.loss[i]) + "\n";
      write_text(dir_ / "cf_log.csv", log);
      Checkpoint ck;
      ck.params = cf->parameters().gather();
      ck.rng_seed = cc.seed;
      ck.meta["kind"] = "classifier_free";
      ck.meta["config_hash"] = config_.hash();
      save_checkpoint(dir_ / "cf.ckpt", ck);
    }
    for (const auto& [c, y] : conditions()) {
      const std::uint64_t seed =
          derive_seed(base, method, static_cast<std::uint64_t>(c * world_->num_labels() + y));
      ConditionSamples cs{c, y, {}};
      if (method == "pretrained") {
        cs.samples = world_->sample_pretrained(c, n, seed);
      } else if (method == "doob") {
        cs.samples = sample_doob(*world_, c, y, gamma, n, seed, nullptr, {}, workers);
      } else if (method == "reconstruction") {
        cs.samples = rollout_terminal(*world_, reconstruction_drift_fn(*world_, need_classifier(method), gamma), c, y,
                                      n, seed, workers);
      } else if (method == "smc") {
        const LabelLikelihood& lik = need_classifier(method);
        Matrix all(world_->dim(), n);
        int filled = 0;
        for (std::uint64_t run = 0; filled < n; ++run) {
          const SmcResult r = smc_sample(*world_, lik, c, y, gamma, config_.baselines.smc_particles,
                                         derive_seed(seed, "run", run));
          const int take = std::min<int>(n - filled, static_cast<int>(r.samples.cols()));
          all.middleCols(filled, take) = r.samples.leftCols(take);
          filled += take;
        }
        cs.samples = std::move(all);
      } else if (method == "best_of_n") {
        cs.samples = stepwise_best_of_n(*world_, need_classifier(method), c, y, config_.baselines.best_of_n_candidates,
                                        n, seed, workers);
      } else if (method == "classifier_free") {
        cs.samples = rollout_terminal(*world_, mixed_guidance_fn(*cf, 1.0, gamma), c, y, n, seed, workers);
      }
      out.push_back(std::move(cs));
    }
    write_samples(method, out);
  }
}

void Experiment::stage_evaluate() {
  AugmentedDriftConfig mc = config_.finetune.model;
  mc.seed = derive_seed(config_.seed, "ctrl-init");
  AugmentedDrift aug(*world_, mc);
  load_for_sampling(aug, load_checkpoint(dir_ / "finetune.ckpt"));

  const int n = config_.evaluation.samples;
  const int workers = config_.workers;
  const std::uint64_t base = derive_seed(config_.seed, "evaluate", config_.evaluation.seed);
  const double gamma = eval_gamma();

  std::vector<std::string> methods{"ctrl"};
  {
    std::vector<ConditionSamples> out;
    for (const auto& [c, y] : conditions())
      out.push_back({c, y,
                     sample_augmented(aug, c, y, n,
                                      derive_seed(base, "ctrl", static_cast<std::uint64_t>(c * world_->num_labels() + y)),
                                      workers)});
    write_samples("ctrl", out);
  }
  for (const auto& [g1, g2] : config_.baselines.mixing) {
    const std::string name = mix_name(g1, g2);
    const DriftFn drift = mixed_guidance_fn(aug, g1, g2);
    std::vector<ConditionSamples> out;
    for (const auto& [c, y] : conditions())
      out.push_back({c, y,
                     rollout_terminal(*world_, drift, c, y, n,
                                      derive_seed(base, name, static_cast<std::uint64_t>(c * world_->num_labels() + y)),
                                      workers)});
    write_samples(name, out);
    methods.push_back(name);
  }
  for (const auto& m : config_.baselines.methods) methods.push_back(m);

  std::vector<EvalReport> reports;
  std::string summary_csv = "method,label,accuracy,accuracy_se,macro_f1,mean_tv,mean_w1,incomplete\n";
  std::string summary;
  summary += "experiment " + config_.name + " (config " + config_.hash() + "), target gamma " + fmt(gamma) + "\n\n";
  for (const auto& m : methods) {
    EvalReport r = evaluate_samples(*world_, read_samples(m), gamma, config_.evaluation.bins,
                                    derive_seed(base, "metrics", 0));
    r.method = m;
    double tv = 0.0, w1 = 0.0;
    int counted = 0;
    for (const auto& row : r.rows)
      if (row.tv >= 0.0) {
        tv += row.tv;
        w1 += row.w1;
        ++counted;
      }
    const double mean_tv = counted ? tv / counted : -1.0;
    const double mean_w1 = counted ? w1 / counted : -1.0;
    summary_csv += m + "," + method_label(m) + "," + fmt(r.accuracy) + "," + fmt(r.accuracy_se) + "," +
                   fmt(r.macro_f1) + "," + fmt(mean_tv) + "," + fmt(mean_w1) + "," + (r.incomplete ? "1" : "0") + "\n";
    summary += report_summary(r) + "\n";

    if (world_->dim() == 1) {
      const auto samples = read_samples(m);
      for (const auto& cs : samples) {
        const TargetDensity target = target_density(*world_, cs.context, cs.label, gamma);
        const Histogram h = histogram(cs.samples, target, std::min(config_.evaluation.bins, 60));
        const std::string stem = "hist_" + m + "_c" + std::to_string(cs.context) + "_y" + std::to_string(cs.label);
        write_text(dir_ / (stem + ".csv"), histogram_csv(h));
        write_text(dir_ / (stem + ".svg"),
                   histogram_svg(h, method_label(m) + "  c=" + std::to_string(cs.context) +
                                        " y=" + std::to_string(cs.label)));
      }
    }
    reports.push_back(std::move(r));
  }
  write_text(dir_ / "metrics.csv", report_csv(reports));
  write_text(dir_ / "metrics_summary.csv", summary_csv);
  write_text(dir_ / "summary.txt", summary);
}

// ---------------------------------------------------------------------------
// compare

std::string compare_runs(const std::vector<fs::path>& runs) {
  if (runs.empty()) throw ConfigError("compare needs at least one run directory");
  std::string world0, eval0;
  std::vector<std::pair<std::string, std::vector<std::vector<std::string>>>> tables;
  for (const auto& dir : runs) {
    const std::string world = read_text(dir / "world.json");
    const ExperimentConfig cfg = ExperimentConfig::load(dir / "config.json");
    json ev = cfg.to_json()["evaluation"];
    ev["gamma"] = cfg.evaluation.gamma >= 0.0 ? cfg.evaluation.gamma : cfg.finetune.train.gamma;
    ev.erase("seed");
    if (world0.empty()) {
      world0 = world;
      eval0 = ev.dump();
    } else {
      if (world != world0) throw ConfigError("runs use different worlds: " + runs.front().string() + " vs " + dir.string());
      if (ev.dump() != eval0)
        throw ConfigError("runs use different evaluation settings: " + runs.front().string() + " vs " + dir.string());
    }
    const fs::path metrics = dir / "metrics_summary.csv";
    if (!fs::exists(metrics)) throw ConfigError(dir.string() + " has no metrics; run the evaluate stage");
    std::istringstream in(read_text(metrics));
    std::string line;
    std::getline(in, line);
    std::vector<std::vector<std::string>> rows;
    while (std::getline(in, line))
      if (!line.empty()) rows.push_back(csv_fields(line));
    tables.emplace_back(dir.filename().empty() ? dir.parent_path().filename().string() : dir.filename().string(),
                        std::move(rows));
  }
  auto rank = [](const std::string& m) {
    const auto& o = method_order();
    const auto it = std::find(o.begin(), o.end(), m);
    return it == o.end() ? static_cast<int>(o.size()) : static_cast<int>(it - o.begin());
  };
  std::string out = "run,method,accuracy,accuracy_se,macro_f1,mean_tv,mean_w1\n";
  for (auto& [run, rows] : tables) {
    std::stable_sort(rows.begin(), rows.end(), [&](const auto& a, const auto& b) { return rank(a[0]) < rank(b[0]); });
    for (const auto& r : rows)
      out += run + "," + r[1] + "," + r[2] + "," + r[3] + "," + r[4] + "," + r[5] + "," + r[6] + "\n";
  }
  return out;
}

}  // namespace ctrl
