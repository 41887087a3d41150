// Acceptance gate: one PASS/FAIL line per criterion.
//
//   acceptance [--runs DIR] [--configs DIR] [--only 1,4,7]
//
// Criteria 4 and 7-11 read the bundled experiment runs. A run directory that already holds
// the same config is resumed (a no-op when complete); any other content is replaced.

#include "ctrl/experiment.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#ifndef CTRL_LAB_CONFIG_DIR
#define CTRL_LAB_CONFIG_DIR "configs"
#endif

using namespace ctrl;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

struct MeanSe {
  double mean = 0.0, se = 0.0;
};

MeanSe mean_se(const Vector& v) {
  const double n = static_cast<double>(v.size());
  const double m = v.mean();
  const double var = (v.array() - m).square().sum() / (n - 1.0);
  return {m, std::sqrt(var / n)};
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Runs {
 public:
  Runs(fs::path root, fs::path configs) : root_(std::move(root)), configs_(std::move(configs)) {}

  // Completes (or reuses) the run of a bundled config and returns its directory.
  const fs::path& get(const std::string& name) {
    auto it = done_.find(name);
    if (it != done_.end()) return it->second;
    const ExperimentConfig cfg = ExperimentConfig::load(configs_ / (name + ".json"));
    const fs::path dir = root_ / name;
    bool reuse = false;
    if (fs::exists(dir / "config.json")) {
      try {
        reuse = ExperimentConfig::load(dir / "config.json").hash() == cfg.hash();
      } catch (const std::exception&) {
      }
      if (!reuse) fs::remove_all(dir);
    }
    const auto t0 = std::chrono::steady_clock::now();
    std::cout << "  [" << (reuse ? "resuming" : "running") << " " << name << " in " << dir.string() << "]"
              << std::endl;
    if (reuse)
      Experiment::open(dir).resume();
    else
      Experiment(cfg, dir).run();
    std::cout << "  [" << name << " ready after "
              << fmt("%.1f", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()) << " s]"
              << std::endl;
    return done_.emplace(name, dir).first->second;
  }

 private:
  fs::path root_;
  fs::path configs_;
  std::map<std::string, fs::path> done_;
};

std::vector<ClassifierModel> load_models(const fs::path& dir) {
  const json j = json::parse(read_file(dir / "classifier.json"));
  std::vector<ClassifierModel> models;
  for (const auto& m : j.at("models")) models.push_back(ClassifierModel::from_json(m));
  return models;
}

const Matrix& samples_for(const std::vector<ConditionSamples>& all, int c, int y) {
  for (const auto& s : all)
    if (s.context == c && s.label == y) return s.samples;
  throw ConfigError("no samples for condition c" + std::to_string(c) + " y" + std::to_string(y));
}

// ---------------------------------------------------------------------------------------

Outcome girsanov() {
  // OU base dx = -x dt + sigma dw; control adds a constant delta.
  const double sigma = 0.8, delta = 0.6, T = 5.0;
  const int steps = 256, n = 10000;
  const auto sched = NoiseSchedule::constant(sigma);
  const TimeGrid grid(T, steps);
  const DriftFn base = [](const DriftQuery&, const Matrix& x, Matrix& out) { out = -x; };
  const DriftFn ctrl = [&](const DriftQuery&, const Matrix& x, Matrix& out) { out = (-x).array() + delta; };
  RolloutOptions ro;
  ro.record = false;
  ro.base = &base;
  const auto batch = rollout(ctrl, sched, grid, InitialLaw::standard_gaussian(), 1, std::vector<int>(n, 0),
                             std::vector<int>(n, 0), 21, ro);
  const MeanSe z = mean_se(batch.path_kl());
  const double expected = T * delta * delta / (2 * sigma * sigma);
  // Z_T is deterministic for a constant offset, so the standard error is ~0; allow rounding.
  const double tol = std::max(3 * z.se, 1e-12 * expected);
  return {std::abs(z.mean - expected) <= tol, "mean Z_T " + fmt("%.12g", z.mean) + " expected " +
                                                  fmt("%.12g", expected) + " se " + fmt("%.2g", z.se)};
}

Outcome bptt_gradient() {
  const auto world = make_world_w1(8);
  AugmentedDriftConfig cfg;
  cfg.hidden = {8, 8};
  cfg.label_embedding = 3;
  cfg.context_embedding = 2;
  cfg.seed = 5;
  AugmentedDrift aug(world, cfg);
  ParamVector pv = aug.parameters();
  const Vector lr = pv.learning_rates();
  Vector start = pv.gather();
  RngStream rng(77, 0);
  for (Eigen::Index i = 0; i < start.size(); ++i)
    if (lr[i] > 0) start[i] += 0.4 * rng.normal();
  pv.scatter(start);

  OracleLikelihood oracle(world.oracle(), 1);
  const double gamma = 1.5;
  const DriftFn ref = aug.reference_fn();
  RolloutOptions ro;
  ro.base = &ref;
  const auto batch = rollout(aug.drift_fn(), world.schedule(), world.grid(), {}, 1, {0, 1, 1, 0, 1},
                             {0, 3, 1, 2, 2}, 31, ro);
  const BpttResult g = bptt_through_rollout(aug, batch, label_reward(oracle, gamma));

  // Independent objective: re-integrate the frozen noise with perturbed parameters.
  auto objective = [&](const Vector& p) {
    pv.scatter(p);
    const TrajectoryBatch b = replay(aug.drift_fn(), world.schedule(), batch, &ref);
    Vector lp;
    oracle.log_prob(b.terminal, b.contexts, b.labels, lp);
    return (gamma * lp - b.path_kl()).mean();
  };
  const double h = 1e-6;
  Vector fd(start.size());
  Vector p = start;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    if (lr[i] == 0.0) {
      fd[i] = 0.0;  // frozen NULL rows carry no gradient
      continue;
    }
    p[i] = start[i] + h;
    const double up = objective(p);
    p[i] = start[i] - h;
    const double down = objective(p);
    p[i] = start[i];
    fd[i] = (up - down) / (2 * h);
  }
  pv.scatter(start);
  const double scale = std::max({g.gradient.cwiseAbs().maxCoeff(), fd.cwiseAbs().maxCoeff(), 1e-8});
  const double err = (g.gradient - fd).cwiseAbs().maxCoeff() / scale;
  return {err <= 1e-4, std::to_string(start.size()) + " parameters, max relative error " + fmt("%.3g", err)};
}

Outcome doob_tv() {
  const auto world = make_world_w1();
  const int n = 200000;
  double worst = 0.0;
  std::string detail;
  for (int c = 0; c < world.num_contexts(); ++c)
    for (int y = 0; y < world.num_labels(); ++y) {
      const Matrix s = sample_doob(world, c, y, 1.0, n, derive_seed(101, "doob", static_cast<std::uint64_t>(c * 4 + y)));
      const double tv = tv_distance(s, target_density(world, c, y, 1.0), 100);
      worst = std::max(worst, tv);
      detail += " c" + std::to_string(c) + "y" + std::to_string(y) + "=" + fmt("%.4f", tv);
    }
  return {worst <= 0.03, "max TV " + fmt("%.4f", worst) + ";" + detail};
}

Outcome theorem_endpoint(Runs& runs) {
  const fs::path& dir = runs.get("w1-gamma1");
  const auto world = DiffusionWorld::from_json(json::parse(read_file(dir / "world.json")));
  const auto ctrl = load_samples_csv(dir / "samples_ctrl.csv", 1);
  const auto pre = load_samples_csv(dir / "samples_pretrained.csv", 1);
  double worst = 0.0;
  int rare_c = 0, rare_y = 0;
  double rare_mass = 2.0;
  std::string detail;
  std::map<std::pair<int, int>, double> tv;
  for (int c = 0; c < world.num_contexts(); ++c)
    for (int y = 0; y < world.num_labels(); ++y) {
      const TargetDensity target = target_density(world, c, y, 1.0);
      if (target.normalizer < rare_mass) {
        rare_mass = target.normalizer;
        rare_c = c;
        rare_y = y;
      }
      const double d = tv_distance(samples_for(ctrl, c, y), target, 100);
      tv[{c, y}] = d;
      worst = std::max(worst, d);
      detail += " c" + std::to_string(c) + "y" + std::to_string(y) + "=" + fmt("%.4f", d);
    }
  const double pre_tv = tv_distance(samples_for(pre, rare_c, rare_y), target_density(world, rare_c, rare_y, 1.0), 100);
  const double rare_tv = tv[{rare_c, rare_y}];
  const bool ok = worst <= 0.08 && rare_tv < pre_tv;
  return {ok, "max TV " + fmt("%.4f", worst) + " (<= 0.08); rarest c" + std::to_string(rare_c) + "y" +
                  std::to_string(rare_y) + " CTRL " + fmt("%.4f", rare_tv) + " vs pre-trained " + fmt("%.4f", pre_tv) +
                  ";" + detail};
}

Outcome feynman_kac() {
  const auto world = make_world_w1();
  const double T = world.grid().horizon();
  struct Probe {
    double t, x;
    int c, y;
    double gamma;
  };
  const std::vector<Probe> probes{{0.5, 0.3, 0, 3, 1.0}, {1.5, -1.0, 1, 0, 1.0}, {2.5, 0.0, 0, 1, 2.0},
                                  {3.5, 1.2, 1, 2, 1.0}, {4.2, -0.4, 1, 1, 3.0}, {4.8, 1.6, 0, 3, 1.0}};
  const int n = 40000;
  bool ok = true;
  std::string detail;
  int k = 0;
  for (const auto& p : probes) {
    const DoobGuide guide(world, p.c, p.y, p.gamma);
    const double exact = std::exp(guide.log_value(p.t, Vector::Constant(1, p.x)));
    // Sub-rollouts of the pre-trained SDE from the Dirac at x, on a fine grid over [t, T].
    const double t0 = p.t;
    const DriftFn shifted = [&](const DriftQuery& q, const Matrix& x, Matrix& out) {
      DriftQuery qq = q;
      qq.t = q.t + t0;
      world.pretrained_drift(qq, x, out);
    };
    const int steps = std::max(64, static_cast<int>(std::ceil((T - t0) * 400)));
    RolloutOptions ro;
    ro.record = false;
    const auto batch = rollout(shifted, world.schedule(), TimeGrid(T - t0, steps),
                               InitialLaw::dirac(Vector::Constant(1, p.x)), 1, std::vector<int>(n, p.c),
                               std::vector<int>(n, p.y), derive_seed(55, "fk", static_cast<std::uint64_t>(k++)), ro);
    Vector v(n);
    for (int i = 0; i < n; ++i)
      v[i] = std::exp(p.gamma * world.oracle().log_prob(batch.terminal.col(i), p.c, p.y));
    const MeanSe m = mean_se(v);
    const double z = (m.mean - exact) / m.se;
    ok = ok && std::abs(z) <= 3.0;
    detail += " (t=" + fmt("%g", p.t) + ",x=" + fmt("%g", p.x) + ") z=" + fmt("%+.2f", z);
  }
  return {ok, "MC vs quadrature in standard errors:" + detail};
}

Outcome gamma_zero() {
  const auto world = make_world_w1();
  AugmentedDrift aug(world);
  OracleLikelihood oracle(world.oracle(), 1);
  const DriftFn ref = aug.reference_fn();
  RolloutOptions ro;
  ro.base = &ref;
  const auto batch = rollout(aug.drift_fn(), world.schedule(), world.grid(), {}, 1, {0, 1, 0, 1, 0, 1, 0, 1},
                             {0, 0, 1, 1, 2, 2, 3, 3}, 8, ro);
  const double norm = bptt_through_rollout(aug, batch, label_reward(oracle, 0.0)).gradient.norm();
  return {norm <= 1e-8, "gradient norm " + fmt("%.3g", norm)};
}

EvalReport ctrl_report(const fs::path& dir, int dim, const std::string& method = "ctrl") {
  const auto world = DiffusionWorld::from_json(json::parse(read_file(dir / "world.json")));
  return classification_report(world, load_samples_csv(dir / ("samples_" + method + ".csv"), dim));
}

Outcome accuracy_w1(Runs& runs) {
  const EvalReport r = ctrl_report(runs.get("w1-methods"), 1);
  double worst = 1.0;
  std::string detail;
  for (const auto& row : r.rows) {
    worst = std::min(worst, row.accuracy);
    detail += " c" + std::to_string(row.context) + "y" + std::to_string(row.label) + "=" + fmt("%.3f", row.accuracy);
  }
  const bool ok = !r.incomplete && worst >= 0.90 && r.macro_f1 >= 0.90;
  return {ok, "min accuracy " + fmt("%.3f", worst) + ", macro F1 " + fmt("%.3f", r.macro_f1) + ";" + detail};
}

Outcome factored_w2(Runs& runs) {
  const fs::path& dir = runs.get("w2-factored");
  const EvalReport r = ctrl_report(dir, 2);
  double worst = 1.0;
  std::string detail;
  for (const auto& row : r.rows) {
    worst = std::min(worst, row.accuracy);
    detail += " y" + std::to_string(row.label) + "=" + fmt("%.3f", row.accuracy);
  }
  const bool all_four = r.rows.size() == 4;

  // log p(y1, y2 | x, c) against the sum of per-axis terms, for the oracle and the trained classifier.
  const auto world = DiffusionWorld::from_json(json::parse(read_file(dir / "world.json")));
  const FactoredClassifier fc(load_models(dir));
  RngStream rng(9, 0);
  double gap = 0.0;
  for (int i = 0; i < 200; ++i) {
    Vector x(2);
    x << 2.5 * rng.normal(), 2.5 * rng.normal();
    for (int y = 0; y < world.num_labels(); ++y) {
      const auto per = world.oracle().decode(y);
      double sum = 0.0;
      for (int a = 0; a < world.oracle().axes(); ++a)
        sum += world.oracle().axis(a).log_prob(x[world.oracle().axis(a).coordinate], 0, per[static_cast<std::size_t>(a)]);
      gap = std::max(gap, std::abs(world.oracle().log_prob(x, 0, y) - sum));

      const auto fper = fc.decode(y);
      double fsum = 0.0;
      for (int a = 0; a < fc.axes(); ++a) fsum += fc.model(a).log_prob(x, 0, fper[static_cast<std::size_t>(a)]);
      Vector joint;
      const std::vector<int> ctx{0}, lab{y};
      fc.log_prob(Matrix(x), ctx, lab, joint);
      gap = std::max(gap, std::abs(joint[0] - fsum));
    }
  }
  const bool ok = all_four && !r.incomplete && worst >= 0.85 && gap <= 1e-12;
  return {ok, "min joint accuracy " + fmt("%.3f", worst) + ", factorization gap " + fmt("%.2g", gap) + ";" + detail};
}

Outcome ordering(Runs& runs) {
  const fs::path& dir = runs.get("w1-methods");
  const double ctrl = ctrl_report(dir, 1).accuracy;
  bool ok = true;
  std::string detail = "CTRL " + fmt("%.3f", ctrl);
  for (const char* m : {"classifier_free", "reconstruction", "smc", "best_of_n"}) {
    const double a = ctrl_report(dir, 1, m).accuracy;
    ok = ok && ctrl >= a;
    detail += ", " + method_label(m) + " " + fmt("%.3f", a);
  }
  // Reference only: the exact sampler of p_gamma.
  if (fs::exists(dir / "samples_doob.csv"))
    detail += "; reference Doob-exact " + fmt("%.3f", ctrl_report(dir, 1, "doob").accuracy);
  return {ok, detail};
}

Outcome mixing(Runs& runs) {
  const fs::path& dir = runs.get("w1-methods");
  const ExperimentConfig cfg = ExperimentConfig::load(dir / "config.json");
  const auto world = DiffusionWorld::from_json(json::parse(read_file(dir / "world.json")));
  AugmentedDrift aug(world, cfg.finetune.model);
  load_for_sampling(aug, load_checkpoint(dir / "finetune.ckpt"));

  // (1, 1) against g on a grid of (t, x, c, y).
  bool bitwise = true;
  for (int j = 0; j < world.grid().steps(); j += 5)
    for (int c = 0; c < world.num_contexts(); ++c)
      for (int y = 0; y < world.num_labels(); ++y)
        for (double x = -4.0; x <= 4.0; x += 0.25) {
          const std::vector<int> ctx{c}, lab{y};
          const double t = world.grid().time(j);
          Matrix g;
          aug.drift(DriftQuery{j, t, ctx, lab}, Matrix::Constant(1, 1, x), g);
          const Vector m = mixed_guidance_drift(aug, t, Vector::Constant(1, x), c, y, 1.0, 1.0);
          bitwise = bitwise && m[0] == g(0, 0);
        }

  // gamma2 = 2 moves samples further toward y than gamma2 = 1, on common random numbers.
  const int n = 4000;
  bool monotone = true;
  std::string detail;
  for (int c = 0; c < world.num_contexts(); ++c)
    for (int y = 0; y < world.num_labels(); ++y) {
      double mean[2];
      for (int k = 0; k < 2; ++k) {
        RolloutOptions ro;
        ro.record = false;
        const auto b = rollout(mixed_guidance_fn(aug, 1.0, k == 0 ? 1.0 : 2.0), world.schedule(), world.grid(), {}, 1,
                               std::vector<int>(n, c), std::vector<int>(n, y),
                               derive_seed(404, "mix", static_cast<std::uint64_t>(c * 4 + y)), ro);
        double s = 0.0;
        for (int i = 0; i < n; ++i) s += world.oracle().log_prob(b.terminal.col(i), c, y);
        mean[k] = s / n;
      }
      monotone = monotone && mean[1] > mean[0];
      detail += " c" + std::to_string(c) + "y" + std::to_string(y) + " " + fmt("%.3f", mean[0]) + "->" +
                fmt("%.3f", mean[1]);
    }
  return {bitwise && monotone, std::string("(1,1) bitwise ") + (bitwise ? "yes" : "NO") +
                                   "; mean oracle log p at gamma2 = 1 -> 2:" + detail};
}

Outcome calibration(Runs& runs) {
  const fs::path& dir = runs.get("w1-methods");
  const json cal = json::parse(read_file(dir / "calibration.json"));
  const OfflineDataset data = OfflineDataset::load(dir / "dataset.txt");
  const auto models = load_models(dir);
  bool ok = !models.empty();
  std::string detail;
  for (std::size_t i = 0; i < models.size(); ++i) {
    const json& c = cal.at(i);
    const ClassifierModel& m = models[i];
    const LabelledBlock v = labelled_block(data, m, data.validation());
    const Matrix raw = m.logits(v.x, v.contexts);
    const Matrix tempered = m.log_probs(v.x, v.contexts);
    int changed = 0;
    for (Eigen::Index k = 0; k < raw.cols(); ++k) {
      Eigen::Index a, b;
      raw.col(k).maxCoeff(&a);
      tempered.col(k).maxCoeff(&b);
      changed += a != b;
    }
    const double nll_raw = tempered_nll(raw, v.labels, 1.0);
    const double nll_cal = tempered_nll(raw, v.labels, m.temperature());
    const bool has_ece = c.contains("ece_before") && c.contains("ece_after");
    ok = ok && changed == 0 && nll_cal <= nll_raw && has_ece &&
         c.at("nll_after").get<double>() <= c.at("nll_before").get<double>();
    detail += " model " + std::to_string(i) + ": tau " + fmt("%.3f", m.temperature()) + ", arg-max changes " +
              std::to_string(changed) + ", NLL " + fmt("%.4f", nll_raw) + "->" + fmt("%.4f", nll_cal) +
              (has_ece ? ", ECE " + fmt("%.4f", c.at("ece_before").get<double>()) + "->" +
                             fmt("%.4f", c.at("ece_after").get<double>())
                       : ", ECE missing");
  }
  return {ok, detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria of the conditioning laboratory"};
  std::string runs_dir = "acceptance_runs";
  std::string configs_dir = CTRL_LAB_CONFIG_DIR;
  std::vector<int> only;
  app.add_option("--runs", runs_dir, "Directory for the bundled experiment runs");
  app.add_option("--configs", configs_dir, "Directory holding the bundled configs");
  app.add_option("--only", only, "Criteria to run (default: all)")->delimiter(',');
  CLI11_PARSE(app, argc, argv);

  Runs runs(runs_dir, configs_dir);
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"Girsanov identity", girsanov},
      {"BPTT gradient vs finite differences", bptt_gradient},
      {"Doob sampler matches p_gamma (W1, gamma 1)", doob_tv},
      {"CTRL endpoint matches p_gamma (W1, gamma 1)", [&] { return theorem_endpoint(runs); }},
      {"Feynman-Kac value", feynman_kac},
      {"gamma = 0 stationarity", gamma_zero},
      {"CTRL accuracy and macro F1 (W1)", [&] { return accuracy_w1(runs); }},
      {"factored classifier CTRL (W2)", [&] { return factored_w2(runs); }},
      {"method ordering (W1)", [&] { return ordering(runs); }},
      {"guidance mixing identities", [&] { return mixing(runs); }},
      {"temperature calibration", [&] { return calibration(runs); }},
  };
  const std::set<int> selected(only.begin(), only.end());
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << id << ". " << criteria[i].first << " [" << fmt("%.1f", secs)
              << " s]: " << o.detail << std::endl;
  }
  std::cout << (failed ? std::to_string(failed) + " criteria failed" : std::string("all criteria passed")) << std::endl;
  return failed ? 1 : 0;
}
