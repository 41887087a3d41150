#include "ctrl/experiment.hpp"

#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

namespace py = pybind11;
using namespace ctrl;

namespace {

// Samples come back as n x d arrays (one row per draw).
Eigen::MatrixXd rows(const Matrix& m) { return m.transpose(); }
Matrix cols(const Eigen::MatrixXd& m) { return m.transpose(); }

nlohmann::json parse_json(const std::string& text) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(e.what());
  }
}

}  // namespace

PYBIND11_MODULE(ctrl_lab, m) {
  m.doc() = "Conditioning pre-trained toy diffusions by KL-regularized control, with guidance baselines.";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);
  py::register_exception<ContractViolation>(m, "ContractViolation", PyExc_RuntimeError);

  m.def("derive_seed", &derive_seed, py::arg("seed"), py::arg("tag"), py::arg("index") = 0);

  py::class_<DiffusionWorld>(m, "World")
      .def_property_readonly("name", &DiffusionWorld::name)
      .def_property_readonly("dim", &DiffusionWorld::dim)
      .def_property_readonly("num_contexts", &DiffusionWorld::num_contexts)
      .def_property_readonly("num_labels", &DiffusionWorld::num_labels)
      .def_property_readonly("steps", [](const DiffusionWorld& w) { return w.grid().steps(); })
      .def_property_readonly("horizon", [](const DiffusionWorld& w) { return w.grid().horizon(); })
      .def("sample_pretrained",
           [](const DiffusionWorld& w, int c, int n, std::uint64_t seed) { return rows(w.sample_pretrained(c, n, seed)); },
           py::arg("context"), py::arg("n"), py::arg("seed"), "n x d draws of p_pre(x | c).")
      .def("pretrained_drift", py::overload_cast<double, const Vector&, int>(&DiffusionWorld::pretrained_drift, py::const_),
           py::arg("t"), py::arg("x"), py::arg("context"))
      .def("score", &DiffusionWorld::score, py::arg("tau"), py::arg("x"), py::arg("context"))
      .def("log_prob_label",
           [](const DiffusionWorld& w, const Vector& x, int c, int y) { return w.oracle().log_prob(x, c, y); },
           py::arg("x"), py::arg("context"), py::arg("label"), "Oracle log p(y | x, c).")
      .def("hard_label", [](const DiffusionWorld& w, const Vector& x, int c) { return w.oracle().hard_label(x, c); },
           py::arg("x"), py::arg("context"))
      .def("to_json", [](const DiffusionWorld& w) { return w.to_json().dump(); })
      .def_static("from_json", [](const std::string& s) { return DiffusionWorld::from_json(parse_json(s)); });

  m.def("make_world", &make_world, py::arg("preset") = "w1", py::arg("steps") = 256, py::arg("horizon") = 5.0,
        "Preset world: 'w1' (1-D, 4 ordinal labels) or 'w2' (2-D, two binary label axes).");

  m.def(
      "sample_doob",
      [](const DiffusionWorld& w, int c, int y, double gamma, int n, std::uint64_t seed) {
        return rows(sample_doob(w, c, y, gamma, n, seed));
      },
      py::arg("world"), py::arg("context"), py::arg("label"), py::arg("gamma"), py::arg("n"), py::arg("seed"),
      "Exact Doob h-transform samples of p_gamma(x | c, y), n x d.");
  m.def(
      "doob_drift",
      [](const DiffusionWorld& w, double t, const Vector& x, int c, int y, double gamma) {
        return doob_drift_exact(w, t, x, c, y, gamma);
      },
      py::arg("world"), py::arg("t"), py::arg("x"), py::arg("context"), py::arg("label"), py::arg("gamma"));

  py::class_<TargetDensity>(m, "TargetDensity")
      .def_readonly("normalizer", &TargetDensity::normalizer)
      .def_readonly("coverage_error", &TargetDensity::coverage_error)
      .def("pdf", &TargetDensity::pdf)
      .def("grid_mass", &TargetDensity::grid_mass);
  m.def(
      "target_density",
      [](const DiffusionWorld& w, int c, int y, double gamma) { return target_density(w, c, y, gamma); },
      py::arg("world"), py::arg("context"), py::arg("label"), py::arg("gamma"), py::keep_alive<0, 1>());
  m.def(
      "tv_distance", [](const Eigen::MatrixXd& s, const TargetDensity& t, int bins) { return tv_distance(cols(s), t, bins); },
      py::arg("samples"), py::arg("target"), py::arg("bins") = 100);
  m.def(
      "wasserstein1",
      [](const Eigen::MatrixXd& s, const TargetDensity& t) { return wasserstein1(cols(s), t); }, py::arg("samples"),
      py::arg("target"));

  py::class_<FinetuneConfig>(m, "FinetuneConfig")
      .def(py::init<>())
      .def_readwrite("gamma", &FinetuneConfig::gamma)
      .def_readwrite("batch", &FinetuneConfig::batch)
      .def_readwrite("updates", &FinetuneConfig::updates)
      .def_readwrite("truncation_max", &FinetuneConfig::truncation_max)
      .def_readwrite("lr_final_fraction", &FinetuneConfig::lr_final_fraction)
      .def_readwrite("average_decay", &FinetuneConfig::average_decay)
      .def_readwrite("seed", &FinetuneConfig::seed)
      .def_readwrite("workers", &FinetuneConfig::workers);

  py::class_<AugmentedDriftConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("hidden", &AugmentedDriftConfig::hidden)
      .def_readwrite("label_embedding", &AugmentedDriftConfig::label_embedding)
      .def_readwrite("context_embedding", &AugmentedDriftConfig::context_embedding)
      .def_readwrite("embedding_init_std", &AugmentedDriftConfig::embedding_init_std)
      .def_readwrite("net_learning_rate", &AugmentedDriftConfig::net_learning_rate)
      .def_readwrite("embedding_learning_rate", &AugmentedDriftConfig::embedding_learning_rate)
      .def_readwrite("seed", &AugmentedDriftConfig::seed);

  py::class_<AugmentedDrift>(m, "ControlledModel")
      .def(py::init<const DiffusionWorld&, AugmentedDriftConfig>(), py::arg("world"),
           py::arg("config") = AugmentedDriftConfig{}, py::keep_alive<1, 2>())
      .def_property_readonly("parameter_count", &AugmentedDrift::parameter_count)
      .def(
          "sample",
          [](const AugmentedDrift& a, int c, int y, int n, std::uint64_t seed) {
            return rows(sample_augmented(a, c, y, n, seed));
          },
          py::arg("context"), py::arg("label"), py::arg("n"), py::arg("seed"))
      .def(
          "drift",
          [](const AugmentedDrift& a, double t, const Vector& x, int c, int y, double g1, double g2) {
            return mixed_guidance_drift(a, t, x, c, y, g1, g2);
          },
          py::arg("t"), py::arg("x"), py::arg("context"), py::arg("label"), py::arg("gamma1") = 1.0,
          py::arg("gamma2") = 1.0, "Guidance-mixed drift; (1, 1) is the trained drift g.");

  m.def(
      "finetune_with_oracle",
      [](AugmentedDrift& aug, const FinetuneConfig& cfg) {
        OracleLikelihood reward(aug.world().oracle(), aug.world().dim());
        const auto& w = aug.world();
        FinetuneResult r;
        {
          py::gil_scoped_release release;
          r = finetune(aug, reward, ExploratoryDistribution::uniform(w.num_contexts(), w.num_labels()), cfg);
          load_for_sampling(aug, r.final_state);
        }
        py::list log;
        for (const auto& row : r.log)
          log.append(py::dict(py::arg("update") = row.update, py::arg("mean_reward") = row.mean_reward,
                              py::arg("mean_kl") = row.mean_kl, py::arg("grad_norm") = row.grad_norm));
        return log;
      },
      py::arg("model"), py::arg("config"),
      "Fine-tunes against the world's true labels, installs the averaged parameters, and returns the per-update log.");

  py::class_<ExperimentConfig>(m, "ExperimentConfig")
      .def_static("from_json", [](const std::string& s) { return ExperimentConfig::from_json(parse_json(s)); })
      .def_static("load", &ExperimentConfig::load)
      .def("to_json", [](const ExperimentConfig& c) { return c.to_json().dump(); })
      .def("hash", &ExperimentConfig::hash)
      .def_readwrite("seed", &ExperimentConfig::seed);

  py::class_<Experiment>(m, "Experiment")
      .def(py::init<ExperimentConfig, std::filesystem::path>(), py::arg("config"), py::arg("output") = "")
      .def_static("open", &Experiment::open)
      .def_property_readonly("directory", &Experiment::directory)
      .def("plan", &Experiment::plan, py::arg("stages") = std::vector<std::string>{})
      .def(
          "run",
          [](Experiment& e, const std::vector<std::string>& stages) {
            py::gil_scoped_release release;
            e.run(stages);
          },
          py::arg("stages") = std::vector<std::string>{})
      .def("resume",
           [](Experiment& e) {
             py::gil_scoped_release release;
             e.resume();
           })
      .def("manifest", [](const Experiment& e) { return e.manifest().dump(); });

  m.def("compare_runs", &compare_runs, py::arg("runs"));
  m.def("stage_names", &stage_names);
}
