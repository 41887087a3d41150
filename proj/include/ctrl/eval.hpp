#pragma once

// Ground-truth tilted targets p_gamma(x | c, y) ∝ p(y | x, c)^gamma p^pre(x | c) on
// quadrature grids, distances from samples to those targets, and the
// classification-style report (accuracy, macro F1, confusion matrix).

#include "ctrl/classifier.hpp"
#include "ctrl/worlds.hpp"

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace ctrl {

struct TargetDensity {
  int context = 0;
  int label = 0;
  double gamma = 0.0;
  int dim = 1;
  /// Grid nodes per axis (2048 in 1-D, 256 per axis in 2-D).
  std::vector<Vector> axes;
  /// Normalized density at the nodes; 2-D values are row-major in (axis 0, axis 1).
  Vector density;
  /// C(c, y) = integral of p(y | x, c)^gamma p^pre(x | c).
  double normalizer = 1.0;
  /// p^pre mass outside the grid box.
  double coverage_error = 0.0;
  /// Exact unnormalized p(y | x, c)^gamma p^pre(x | c); divide by normalizer for the density.
  std::function<double(const Vector&)> unnormalized;

  double lower(int axis) const { return axes[static_cast<std::size_t>(axis)][0]; }
  double upper(int axis) const { return axes[static_cast<std::size_t>(axis)][axes[static_cast<std::size_t>(axis)].size() - 1]; }
  /// Exact normalized density.
  double pdf(const Vector& x) const { return unnormalized(x) / normalizer; }
  /// Trapezoid mass of the grid values; 1 minus the (tiny) mass outside the box.
  double grid_mass() const;
  /// Mass of the box [lo, hi] by tensor Simpson quadrature of pdf().
  double box_mass(const Vector& lo, const Vector& hi, int panels = 16) const;
  /// d x n draws from the grid law (piecewise-linear in 1-D, per-cell uniform in 2-D).
  Matrix sample(int n, RngStream& rng) const;
};

/// Quadrature target on means +- 6 stds. `labels` defaults to the world's oracle.
/// ConfigError (widen the grid) if more than 1e-4 of p^pre lies outside.
TargetDensity target_density(const DiffusionWorld& world, int context, int label, double gamma,
                             const LabelLikelihood* labels = nullptr);

/// Total variation on `bins` equal bins per axis over the grid box; samples outside the box
/// count fully. Needs at least 1000 samples.
double tv_distance(const Matrix& samples, const TargetDensity& target, int bins = 100);
/// 1-Wasserstein to the target: exact CDF difference in 1-D, sliced over `directions`
/// seeded directions in 2-D.
double wasserstein1(const Matrix& samples, const TargetDensity& target, int directions = 64,
                    std::uint64_t seed = 0);
/// 1-Wasserstein between two empirical sets (sliced in 2-D).
double wasserstein1(const Matrix& a, const Matrix& b, int directions = 64, std::uint64_t seed = 0);

struct ConditionSamples {
  int context = 0;
  int label = 0;
  Matrix samples;  // d x n
};

struct ConditionRow {
  int context = 0;
  int label = 0;
  int count = 0;
  double accuracy = 0.0;
  double accuracy_se = 0.0;
  double tv = -1.0;  // -1 when not evaluated
  double w1 = -1.0;
  double mean_log_prob = 0.0;
};

struct EvalReport {
  std::string method;
  std::vector<ConditionRow> rows;
  /// confusion(y, k): samples conditioned on y whose hard oracle label is k.
  Eigen::MatrixXi confusion;
  double accuracy = 0.0;
  double accuracy_se = 0.0;
  double macro_f1 = 0.0;
  bool incomplete = false;
  std::vector<std::string> notes;
};

/// Hard-bins every sample by the oracle's arg-max class. A context that appears without all
/// of its labels, or a condition with fewer than `min_samples`, marks the report incomplete.
EvalReport classification_report(const DiffusionWorld& world, const std::vector<ConditionSamples>& samples,
                                  int min_samples = 100);

/// classification_report plus TV / W1 against target_density at `gamma` for every condition.
EvalReport evaluate_samples(const DiffusionWorld& world, const std::vector<ConditionSamples>& samples, double gamma,
                            int bins = 100, std::uint64_t seed = 0);

/// Macro F1 over the classes that have conditioned samples.
double macro_f1(const Eigen::MatrixXi& confusion);

/// method,context,label,count,accuracy,accuracy_se,tv,w1,mean_log_prob
std::string report_csv(const std::vector<EvalReport>& reports);
std::string report_summary(const EvalReport& report);

struct Histogram {
  std::vector<double> centers;
  std::vector<double> sample_density;
  std::vector<double> target_density;
};

/// 1-D histogram of samples and the target's bin-averaged density on its grid box.
Histogram histogram(const Matrix& samples, const TargetDensity& target, int bins = 100);
std::string histogram_csv(const Histogram& h);
/// Static SVG with sample bars and the target curve.
std::string histogram_svg(const Histogram& h, const std::string& title);

}  // namespace ctrl
