#pragma once

// Reference and baseline conditional samplers built on the pre-trained world:
// the exact Doob h-transform, reconstruction guidance, SMC with twisted
// potentials, stepwise best-of-N, guidance-strength mixing, and a
// classifier-free model fitted on synthetic labelled data.

#include "ctrl/classifier.hpp"
#include "ctrl/finetune.hpp"
#include "ctrl/sde.hpp"
#include "ctrl/worlds.hpp"

#include <memory>
#include <vector>

namespace ctrl {

struct DoobOptions {
  int nodes = 64;                 // Gauss–Hermite nodes per coordinate
  bool finite_difference = false; // central differences instead of the analytic gradient
  double fd_step = 1e-5;
  int table_points = 1201;        // per-step interpolation grid for sampling
};

/// h(t, x) = E[p(y | x_T, c)^gamma | x_t = x] under the pre-trained process, evaluated by
/// Gauss–Hermite quadrature over the closed-form posterior mixture of x_T. The label
/// model is the world's oracle, or a learned classifier when the state is 1-D. Sampling
/// tables for a classifier read its log-likelihood from a fine cubic-Hermite grid.
class DoobGuide {
 public:
  DoobGuide(const DiffusionWorld& world, int context, int label, double gamma,
            const LabelLikelihood* classifier = nullptr, DoobOptions options = {});

  int context() const { return context_; }
  int label() const { return label_; }
  double gamma() const { return gamma_; }

  /// log h(t, x); NumericalError naming (t, x) if h is degenerate.
  double log_value(double t, const Vector& x) const;
  /// grad_x log h(t, x).
  Vector log_value_gradient(double t, const Vector& x, double* log_value = nullptr) const;
  /// sigma(t)^2 grad_x log h(t, x).
  Vector correction(double t, const Vector& x) const;

  /// f^pre + correction at the grid times, using per-step interpolation tables.
  DriftFn drift_fn() const;
  /// Largest |table - direct| over the given points at grid step j, for correction values.
  double table_error(int step, const Matrix& points) const;

 private:
  struct Axis {
    int coordinate;
    int index;  // label axis index (oracle) or -1 for a classifier on 1-D states
  };
  struct StepTable {
    std::vector<std::vector<double>> logi;   // [component * axes + axis][point]
    std::vector<std::vector<double>> dlogi;
  };

  // log E[exp(gamma l_a(z))] and its derivative in m, z ~ N(m, s^2), for one axis.
  void axis_integral(int axis, double m, double s, bool interpolated, double& logi, double& dlogi) const;
  void axis_loglik(int axis, std::span<const double> z, bool interpolated, std::span<double> lp,
                   std::span<double> dlp) const;
  void build_table(int step) const;
  void build_likelihood_grid() const;
  double evaluate(double t, const Eigen::Ref<const Vector>& x, Vector* grad, const StepTable* table) const;

  const DiffusionWorld* world_;
  int context_;
  int label_;
  double gamma_;
  const LabelLikelihood* classifier_;
  DoobOptions options_;
  std::vector<Axis> axes_;
  std::vector<int> axis_labels_;
  std::vector<double> gh_nodes_;
  std::vector<double> gh_log_weights_;
  double table_lo_ = 0.0;
  double table_hi_ = 0.0;
  mutable std::vector<std::unique_ptr<StepTable>> tables_;
  mutable std::vector<double> lik_, dlik_;
  mutable double lik_lo_ = 0.0, lik_step_ = 0.0;
};

/// sigma(t)^2 grad_x log E[p(y | x_T, c)^gamma | x_t = x]; oracle labels unless a 1-D classifier is given.
Vector doob_drift_exact(const DiffusionWorld& world, double t, const Vector& x, int context, int label, double gamma,
                        const LabelLikelihood* classifier = nullptr, const DoobOptions& options = {});

/// Terminal samples (d x n) of the pre-trained SDE plus the exact Doob correction.
Matrix sample_doob(const DiffusionWorld& world, int context, int label, double gamma, int n, std::uint64_t seed,
                   const LabelLikelihood* classifier = nullptr, const DoobOptions& options = {}, int workers = 0);

/// gamma sigma(t)^2 J^T grad log p(y | xhat, c), xhat = E[x_T | x_t = x, c], J = d xhat / dx.
Vector reconstruction_drift(const DiffusionWorld& world, const LabelLikelihood& classifier, double t,
                            const Vector& x, int context, int label, double gamma);
/// f^pre + reconstruction_drift, batched over q.contexts / q.labels.
DriftFn reconstruction_drift_fn(const DiffusionWorld& world, const LabelLikelihood& classifier, double gamma);

/// Offspring indices for normalized weights; one uniform u in [0, 1) drives all N positions (u + i) / N.
std::vector<int> systematic_resample(const Vector& weights, double u);

struct SmcOptions {
  double ess_threshold = 0.5;  // resample when ESS < threshold * N
  bool final_resample = true;
};

struct SmcResult {
  Matrix samples;        // d x N
  Vector log_weights;    // normalized, after the final step
  int resamples = 0;
  std::vector<double> ess;
};

/// Particles move under f^pre; potentials are p(y | xhat_j, c)^gamma at the reconstructed
/// terminal state, so the incremental weights telescope to p(y | x_T, c)^gamma.
SmcResult smc_sample(const DiffusionWorld& world, const LabelLikelihood& classifier, int context, int label,
                     double gamma, int particles, std::uint64_t seed, const SmcOptions& options = {});

/// Each step draws M Euler candidates under f^pre and keeps the one maximizing
/// log p(y | xhat_{j+1}, c). M = 1 reproduces pre-trained rollout path for path.
Matrix stepwise_best_of_n(const DiffusionWorld& world, const LabelLikelihood& classifier, int context, int label,
                          int candidates, int n, std::uint64_t seed, int workers = 0);

/// g(0,0) + g1 (g(c,0) - g(0,0)) + g2 (g(c,y) - g(c,0)), with 0 the NULL rows; evaluated as
/// lerp(g(c,0), g(c,y), g2) + (lerp(g(0,0), g(c,0), g1) - g(c,0)) so (1,1) and (1,0) are exact.
Vector mixed_guidance_drift(const AugmentedDrift& aug, double t, const Vector& x, int context, int label,
                            double gamma1, double gamma2);
DriftFn mixed_guidance_fn(const AugmentedDrift& aug, double gamma1, double gamma2);

struct ClassifierFreeConfig {
  int budget = 10000;  // synthetic (c, x, y) triplets
  int steps = 4000;
  int batch = 128;
  double tau_min = 1e-3;
  AdamWConfig optimizer{1e-3, 0.9, 0.999, 1e-8, 0.0};
  std::uint64_t seed = 1;
};

struct ClassifierFreeReport {
  std::vector<double> loss;
  int triplets = 0;
};

/// Fits h so that f^pre + h is the reverse drift of p^pre(x | c) p(y | x, c), by denoising
/// regression on triplets x ~ p^pre(. | c), y ~ p(. | x, c). Sample with mixed_guidance_fn(aug, 1, gamma).
ClassifierFreeReport classifier_free_toy_baseline(AugmentedDrift& aug, const LabelLikelihood& labeller,
                                                  const ClassifierFreeConfig& config);

}  // namespace ctrl
