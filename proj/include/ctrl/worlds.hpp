#pragma once

// Analytically tractable pre-trained diffusions. Each context selects an isotropic
// Gaussian mixture data law; the forward process is variance preserving
//   dz = -z/2 dt + dw,   z_tau = e^{-tau/2} z_0 + sqrt(1 - e^{-tau}) eps,
// so every forward marginal is again a Gaussian mixture and the pre-trained
// reverse drift f(t, c, x) = x/2 + grad log q_{T-t}(x | c) is exact.
//
// Time conventions: `tau` is forward (noising) time; `t` is sampler time, with
// sampler state x_t distributed as z_{T-t}.

#include "ctrl/neural.hpp"
#include "ctrl/sde.hpp"

#include <nlohmann/json.hpp>

#include <span>
#include <string>
#include <vector>

namespace ctrl {

struct MixtureLaw {
  std::vector<double> weights;
  std::vector<Vector> means;
  std::vector<double> stds;

  int dim() const { return means.empty() ? 0 : static_cast<int>(means.front().size()); }
  int components() const { return static_cast<int>(weights.size()); }

  /// Weights nonnegative and summing to 1 within 1e-12, positive stds, consistent dims.
  void validate() const;

  double log_density(const Vector& x) const;
  Vector score(const Vector& x) const;
  Matrix score_hessian(const Vector& x) const;
  Vector responsibilities(const Vector& x) const;
  Vector mean() const;
  /// d x n samples.
  Matrix sample(int n, RngStream& rng) const;
  /// Law of z_tau when z_0 follows this law under the VP forward process.
  MixtureLaw vp_marginal(double tau) const;
};

/// One label axis: ordinal tempered softmax over bins of the feature s(x) = x[coordinate].
/// logit_k = sharpness * sum_{j<k} (s - b_j - shift_c). Adjacent classes tie exactly at
/// the (shifted) boundaries, so the arg-max recovers hard binning while log p stays finite.
struct LabelAxis {
  int coordinate = 0;
  std::vector<double> boundaries;
  double sharpness = 4.0;
  /// Per-context boundary shift; empty means p(y | x, c) = p(y | x).
  std::vector<double> context_shift;

  int classes() const { return static_cast<int>(boundaries.size()) + 1; }
  double shift(int context) const;
  void log_probs(double s, int context, std::span<double> out) const;
  /// log p(k | s, c); optionally d/ds.
  double log_prob(double s, int context, int k, double* dlogp_ds = nullptr) const;
  int hard_label(double s, int context) const;
};

/// Product of label axes, p(y_1..y_m | x, c) = prod_a p_a(y_a | x, c); the joint label
/// is the mixed-radix index with the first axis most significant.
class LabelOracle {
 public:
  LabelOracle() = default;
  explicit LabelOracle(std::vector<LabelAxis> axes);

  int axes() const { return static_cast<int>(axes_.size()); }
  const LabelAxis& axis(int a) const { return axes_.at(static_cast<std::size_t>(a)); }
  int classes() const { return classes_; }
  bool context_independent() const;

  std::vector<int> decode(int joint) const;
  int encode(std::span<const int> per_axis) const;

  double log_prob(const Vector& x, int context, int label, Vector* grad = nullptr) const;
  Vector probs(const Vector& x, int context) const;
  int hard_label(const Vector& x, int context) const;

 private:
  std::vector<LabelAxis> axes_;
  int classes_ = 1;
};

class DiffusionWorld {
 public:
  DiffusionWorld(std::string name, std::vector<MixtureLaw> laws, LabelOracle oracle, TimeGrid grid);

  const std::string& name() const { return name_; }
  int dim() const { return dim_; }
  int num_contexts() const { return static_cast<int>(laws_.size()); }
  int null_context() const { return num_contexts(); }
  int num_labels() const { return oracle_.classes(); }
  int null_label() const { return num_labels(); }
  const TimeGrid& grid() const { return grid_; }
  NoiseSchedule schedule() const { return NoiseSchedule::constant(1.0); }
  const LabelOracle& oracle() const { return oracle_; }

  static double signal_scale(double tau) { return std::exp(-0.5 * tau); }
  static double noise_variance(double tau) { return -std::expm1(-tau); }

  /// Data law of a context; null_context() gives the uniform mixture over contexts.
  const MixtureLaw& data_law(int context) const;
  MixtureLaw marginal(double tau, int context) const;
  Vector score(double tau, const Vector& x, int context) const;
  /// Exact mixture posterior of z_0 given z_{T-t} = x.
  MixtureLaw posterior_x0(double t, const Vector& x, int context) const;
  /// E[z_0 | z_{T-t} = x]; optional Jacobian d mean / dx.
  Vector denoised_mean(double t, const Vector& x, int context, Matrix* jacobian = nullptr) const;

  Vector pretrained_drift(double t, const Vector& x, int context) const;
  /// Batched drift; column k uses q.contexts[k].
  void pretrained_drift(const DriftQuery& q, const Matrix& x, Matrix& out) const;
  /// out = J^T a per column, J = d f / d x.
  void pretrained_drift_vjp(const DriftQuery& q, const Matrix& x, const Matrix& a, Matrix& out) const;
  DriftFn pretrained_drift_fn() const;

  /// Samples of the closed-form terminal law p^pre(. | c).
  Matrix sample_pretrained(int context, int n, std::uint64_t seed) const;

  nlohmann::json to_json() const;
  static DiffusionWorld from_json(const nlohmann::json& j);

 private:
  std::string name_;
  int dim_;
  std::vector<MixtureLaw> laws_;
  MixtureLaw unconditional_;
  LabelOracle oracle_;
  TimeGrid grid_;
};

/// 1-D, two contexts of two modes each, four ordinal labels on s(x) = x with
/// boundaries {-1.5, 0, 1.5}, sharpness 4.
DiffusionWorld make_world_w1(int steps = 256, double horizon = 5.0);
/// 2-D, one context of four modes at (+-1.5, +-1.5) with unequal weights, two binary
/// labels on the signs of x_1 and x_2.
DiffusionWorld make_world_w2(int steps = 256, double horizon = 5.0);
DiffusionWorld make_world(const std::string& preset, int steps, double horizon);

/// Score model s(tau, x, c) = [analytic score] + net(tau/T, x, onehot(c)). With the
/// analytic prior the residual net starts at zero, so the model starts exact.
class ScoreNet {
 public:
  ScoreNet(const DiffusionWorld& world, std::vector<int> hidden, std::uint64_t seed,
           bool analytic_prior = false);

  Matrix evaluate(double tau, const Matrix& x, std::span<const int> contexts,
                  Mlp::Tape* tape = nullptr) const;
  /// Accumulates parameter gradients and returns d/dx of <d_out, s>.
  Matrix backward(double tau, const Matrix& x, std::span<const int> contexts, const Mlp::Tape& tape,
                  const Matrix& d_out, Eigen::Ref<Vector> grad) const;

  Mlp& net() { return net_; }
  const Mlp& net() const { return net_; }
  const DiffusionWorld& world() const { return *world_; }
  bool analytic_prior() const { return analytic_prior_; }

 private:
  Matrix inputs(double tau, const Matrix& x, std::span<const int> contexts) const;

  const DiffusionWorld* world_;
  Mlp net_;
  bool analytic_prior_;
};

struct DenoisingConfig {
  int steps = 20000;
  int batch = 128;
  double tau_min = 1e-3;
  AdamWConfig optimizer{1e-3, 0.9, 0.999, 1e-8, 0.0};
  /// lambda(tau); defaults to 1 - e^{-tau}.
  std::function<double(double)> weighting;
  std::uint64_t seed = 1;
};

struct DenoisingReport {
  std::vector<double> loss;
  double grid_error_before = 0.0;
  double grid_error_after = 0.0;
};

/// Mean |s(tau, x, c) - grad log q_tau(x | c)| over tau in {0.1, 0.5, 1, 2, 4} (clipped to T),
/// every context and 41 points spanning the data range.
double score_grid_error(const ScoreNet& model);

/// Denoising score matching: minimize E[lambda(tau) |s(tau, z_tau) - grad log q(z_tau | z_0)|^2].
DenoisingReport fit_score_by_denoising(const DiffusionWorld& world, ScoreNet& model,
                                       const DenoisingConfig& config);

}  // namespace ctrl
