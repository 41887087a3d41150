#include "ctrl/guidance.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace ctrl {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_sum_exp(std::span<const double> v) {
  const double mx = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (double e : v) s += std::exp(e - mx);
  return mx + std::log(s);
}

// Physicists' Gauss–Hermite rule by Golub–Welsch; weights are normalized to sum to one,
// so sum_i w_i F(m + sqrt(2) s xi_i) approximates E[F(z)], z ~ N(m, s^2).
void gauss_hermite(int n, std::vector<double>& nodes, std::vector<double>& log_weights) {
  Matrix jacobi = Matrix::Zero(n, n);
  for (int k = 1; k < n; ++k) jacobi(k, k - 1) = jacobi(k - 1, k) = std::sqrt(0.5 * k);
  Eigen::SelfAdjointEigenSolver<Matrix> eig(jacobi);
  nodes.resize(static_cast<std::size_t>(n));
  log_weights.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    nodes[static_cast<std::size_t>(i)] = eig.eigenvalues()[i];
    const double v0 = eig.eigenvectors()(0, i);
    log_weights[static_cast<std::size_t>(i)] = 2.0 * std::log(std::abs(v0));
  }
  const double lse = log_sum_exp(log_weights);
  for (double& w : log_weights) w -= lse;
}

// Cubic Hermite interpolation on [x_i, x_i + h] at fraction u, with value and slope.
void hermite(double f0, double f1, double d0, double d1, double h, double u, double& f, double& df) {
  const double u2 = u * u, u3 = u2 * u;
  f = (2 * u3 - 3 * u2 + 1) * f0 + (u3 - 2 * u2 + u) * h * d0 + (-2 * u3 + 3 * u2) * f1 + (u3 - u2) * h * d1;
  df = ((6 * u2 - 6 * u) * f0 + (3 * u2 - 4 * u + 1) * h * d0 + (-6 * u2 + 6 * u) * f1 + (3 * u2 - 2 * u) * h * d1) / h;
}

std::string point_string(double t, const Vector& x) {
  std::ostringstream os;
  os.precision(17);
  os << "t = " << t << ", x = (";
  for (Eigen::Index i = 0; i < x.size(); ++i) os << (i ? ", " : "") << x[i];
  os << ")";
  return os.str();
}

void check_condition(const DiffusionWorld& world, int context, int label) {
  if (context < 0 || context > world.null_context()) throw ContractViolation("context out of range");
  if (label < 0 || label >= world.num_labels()) throw ContractViolation("label out of range");
}

}  // namespace

DoobGuide::DoobGuide(const DiffusionWorld& world, int context, int label, double gamma,
                     const LabelLikelihood* classifier, DoobOptions options)
    : world_(&world), context_(context), label_(label), gamma_(gamma), classifier_(classifier), options_(options) {
  check_condition(world, context, label);
  if (!std::isfinite(gamma) || gamma < 0.0) throw ConfigError("guidance strength must be finite and >= 0");
  if (options_.nodes < 2) throw ConfigError("need at least 2 Gauss-Hermite nodes");
  if (options_.table_points < 2) throw ConfigError("need at least 2 table points");
  if (classifier_) {
    if (world.dim() != 1) throw ConfigError("classifier-based Doob guidance needs a 1-D state");
    if (classifier_->num_labels() != world.num_labels()) throw ConfigError("classifier label count mismatch");
    axes_.push_back({0, -1});
    axis_labels_.push_back(label);
  } else {
    const LabelOracle& oracle = world.oracle();
    const auto per_axis = oracle.decode(label);
    std::vector<bool> used(static_cast<std::size_t>(world.dim()), false);
    for (int a = 0; a < oracle.axes(); ++a) {
      const int coord = oracle.axis(a).coordinate;
      if (used[static_cast<std::size_t>(coord)])
        throw ConfigError("Doob guidance needs label axes on distinct coordinates");
      used[static_cast<std::size_t>(coord)] = true;
      axes_.push_back({coord, a});
      axis_labels_.push_back(per_axis[static_cast<std::size_t>(a)]);
    }
  }
  gauss_hermite(options_.nodes, gh_nodes_, gh_log_weights_);

  const MixtureLaw& prior = world.data_law(context);
  table_lo_ = std::numeric_limits<double>::infinity();
  table_hi_ = -table_lo_;
  for (const Vector& mu : prior.means) {
    table_lo_ = std::min(table_lo_, mu.minCoeff() - 10.0);
    table_hi_ = std::max(table_hi_, mu.maxCoeff() + 10.0);
  }
}

void DoobGuide::build_likelihood_grid() const {
  if (!lik_.empty()) return;
  double smax = 0.0;
  for (double s : world_->data_law(context_).stds) smax = std::max(smax, s);
  const double reach = std::sqrt(2.0) * smax * std::abs(gh_nodes_.back()) + 1.0;
  lik_lo_ = table_lo_ - reach;
  lik_step_ = 2e-3;
  const int n = static_cast<int>(std::ceil((table_hi_ + reach - lik_lo_) / lik_step_)) + 1;
  Matrix z(1, n);
  for (int i = 0; i < n; ++i) z(0, i) = lik_lo_ + i * lik_step_;
  const std::vector<int> c(static_cast<std::size_t>(n), context_), y(static_cast<std::size_t>(n), label_);
  Vector out;
  Matrix g;
  classifier_->log_prob(z, c, y, out, &g);
  lik_.assign(out.data(), out.data() + n);
  dlik_.assign(g.data(), g.data() + n);
}

void DoobGuide::axis_loglik(int axis, std::span<const double> z, bool interpolated, std::span<double> lp,
                            std::span<double> dlp) const {
  const Axis& ax = axes_[static_cast<std::size_t>(axis)];
  const int k = axis_labels_[static_cast<std::size_t>(axis)];
  if (ax.index >= 0) {
    const LabelAxis& la = world_->oracle().axis(ax.index);
    for (std::size_t i = 0; i < z.size(); ++i) lp[i] = la.log_prob(z[i], context_, k, &dlp[i]);
    return;
  }
  std::vector<std::size_t> direct;
  if (interpolated) {
    build_likelihood_grid();
    const int n = static_cast<int>(lik_.size());
    for (std::size_t i = 0; i < z.size(); ++i) {
      const double pos = (z[i] - lik_lo_) / lik_step_;
      const int cell = static_cast<int>(std::floor(pos));
      if (cell < 0 || cell >= n - 1) {
        direct.push_back(i);
        continue;
      }
      const auto c = static_cast<std::size_t>(cell);
      hermite(lik_[c], lik_[c + 1], dlik_[c], dlik_[c + 1], lik_step_, pos - cell, lp[i], dlp[i]);
    }
  } else {
    direct.resize(z.size());
    std::iota(direct.begin(), direct.end(), std::size_t{0});
  }
  if (direct.empty()) return;
  const int m = static_cast<int>(direct.size());
  Matrix zz(1, m);
  for (int i = 0; i < m; ++i) zz(0, i) = z[direct[static_cast<std::size_t>(i)]];
  const std::vector<int> c(static_cast<std::size_t>(m), context_), y(static_cast<std::size_t>(m), k);
  Vector out;
  Matrix g;
  classifier_->log_prob(zz, c, y, out, &g);
  for (int i = 0; i < m; ++i) {
    lp[direct[static_cast<std::size_t>(i)]] = out[i];
    dlp[direct[static_cast<std::size_t>(i)]] = g(0, i);
  }
}

void DoobGuide::axis_integral(int axis, double m, double s, bool interpolated, double& logi, double& dlogi) const {
  if (gamma_ == 0.0) {
    logi = dlogi = 0.0;
    return;
  }
  const std::size_t n = gh_nodes_.size();
  std::vector<double> z(n), lp(n), dlp(n), terms(n);
  const double scale = std::sqrt(2.0) * s;
  for (std::size_t i = 0; i < n; ++i) z[i] = m + scale * gh_nodes_[i];
  axis_loglik(axis, z, interpolated, lp, dlp);
  for (std::size_t i = 0; i < n; ++i) terms[i] = gh_log_weights_[i] + gamma_ * lp[i];
  logi = log_sum_exp(terms);
  dlogi = 0.0;
  for (std::size_t i = 0; i < n; ++i) dlogi += std::exp(terms[i] - logi) * gamma_ * dlp[i];
}

void DoobGuide::build_table(int step) const {
  if (tables_.empty()) tables_.resize(static_cast<std::size_t>(world_->grid().steps()));
  auto& slot = tables_[static_cast<std::size_t>(step)];
  if (slot) return;
  const MixtureLaw& prior = world_->data_law(context_);
  const double tau = std::max(0.0, world_->grid().horizon() - world_->grid().time(step));
  const double a = DiffusionWorld::signal_scale(tau);
  const double v = DiffusionWorld::noise_variance(tau);
  const int axes = static_cast<int>(axes_.size());
  const int points = options_.table_points;
  const double h = (table_hi_ - table_lo_) / (points - 1);
  auto table = std::make_unique<StepTable>();
  table->logi.resize(static_cast<std::size_t>(prior.components() * axes));
  table->dlogi.resize(table->logi.size());
  for (int k = 0; k < prior.components(); ++k) {
    const double s2 = prior.stds[static_cast<std::size_t>(k)] * prior.stds[static_cast<std::size_t>(k)];
    const double sp = std::sqrt(s2 * v / (a * a * s2 + v));
    for (int ax = 0; ax < axes; ++ax) {
      auto& li = table->logi[static_cast<std::size_t>(k * axes + ax)];
      auto& dli = table->dlogi[static_cast<std::size_t>(k * axes + ax)];
      li.resize(static_cast<std::size_t>(points));
      dli.resize(static_cast<std::size_t>(points));
      for (int p = 0; p < points; ++p)
        axis_integral(ax, table_lo_ + p * h, sp, true, li[static_cast<std::size_t>(p)], dli[static_cast<std::size_t>(p)]);
    }
  }
  slot = std::move(table);
}

double DoobGuide::evaluate(double t, const Eigen::Ref<const Vector>& x, Vector* grad, const StepTable* table) const {
  if (x.size() != world_->dim()) throw ContractViolation("state dimension mismatch");
  const MixtureLaw& prior = world_->data_law(context_);
  const int d = world_->dim();
  const int comps = prior.components();
  const int axes = static_cast<int>(axes_.size());
  const double tau = std::max(0.0, world_->grid().horizon() - t);
  const double a = DiffusionWorld::signal_scale(tau);
  const double v = DiffusionWorld::noise_variance(tau);
  const double h = (table_hi_ - table_lo_) / (options_.table_points - 1);

  // Reused across calls: this runs once per path and step when sampling.
  struct Scratch {
    std::vector<double> log_rho, log_pi, beta;
    Matrix u, dlogi;
    Vector diff, mean;
  };
  thread_local Scratch s;
  auto& log_rho = s.log_rho;
  auto& log_pi = s.log_pi;
  auto& beta = s.beta;
  log_rho.resize(static_cast<std::size_t>(comps));
  log_pi.resize(log_rho.size());
  beta.resize(log_rho.size());
  s.u.resize(d, comps);
  s.dlogi.resize(d, comps);
  s.diff.resize(d);
  s.mean.resize(d);
  for (int k = 0; k < comps; ++k) {
    const auto ks = static_cast<std::size_t>(k);
    const double s2 = prior.stds[ks] * prior.stds[ks];
    const double mk = a * a * s2 + v;
    s.diff.noalias() = x - a * prior.means[ks];
    s.u.col(k) = -s.diff / mk;
    log_rho[ks] = (prior.weights[ks] > 0.0 ? std::log(prior.weights[ks]) : kNegInf) - 0.5 * d * std::log(mk) -
                  0.5 * s.diff.squaredNorm() / mk;
    s.mean.noalias() = (v * prior.means[ks] + a * s2 * x) / mk;
    const double sp = std::sqrt(s2 * v / mk);
    beta[ks] = a * s2 / mk;
    double li = 0.0;
    s.dlogi.col(k).setZero();
    for (int ax = 0; ax < axes; ++ax) {
      const int coord = axes_[static_cast<std::size_t>(ax)].coordinate;
      const double m = s.mean[coord];
      double l = 0.0, dl = 0.0;
      const double pos = (m - table_lo_) / h;
      const int cell = static_cast<int>(std::floor(pos));
      if (table && cell >= 0 && cell < options_.table_points - 1) {
        const auto& tl = table->logi[static_cast<std::size_t>(k * axes + ax)];
        const auto& td = table->dlogi[static_cast<std::size_t>(k * axes + ax)];
        const auto c = static_cast<std::size_t>(cell);
        hermite(tl[c], tl[c + 1], td[c], td[c + 1], h, pos - cell, l, dl);
      } else {
        axis_integral(ax, m, sp, false, l, dl);
      }
      li += l;
      s.dlogi(coord, k) += dl;
    }
    log_pi[ks] = log_rho[ks] + li;
  }
  const double norm_rho = log_sum_exp(log_rho);
  const double norm_pi = log_sum_exp(log_pi);
  const double log_h = norm_pi - norm_rho;
  if (!std::isfinite(log_h)) throw NumericalError("degenerate Doob h-transform at " + point_string(t, x));
  if (grad) {
    grad->setZero(d);
    if (gamma_ == 0.0) return log_h;
    for (int k = 0; k < comps; ++k) {
      const auto ks = static_cast<std::size_t>(k);
      const double pi = std::exp(log_pi[ks] - norm_pi);
      const double rho = std::exp(log_rho[ks] - norm_rho);
      *grad += pi * (s.u.col(k) + beta[ks] * s.dlogi.col(k)) - rho * s.u.col(k);
    }
    if (!grad->allFinite()) throw NumericalError("non-finite Doob gradient at " + point_string(t, x));
  }
  return log_h;
}

double DoobGuide::log_value(double t, const Vector& x) const { return evaluate(t, x, nullptr, nullptr); }

Vector DoobGuide::log_value_gradient(double t, const Vector& x, double* log_value) const {
  Vector g;
  if (!options_.finite_difference) {
    const double lv = evaluate(t, x, &g, nullptr);
    if (log_value) *log_value = lv;
    return g;
  }
  g.resize(x.size());
  Vector xp = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    xp[i] = x[i] + options_.fd_step;
    const double up = evaluate(t, xp, nullptr, nullptr);
    xp[i] = x[i] - options_.fd_step;
    const double dn = evaluate(t, xp, nullptr, nullptr);
    xp[i] = x[i];
    g[i] = (up - dn) / (2.0 * options_.fd_step);
  }
  if (log_value) *log_value = evaluate(t, x, nullptr, nullptr);
  return g;
}

Vector DoobGuide::correction(double t, const Vector& x) const {
  const double sigma = world_->schedule()(t);
  return sigma * sigma * log_value_gradient(t, x);
}

DriftFn DoobGuide::drift_fn() const {
  const int steps = world_->grid().steps();
  if (!options_.finite_difference)
    for (int j = 0; j < steps; ++j) build_table(j);
  return [this, steps](const DriftQuery& q, const Matrix& x, Matrix& out) {
    world_->pretrained_drift(q, x, out);
    const double sigma = world_->schedule()(q.t);
    const bool tabled = !options_.finite_difference && q.step >= 0 && q.step < steps &&
                        q.t == world_->grid().time(q.step);
    const StepTable* table = tabled ? tables_[static_cast<std::size_t>(q.step)].get() : nullptr;
    Vector g;
    for (Eigen::Index k = 0; k < x.cols(); ++k) {
      if (options_.finite_difference) g = log_value_gradient(q.t, x.col(k));
      else evaluate(q.t, x.col(k), &g, table);
      out.col(k) += sigma * sigma * g;
    }
  };
}

double DoobGuide::table_error(int step, const Matrix& points) const {
  if (step < 0 || step >= world_->grid().steps()) throw ContractViolation("table step out of range");
  build_table(step);
  const double t = world_->grid().time(step);
  double err = 0.0;
  Vector gt, gd;
  for (Eigen::Index k = 0; k < points.cols(); ++k) {
    const Vector xk = points.col(k);
    evaluate(t, xk, &gt, tables_[static_cast<std::size_t>(step)].get());
    evaluate(t, xk, &gd, nullptr);
    err = std::max(err, (gt - gd).cwiseAbs().maxCoeff());
  }
  const double sigma = world_->schedule()(t);
  return sigma * sigma * err;
}

Vector doob_drift_exact(const DiffusionWorld& world, double t, const Vector& x, int context, int label, double gamma,
                        const LabelLikelihood* classifier, const DoobOptions& options) {
  return DoobGuide(world, context, label, gamma, classifier, options).correction(t, x);
}

Matrix sample_doob(const DiffusionWorld& world, int context, int label, double gamma, int n, std::uint64_t seed,
                   const LabelLikelihood* classifier, const DoobOptions& options, int workers) {
  const DoobGuide guide(world, context, label, gamma, classifier, options);
  RolloutOptions ro;
  ro.record = false;
  ro.workers = workers;
  return rollout(guide.drift_fn(), world.schedule(), world.grid(), InitialLaw::standard_gaussian(), world.dim(),
                 std::vector<int>(static_cast<std::size_t>(n), context),
                 std::vector<int>(static_cast<std::size_t>(n), label), seed, ro)
      .terminal;
}

Vector reconstruction_drift(const DiffusionWorld& world, const LabelLikelihood& classifier, double t,
                            const Vector& x, int context, int label, double gamma) {
  check_condition(world, context, label);
  Matrix jac;
  const Vector xhat = world.denoised_mean(t, x, context, &jac);
  Vector out;
  Matrix g;
  const int c[1] = {context}, y[1] = {label};
  classifier.log_prob(Matrix(xhat), c, y, out, &g);
  const double sigma = world.schedule()(t);
  return gamma * sigma * sigma * (jac.transpose() * g.col(0));
}

DriftFn reconstruction_drift_fn(const DiffusionWorld& world, const LabelLikelihood& classifier, double gamma) {
  return [&world, &classifier, gamma](const DriftQuery& q, const Matrix& x, Matrix& out) {
    world.pretrained_drift(q, x, out);
    const Eigen::Index m = x.cols();
    Matrix xhat(x.rows(), m);
    std::vector<Matrix> jac(static_cast<std::size_t>(m));
    for (Eigen::Index k = 0; k < m; ++k)
      xhat.col(k) = world.denoised_mean(q.t, x.col(k), q.contexts[static_cast<std::size_t>(k)], &jac[static_cast<std::size_t>(k)]);
    Vector lp;
    Matrix g;
    classifier.log_prob(xhat, q.contexts, q.labels, lp, &g);
    const double sigma = world.schedule()(q.t);
    for (Eigen::Index k = 0; k < m; ++k)
      out.col(k) += gamma * sigma * sigma * (jac[static_cast<std::size_t>(k)].transpose() * g.col(k));
  };
}

std::vector<int> systematic_resample(const Vector& weights, double u) {
  const int n = static_cast<int>(weights.size());
  if (n == 0) throw ContractViolation("systematic resampling needs at least one weight");
  if (!(u >= 0.0 && u < 1.0)) throw ContractViolation("resampling offset must lie in [0, 1)");
  if ((weights.array() < 0.0).any() || std::abs(weights.sum() - 1.0) > 1e-9)
    throw ContractViolation("resampling weights must be nonnegative and sum to one");
  std::vector<int> idx(static_cast<std::size_t>(n));
  double cum = weights[0];
  int j = 0;
  for (int i = 0; i < n; ++i) {
    const double pos = (u + i) / n;
    while (pos >= cum && j < n - 1) cum += weights[++j];
    idx[static_cast<std::size_t>(i)] = j;
  }
  return idx;
}

SmcResult smc_sample(const DiffusionWorld& world, const LabelLikelihood& classifier, int context, int label,
                     double gamma, int particles, std::uint64_t seed, const SmcOptions& options) {
  check_condition(world, context, label);
  if (particles < 1) throw ConfigError("SMC needs at least one particle");
  if (!(options.ess_threshold >= 0.0 && options.ess_threshold <= 1.0))
    throw ConfigError("ESS threshold must lie in [0, 1]");
  const int d = world.dim();
  const int n = particles;
  const TimeGrid& grid = world.grid();
  const double dt = grid.dt(), sqrt_dt = std::sqrt(dt);
  const std::vector<int> ctx(static_cast<std::size_t>(n), context), lab(static_cast<std::size_t>(n), label);

  std::vector<RngStream> rngs;
  rngs.reserve(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) rngs.emplace_back(seed, static_cast<std::uint64_t>(k));
  RngStream resampler(derive_seed(seed, "smc-resample"), 0);

  auto potential = [&](double t, const Matrix& x, Vector& out) {
    Matrix xhat(d, n);
    for (int k = 0; k < n; ++k) xhat.col(k) = world.denoised_mean(t, x.col(k), context);
    classifier.log_prob(xhat, ctx, lab, out);
    out *= gamma;
  };

  Matrix x(d, n);
  for (int k = 0; k < n; ++k)
    for (int i = 0; i < d; ++i) x(i, k) = rngs[static_cast<std::size_t>(k)].normal();

  SmcResult res;
  Vector phi, phi_next;
  potential(grid.time(0), x, phi);
  Vector logw = phi;
  auto normalize = [&](int step) {
    const double mx = logw.maxCoeff();
    if (!std::isfinite(mx))
      throw NumericalError("SMC weights degenerate at step " + std::to_string(step));
    logw.array() -= mx + std::log((logw.array() - mx).exp().sum());
  };
  auto resample = [&]() {
    const auto idx = systematic_resample(logw.array().exp().matrix() / logw.array().exp().sum(), resampler.uniform());
    Matrix xn(d, n);
    Vector pn(n);
    for (int k = 0; k < n; ++k) {
      xn.col(k) = x.col(idx[static_cast<std::size_t>(k)]);
      pn[k] = phi[idx[static_cast<std::size_t>(k)]];
    }
    x = std::move(xn);
    phi = std::move(pn);
    logw.setConstant(-std::log(static_cast<double>(n)));
    ++res.resamples;
  };
  normalize(0);

  Matrix f, z(d, n);
  DriftQuery q;
  q.contexts = ctx;
  q.labels = lab;
  for (int j = 0; j < grid.steps(); ++j) {
    q.step = j;
    q.t = grid.time(j);
    world.pretrained_drift(q, x, f);
    for (int k = 0; k < n; ++k)
      for (int i = 0; i < d; ++i) z(i, k) = rngs[static_cast<std::size_t>(k)].normal() * sqrt_dt;
    const double sigma = world.schedule()(q.t);
    x.noalias() += dt * f;
    x.noalias() += sigma * z;
    potential(grid.time(j + 1), x, phi_next);
    logw += phi_next - phi;
    phi = phi_next;
    normalize(j + 1);
    const double ess = 1.0 / (2.0 * logw).array().exp().sum();
    res.ess.push_back(ess);
    if (j + 1 < grid.steps() && ess < options.ess_threshold * n) resample();
  }
  if (options.final_resample) resample();
  res.samples = std::move(x);
  res.log_weights = std::move(logw);
  return res;
}

Matrix stepwise_best_of_n(const DiffusionWorld& world, const LabelLikelihood& classifier, int context, int label,
                          int candidates, int n, std::uint64_t seed, int workers) {
  check_condition(world, context, label);
  if (candidates < 1) throw ConfigError("best-of-N needs at least one candidate");
  if (n < 1) throw ContractViolation("best-of-N needs at least one path");
  const int d = world.dim();
  const TimeGrid& grid = world.grid();
  const double dt = grid.dt(), sqrt_dt = std::sqrt(dt);
  constexpr int chunk = 256;
  const int chunks = (n + chunk - 1) / chunk;
  const std::vector<int> ctx(static_cast<std::size_t>(chunk), context), lab(static_cast<std::size_t>(chunk), label);
  Matrix terminal(d, n);

  parallel_for(chunks, workers, [&](int ci) {
    const int begin = ci * chunk;
    const int m = std::min(chunk, n - begin);
    std::vector<RngStream> rngs;
    rngs.reserve(static_cast<std::size_t>(m));
    for (int k = 0; k < m; ++k) rngs.emplace_back(seed, static_cast<std::uint64_t>(begin + k));
    Matrix x(d, m);
    for (int k = 0; k < m; ++k)
      for (int i = 0; i < d; ++i) x(i, k) = rngs[static_cast<std::size_t>(k)].normal();

    DriftQuery q;
    q.contexts = std::span<const int>(ctx).first(static_cast<std::size_t>(m));
    q.labels = std::span<const int>(lab).first(static_cast<std::size_t>(m));
    Matrix g, z(d, m), best(d, m), xhat(d, m);
    Vector score, best_score(m);
    for (int j = 0; j < grid.steps(); ++j) {
      q.step = j;
      q.t = grid.time(j);
      world.pretrained_drift(q, x, g);
      const double sigma = world.schedule()(q.t);
      if (candidates == 1) {
        for (int k = 0; k < m; ++k)
          for (int i = 0; i < d; ++i) z(i, k) = rngs[static_cast<std::size_t>(k)].normal() * sqrt_dt;
        x.noalias() += dt * g;
        x.noalias() += sigma * z;
        continue;
      }
      best_score.setConstant(kNegInf);
      const double t_next = grid.time(j + 1);
      for (int c = 0; c < candidates; ++c) {
        for (int k = 0; k < m; ++k)
          for (int i = 0; i < d; ++i) z(i, k) = rngs[static_cast<std::size_t>(k)].normal() * sqrt_dt;
        Matrix cand = x;
        cand.noalias() += dt * g;
        cand.noalias() += sigma * z;
        for (int k = 0; k < m; ++k) xhat.col(k) = world.denoised_mean(t_next, cand.col(k), context);
        classifier.log_prob(xhat, q.contexts, q.labels, score);
        for (int k = 0; k < m; ++k)
          if (c == 0 || score[k] > best_score[k]) {
            best_score[k] = score[k];
            best.col(k) = cand.col(k);
          }
      }
      x = best;
    }
    if (!x.allFinite()) throw NumericalError("best-of-N produced a non-finite state");
    terminal.middleCols(begin, m) = x;
  });
  return terminal;
}

namespace {

void check_null_rows(const AugmentedDrift& aug) {
  const DiffusionWorld& w = aug.world();
  if (aug.null_label() != w.null_label() || aug.null_context() != w.null_context())
    throw ConfigError("guidance mixing needs NULL context and label rows");
}

Matrix lerp(const Matrix& a, const Matrix& b, double s) {
  return a.binaryExpr(b, [s](double u, double v) { return std::lerp(u, v, s); });
}

}  // namespace

DriftFn mixed_guidance_fn(const AugmentedDrift& aug, double gamma1, double gamma2) {
  check_null_rows(aug);
  return [&aug, gamma1, gamma2](const DriftQuery& q, const Matrix& x, Matrix& out) {
    const std::size_t m = q.contexts.size();
    const std::vector<int> null_c(m, aug.null_context()), null_y(m, aug.null_label());
    DriftQuery q0 = q;
    Matrix g_cy, g_c0, g_00;
    aug.drift(q, x, g_cy);
    q0.labels = null_y;
    aug.drift(q0, x, g_c0);
    q0.contexts = null_c;
    aug.drift(q0, x, g_00);
    out = lerp(g_c0, g_cy, gamma2) + (lerp(g_00, g_c0, gamma1) - g_c0);
  };
}

Vector mixed_guidance_drift(const AugmentedDrift& aug, double t, const Vector& x, int context, int label,
                            double gamma1, double gamma2) {
  const DriftFn fn = mixed_guidance_fn(aug, gamma1, gamma2);
  const int c[1] = {context}, y[1] = {label};
  DriftQuery q;
  q.step = -1;
  q.t = t;
  q.contexts = c;
  q.labels = y;
  Matrix out;
  fn(q, Matrix(x), out);
  return out.col(0);
}

ClassifierFreeReport classifier_free_toy_baseline(AugmentedDrift& aug, const LabelLikelihood& labeller,
                                                  const ClassifierFreeConfig& config) {
  check_null_rows(aug);
  const DiffusionWorld& world = aug.world();
  if (config.budget < 0 || config.steps < 0) throw ConfigError("classifier-free budget and steps must be >= 0");
  if (config.batch < 1) throw ConfigError("classifier-free batch must be positive");
  if (!(config.tau_min > 0.0 && config.tau_min < world.grid().horizon()))
    throw ConfigError("tau_min must lie in (0, T)");
  ClassifierFreeReport report;
  report.triplets = config.budget;
  if (config.budget == 0 || config.steps == 0) return report;

  const int d = world.dim();
  const int n = config.budget;
  Matrix xs(d, n);
  std::vector<int> cs(static_cast<std::size_t>(n)), ys(static_cast<std::size_t>(n));
  RngStream data_rng(derive_seed(config.seed, "cf-data"), 0);
  for (int i = 0; i < n; ++i) {
    const int c = data_rng.index(world.num_contexts());
    xs.col(i) = world.data_law(c).sample(1, data_rng).col(0);
    const Vector p = labeller.probs(xs.col(i), c);
    double u = data_rng.uniform();
    int y = static_cast<int>(p.size()) - 1;
    for (int k = 0; k < p.size(); ++k) {
      u -= p[k];
      if (u < 0.0) {
        y = k;
        break;
      }
    }
    cs[static_cast<std::size_t>(i)] = c;
    ys[static_cast<std::size_t>(i)] = y;
  }

  ParamVector pv = aug.parameters();
  Vector lr = pv.learning_rates();
  const auto mask = pv.partition_mask();
  for (Eigen::Index i = 0; i < lr.size(); ++i)
    if (mask[static_cast<std::size_t>(i)] == Partition::Theta) lr[i] = 0.0;
  const auto& net_seg = pv.segment("correction");
  lr.segment(net_seg.offset, net_seg.values->size()).setConstant(config.optimizer.learning_rate);
  AdamW opt(pv.size(), config.optimizer);
  opt.set_learning_rates(lr);
  Vector flat = pv.gather();

  RngStream rng(derive_seed(config.seed, "cf-train"), 0);
  const int b = config.batch;
  const double T = world.grid().horizon();
  std::vector<int> bc(static_cast<std::size_t>(b)), by(static_cast<std::size_t>(b));
  Matrix z(d, b), target(d, b), f;
  report.loss.reserve(static_cast<std::size_t>(config.steps));
  for (int step = 0; step < config.steps; ++step) {
    const double tau = config.tau_min + (T - config.tau_min) * rng.uniform();
    const double a = DiffusionWorld::signal_scale(tau);
    const double var = DiffusionWorld::noise_variance(tau);
    const double sd = std::sqrt(var);
    for (int k = 0; k < b; ++k) {
      const int i = rng.index(n);
      bc[static_cast<std::size_t>(k)] = cs[static_cast<std::size_t>(i)];
      by[static_cast<std::size_t>(k)] = ys[static_cast<std::size_t>(i)];
      for (int r = 0; r < d; ++r) {
        const double eps = rng.normal();
        z(r, k) = a * xs(r, i) + sd * eps;
        target(r, k) = -eps / sd;
      }
    }
    DriftQuery q;
    q.step = -1;
    q.t = T - tau;
    q.contexts = bc;
    q.labels = by;
    const double sigma = world.schedule()(q.t);
    const double s2 = sigma * sigma;
    world.pretrained_drift(q, z, f);
    Mlp::Tape tape;
    const Matrix h = aug.correction(q, z, tape);
    const Matrix resid = f - 0.5 * z + h / s2 - target;
    report.loss.push_back(var * resid.squaredNorm() / b);
    if (!std::isfinite(report.loss.back()))
      throw NumericalError("classifier-free regression loss is not finite at step " + std::to_string(step));
    Vector grad = Vector::Zero(pv.size());
    aug.correction_backward(q, tape, (2.0 * var / (b * s2)) * resid, grad);
    opt.step(flat, grad);
    pv.scatter(flat);
  }
  return report;
}

}  // namespace ctrl
