#include "ctrl/worlds.hpp"

#include "ctrl/json_util.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace ctrl {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

double log_sum_exp(std::span<const double> v) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : v) m = std::max(m, x);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

// Per-component constants of an isotropic mixture, laid out for tight per-column loops.
struct MixtureCache {
  int dim = 0;
  int k = 0;
  std::vector<double> log_norm;  // log w - d/2 log(2 pi var)
  std::vector<double> inv_var;
  Matrix means;                  // d x K

  explicit MixtureCache(const MixtureLaw& law) : dim(law.dim()), k(law.components()) {
    log_norm.resize(k);
    inv_var.resize(k);
    means.resize(dim, k);
    for (int i = 0; i < k; ++i) {
      const double var = law.stds[i] * law.stds[i];
      inv_var[i] = 1.0 / var;
      log_norm[i] = (law.weights[i] > 0.0 ? std::log(law.weights[i]) : -std::numeric_limits<double>::infinity()) -
                    0.5 * dim * (kLog2Pi + std::log(var));
      means.col(i) = law.means[i];
    }
  }

  // Responsibilities into r (size K); returns log density.
  double responsibilities(const double* x, double* r) const {
    double m = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < k; ++i) {
      double sq = 0.0;
      for (int d = 0; d < dim; ++d) {
        const double diff = x[d] - means(d, i);
        sq += diff * diff;
      }
      r[i] = log_norm[i] - 0.5 * inv_var[i] * sq;
      m = std::max(m, r[i]);
    }
    double s = 0.0;
    for (int i = 0; i < k; ++i) {
      r[i] = std::exp(r[i] - m);
      s += r[i];
    }
    for (int i = 0; i < k; ++i) r[i] /= s;
    return m + std::log(s);
  }

  // score = sum_i r_i u_i with u_i = -(x - m_i) / var_i.
  void score(const double* x, const double* r, double* out) const {
    for (int d = 0; d < dim; ++d) out[d] = 0.0;
    for (int i = 0; i < k; ++i)
      for (int d = 0; d < dim; ++d) out[d] -= r[i] * inv_var[i] * (x[d] - means(d, i));
  }

  // out += H a, H the Hessian of the log density.
  void hessian_times(const double* x, const double* r, const double* a, double* out) const {
    double ubar_a = 0.0;
    double ubar_stack[8];
    std::vector<double> ubar_heap;
    double* ubar = ubar_stack;
    if (dim > 8) {
      ubar_heap.resize(static_cast<std::size_t>(dim));
      ubar = ubar_heap.data();
    }
    for (int d = 0; d < dim; ++d) ubar[d] = 0.0;
    for (int i = 0; i < k; ++i)
      for (int d = 0; d < dim; ++d) ubar[d] -= r[i] * inv_var[i] * (x[d] - means(d, i));
    for (int d = 0; d < dim; ++d) ubar_a += ubar[d] * a[d];
    for (int i = 0; i < k; ++i) {
      double u_a = 0.0;
      for (int d = 0; d < dim; ++d) u_a -= inv_var[i] * (x[d] - means(d, i)) * a[d];
      for (int d = 0; d < dim; ++d) {
        const double u = -inv_var[i] * (x[d] - means(d, i));
        out[d] += r[i] * (-inv_var[i] * a[d] + u * u_a);
      }
    }
    for (int d = 0; d < dim; ++d) out[d] -= ubar[d] * ubar_a;
  }
};

MixtureLaw mixture_from_json(const nlohmann::json& j) {
  check_keys(j, {"weights", "means", "stds"}, "world.contexts[]");
  MixtureLaw law;
  law.weights = j.at("weights").get<std::vector<double>>();
  for (const auto& m : j.at("means")) {
    auto v = m.get<std::vector<double>>();
    law.means.push_back(Eigen::Map<Vector>(v.data(), static_cast<Eigen::Index>(v.size())));
  }
  law.stds = j.at("stds").get<std::vector<double>>();
  return law;
}

nlohmann::json mixture_to_json(const MixtureLaw& law) {
  nlohmann::json means = nlohmann::json::array();
  for (const auto& m : law.means) means.push_back(std::vector<double>(m.data(), m.data() + m.size()));
  return {{"weights", law.weights}, {"means", means}, {"stds", law.stds}};
}

}  // namespace

// ---------------------------------------------------------------------------
// MixtureLaw

void MixtureLaw::validate() const {
  if (weights.empty()) throw ConfigError("mixture needs at least one component");
  if (means.size() != weights.size() || stds.size() != weights.size())
    throw ConfigError("mixture weights/means/stds have different lengths");
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0)) throw ConfigError("mixture weights must be nonnegative");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-12) throw ConfigError("mixture weights must sum to 1");
  for (double s : stds)
    if (!(s > 0.0) || !std::isfinite(s)) throw ConfigError("mixture stds must be positive");
  for (const auto& m : means)
    if (m.size() != dim() || dim() < 1) throw ConfigError("mixture means have inconsistent dimension");
}

double MixtureLaw::log_density(const Vector& x) const {
  MixtureCache cache(*this);
  std::vector<double> r(components());
  return cache.responsibilities(x.data(), r.data());
}

Vector MixtureLaw::responsibilities(const Vector& x) const {
  MixtureCache cache(*this);
  Vector r(components());
  cache.responsibilities(x.data(), r.data());
  return r;
}

Vector MixtureLaw::score(const Vector& x) const {
  MixtureCache cache(*this);
  std::vector<double> r(components());
  cache.responsibilities(x.data(), r.data());
  Vector out(dim());
  cache.score(x.data(), r.data(), out.data());
  return out;
}

Matrix MixtureLaw::score_hessian(const Vector& x) const {
  MixtureCache cache(*this);
  std::vector<double> r(components());
  cache.responsibilities(x.data(), r.data());
  Matrix h = Matrix::Zero(dim(), dim());
  Vector e = Vector::Zero(dim());
  for (int d = 0; d < dim(); ++d) {
    e.setZero();
    e[d] = 1.0;
    cache.hessian_times(x.data(), r.data(), e.data(), h.col(d).data());
  }
  return h;
}

Vector MixtureLaw::mean() const {
  Vector m = Vector::Zero(dim());
  for (int i = 0; i < components(); ++i) m += weights[i] * means[i];
  return m;
}

Matrix MixtureLaw::sample(int n, RngStream& rng) const {
  Matrix out(dim(), n);
  for (int k = 0; k < n; ++k) {
    double u = rng.uniform();
    int comp = components() - 1;
    for (int i = 0; i < components(); ++i) {
      if (u < weights[i]) {
        comp = i;
        break;
      }
      u -= weights[i];
    }
    for (int d = 0; d < dim(); ++d) out(d, k) = means[comp][d] + stds[comp] * rng.normal();
  }
  return out;
}

MixtureLaw MixtureLaw::vp_marginal(double tau) const {
  const double a = DiffusionWorld::signal_scale(tau);
  const double v = DiffusionWorld::noise_variance(tau);
  MixtureLaw out = *this;
  for (int i = 0; i < components(); ++i) {
    out.means[i] = a * means[i];
    out.stds[i] = std::sqrt(a * a * stds[i] * stds[i] + v);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Labels

double LabelAxis::shift(int context) const {
  if (context < 0 || context >= static_cast<int>(context_shift.size())) return 0.0;
  return context_shift[static_cast<std::size_t>(context)];
}

void LabelAxis::log_probs(double s, int context, std::span<double> out) const {
  const double sh = shift(context);
  out[0] = 0.0;
  for (int k = 1; k < classes(); ++k) out[k] = out[k - 1] + sharpness * (s - boundaries[k - 1] - sh);
  const double lse = log_sum_exp(out);
  for (double& v : out) v -= lse;
}

double LabelAxis::log_prob(double s, int context, int k, double* dlogp_ds) const {
  double buf[64];
  std::vector<double> heap;
  double* lp = buf;
  if (classes() > 64) {
    heap.resize(static_cast<std::size_t>(classes()));
    lp = heap.data();
  }
  log_probs(s, context, std::span<double>(lp, static_cast<std::size_t>(classes())));
  if (dlogp_ds) {
    // d logit_j / ds = sharpness * j, so d log p_k / ds = sharpness (k - E[j]).
    double expected = 0.0;
    for (int j = 0; j < classes(); ++j) expected += j * std::exp(lp[j]);
    *dlogp_ds = sharpness * (k - expected);
  }
  return lp[k];
}

int LabelAxis::hard_label(double s, int context) const {
  const double sh = shift(context);
  int k = 0;
  while (k < static_cast<int>(boundaries.size()) && s > boundaries[k] + sh) ++k;
  return k;
}

LabelOracle::LabelOracle(std::vector<LabelAxis> axes) : axes_(std::move(axes)) {
  if (axes_.empty()) throw ConfigError("label oracle needs at least one axis");
  classes_ = 1;
  for (const auto& a : axes_) {
    if (!std::is_sorted(a.boundaries.begin(), a.boundaries.end()))
      throw ConfigError("label boundaries must be increasing");
    if (!(a.sharpness >= 0.0)) throw ConfigError("label sharpness must be nonnegative");
    if (a.coordinate < 0) throw ConfigError("label coordinate must be nonnegative");
    classes_ *= a.classes();
  }
}

bool LabelOracle::context_independent() const {
  return std::all_of(axes_.begin(), axes_.end(), [](const LabelAxis& a) { return a.context_shift.empty(); });
}

std::vector<int> LabelOracle::decode(int joint) const {
  if (joint < 0 || joint >= classes_) throw ContractViolation("label id out of range");
  std::vector<int> out(axes_.size());
  for (int a = axes() - 1; a >= 0; --a) {
    out[static_cast<std::size_t>(a)] = joint % axes_[a].classes();
    joint /= axes_[a].classes();
  }
  return out;
}

int LabelOracle::encode(std::span<const int> per_axis) const {
  if (static_cast<int>(per_axis.size()) != axes()) throw ContractViolation("wrong number of label axes");
  int joint = 0;
  for (int a = 0; a < axes(); ++a) {
    if (per_axis[a] < 0 || per_axis[a] >= axes_[a].classes()) throw ContractViolation("label out of range");
    joint = joint * axes_[a].classes() + per_axis[a];
  }
  return joint;
}

double LabelOracle::log_prob(const Vector& x, int context, int label, Vector* grad) const {
  const auto ys = decode(label);
  if (grad) grad->setZero(x.size());
  double total = 0.0;
  for (int a = 0; a < axes(); ++a) {
    const auto& ax = axes_[a];
    double d = 0.0;
    total += ax.log_prob(x[ax.coordinate], context, ys[a], grad ? &d : nullptr);
    if (grad) (*grad)[ax.coordinate] += d;
  }
  return total;
}

Vector LabelOracle::probs(const Vector& x, int context) const {
  Vector p(classes_);
  for (int y = 0; y < classes_; ++y) p[y] = std::exp(log_prob(x, context, y));
  return p;
}

int LabelOracle::hard_label(const Vector& x, int context) const {
  std::vector<int> ys(axes_.size());
  for (int a = 0; a < axes(); ++a) ys[a] = axes_[a].hard_label(x[axes_[a].coordinate], context);
  return encode(ys);
}

// ---------------------------------------------------------------------------
// DiffusionWorld

DiffusionWorld::DiffusionWorld(std::string name, std::vector<MixtureLaw> laws, LabelOracle oracle,
                               TimeGrid grid)
    : name_(std::move(name)), laws_(std::move(laws)), oracle_(std::move(oracle)), grid_(grid) {
  if (laws_.empty()) throw ConfigError("world needs at least one context");
  for (const auto& law : laws_) law.validate();
  dim_ = laws_.front().dim();
  for (const auto& law : laws_)
    if (law.dim() != dim_) throw ConfigError("all contexts must share the state dimension");
  for (int a = 0; a < oracle_.axes(); ++a) {
    if (oracle_.axis(a).coordinate >= dim_) throw ConfigError("label coordinate exceeds state dimension");
    const auto& shifts = oracle_.axis(a).context_shift;
    if (!shifts.empty() && static_cast<int>(shifts.size()) != num_contexts())
      throw ConfigError("context_shift must list one value per context");
  }
  const double share = 1.0 / static_cast<double>(laws_.size());
  for (const auto& law : laws_)
    for (int i = 0; i < law.components(); ++i) {
      unconditional_.weights.push_back(share * law.weights[i]);
      unconditional_.means.push_back(law.means[i]);
      unconditional_.stds.push_back(law.stds[i]);
    }
  // Renormalize to absorb rounding from the 1/|C| shares.
  double total = 0.0;
  for (double w : unconditional_.weights) total += w;
  for (double& w : unconditional_.weights) w /= total;
}

const MixtureLaw& DiffusionWorld::data_law(int context) const {
  if (context == null_context()) return unconditional_;
  if (context < 0 || context > null_context()) throw ContractViolation("context id out of range");
  return laws_[static_cast<std::size_t>(context)];
}

MixtureLaw DiffusionWorld::marginal(double tau, int context) const {
  return data_law(context).vp_marginal(tau);
}

Vector DiffusionWorld::score(double tau, const Vector& x, int context) const {
  return marginal(tau, context).score(x);
}

MixtureLaw DiffusionWorld::posterior_x0(double t, const Vector& x, int context) const {
  const MixtureLaw& prior = data_law(context);
  const double tau = std::max(0.0, grid_.horizon() - t);
  const double a = signal_scale(tau);
  const double v = noise_variance(tau);
  MixtureLaw post = prior;
  std::vector<double> logw(prior.components());
  for (int i = 0; i < prior.components(); ++i) {
    const double s2 = prior.stds[i] * prior.stds[i];
    const double m = a * a * s2 + v;
    const double sq = (x - a * prior.means[i]).squaredNorm();
    logw[i] = (prior.weights[i] > 0.0 ? std::log(prior.weights[i]) : -std::numeric_limits<double>::infinity()) -
              0.5 * dim_ * std::log(m) - 0.5 * sq / m;
    post.means[i] = (v * prior.means[i] + a * s2 * x) / m;
    post.stds[i] = std::sqrt(s2 * v / m);
  }
  const double lse = log_sum_exp(logw);
  for (int i = 0; i < prior.components(); ++i) post.weights[i] = std::exp(logw[i] - lse);
  return post;
}

Vector DiffusionWorld::denoised_mean(double t, const Vector& x, int context, Matrix* jacobian) const {
  const MixtureLaw& prior = data_law(context);
  const double tau = std::max(0.0, grid_.horizon() - t);
  const double a = signal_scale(tau);
  const double v = noise_variance(tau);
  const MixtureLaw post = posterior_x0(t, x, context);
  Vector mean = Vector::Zero(dim_);
  for (int i = 0; i < post.components(); ++i) mean += post.weights[i] * post.means[i];
  if (jacobian) {
    // d r_i / dx = r_i (u_i - ubar), u_i = -(x - a mu_i) / m_i; d mean_i / dx = a s_i^2 / m_i.
    Vector ubar = Vector::Zero(dim_);
    std::vector<Vector> u(post.components());
    for (int i = 0; i < post.components(); ++i) {
      const double s2 = prior.stds[i] * prior.stds[i];
      u[i] = -(x - a * prior.means[i]) / (a * a * s2 + v);
      ubar += post.weights[i] * u[i];
    }
    jacobian->setZero(dim_, dim_);
    for (int i = 0; i < post.components(); ++i) {
      const double s2 = prior.stds[i] * prior.stds[i];
      const double beta = a * s2 / (a * a * s2 + v);
      jacobian->diagonal().array() += post.weights[i] * beta;
      *jacobian += post.weights[i] * post.means[i] * (u[i] - ubar).transpose();
    }
  }
  return mean;
}

Vector DiffusionWorld::pretrained_drift(double t, const Vector& x, int context) const {
  return 0.5 * x + score(grid_.horizon() - t, x, context);
}

void DiffusionWorld::pretrained_drift(const DriftQuery& q, const Matrix& x, Matrix& out) const {
  const double tau = grid_.horizon() - q.t;
  std::vector<MixtureCache> caches;
  caches.reserve(laws_.size() + 1);
  for (int c = 0; c <= num_contexts(); ++c) caches.emplace_back(data_law(c).vp_marginal(tau));
  out.resize(x.rows(), x.cols());
  std::vector<double> r;
  for (Eigen::Index k = 0; k < x.cols(); ++k) {
    const auto& cache = caches.at(static_cast<std::size_t>(q.contexts[k]));
    r.resize(cache.k);
    cache.responsibilities(x.col(k).data(), r.data());
    cache.score(x.col(k).data(), r.data(), out.col(k).data());
    out.col(k) += 0.5 * x.col(k);
  }
}

void DiffusionWorld::pretrained_drift_vjp(const DriftQuery& q, const Matrix& x, const Matrix& a,
                                          Matrix& out) const {
  const double tau = grid_.horizon() - q.t;
  std::vector<MixtureCache> caches;
  caches.reserve(laws_.size() + 1);
  for (int c = 0; c <= num_contexts(); ++c) caches.emplace_back(data_law(c).vp_marginal(tau));
  out = 0.5 * a;  // the Jacobian is symmetric
  std::vector<double> r;
  for (Eigen::Index k = 0; k < x.cols(); ++k) {
    const auto& cache = caches.at(static_cast<std::size_t>(q.contexts[k]));
    r.resize(cache.k);
    cache.responsibilities(x.col(k).data(), r.data());
    cache.hessian_times(x.col(k).data(), r.data(), a.col(k).data(), out.col(k).data());
  }
}

DriftFn DiffusionWorld::pretrained_drift_fn() const {
  return [this](const DriftQuery& q, const Matrix& x, Matrix& out) { pretrained_drift(q, x, out); };
}

Matrix DiffusionWorld::sample_pretrained(int context, int n, std::uint64_t seed) const {
  RngStream rng(seed, static_cast<std::uint64_t>(context));
  return data_law(context).sample(n, rng);
}

nlohmann::json DiffusionWorld::to_json() const {
  nlohmann::json contexts = nlohmann::json::array();
  for (const auto& law : laws_) contexts.push_back(mixture_to_json(law));
  nlohmann::json labels = nlohmann::json::array();
  for (int a = 0; a < oracle_.axes(); ++a) {
    const auto& ax = oracle_.axis(a);
    labels.push_back({{"coordinate", ax.coordinate},
                      {"boundaries", ax.boundaries},
                      {"sharpness", ax.sharpness},
                      {"context_shift", ax.context_shift}});
  }
  return {{"name", name_},
          {"horizon", grid_.horizon()},
          {"steps", grid_.steps()},
          {"contexts", contexts},
          {"labels", labels}};
}

DiffusionWorld DiffusionWorld::from_json(const nlohmann::json& j) {
  check_keys(j, {"name", "horizon", "steps", "contexts", "labels"}, "world");
  try {
    std::vector<MixtureLaw> laws;
    for (const auto& c : j.at("contexts")) laws.push_back(mixture_from_json(c));
    std::vector<LabelAxis> axes;
    for (const auto& l : j.at("labels")) {
      check_keys(l, {"coordinate", "boundaries", "sharpness", "context_shift"}, "world.labels[]");
      LabelAxis ax;
      ax.coordinate = get_or(l, "coordinate", 0);
      ax.boundaries = l.at("boundaries").get<std::vector<double>>();
      ax.sharpness = get_or(l, "sharpness", 4.0);
      ax.context_shift = get_or(l, "context_shift", std::vector<double>{});
      axes.push_back(std::move(ax));
    }
    return DiffusionWorld(get_or<std::string>(j, "name", "custom"), std::move(laws),
                          LabelOracle(std::move(axes)),
                          TimeGrid(get_or(j, "horizon", 5.0), get_or(j, "steps", 256)));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("world: ") + e.what());
  }
}

DiffusionWorld make_world_w1(int steps, double horizon) {
  auto law = [](std::vector<double> w, std::vector<double> mu, std::vector<double> s) {
    MixtureLaw m;
    m.weights = std::move(w);
    for (double v : mu) m.means.push_back(Vector::Constant(1, v));
    m.stds = std::move(s);
    return m;
  };
  std::vector<MixtureLaw> laws{law({0.5, 0.5}, {-2.0, 2.0}, {0.5, 0.5}),
                               law({0.7, 0.3}, {-1.0, 2.5}, {0.6, 0.4})};
  LabelAxis bins;
  bins.coordinate = 0;
  bins.boundaries = {-1.5, 0.0, 1.5};
  bins.sharpness = 4.0;
  return DiffusionWorld("w1", std::move(laws), LabelOracle({bins}), TimeGrid(horizon, steps));
}

DiffusionWorld make_world_w2(int steps, double horizon) {
  MixtureLaw law;
  law.weights = {0.4, 0.3, 0.2, 0.1};
  law.means = {Vector{{1.5, 1.5}}, Vector{{1.5, -1.5}}, Vector{{-1.5, 1.5}}, Vector{{-1.5, -1.5}}};
  law.stds = {0.6, 0.6, 0.6, 0.6};
  LabelAxis first;
  first.coordinate = 0;
  first.boundaries = {0.0};
  first.sharpness = 4.0;
  LabelAxis second = first;
  second.coordinate = 1;
  return DiffusionWorld("w2", {law}, LabelOracle({first, second}), TimeGrid(horizon, steps));
}

DiffusionWorld make_world(const std::string& preset, int steps, double horizon) {
  if (preset == "w1") return make_world_w1(steps, horizon);
  if (preset == "w2") return make_world_w2(steps, horizon);
  throw ConfigError("unknown world preset '" + preset + "'");
}

// ---------------------------------------------------------------------------
// ScoreNet / denoising fit

ScoreNet::ScoreNet(const DiffusionWorld& world, std::vector<int> hidden, std::uint64_t seed,
                   bool analytic_prior)
    : world_(&world), analytic_prior_(analytic_prior) {
  std::vector<int> widths{1 + world.dim() + world.num_contexts()};
  widths.insert(widths.end(), hidden.begin(), hidden.end());
  widths.push_back(world.dim());
  net_ = Mlp(std::move(widths), seed, analytic_prior);
}

Matrix ScoreNet::inputs(double tau, const Matrix& x, std::span<const int> contexts) const {
  const int d = world_->dim();
  Matrix in = Matrix::Zero(1 + d + world_->num_contexts(), x.cols());
  in.row(0).setConstant(tau / world_->grid().horizon());
  in.middleRows(1, d) = x;
  for (Eigen::Index k = 0; k < x.cols(); ++k)
    if (contexts[k] < world_->num_contexts()) in(1 + d + contexts[k], k) = 1.0;
  return in;
}

Matrix ScoreNet::evaluate(double tau, const Matrix& x, std::span<const int> contexts, Mlp::Tape* tape) const {
  Matrix in = inputs(tau, x, contexts);
  Matrix out = tape ? net_.forward(in, *tape) : net_.forward(in);
  if (analytic_prior_) {
    for (Eigen::Index k = 0; k < x.cols(); ++k) out.col(k) += world_->score(tau, x.col(k), contexts[k]);
  }
  return out;
}

Matrix ScoreNet::backward(double tau, const Matrix& x, std::span<const int> contexts, const Mlp::Tape& tape,
                          const Matrix& d_out, Eigen::Ref<Vector> grad) const {
  Matrix d_in = net_.backward(tape, d_out, grad);
  Matrix dx = d_in.middleRows(1, world_->dim());
  if (analytic_prior_) {
    for (Eigen::Index k = 0; k < x.cols(); ++k)
      dx.col(k) += world_->marginal(tau, contexts[k]).score_hessian(x.col(k)) * d_out.col(k);
  }
  return dx;
}

double score_grid_error(const ScoreNet& model) {
  const DiffusionWorld& world = model.world();
  const double horizon = world.grid().horizon();
  std::vector<double> taus;
  for (double tau : {0.1, 0.5, 1.0, 2.0, 4.0}) taus.push_back(std::min(tau, horizon));
  double total = 0.0;
  int count = 0;
  for (int c = 0; c < world.num_contexts(); ++c) {
    Matrix pts;
    if (world.dim() == 1) {
      const MixtureLaw& law = world.data_law(c);
      double lo = law.means[0][0], hi = lo;
      for (int i = 0; i < law.components(); ++i) {
        lo = std::min(lo, law.means[i][0] - 3.0 * law.stds[i]);
        hi = std::max(hi, law.means[i][0] + 3.0 * law.stds[i]);
      }
      pts.resize(1, 41);
      for (int i = 0; i < 41; ++i) pts(0, i) = lo + (hi - lo) * i / 40.0;
    } else {
      pts = world.sample_pretrained(c, 200, 0x5eedULL);
    }
    std::vector<int> ctx(static_cast<std::size_t>(pts.cols()), c);
    for (double tau : taus) {
      Matrix s = model.evaluate(tau, pts, ctx);
      for (Eigen::Index k = 0; k < pts.cols(); ++k) {
        total += (s.col(k) - world.score(tau, pts.col(k), c)).cwiseAbs().mean();
        ++count;
      }
    }
  }
  return total / count;
}

DenoisingReport fit_score_by_denoising(const DiffusionWorld& world, ScoreNet& model,
                                       const DenoisingConfig& config) {
  DenoisingReport report;
  report.grid_error_before = score_grid_error(model);
  const auto weighting = config.weighting ? config.weighting : [](double tau) { return -std::expm1(-tau); };
  const double horizon = world.grid().horizon();
  Mlp& net = model.net();
  AdamW opt(net.parameter_count(), config.optimizer);
  RngStream rng(config.seed, 0);
  const int b = config.batch;
  const int d = world.dim();
  double first_loss = -1.0;

  for (int step = 0; step < config.steps; ++step) {
    // Group the minibatch by a single tau so the net sees one time per forward pass.
    const double tau = config.tau_min + (horizon - config.tau_min) * rng.uniform();
    const double a = DiffusionWorld::signal_scale(tau);
    const double sd = std::sqrt(DiffusionWorld::noise_variance(tau));
    const double lambda = weighting(tau);
    std::vector<int> ctx(static_cast<std::size_t>(b));
    Matrix z(d, b), target(d, b);
    for (int k = 0; k < b; ++k) {
      ctx[k] = rng.index(world.num_contexts());
      Matrix z0 = world.data_law(ctx[k]).sample(1, rng);
      for (int i = 0; i < d; ++i) {
        const double eps = rng.normal();
        z(i, k) = a * z0(i, 0) + sd * eps;
        target(i, k) = -eps / sd;
      }
    }
    Mlp::Tape tape;
    Matrix s = model.evaluate(tau, z, ctx, &tape);
    Matrix resid = s - target;
    const double loss = lambda * resid.squaredNorm() / b;
    if (!std::isfinite(loss) || (first_loss > 0.0 && loss > 1e6 * first_loss)) {
      throw NumericalError("denoising regression diverged at step " + std::to_string(step) +
                           " (loss " + std::to_string(loss) + ", tau " + std::to_string(tau) + ")");
    }
    if (first_loss < 0.0) first_loss = std::max(loss, 1e-12);
    report.loss.push_back(loss);
    Vector grad = Vector::Zero(net.parameter_count());
    model.backward(tau, z, ctx, tape, (2.0 * lambda / b) * resid, grad);
    opt.step(net.parameters(), grad);
  }
  report.grid_error_after = score_grid_error(model);
  return report;
}

}  // namespace ctrl
