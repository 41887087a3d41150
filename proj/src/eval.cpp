#include "ctrl/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

namespace ctrl {

namespace {

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

// W1 between two weighted point sets given as sorted (position, weight) lists.
double w1_sorted(const std::vector<std::pair<double, double>>& a, const std::vector<std::pair<double, double>>& b) {
  std::size_t i = 0, j = 0;
  double fa = 0.0, fb = 0.0, prev = 0.0, total = 0.0;
  bool started = false;
  while (i < a.size() || j < b.size()) {
    const bool take_a = j >= b.size() || (i < a.size() && a[i].first <= b[j].first);
    const double pos = take_a ? a[i].first : b[j].first;
    if (started) total += std::abs(fa - fb) * (pos - prev);
    if (take_a) fa += a[i++].second;
    else fb += b[j++].second;
    prev = pos;
    started = true;
  }
  return total;
}

std::vector<std::pair<double, double>> empirical(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  const double w = 1.0 / static_cast<double>(xs.size());
  std::vector<std::pair<double, double>> out;
  out.reserve(xs.size());
  for (double x : xs) out.emplace_back(x, w);
  return out;
}

std::vector<double> directions(int count, std::uint64_t seed) {
  RngStream rng(derive_seed(seed, "sliced-w1"), 0);
  std::vector<double> angles(static_cast<std::size_t>(count));
  for (double& a : angles) a = 2.0 * M_PI * rng.uniform();
  return angles;
}

// Cell masses of the grid law; 1-D trapezoid cells, 2-D lattice cells (mean of corners).
std::vector<double> cell_masses(const TargetDensity& t) {
  std::vector<double> m;
  if (t.dim == 1) {
    const Vector& g = t.axes[0];
    m.resize(static_cast<std::size_t>(g.size() - 1));
    for (Eigen::Index i = 0; i + 1 < g.size(); ++i)
      m[static_cast<std::size_t>(i)] = 0.5 * (g[i + 1] - g[i]) * (t.density[i] + t.density[i + 1]);
  } else {
    const Vector& g0 = t.axes[0];
    const Vector& g1 = t.axes[1];
    const Eigen::Index n1 = g1.size();
    m.resize(static_cast<std::size_t>((g0.size() - 1) * (n1 - 1)));
    for (Eigen::Index i = 0; i + 1 < g0.size(); ++i)
      for (Eigen::Index j = 0; j + 1 < n1; ++j) {
        const double avg = 0.25 * (t.density[i * n1 + j] + t.density[i * n1 + j + 1] + t.density[(i + 1) * n1 + j] +
                                   t.density[(i + 1) * n1 + j + 1]);
        m[static_cast<std::size_t>(i * (n1 - 1) + j)] = avg * (g0[i + 1] - g0[i]) * (g1[j + 1] - g1[j]);
      }
  }
  return m;
}

// Grid-law CDF in 1-D (piecewise quadratic).
double grid_cdf(const TargetDensity& t, const std::vector<double>& cum, double x) {
  const Vector& g = t.axes[0];
  if (x <= g[0]) return 0.0;
  if (x >= g[g.size() - 1]) return cum.back();
  const double h = g[1] - g[0];
  const auto i = std::min(static_cast<Eigen::Index>((x - g[0]) / h), g.size() - 2);
  const double u = (x - g[i]) / h;
  const double f0 = t.density[i], f1 = t.density[i + 1];
  return cum[static_cast<std::size_t>(i)] + h * (f0 * u + 0.5 * (f1 - f0) * u * u);
}

void require_samples(const Matrix& samples, const TargetDensity& target) {
  if (samples.rows() != target.dim) throw ContractViolation("sample dimension does not match the target");
  if (samples.cols() < 1000) throw ContractViolation("distances to a target need at least 1000 samples");
}

}  // namespace

double TargetDensity::grid_mass() const {
  const auto m = cell_masses(*this);
  return std::accumulate(m.begin(), m.end(), 0.0);
}

double TargetDensity::box_mass(const Vector& lo, const Vector& hi, int panels) const {
  if (panels % 2) ++panels;
  std::vector<double> w(static_cast<std::size_t>(panels + 1));
  for (int i = 0; i <= panels; ++i) w[static_cast<std::size_t>(i)] = (i == 0 || i == panels) ? 1.0 : (i % 2 ? 4.0 : 2.0);
  const Vector h = (hi - lo) / panels;
  double s = 0.0;
  Vector x(dim);
  if (dim == 1) {
    for (int i = 0; i <= panels; ++i) {
      x[0] = lo[0] + i * h[0];
      s += w[static_cast<std::size_t>(i)] * pdf(x);
    }
    return s * h[0] / 3.0;
  }
  for (int i = 0; i <= panels; ++i)
    for (int j = 0; j <= panels; ++j) {
      x[0] = lo[0] + i * h[0];
      x[1] = lo[1] + j * h[1];
      s += w[static_cast<std::size_t>(i)] * w[static_cast<std::size_t>(j)] * pdf(x);
    }
  return s * h[0] * h[1] / 9.0;
}

Matrix TargetDensity::sample(int n, RngStream& rng) const {
  const auto masses = cell_masses(*this);
  std::vector<double> cum(masses.size());
  std::partial_sum(masses.begin(), masses.end(), cum.begin());
  Matrix out(dim, n);
  for (int k = 0; k < n; ++k) {
    const double r = rng.uniform() * cum.back();
    const auto cell =
        static_cast<Eigen::Index>(std::min<std::size_t>(std::upper_bound(cum.begin(), cum.end(), r) - cum.begin(), cum.size() - 1));
    if (dim == 1) {
      const Vector& g = axes[0];
      const double f0 = density[cell], f1 = density[cell + 1];
      const double v = rng.uniform();
      // Inverse CDF of the linear density on the cell.
      const double denom = f0 + std::sqrt(std::max(0.0, f0 * f0 + (f1 * f1 - f0 * f0) * v));
      const double u = denom > 0.0 ? v * (f0 + f1) / denom : v;
      out(0, k) = g[cell] + std::clamp(u, 0.0, 1.0) * (g[cell + 1] - g[cell]);
    } else {
      const Eigen::Index n1 = axes[1].size() - 1;
      const Eigen::Index i = cell / n1, j = cell % n1;
      out(0, k) = axes[0][i] + rng.uniform() * (axes[0][i + 1] - axes[0][i]);
      out(1, k) = axes[1][j] + rng.uniform() * (axes[1][j + 1] - axes[1][j]);
    }
  }
  return out;
}

TargetDensity target_density(const DiffusionWorld& world, int context, int label, double gamma,
                             const LabelLikelihood* labels) {
  if (world.dim() > 2) throw ConfigError("target densities are implemented for 1-D and 2-D worlds");
  if (label < 0 || label >= world.num_labels()) throw ContractViolation("label out of range");
  if (!std::isfinite(gamma) || gamma < 0.0) throw ConfigError("gamma must be finite and >= 0");
  const MixtureLaw& law = world.data_law(context);
  const int d = world.dim();
  const OracleLikelihood oracle(world.oracle(), d);
  const LabelLikelihood* lik = labels ? labels : &oracle;
  if (lik->num_labels() != world.num_labels()) throw ConfigError("label model does not match the world");

  TargetDensity t;
  t.context = context;
  t.label = label;
  t.gamma = gamma;
  t.dim = d;
  const int points = d == 1 ? 2048 : 256;
  double smax = 0.0;
  for (double s : law.stds) smax = std::max(smax, s);
  for (int a = 0; a < d; ++a) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const Vector& mu : law.means) {
      lo = std::min(lo, mu[a] - 6.0 * smax);
      hi = std::max(hi, mu[a] + 6.0 * smax);
    }
    t.axes.push_back(Vector::LinSpaced(points, lo, hi));
  }

  double inside = 0.0;
  for (int k = 0; k < law.components(); ++k) {
    double p = law.weights[static_cast<std::size_t>(k)];
    const double s = law.stds[static_cast<std::size_t>(k)];
    for (int a = 0; a < d; ++a)
      p *= normal_cdf((t.upper(a) - law.means[static_cast<std::size_t>(k)][a]) / s) -
           normal_cdf((t.lower(a) - law.means[static_cast<std::size_t>(k)][a]) / s);
    inside += p;
  }
  t.coverage_error = std::max(0.0, 1.0 - inside);
  if (t.coverage_error > 1e-4) throw ConfigError("target grid misses more than 1e-4 of the mass; widen the grid");

  const Eigen::Index total = d == 1 ? points : static_cast<Eigen::Index>(points) * points;
  Matrix nodes(d, total);
  for (Eigen::Index i = 0; i < total; ++i) {
    if (d == 1) nodes(0, i) = t.axes[0][i];
    else {
      nodes(0, i) = t.axes[0][i / points];
      nodes(1, i) = t.axes[1][i % points];
    }
  }
  Vector lp;
  const std::vector<int> cs(static_cast<std::size_t>(total), context), ys(static_cast<std::size_t>(total), label);
  lik->log_prob(nodes, cs, ys, lp);
  t.density.resize(total);
  for (Eigen::Index i = 0; i < total; ++i) {
    const double lv = law.log_density(nodes.col(i)) + (gamma == 0.0 ? 0.0 : gamma * lp[i]);
    t.density[i] = std::exp(lv);
  }
  if (!t.density.allFinite()) throw NumericalError("non-finite target density values");
  t.normalizer = t.grid_mass();
  if (d == 1) {
    // First-order tail correction: the label likelihood is flat beyond the grid box.
    double left = 0.0, right = 0.0;
    for (int k = 0; k < law.components(); ++k) {
      const double w = law.weights[static_cast<std::size_t>(k)], s = law.stds[static_cast<std::size_t>(k)];
      const double mu = law.means[static_cast<std::size_t>(k)][0];
      left += w * normal_cdf((t.lower(0) - mu) / s);
      right += w * normal_cdf((mu - t.upper(0)) / s);
    }
    t.normalizer += left * std::exp(gamma * lp[0]) + right * std::exp(gamma * lp[total - 1]);
  }
  if (!(t.normalizer > 0.0)) throw NumericalError("target normalizer underflows");
  t.density /= t.normalizer;

  const MixtureLaw law_copy = law;
  const int c = context, y = label;
  t.unnormalized = [law_copy, lik_copy = labels, &world, c, y, gamma, d](const Vector& x) {
    double lpx = 0.0;
    if (gamma != 0.0) {
      if (lik_copy) {
        Vector out;
        const int cc[1] = {c}, yy[1] = {y};
        lik_copy->log_prob(Matrix(x), cc, yy, out);
        lpx = out[0];
      } else {
        lpx = world.oracle().log_prob(x, c, y);
      }
    }
    (void)d;
    return std::exp(law_copy.log_density(x) + gamma * lpx);
  };
  return t;
}

double tv_distance(const Matrix& samples, const TargetDensity& target, int bins) {
  require_samples(samples, target);
  if (bins < 1) throw ConfigError("TV needs at least one bin");
  const int d = target.dim;
  const int cells = d == 1 ? bins : bins * bins;
  std::vector<double> counts(static_cast<std::size_t>(cells), 0.0);
  double outside = 0.0;
  Vector lo(d), width(d);
  for (int a = 0; a < d; ++a) {
    lo[a] = target.lower(a);
    width[a] = (target.upper(a) - target.lower(a)) / bins;
  }
  for (Eigen::Index k = 0; k < samples.cols(); ++k) {
    int index = 0;
    bool in = true;
    for (int a = 0; a < d; ++a) {
      const double pos = (samples(a, k) - lo[a]) / width[a];
      if (!(pos >= 0.0 && pos < bins)) {
        in = false;
        break;
      }
      index = index * bins + std::min(bins - 1, static_cast<int>(pos));
    }
    if (in) counts[static_cast<std::size_t>(index)] += 1.0;
    else outside += 1.0;
  }
  const double n = static_cast<double>(samples.cols());
  double tv = outside / n;
  for (int b = 0; b < cells; ++b) {
    Vector blo(d), bhi(d);
    int rem = b;
    for (int a = d - 1; a >= 0; --a) {
      const int idx = rem % bins;
      rem /= bins;
      blo[a] = lo[a] + idx * width[a];
      bhi[a] = blo[a] + width[a];
    }
    const double mass = target.box_mass(blo, bhi, d == 1 ? 16 : 6);
    tv += std::abs(counts[static_cast<std::size_t>(b)] / n - mass);
  }
  return std::min(1.0, 0.5 * tv);
}

double wasserstein1(const Matrix& samples, const TargetDensity& target, int directions_count, std::uint64_t seed) {
  require_samples(samples, target);
  if (target.dim == 1) {
    const auto masses = cell_masses(target);
    std::vector<double> cum(masses.size() + 1, 0.0);
    std::partial_sum(masses.begin(), masses.end(), cum.begin() + 1);
    std::vector<double> xs(samples.data(), samples.data() + samples.size());
    std::sort(xs.begin(), xs.end());
    const Vector& g = target.axes[0];
    std::vector<double> pts(g.data(), g.data() + g.size());
    pts.insert(pts.end(), xs.begin(), xs.end());
    std::sort(pts.begin(), pts.end());
    const double n = static_cast<double>(xs.size());
    double total = 0.0;
    std::size_t below = 0;
    for (std::size_t i = 0; i + 1 < pts.size(); ++i) {
      while (below < xs.size() && xs[below] <= pts[i]) ++below;
      const double fn = static_cast<double>(below) / n;
      const double a = pts[i], b = pts[i + 1];
      if (b <= a) continue;
      const double fa = std::abs(fn - grid_cdf(target, cum, a));
      const double fm = std::abs(fn - grid_cdf(target, cum, 0.5 * (a + b)));
      const double fb = std::abs(fn - grid_cdf(target, cum, b));
      total += (b - a) * (fa + 4.0 * fm + fb) / 6.0;
    }
    return total;
  }
  if (directions_count < 1) throw ConfigError("sliced W1 needs at least one direction");
  const auto masses = cell_masses(target);
  const double mass_total = std::accumulate(masses.begin(), masses.end(), 0.0);
  const Eigen::Index n1 = target.axes[1].size() - 1;
  double total = 0.0;
  for (double ang : directions(directions_count, seed)) {
    const double c = std::cos(ang), s = std::sin(ang);
    std::vector<double> proj(static_cast<std::size_t>(samples.cols()));
    for (Eigen::Index k = 0; k < samples.cols(); ++k) proj[static_cast<std::size_t>(k)] = c * samples(0, k) + s * samples(1, k);
    std::vector<std::pair<double, double>> atoms(masses.size());
    for (std::size_t m = 0; m < masses.size(); ++m) {
      const auto i = static_cast<Eigen::Index>(m) / n1, j = static_cast<Eigen::Index>(m) % n1;
      const double x0 = 0.5 * (target.axes[0][i] + target.axes[0][i + 1]);
      const double x1 = 0.5 * (target.axes[1][j] + target.axes[1][j + 1]);
      atoms[m] = {c * x0 + s * x1, masses[m] / mass_total};
    }
    std::sort(atoms.begin(), atoms.end());
    total += w1_sorted(empirical(std::move(proj)), atoms);
  }
  return total / directions_count;
}

double wasserstein1(const Matrix& a, const Matrix& b, int directions_count, std::uint64_t seed) {
  if (a.rows() != b.rows()) throw ContractViolation("sample sets have different dimensions");
  if (a.cols() == 0 || b.cols() == 0) throw ContractViolation("empty sample set");
  if (a.rows() == 1)
    return w1_sorted(empirical({a.data(), a.data() + a.size()}), empirical({b.data(), b.data() + b.size()}));
  if (a.rows() != 2) throw ConfigError("sliced W1 is implemented for 2-D samples");
  double total = 0.0;
  for (double ang : directions(directions_count, seed)) {
    const double c = std::cos(ang), s = std::sin(ang);
    std::vector<double> pa(static_cast<std::size_t>(a.cols())), pb(static_cast<std::size_t>(b.cols()));
    for (Eigen::Index k = 0; k < a.cols(); ++k) pa[static_cast<std::size_t>(k)] = c * a(0, k) + s * a(1, k);
    for (Eigen::Index k = 0; k < b.cols(); ++k) pb[static_cast<std::size_t>(k)] = c * b(0, k) + s * b(1, k);
    total += w1_sorted(empirical(std::move(pa)), empirical(std::move(pb)));
  }
  return total / directions_count;
}

double macro_f1(const Eigen::MatrixXi& confusion) {
  double sum = 0.0;
  int classes = 0;
  for (Eigen::Index k = 0; k < confusion.rows(); ++k) {
    const double support = confusion.row(k).sum();
    if (support == 0) continue;
    const double tp = confusion(k, k);
    const double predicted = confusion.col(k).sum();
    const double precision = predicted > 0 ? tp / predicted : 0.0;
    const double recall = tp / support;
    sum += precision + recall > 0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
    ++classes;
  }
  return classes ? sum / classes : 0.0;
}

EvalReport classification_report(const DiffusionWorld& world, const std::vector<ConditionSamples>& samples,
                                  int min_samples) {
  const int k = world.num_labels();
  EvalReport rep;
  rep.confusion = Eigen::MatrixXi::Zero(k, k);
  std::set<std::pair<int, int>> present;
  std::set<int> contexts;
  long correct_total = 0, count_total = 0;
  for (const auto& cs : samples) {
    if (cs.samples.rows() != world.dim()) throw ContractViolation("sample dimension does not match the world");
    if (cs.label < 0 || cs.label >= k) throw ContractViolation("label out of range");
    ConditionRow row;
    row.context = cs.context;
    row.label = cs.label;
    row.count = static_cast<int>(cs.samples.cols());
    int correct = 0;
    double lp = 0.0;
    for (Eigen::Index i = 0; i < cs.samples.cols(); ++i) {
      const Vector x = cs.samples.col(i);
      const int hard = world.oracle().hard_label(x, cs.context);
      ++rep.confusion(cs.label, hard);
      correct += hard == cs.label;
      lp += world.oracle().log_prob(x, cs.context, cs.label);
    }
    if (row.count > 0) {
      row.accuracy = static_cast<double>(correct) / row.count;
      row.accuracy_se = std::sqrt(row.accuracy * (1.0 - row.accuracy) / row.count);
      row.mean_log_prob = lp / row.count;
    }
    if (row.count < min_samples) {
      rep.incomplete = true;
      rep.notes.push_back("condition (" + std::to_string(cs.context) + ", " + std::to_string(cs.label) + ") has " +
                          std::to_string(row.count) + " samples, fewer than " + std::to_string(min_samples));
    }
    correct_total += correct;
    count_total += row.count;
    present.insert({cs.context, cs.label});
    contexts.insert(cs.context);
    rep.rows.push_back(row);
  }
  for (int c : contexts)
    for (int y = 0; y < k; ++y)
      if (!present.count({c, y})) {
        rep.incomplete = true;
        rep.notes.push_back("missing condition (" + std::to_string(c) + ", " + std::to_string(y) + ")");
      }
  if (samples.empty()) {
    rep.incomplete = true;
    rep.notes.push_back("no conditions");
  }
  if (count_total > 0) {
    rep.accuracy = static_cast<double>(correct_total) / static_cast<double>(count_total);
    rep.accuracy_se = std::sqrt(rep.accuracy * (1.0 - rep.accuracy) / static_cast<double>(count_total));
  }
  rep.macro_f1 = macro_f1(rep.confusion);
  return rep;
}

EvalReport evaluate_samples(const DiffusionWorld& world, const std::vector<ConditionSamples>& samples, double gamma,
                            int bins, std::uint64_t seed) {
  EvalReport rep = classification_report(world, samples);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].samples.cols() < 1000) continue;
    const auto target = target_density(world, samples[i].context, samples[i].label, gamma);
    const int b = world.dim() == 1 ? bins : std::max(1, static_cast<int>(std::lround(std::sqrt(bins))));
    rep.rows[i].tv = tv_distance(samples[i].samples, target, b);
    rep.rows[i].w1 = wasserstein1(samples[i].samples, target, 64, seed);
  }
  return rep;
}

std::string report_csv(const std::vector<EvalReport>& reports) {
  std::ostringstream os;
  os << "method,context,label,count,accuracy,accuracy_se,tv,w1,mean_log_prob\n";
  for (const auto& r : reports)
    for (const auto& row : r.rows)
      os << r.method << ',' << row.context << ',' << row.label << ',' << row.count << ',' << fmt(row.accuracy) << ','
         << fmt(row.accuracy_se) << ',' << fmt(row.tv) << ',' << fmt(row.w1) << ',' << fmt(row.mean_log_prob) << '\n';
  return os.str();
}

std::string report_summary(const EvalReport& r) {
  std::ostringstream os;
  os << "method: " << (r.method.empty() ? "-" : r.method) << '\n'
     << "accuracy: " << fmt(r.accuracy) << " +- " << fmt(r.accuracy_se) << '\n'
     << "macro_f1: " << fmt(r.macro_f1) << '\n'
     << "complete: " << (r.incomplete ? "no" : "yes") << '\n';
  for (const auto& n : r.notes) os << "note: " << n << '\n';
  os << "confusion (rows = conditioned label, columns = oracle label):\n";
  for (Eigen::Index y = 0; y < r.confusion.rows(); ++y) {
    os << "  ";
    for (Eigen::Index k = 0; k < r.confusion.cols(); ++k) os << (k ? " " : "") << r.confusion(y, k);
    os << '\n';
  }
  for (const auto& row : r.rows)
    os << "  c=" << row.context << " y=" << row.label << " n=" << row.count << " acc=" << fmt(row.accuracy)
       << " tv=" << fmt(row.tv) << " w1=" << fmt(row.w1) << '\n';
  return os.str();
}

Histogram histogram(const Matrix& samples, const TargetDensity& target, int bins) {
  if (samples.rows() != target.dim) throw ContractViolation("sample dimension does not match the target");
  if (bins < 1) throw ConfigError("histogram needs at least one bin");
  Histogram h;
  const double lo = target.lower(0), hi = target.upper(0), w = (hi - lo) / bins;
  std::vector<double> counts(static_cast<std::size_t>(bins), 0.0);
  for (Eigen::Index k = 0; k < samples.cols(); ++k) {
    const double pos = (samples(0, k) - lo) / w;
    if (pos >= 0.0 && pos < bins) counts[static_cast<std::size_t>(std::min(bins - 1, static_cast<int>(pos)))] += 1.0;
  }
  const double n = std::max<double>(1.0, static_cast<double>(samples.cols()));
  for (int b = 0; b < bins; ++b) {
    h.centers.push_back(lo + (b + 0.5) * w);
    h.sample_density.push_back(counts[static_cast<std::size_t>(b)] / (n * w));
    Vector blo(target.dim), bhi(target.dim);
    blo[0] = lo + b * w;
    bhi[0] = blo[0] + w;
    for (int a = 1; a < target.dim; ++a) {
      blo[a] = target.lower(a);
      bhi[a] = target.upper(a);
    }
    h.target_density.push_back(target.box_mass(blo, bhi, target.dim == 1 ? 16 : 32) / w);
  }
  return h;
}

std::string histogram_csv(const Histogram& h) {
  std::ostringstream os;
  os << "center,sample_density,target_density\n";
  for (std::size_t i = 0; i < h.centers.size(); ++i)
    os << fmt(h.centers[i]) << ',' << fmt(h.sample_density[i]) << ',' << fmt(h.target_density[i]) << '\n';
  return os.str();
}

std::string histogram_svg(const Histogram& h, const std::string& title) {
  const double width = 640, height = 360, margin = 40;
  double top = 1e-12;
  for (std::size_t i = 0; i < h.centers.size(); ++i) top = std::max({top, h.sample_density[i], h.target_density[i]});
  const double x0 = h.centers.empty() ? 0.0 : h.centers.front();
  const double x1 = h.centers.empty() ? 1.0 : h.centers.back();
  const double bw = h.centers.size() > 1 ? (x1 - x0) / static_cast<double>(h.centers.size() - 1) : 1.0;
  auto sx = [&](double x) { return margin + (x - (x0 - 0.5 * bw)) / (x1 - x0 + bw) * (width - 2 * margin); };
  auto sy = [&](double y) { return height - margin - y / top * (height - 2 * margin); };
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<text x=\"" << margin << "\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\">";
  for (char c : title) {
    if (c == '<') os << "&lt;";
    else if (c == '>') os << "&gt;";
    else if (c == '&') os << "&amp;";
    else os << c;
  }
  os << "</text>\n";
  for (std::size_t i = 0; i < h.centers.size(); ++i) {
    const double left = sx(h.centers[i] - 0.5 * bw), right = sx(h.centers[i] + 0.5 * bw);
    const double y = sy(h.sample_density[i]);
    os << "<rect x=\"" << fmt(left) << "\" y=\"" << fmt(y) << "\" width=\"" << fmt(right - left) << "\" height=\""
       << fmt(height - margin - y) << "\" fill=\"#9ecae1\"/>\n";
  }
  os << "<polyline fill=\"none\" stroke=\"#d62728\" stroke-width=\"1.5\" points=\"";
  for (std::size_t i = 0; i < h.centers.size(); ++i)
    os << (i ? " " : "") << fmt(sx(h.centers[i])) << ',' << fmt(sy(h.target_density[i]));
  os << "\"/>\n<line x1=\"" << margin << "\" y1=\"" << height - margin << "\" x2=\"" << width - margin << "\" y2=\""
     << height - margin << "\" stroke=\"black\"/>\n</svg>\n";
  return os.str();
}

}  // namespace ctrl
