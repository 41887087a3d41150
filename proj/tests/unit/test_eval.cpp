#include "doctest.h"

#include "ctrl/eval.hpp"
#include "ctrl/guidance.hpp"
#include "support/oracles.hpp"

using namespace ctrl;

namespace {

// Flat label model: every class has probability 1/K everywhere.
struct Uniform final : LabelLikelihood {
  int d, k;
  Uniform(int d_, int k_) : d(d_), k(k_) {}
  int dim() const override { return d; }
  int num_labels() const override { return k; }
  void log_prob(const Matrix& x, std::span<const int>, std::span<const int>, Vector& out, Matrix* grad) const override {
    out = Vector::Constant(x.cols(), -std::log(static_cast<double>(k)));
    if (grad) grad->setZero(d, x.cols());
  }
  Vector probs(const Vector&, int) const override { return Vector::Constant(k, 1.0 / k); }
};

double w1_label_prob(double x, int y) {
  const double b[3] = {-1.5, 0.0, 1.5};
  double logits[4], acc = 0.0;
  for (int k = 0; k < 4; ++k) {
    if (k > 0) acc += 4.0 * (x - b[k - 1]);
    logits[k] = acc;
  }
  const double mx = *std::max_element(logits, logits + 4);
  double s = 0.0;
  for (double l : logits) s += std::exp(l - mx);
  return std::exp(logits[y] - mx) / s;
}

ConditionSamples constant_condition(int c, int y, std::vector<double> xs) {
  ConditionSamples cs{c, y, Matrix(1, static_cast<Eigen::Index>(xs.size()))};
  for (std::size_t i = 0; i < xs.size(); ++i) cs.samples(0, static_cast<Eigen::Index>(i)) = xs[i];
  return cs;
}

}  // namespace

TEST_CASE("target densities") {
  const auto w1 = make_world_w1();
  const auto w2 = make_world_w2();
  SUBCASE("normalization and nonnegativity") {
    for (double gamma : {0.0, 1.0, 10.0}) {
      const auto t = target_density(w1, 1, 2, gamma);
      CHECK(t.grid_mass() == doctest::Approx(1.0).epsilon(1e-6));
      CHECK((t.density.array() >= 0.0).all());
      CHECK(t.axes[0].size() == 2048);
      CHECK(t.coverage_error <= 1e-4);
    }
    const auto t2 = target_density(w2, 0, 0, 1.0);
    CHECK(t2.density.size() == 256 * 256);
    CHECK(t2.grid_mass() == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(t2.box_mass(Vector{{t2.lower(0), t2.lower(1)}}, Vector{{t2.upper(0), t2.upper(1)}}, 64) ==
          doctest::Approx(1.0).epsilon(1e-6));
  }
  SUBCASE("gamma = 0 is the pre-trained law") {
    const auto t = target_density(w1, 0, 3, 0.0);
    double worst = 0.0;
    for (Eigen::Index i = 0; i < t.axes[0].size(); ++i) {
      const double x = t.axes[0][i];
      const double ref = 0.5 * testing::gaussian_pdf(x, -2.0, 0.5) + 0.5 * testing::gaussian_pdf(x, 2.0, 0.5);
      worst = std::max(worst, std::abs(t.density[i] - ref));
    }
    CHECK(worst <= 1e-10);
    CHECK(t.normalizer == doctest::Approx(1.0).epsilon(1e-8));
  }
  SUBCASE("uniform labels leave the law unchanged and give C = K^-gamma") {
    const Uniform flat(1, 4);
    const auto t = target_density(w1, 1, 2, 2.5, &flat);
    const auto pre = target_density(w1, 1, 2, 0.0);
    CHECK((t.density - pre.density).cwiseAbs().maxCoeff() <= 1e-10);
    CHECK(t.normalizer == doctest::Approx(std::pow(4.0, -2.5)).epsilon(1e-8));
  }
  SUBCASE("rejection-sampling oracle for W1, gamma = 1, label 3") {
    const auto t = target_density(w1, 0, 3, 1.0);
    RngStream rng(31, 0);
    std::vector<double> accepted;
    while (accepted.size() < 40000) {
      const double x = (rng.uniform() < 0.5 ? -2.0 : 2.0) + 0.5 * rng.normal();
      if (rng.uniform() < w1_label_prob(x, 3)) accepted.push_back(x);
    }
    const double n = static_cast<double>(accepted.size());
    double mean = 0.0, sq = 0.0, above = 0.0;
    for (double x : accepted) {
      mean += x;
      sq += x * x;
      above += x > 1.5;
    }
    mean /= n;
    const double se_mean = std::sqrt((sq / n - mean * mean) / n);
    const double frac = above / n, se_frac = std::sqrt(frac * (1 - frac) / n);
    double t_mean = 0.0;
    const Vector& g = t.axes[0];
    for (Eigen::Index i = 0; i + 1 < g.size(); ++i)
      t_mean += 0.5 * (g[i + 1] - g[i]) * (g[i] * t.density[i] + g[i + 1] * t.density[i + 1]);
    const double t_frac = t.box_mass(Vector::Constant(1, 1.5), Vector::Constant(1, t.upper(0)), 256);
    MESSAGE("mean " << t_mean << " vs " << mean << " +- " << se_mean << "; mass above 1.5 " << t_frac << " vs " << frac);
    CHECK(std::abs(t_mean - mean) <= 3 * se_mean);
    CHECK(std::abs(t_frac - frac) <= 3 * se_frac);
  }
  SUBCASE("normalizer equals the Feynman-Kac value of pre-trained rollouts") {
    const auto t = target_density(w1, 1, 3, 1.0);
    const int n = 100000;
    RolloutOptions ro;
    ro.record = false;
    const auto batch = rollout(w1.pretrained_drift_fn(), w1.schedule(), w1.grid(), InitialLaw::standard_gaussian(), 1,
                               std::vector<int>(n, 1), std::vector<int>(n, 3), 13, ro);
    double mean = 0.0, sq = 0.0;
    for (int k = 0; k < n; ++k) {
      const double p = w1_label_prob(batch.terminal(0, k), 3);
      mean += p;
      sq += p * p;
    }
    mean /= n;
    const double se = std::sqrt((sq / n - mean * mean) / n);
    MESSAGE("C " << t.normalizer << " vs Monte Carlo " << mean << " +- " << se);
    CHECK(std::abs(mean - t.normalizer) <= 3 * se);
  }
  SUBCASE("invalid inputs") {
    CHECK_THROWS_AS(target_density(w1, 0, 4, 1.0), ContractViolation);
    CHECK_THROWS_AS(target_density(w1, 0, 0, -1.0), ConfigError);
  }
}

TEST_CASE("distances") {
  const auto w1 = make_world_w1();
  const auto t = target_density(w1, 1, 1, 1.0);
  SUBCASE("self-sampling: TV within the sampling-noise bound") {
    RngStream rng(2, 0);
    const Matrix xs = t.sample(200000, rng);
    const double tv = tv_distance(xs, t, 100);
    MESSAGE("self TV " << tv << " W1 " << wasserstein1(xs, t));
    CHECK(tv <= 0.03);
    CHECK(wasserstein1(xs, t) <= 0.02);
  }
  SUBCASE("a far point mass has TV 1") {
    const Matrix far = Matrix::Constant(1, 2000, 100.0);
    CHECK(tv_distance(far, t, 100) == doctest::Approx(1.0).epsilon(1e-6));
    const Matrix inside = Matrix::Constant(1, 2000, t.lower(0) + 1e-3);
    CHECK(tv_distance(inside, t, 100) >= 0.99);
  }
  SUBCASE("empirical W1") {
    const Matrix a = Matrix::Random(1, 500);
    CHECK(wasserstein1(a, a) == 0.0);
    CHECK(wasserstein1(a, Matrix((a.array() + 0.5).matrix())) == doctest::Approx(0.5).epsilon(1e-12));
    const Matrix b = Matrix::Random(2, 300);
    CHECK(wasserstein1(b, b) == 0.0);
  }
  SUBCASE("W1 to the target of a shifted sample") {
    RngStream rng(4, 0);
    const Matrix xs = t.sample(5000, rng);
    const double base = wasserstein1(xs, t);
    const double shifted = wasserstein1(Matrix((xs.array() + 0.3).matrix()), t);
    CHECK(shifted == doctest::Approx(0.3).epsilon(0.1));
    CHECK(base < 0.05);
  }
  SUBCASE("2-D self-sampling") {
    const auto w2 = make_world_w2();
    const auto t2 = target_density(w2, 0, 0, 1.0);
    RngStream rng(6, 0);
    const Matrix xs = t2.sample(100000, rng);
    const double tv = tv_distance(xs, t2, 10);
    const double w = wasserstein1(xs, t2, 64, 1);
    MESSAGE("2-D self TV " << tv << " sliced W1 " << w);
    CHECK(tv <= 0.03);
    CHECK(w <= 0.03);
  }
  SUBCASE("the metric separates conditioned from unconditioned sampling") {
    const Matrix doob = sample_doob(w1, 0, 1, 1.0, 50000, 3);
    const Matrix pre = w1.sample_pretrained(0, 50000, 3);
    const auto target = target_density(w1, 0, 1, 1.0);
    const double tv_doob = tv_distance(doob, target), tv_pre = tv_distance(pre, target);
    MESSAGE("doob TV " << tv_doob << " pre-trained TV " << tv_pre);
    CHECK(tv_doob <= 0.03);
    CHECK(tv_pre >= 0.2);
  }
  CHECK_THROWS_AS(tv_distance(Matrix::Zero(1, 10), t), ContractViolation);
}

TEST_CASE("classification report") {
  const auto w1 = make_world_w1();
  SUBCASE("all samples in their bin") {
    std::vector<ConditionSamples> s;
    const double centers[4] = {-3.0, -0.75, 0.75, 3.0};
    for (int c = 0; c < 2; ++c)
      for (int y = 0; y < 4; ++y) s.push_back(constant_condition(c, y, std::vector<double>(128, centers[y])));
    const auto rep = classification_report(w1, s);
    CHECK(rep.accuracy == 1.0);
    CHECK(rep.accuracy_se == 0.0);
    CHECK(rep.macro_f1 == 1.0);
    CHECK_FALSE(rep.incomplete);
    for (int y = 0; y < 4; ++y) CHECK(rep.confusion.row(y).sum() == 256);
  }
  SUBCASE("uniform over bins gives chance level") {
    std::vector<ConditionSamples> s;
    const double centers[4] = {-3.0, -0.75, 0.75, 3.0};
    for (int y = 0; y < 4; ++y) {
      std::vector<double> xs;
      for (int i = 0; i < 400; ++i) xs.push_back(centers[i % 4]);
      s.push_back(constant_condition(0, y, xs));
    }
    const auto rep = classification_report(w1, s);
    CHECK(rep.accuracy == doctest::Approx(0.25));
    CHECK(rep.accuracy_se == doctest::Approx(std::sqrt(0.25 * 0.75 / 1600)));
    CHECK(rep.macro_f1 == doctest::Approx(0.25));
  }
  SUBCASE("hand-computed two-class confusion") {
    Eigen::MatrixXi conf(2, 2);
    conf << 9, 1, 3, 7;
    // class 0: P = 9/12, R = 9/10; class 1: P = 7/8, R = 7/10.
    const double f0 = 2 * 0.75 * 0.9 / 1.65, f1 = 2 * 0.875 * 0.7 / 1.575;
    CHECK(macro_f1(conf) == doctest::Approx(0.5 * (f0 + f1)).epsilon(1e-14));
    CHECK(macro_f1(conf) == doctest::Approx(0.79798).epsilon(1e-5));
    std::vector<double> a(9, -3.0), b(7, -0.75);
    a.push_back(-0.75);
    for (int i = 0; i < 3; ++i) b.push_back(-3.0);
    const auto rep = classification_report(w1, {constant_condition(0, 0, a), constant_condition(0, 1, b)}, 1);
    CHECK(rep.accuracy == doctest::Approx(0.8));
    CHECK(rep.confusion(0, 0) == 9);
    CHECK(rep.confusion(1, 0) == 3);
    CHECK(rep.macro_f1 == doctest::Approx(0.5 * (f0 + f1)));
    CHECK(rep.incomplete);  // labels 2 and 3 are missing
  }
  SUBCASE("small conditions mark the report incomplete") {
    std::vector<ConditionSamples> s;
    for (int y = 0; y < 4; ++y) s.push_back(constant_condition(0, y, std::vector<double>(50, 0.0)));
    const auto rep = classification_report(w1, s);
    CHECK(rep.incomplete);
    CHECK(rep.notes.size() == 4);
  }
}

TEST_CASE("serialization of reports and histograms") {
  const auto w1 = make_world_w1();
  const auto t = target_density(w1, 0, 0, 1.0);
  RngStream rng(1, 1);
  const Matrix xs = t.sample(2000, rng);
  std::vector<ConditionSamples> s;
  for (int y = 0; y < 4; ++y) s.push_back({0, y, y == 0 ? xs : Matrix(xs.leftCols(200))});
  auto rep = evaluate_samples(w1, s, 1.0);
  rep.method = "grid";
  const std::string csv = report_csv({rep});
  CHECK(csv.rfind("method,context,label,count,accuracy,accuracy_se,tv,w1,mean_log_prob\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);
  CHECK(rep.rows[0].tv >= 0.0);
  CHECK(rep.rows[1].tv == -1.0);
  CHECK(report_summary(rep).find("macro_f1") != std::string::npos);

  const auto h = histogram(xs, t, 50);
  double mass = 0.0;
  for (double v : h.target_density) mass += v * (t.upper(0) - t.lower(0)) / 50;
  CHECK(mass == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(histogram_csv(h).rfind("center,sample_density,target_density\n", 0) == 0);
  const auto svg = histogram_svg(h, "a < b");
  CHECK(svg.find("<svg") == 0);
  CHECK(svg.find("a &lt; b") != std::string::npos);
}
