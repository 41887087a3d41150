#include "doctest.h"

#include "ctrl/guidance.hpp"
#include "support/oracles.hpp"

using namespace ctrl;

namespace {

struct Gmm1 {
  std::vector<double> w, mu, sd;
  double pdf(double x) const {
    double p = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) p += w[i] * testing::gaussian_pdf(x, mu[i], sd[i]);
    return p;
  }
};

// W1 data laws and label model written out independently of the library.
const Gmm1 kW1[2] = {{{0.5, 0.5}, {-2.0, 2.0}, {0.5, 0.5}}, {{0.7, 0.3}, {-1.0, 2.5}, {0.6, 0.4}}};

double w1_label_prob(double x, int y) {
  const double b[3] = {-1.5, 0.0, 1.5};
  double logits[4], acc = 0.0, mx = 0.0;
  for (int k = 0; k < 4; ++k) {
    if (k > 0) acc += 4.0 * (x - b[k - 1]);
    logits[k] = acc;
    mx = k ? std::max(mx, acc) : acc;
  }
  double s = 0.0;
  for (double l : logits) s += std::exp(l - mx);
  return std::exp(logits[y] - mx) / s;
}

// Normalized p^pre(x | c) p(y | x)^gamma on [-8, 8].
std::function<double(double)> tilted_density(int c, int y, double gamma) {
  auto un = [c, y, gamma](double x) { return kW1[c].pdf(x) * std::pow(w1_label_prob(x, y), gamma); };
  const double z = testing::simpson(un, -8.0, 8.0, 4000);
  return [un, z](double x) { return un(x) / z; };
}

// E[p(y | x_T)^gamma | x_t = x] from the closed-form Gaussian posterior of x_T, by Simpson.
double h_oracle(int c, int y, double gamma, double t, double x, double horizon) {
  const double tau = horizon - t, a = std::exp(-0.5 * tau), v = 1.0 - std::exp(-tau);
  const Gmm1& g = kW1[c];
  Gmm1 post;
  double total = 0.0;
  for (std::size_t i = 0; i < g.w.size(); ++i) {
    const double s2 = g.sd[i] * g.sd[i], m = a * a * s2 + v;
    const double r = g.w[i] * testing::gaussian_pdf(x, a * g.mu[i], std::sqrt(m));
    post.w.push_back(r);
    post.mu.push_back((v * g.mu[i] + a * s2 * x) / m);
    post.sd.push_back(std::sqrt(s2 * v / m));
    total += r;
  }
  for (double& r : post.w) r /= total;
  return testing::simpson([&](double z) { return post.pdf(z) * std::pow(w1_label_prob(z, y), gamma); }, -10.0, 10.0,
                          8000);
}

std::vector<double> row(const Matrix& m) { return {m.data(), m.data() + m.size()}; }

}  // namespace

TEST_CASE("Doob h-transform values") {
  const auto world = make_world_w1();
  const double T = world.grid().horizon();

  SUBCASE("matches the quadrature oracle") {
    for (int c : {0, 1})
      for (int y : {0, 1, 3})
        for (double t : {0.0, 2.5, 4.9})
          for (double x : {-1.0, 0.5, 2.0}) {
            const DoobGuide guide(world, c, y, 1.5);
            const double ref = std::log(h_oracle(c, y, 1.5, t, x, T));
            CHECK(guide.log_value(t, Vector::Constant(1, x)) == doctest::Approx(ref).epsilon(1e-7));
          }
  }
  SUBCASE("gradient agrees with finite differences of log h") {
    const DoobGuide guide(world, 1, 2, 2.0);
    DoobOptions fd;
    fd.finite_difference = true;
    const DoobGuide guide_fd(world, 1, 2, 2.0, nullptr, fd);
    for (double t : {0.5, 2.5, 4.5})
      for (double x : {-1.3, 0.2, 1.7}) {
        const Vector xv = Vector::Constant(1, x);
        const Vector g = guide.log_value_gradient(t, xv);
        CHECK(testing::max_relative_error(g, guide_fd.log_value_gradient(t, xv)) <= 1e-6);
      }
  }
  SUBCASE("gamma = 0 gives no correction") {
    const DoobGuide guide(world, 0, 1, 0.0);
    CHECK(guide.correction(1.0, Vector::Constant(1, 0.3))[0] == 0.0);
  }
  SUBCASE("a constant label likelihood gives no correction") {
    const Vector zero(Vector::Zero(1));
    std::vector<MixtureLaw> laws{world.data_law(0)};
    LabelAxis flat;
    flat.boundaries = {0.0};
    flat.sharpness = 0.0;
    const DiffusionWorld w("flat", laws, LabelOracle({flat}), world.grid());
    const DoobGuide guide(w, 0, 1, 3.0);
    for (double t : {0.0, 2.0, 4.0}) CHECK(std::abs(guide.correction(t, Vector::Constant(1, 0.7))[0]) <= 1e-12);
  }
  SUBCASE("mirror symmetry of the symmetric context") {
    const DoobGuide up(world, 0, 3, 1.0), down(world, 0, 0, 1.0);
    for (double t : {0.5, 3.0})
      for (double x : {0.3, 1.1}) {
        const double a = up.correction(t, Vector::Constant(1, x))[0];
        const double b = down.correction(t, Vector::Constant(1, -x))[0];
        CHECK(a == doctest::Approx(-b).epsilon(1e-9));
      }
  }
  SUBCASE("Monte-Carlo cross-check with sub-rollouts from (T/2, 0.5)") {
    const double t0 = T / 2;
    const DoobGuide guide(world, 0, 3, 1.0);
    const double exact = std::exp(guide.log_value(t0, Vector::Constant(1, 0.5)));
    const int steps = 256, n = 100000;
    DriftFn shifted = [&](const DriftQuery& q, const Matrix& x, Matrix& out) {
      DriftQuery qq = q;
      qq.t = q.t + t0;
      world.pretrained_drift(qq, x, out);
    };
    RolloutOptions ro;
    ro.record = false;
    const auto batch = rollout(shifted, world.schedule(), TimeGrid(T - t0, steps),
                               InitialLaw::dirac(Vector::Constant(1, 0.5)), 1, std::vector<int>(n, 0),
                               std::vector<int>(n, 3), 17, ro);
    double mean = 0.0, sq = 0.0;
    for (int k = 0; k < n; ++k) {
      const double p = w1_label_prob(batch.terminal(0, k), 3);
      mean += p;
      sq += p * p;
    }
    mean /= n;
    const double se = std::sqrt((sq / n - mean * mean) / n);
    MESSAGE("h exact " << exact << " MC " << mean << " +- " << se);
    CHECK(std::abs(mean - exact) <= 4 * se + 0.01 * exact);
  }
  SUBCASE("degenerate h names the point") {
    struct Impossible final : LabelLikelihood {
      int dim() const override { return 1; }
      int num_labels() const override { return 4; }
      void log_prob(const Matrix& x, std::span<const int>, std::span<const int>, Vector& out,
                    Matrix* grad) const override {
        out = Vector::Constant(x.cols(), -std::numeric_limits<double>::infinity());
        if (grad) grad->setZero(1, x.cols());
      }
      Vector probs(const Vector&, int) const override { return Vector::Zero(4); }
    } impossible;
    const DoobGuide guide(world, 0, 1, 1.0, &impossible);
    CHECK_THROWS_WITH_AS(guide.log_value(5.0, Vector::Constant(1, -0.25)), doctest::Contains("t = 5, x = (-0.25)"),
                         NumericalError);
  }
  SUBCASE("invalid configuration") {
    CHECK_THROWS_AS(DoobGuide(world, 0, 1, -1.0), ConfigError);
    CHECK_THROWS_AS(DoobGuide(world, 0, 4, 1.0), ContractViolation);
    const auto w2 = make_world_w2();
    const OracleLikelihood lik(w2.oracle(), 2);
    CHECK_THROWS_AS(DoobGuide(w2, 0, 0, 1.0, &lik), ConfigError);
  }
}

TEST_CASE("Doob sampling tables") {
  const auto world = make_world_w1();
  const DoobGuide guide(world, 1, 2, 2.0);
  Matrix pts(1, 41);
  for (int i = 0; i < 41; ++i) pts(0, i) = -5.0 + 0.25 * i;
  for (int step : {0, 100, 200, 255}) CHECK(guide.table_error(step, pts) <= 1e-5);

  SUBCASE("W2 tables") {
    const auto w2 = make_world_w2();
    const DoobGuide g2(w2, 0, 0, 1.0);
    Matrix p2 = Matrix::Random(2, 20) * 3.0;
    CHECK(g2.table_error(128, p2) <= 1e-5);
  }
}

TEST_CASE("Doob samples follow the tilted law") {
  const auto world = make_world_w1();
  const int n = 60000;
  SUBCASE("gamma = 0 reproduces the pre-trained law") {
    const Matrix xs = sample_doob(world, 1, 1, 0.0, n, 5);
    const double tv = testing::histogram_tv(row(xs), tilted_density(1, 1, 0.0), -5.0, 5.0, 100);
    MESSAGE("gamma 0 TV " << tv);
    CHECK(tv <= 0.02);
  }
  for (auto [gamma, c, y] : {std::tuple{0.5, 1, 3}, std::tuple{1.0, 0, 1}, std::tuple{2.0, 0, 1}}) {
    CAPTURE(gamma);
    {
      const Matrix xs = sample_doob(world, c, y, gamma, n, 7);
      const double tv = testing::histogram_tv(row(xs), tilted_density(c, y, gamma), -5.0, 5.0, 100);
      MESSAGE("gamma " << gamma << " c " << c << " y " << y << " TV " << tv);
      CHECK(tv <= 0.03);
    }
  }
}

TEST_CASE("Doob with a classifier equals the oracle when the classifier is the oracle") {
  const auto world = make_world_w1();
  const OracleLikelihood lik(world.oracle(), 1);
  const DoobGuide a(world, 0, 2, 1.0), b(world, 0, 2, 1.0, &lik);
  for (double t : {0.2, 2.0, 4.8})
    CHECK(a.correction(t, Vector::Constant(1, 0.4))[0] ==
          doctest::Approx(b.correction(t, Vector::Constant(1, 0.4))[0]).epsilon(1e-12));
  Matrix pts(1, 9);
  for (int i = 0; i < 9; ++i) pts(0, i) = -4.0 + i;
  CHECK(b.table_error(64, pts) <= 1e-5);
}

TEST_CASE("reconstruction guidance") {
  const auto world = make_world_w1();
  const OracleLikelihood lik(world.oracle(), 1);
  SUBCASE("near the end it approaches gamma grad log p") {
    const double T = world.grid().horizon();
    const Vector x = Vector::Constant(1, 0.3);
    Vector g;
    world.oracle().log_prob(x, 0, 2, &g);
    const Vector r = reconstruction_drift(world, lik, T - 1e-6, x, 0, 2, 1.5);
    CHECK(r[0] == doctest::Approx(1.5 * g[0]).epsilon(1e-4));
  }
  SUBCASE("gamma = 0 and batched form") {
    CHECK(reconstruction_drift(world, lik, 1.0, Vector::Constant(1, 0.3), 0, 2, 0.0)[0] == 0.0);
    const DriftFn fn = reconstruction_drift_fn(world, lik, 2.0);
    const std::vector<int> c{0, 1}, y{1, 3};
    DriftQuery q;
    q.t = 3.0;
    q.contexts = c;
    q.labels = y;
    Matrix x(1, 2);
    x << -0.4, 1.2;
    Matrix out;
    fn(q, x, out);
    for (int k = 0; k < 2; ++k) {
      const double ref = world.pretrained_drift(3.0, x.col(k), c[k])[0] +
                         reconstruction_drift(world, lik, 3.0, x.col(k), c[k], y[k], 2.0)[0];
      CHECK(out(0, k) == doctest::Approx(ref).epsilon(1e-12));
    }
  }
}

TEST_CASE("systematic resampling") {
  SUBCASE("equal weights return every particle once") {
    const Vector w = Vector::Constant(2, 0.5);
    CHECK(systematic_resample(w, 0.0) == std::vector<int>{0, 1});
    CHECK(systematic_resample(w, 0.999) == std::vector<int>{0, 1});
  }
  SUBCASE("a degenerate weight duplicates its particle") {
    CHECK(systematic_resample(Vector{{1.0, 0.0}}, 0.3) == std::vector<int>{0, 0});
    CHECK(systematic_resample(Vector{{0.0, 1.0}}, 0.3) == std::vector<int>{1, 1});
  }
  SUBCASE("offspring counts are floor or ceil of N w") {
    const Vector w{{0.1, 0.25, 0.05, 0.6}};
    for (double u : {0.0, 0.3, 0.7, 0.99}) {
      const auto idx = systematic_resample(w, u);
      for (int k = 0; k < 4; ++k) {
        const auto cnt = std::count(idx.begin(), idx.end(), k);
        CHECK(cnt >= std::floor(4 * w[k]));
        CHECK(cnt <= std::ceil(4 * w[k]));
      }
    }
  }
  CHECK_THROWS_AS(systematic_resample(Vector{{0.5, 0.6}}, 0.1), ContractViolation);
}

TEST_CASE("SMC with twisted potentials") {
  const auto world = make_world_w1();
  const OracleLikelihood lik(world.oracle(), 1);
  SUBCASE("uniform potentials never resample and give the pre-trained law") {
    const auto res = smc_sample(world, lik, 0, 1, 0.0, 4096, 3);
    CHECK(res.resamples == 1);  // only the final one
    for (double e : res.ess) CHECK(e == doctest::Approx(4096.0));
    const double tv = testing::histogram_tv(row(res.samples), tilted_density(0, 1, 0.0), -5.0, 5.0, 100);
    CHECK(tv <= 0.06);
  }
  SUBCASE("approximates the tilted law at 4096 particles") {
    for (auto [c, y] : {std::pair{0, 1}, std::pair{1, 2}}) {
      const auto res = smc_sample(world, lik, c, y, 1.0, 4096, 11);
      const double tv = testing::histogram_tv(row(res.samples), tilted_density(c, y, 1.0), -5.0, 5.0, 100);
      MESSAGE("SMC c " << c << " y " << y << " TV " << tv << " resamples " << res.resamples);
      CHECK(tv <= 0.10);
      CHECK(std::abs(res.log_weights.array().exp().sum() - 1.0) <= 1e-9);
    }
  }
  SUBCASE("deterministic for a fixed seed") {
    const auto a = smc_sample(world, lik, 1, 0, 2.0, 256, 4);
    const auto b = smc_sample(world, lik, 1, 0, 2.0, 256, 4);
    CHECK((a.samples.array() == b.samples.array()).all());
  }
  SUBCASE("two particles with identical potentials stay distinct") {
    // Equal potentials give ESS = N, so no intermediate resampling; the final systematic
    // resample with equal weights keeps each particle once.
    const auto res = smc_sample(world, lik, 1, 1, 0.0, 2, 6);
    CHECK(res.resamples == 1);
    CHECK(res.samples.cols() == 2);
    CHECK(res.samples(0, 0) != res.samples(0, 1));
  }
  CHECK_THROWS_AS(smc_sample(world, lik, 0, 0, 1.0, 0, 1), ConfigError);
}

TEST_CASE("reconstruction guidance differs from the exact Doob drift at early times") {
  // Reconstruction plugs the posterior mean into the likelihood instead of averaging the
  // likelihood over the posterior, so it only agrees with Doob as t -> T.
  const auto world = make_world_w1();
  const OracleLikelihood lik(world.oracle(), 1);
  const Vector x = Vector::Constant(1, 0.2);
  double early = 0.0, late = 0.0;
  for (double t : {1.0, 4.99}) {
    const double r = reconstruction_drift(world, lik, t, x, 0, 1, 1.0)[0];
    const double d = doob_drift_exact(world, t, x, 0, 1, 1.0)[0];
    const double rel = std::abs(r - d) / std::max(std::abs(d), 1e-12);
    MESSAGE("t " << t << " reconstruction " << r << " doob " << d << " relative gap " << rel);
    (t < 2.0 ? early : late) = rel;
  }
  CHECK(early > 0.1);
  CHECK(late < early);
}

TEST_CASE("stepwise best-of-N") {
  const auto world = make_world_w1();
  const OracleLikelihood lik(world.oracle(), 1);
  SUBCASE("one candidate reproduces pre-trained rollout bit for bit") {
    const int n = 300;
    const Matrix bon = stepwise_best_of_n(world, lik, 1, 2, 1, n, 9);
    RolloutOptions ro;
    ro.record = false;
    const auto ref = rollout(world.pretrained_drift_fn(), world.schedule(), world.grid(),
                             InitialLaw::standard_gaussian(), 1, std::vector<int>(n, 1), std::vector<int>(n, 2), 9, ro);
    CHECK((bon.array() == ref.terminal.array()).all());
  }
  SUBCASE("more candidates raise the label likelihood") {
    const Matrix one = stepwise_best_of_n(world, lik, 0, 2, 1, 512, 2);
    const Matrix four = stepwise_best_of_n(world, lik, 0, 2, 4, 512, 2);
    auto mean_lp = [&](const Matrix& xs) {
      double s = 0.0;
      for (Eigen::Index k = 0; k < xs.cols(); ++k) s += std::log(w1_label_prob(xs(0, k), 2));
      return s / static_cast<double>(xs.cols());
    };
    CHECK(mean_lp(four) > mean_lp(one));
  }
  SUBCASE("workers do not change the result") {
    const Matrix a = stepwise_best_of_n(world, lik, 1, 0, 3, 600, 5, 1);
    const Matrix b = stepwise_best_of_n(world, lik, 1, 0, 3, 600, 5, 3);
    CHECK((a.array() == b.array()).all());
  }
  CHECK_THROWS_AS(stepwise_best_of_n(world, lik, 0, 0, 0, 10, 1), ConfigError);
}

TEST_CASE("best-of-2 over a single step keeps the extreme candidate") {
  // With one step xhat is the candidate itself, so label 3 (increasing in x) keeps
  // x0 + dt f + sigma max(z1, z2) and label 0 keeps the min: the gap is sigma sqrt(dt) |z1 - z2|.
  const auto world = make_world_w1(1);
  const OracleLikelihood lik(world.oracle(), 1);
  const int n = 20000;
  const Matrix hi = stepwise_best_of_n(world, lik, 0, 3, 2, n, 17);
  const Matrix lo = stepwise_best_of_n(world, lik, 0, 0, 2, n, 17);
  const double scale = std::sqrt(world.grid().dt());
  double sum = 0.0, sum2 = 0.0;
  bool ordered = true;
  for (int k = 0; k < n; ++k) {
    const double g = (hi(0, k) - lo(0, k)) / scale;
    ordered = ordered && g >= 0.0;
    sum += g;
    sum2 += g * g;
  }
  CHECK(ordered);
  const double mean = sum / n, se = std::sqrt((sum2 / n - mean * mean) / n);
  const double expected = 2.0 / std::sqrt(M_PI);  // E|z1 - z2|
  MESSAGE("mean gap " << mean << " expected " << expected << " se " << se);
  CHECK(std::abs(mean - expected) <= 4.0 * se);
  CHECK((sum2 / n) == doctest::Approx(2.0).epsilon(0.05));  // E(z1 - z2)^2
}

TEST_CASE("guidance-strength mixing") {
  const auto world = make_world_w1();
  AugmentedDriftConfig cfg;
  cfg.hidden = {16, 16};
  AugmentedDrift aug(world, cfg);
  Vector p = aug.net().parameters();
  RngStream rng(8, 8);
  for (Eigen::Index i = 0; i < p.size(); ++i) p[i] = 0.3 * rng.normal();
  aug.net().parameters() = p;

  const Vector x = Vector::Constant(1, 0.7);
  const double t = 1.3;
  auto g = [&](int c, int y) {
    const int cc[1] = {c}, yy[1] = {y};
    DriftQuery q;
    q.t = t;
    q.contexts = cc;
    q.labels = yy;
    Matrix out;
    aug.drift(q, Matrix(x), out);
    return Vector(out.col(0));
  };
  const int nc = aug.null_context(), ny = aug.null_label();
  CHECK((mixed_guidance_drift(aug, t, x, 1, 2, 1.0, 1.0).array() == g(1, 2).array()).all());
  CHECK((mixed_guidance_drift(aug, t, x, 1, 2, 1.0, 0.0).array() == g(1, ny).array()).all());
  CHECK((mixed_guidance_drift(aug, t, x, 1, 2, 0.0, 0.0).array() == g(nc, ny).array()).all());
  const Vector mixed = mixed_guidance_drift(aug, t, x, 1, 2, 0.5, 3.0);
  const Vector ref = g(nc, ny) + 0.5 * (g(1, ny) - g(nc, ny)) + 3.0 * (g(1, 2) - g(1, ny));
  CHECK(mixed[0] == doctest::Approx(ref[0]).epsilon(1e-12));
  CHECK((g(1, ny).array() == world.pretrained_drift(t, x, 1).array()).all());
}

TEST_CASE("classifier-free toy baseline") {
  const auto world = make_world_w1();
  const OracleLikelihood lik(world.oracle(), 1);
  AugmentedDriftConfig acfg;
  acfg.hidden = {32, 32};
  SUBCASE("zero budget leaves the model unchanged") {
    AugmentedDrift aug(world, acfg);
    const Vector before = aug.parameters().gather();
    ClassifierFreeConfig cfg;
    cfg.budget = 0;
    const auto rep = classifier_free_toy_baseline(aug, lik, cfg);
    CHECK(rep.loss.empty());
    CHECK((aug.parameters().gather().array() == before.array()).all());
  }
  SUBCASE("regression loss decreases and samples move toward the label") {
    AugmentedDrift aug(world, acfg);
    ClassifierFreeConfig cfg;
    cfg.budget = 4000;
    cfg.steps = 1500;
    const auto rep = classifier_free_toy_baseline(aug, lik, cfg);
    auto window = [&](std::size_t from) {
      double s = 0.0;
      for (std::size_t i = from; i < from + 200; ++i) s += rep.loss[i];
      return s / 200;
    };
    MESSAGE("loss " << window(0) << " -> " << window(rep.loss.size() - 200));
    CHECK(window(rep.loss.size() - 200) < window(0));
    const int n = 2000;
    RolloutOptions ro;
    ro.record = false;
    const auto batch = rollout(mixed_guidance_fn(aug, 1.0, 1.0), world.schedule(), world.grid(),
                               InitialLaw::standard_gaussian(), 1, std::vector<int>(n, 0), std::vector<int>(n, 3), 1, ro);
    double hit = 0.0;
    for (int k = 0; k < n; ++k) hit += batch.terminal(0, k) > 1.5;
    MESSAGE("fraction above 1.5: " << hit / n);
    CHECK(hit / n > 0.6);
  }
}
