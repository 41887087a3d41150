#include "ctrl/sde.hpp"

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <sstream>
#include <thread>

namespace ctrl {

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag, std::uint64_t index) {
  std::uint64_t h = mix64(seed);
  for (char ch : tag) h = mix64(h ^ static_cast<unsigned char>(ch));
  return mix64(h ^ mix64(index + 0x632be59bd9b4e019ULL));
}

RngStream::RngStream(std::uint64_t seed, std::uint64_t stream_id)
    : seed_(seed), stream_id_(stream_id) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream_id),
                    static_cast<std::uint32_t>(stream_id >> 32)};
  engine_.seed(seq);
}

int RngStream::index(int n) {
  int i = static_cast<int>(uniform() * n);
  return i < n ? i : n - 1;
}

int default_workers() {
  if (const char* env = std::getenv("CTRL_LAB_WORKERS")) {
    int w = std::atoi(env);
    if (w > 0) return w;
  }
  return 1;
}

void parallel_for(int count, int workers, const std::function<void(int)>& fn) {
  if (count <= 0) return;
  if (workers <= 0) workers = default_workers();
  workers = std::min(workers, count);
  if (workers == 1) {
    for (int i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::mutex mutex;
  int failed_index = count;
  std::exception_ptr failure;
  auto work = [&] {
    for (int i = next++; i < count; i = next++) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(mutex);
        if (i < failed_index) {
          failed_index = i;
          failure = std::current_exception();
        }
      }
    }
  };
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) pool.emplace_back(work);
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

TimeGrid::TimeGrid(double horizon, int steps) : horizon_(horizon), steps_(steps) {
  if (!(horizon > 0.0) || !std::isfinite(horizon)) throw ConfigError("time grid horizon must be positive");
  if (steps < 1) throw ConfigError("time grid needs at least one step");
  dt_ = horizon / steps;
}

NoiseSchedule NoiseSchedule::constant(double sigma) {
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw ConfigError("noise level must be nonnegative");
  NoiseSchedule s;
  s.constant_ = sigma;
  return s;
}

NoiseSchedule::NoiseSchedule(std::function<double(double)> sigma) : sigma_(std::move(sigma)) {
  if (!sigma_) throw ConfigError("empty noise schedule");
}

void NoiseSchedule::validate(const TimeGrid& grid, bool strictly_positive) const {
  for (int j = 0; j <= grid.steps(); ++j) {
    double s = (*this)(grid.time(j));
    const bool ok = strictly_positive ? s > 0.0 : s >= 0.0;
    if (!ok || !std::isfinite(s)) {
      std::ostringstream msg;
      msg << "sigma(t) must be " << (strictly_positive ? "positive" : "nonnegative") << "; got " << s
          << " at t=" << grid.time(j);
      throw ConfigError(msg.str());
    }
  }
}

Vector TrajectoryBatch::path_kl() const {
  if (!has_kl()) throw ContractViolation("KL accumulator was not filled for this batch");
  return kl.row(kl.rows() - 1).transpose();
}

namespace {

[[noreturn]] void report_non_finite(const char* what, int trajectory, int step) {
  std::ostringstream msg;
  msg << "non-finite " << what << " at trajectory " << trajectory << ", step " << step;
  throw NumericalError(msg.str());
}

void check_finite(const Matrix& m, const char* what, int first_path, int step) {
  if (m.allFinite()) return;
  for (Eigen::Index k = 0; k < m.cols(); ++k)
    if (!m.col(k).allFinite()) report_non_finite(what, first_path + static_cast<int>(k), step);
}

// Shared Euler–Maruyama loop over one chunk of paths. `noise(j, z)` fills the
// Brownian increments of step j for the chunk.
template <typename NoiseSource>
void integrate_chunk(const DriftFn& drift, const DriftFn* base, const NoiseSchedule& sched,
                     TrajectoryBatch& batch, int begin, Matrix x, NoiseSource&& noise) {
  const TimeGrid& grid = batch.grid;
  const int m = static_cast<int>(x.cols());
  const bool record = batch.recorded();
  const double dt = grid.dt();

  DriftQuery q;
  q.contexts = std::span<const int>(batch.contexts).subspan(begin, m);
  q.labels = std::span<const int>(batch.labels).subspan(begin, m);

  batch.initial.middleCols(begin, m) = x;
  if (record) batch.states[0].middleCols(begin, m) = x;

  Matrix g, f, z(batch.dim, m);
  for (int j = 0; j < grid.steps(); ++j) {
    q.step = j;
    q.t = grid.time(j);
    drift(q, x, g);
    check_finite(g, "drift", begin, j);
    noise(j, z);
    const double sigma = sched(q.t);
    if (base) {
      (*base)(q, x, f);
      const double scale = dt / (2.0 * sigma * sigma);
      batch.kl.block(j + 1, begin, 1, m) =
          batch.kl.block(j, begin, 1, m) + scale * (g - f).colwise().squaredNorm();
    }
    x.noalias() += dt * g;
    x.noalias() += sigma * z;
    check_finite(x, "state", begin, j + 1);
    if (record) {
      batch.states[j + 1].middleCols(begin, m) = x;
      batch.noises[j].middleCols(begin, m) = z;
    }
  }
  batch.terminal.middleCols(begin, m) = x;
}

void allocate(TrajectoryBatch& batch, bool record, bool with_kl) {
  const int n = batch.size();
  const int steps = batch.grid.steps();
  batch.initial.resize(batch.dim, n);
  batch.terminal.resize(batch.dim, n);
  batch.states.clear();
  batch.noises.clear();
  if (record) {
    batch.states.assign(steps + 1, Matrix(batch.dim, n));
    batch.noises.assign(steps, Matrix(batch.dim, n));
  }
  if (with_kl) batch.kl = Matrix::Zero(steps + 1, n);
  else batch.kl.resize(0, 0);
}

}  // namespace

TrajectoryBatch rollout(const DriftFn& drift, const NoiseSchedule& sched, const TimeGrid& grid,
                        const InitialLaw& init, int dim, std::vector<int> contexts,
                        std::vector<int> labels, std::uint64_t seed,
                        const RolloutOptions& options) {
  if (contexts.empty()) throw ContractViolation("rollout needs at least one path");
  if (labels.size() != contexts.size()) throw ContractViolation("contexts/labels size mismatch");
  if (dim < 1) throw ContractViolation("state dimension must be positive");
  if (init.kind == InitialLaw::Kind::Dirac && init.point.size() != dim)
    throw ConfigError("Dirac initial point has wrong dimension");
  sched.validate(grid, options.base != nullptr);

  TrajectoryBatch batch;
  batch.grid = grid;
  batch.dim = dim;
  batch.seed = seed;
  batch.contexts = std::move(contexts);
  batch.labels = std::move(labels);
  allocate(batch, options.record, options.base != nullptr);

  const int n = batch.size();
  const int chunk = std::max(1, options.chunk);
  const int chunks = (n + chunk - 1) / chunk;
  const double sqrt_dt = std::sqrt(grid.dt());

  parallel_for(chunks, options.workers, [&](int ci) {
    const int begin = ci * chunk;
    const int m = std::min(chunk, n - begin);
    std::vector<RngStream> rngs;
    rngs.reserve(m);
    for (int k = 0; k < m; ++k) rngs.emplace_back(seed, static_cast<std::uint64_t>(begin + k));

    Matrix x(dim, m);
    for (int k = 0; k < m; ++k) {
      if (init.kind == InitialLaw::Kind::StandardGaussian)
        for (int i = 0; i < dim; ++i) x(i, k) = rngs[k].normal();
      else
        x.col(k) = init.point;
    }
    integrate_chunk(drift, options.base, sched, batch, begin, std::move(x),
                    [&](int, Matrix& z) {
                      for (int k = 0; k < m; ++k)
                        for (int i = 0; i < dim; ++i) z(i, k) = rngs[k].normal() * sqrt_dt;
                    });
  });
  return batch;
}

TrajectoryBatch replay(const DriftFn& drift, const NoiseSchedule& sched,
                       const TrajectoryBatch& recorded, const DriftFn* base) {
  if (!recorded.recorded()) throw ContractViolation("replay needs a batch with recorded noise");
  sched.validate(recorded.grid, base != nullptr);
  TrajectoryBatch batch;
  batch.grid = recorded.grid;
  batch.dim = recorded.dim;
  batch.seed = recorded.seed;
  batch.contexts = recorded.contexts;
  batch.labels = recorded.labels;
  allocate(batch, true, base != nullptr);
  integrate_chunk(drift, base, sched, batch, 0, recorded.initial,
                  [&](int j, Matrix& z) { z = recorded.noises[j]; });
  return batch;
}

void accumulate_kl(TrajectoryBatch& batch, const DriftFn& base, const DriftFn& ctrl,
                   const NoiseSchedule& sched, const TimeGrid& grid) {
  if (!(batch.grid == grid)) throw ConfigError("time grid of batch does not match the given grid");
  if (!batch.recorded()) throw ContractViolation("accumulate_kl needs recorded states");
  sched.validate(grid, true);
  const int n = batch.size();
  batch.kl = Matrix::Zero(grid.steps() + 1, n);
  DriftQuery q;
  q.contexts = batch.contexts;
  q.labels = batch.labels;
  Matrix g, f;
  for (int j = 0; j < grid.steps(); ++j) {
    q.step = j;
    q.t = grid.time(j);
    ctrl(q, batch.states[j], g);
    base(q, batch.states[j], f);
    const double sigma = sched(q.t);
    batch.kl.row(j + 1) =
        batch.kl.row(j) + (grid.dt() / (2.0 * sigma * sigma)) * (g - f).colwise().squaredNorm();
  }
}

}  // namespace ctrl
