#pragma once

// Euler–Maruyama integration of controlled SDEs dx = g(t,c,y,x) dt + sigma(t) dw,
// trajectory storage with replayable noise, and the pathwise KL accumulator
//   Z_{j+1} = Z_j + |g - f|^2 / (2 sigma(t_j)^2) * dt.

#include "ctrl/common.hpp"

#include <span>
#include <vector>

namespace ctrl {

class TimeGrid {
 public:
  TimeGrid(double horizon, int steps);

  double horizon() const { return horizon_; }
  int steps() const { return steps_; }
  double dt() const { return dt_; }
  double time(int step) const { return step * dt_; }

  bool operator==(const TimeGrid& other) const = default;

 private:
  double horizon_;
  int steps_;
  double dt_;
};

class NoiseSchedule {
 public:
  static NoiseSchedule constant(double sigma);
  explicit NoiseSchedule(std::function<double(double)> sigma);

  double operator()(double t) const { return sigma_ ? sigma_(t) : constant_; }
  /// Throws ConfigError unless sigma is finite and >= 0 (> 0 if strictly_positive) on the grid.
  void validate(const TimeGrid& grid, bool strictly_positive = false) const;

 private:
  NoiseSchedule() = default;
  double constant_ = 0.0;
  std::function<double(double)> sigma_;
};

struct InitialLaw {
  enum class Kind { StandardGaussian, Dirac };
  Kind kind = Kind::StandardGaussian;
  Vector point;

  static InitialLaw standard_gaussian() { return {}; }
  static InitialLaw dirac(Vector point) { return {Kind::Dirac, std::move(point)}; }
};

/// Context passed to batched drift evaluations. `contexts`/`labels` index the
/// columns of the state block being evaluated.
struct DriftQuery {
  int step = 0;
  double t = 0.0;
  std::span<const int> contexts;
  std::span<const int> labels;
};

/// Batched drift: x is d x m (one column per path), out is resized to d x m.
using DriftFn = std::function<void(const DriftQuery&, const Matrix& x, Matrix& out)>;

struct TrajectoryBatch {
  TimeGrid grid{1.0, 1};
  int dim = 0;
  std::uint64_t seed = 0;
  std::vector<int> contexts;
  std::vector<int> labels;
  /// L+1 entries of d x n when recorded, empty otherwise.
  std::vector<Matrix> states;
  /// L entries of d x n Brownian increments (std sqrt(dt)) when recorded.
  std::vector<Matrix> noises;
  Matrix initial;
  Matrix terminal;
  /// (L+1) x n running KL accumulator; empty unless accumulated.
  Matrix kl;

  int size() const { return static_cast<int>(contexts.size()); }
  bool recorded() const { return !states.empty(); }
  bool has_kl() const { return kl.size() > 0; }
  /// Z_T per path.
  Vector path_kl() const;
};

struct RolloutOptions {
  /// Keep every state and noise increment (needed for replay and BPTT).
  bool record = true;
  /// When set, Z_t is accumulated against this base drift during the rollout.
  const DriftFn* base = nullptr;
  int workers = 0;  // 0: default_workers()
  int chunk = 256;
};

TrajectoryBatch rollout(const DriftFn& drift, const NoiseSchedule& sched, const TimeGrid& grid,
                        const InitialLaw& init, int dim, std::vector<int> contexts,
                        std::vector<int> labels, std::uint64_t seed,
                        const RolloutOptions& options = {});

/// Re-integrates a recorded batch with a (possibly different) drift, reusing its
/// initial states and noise increments exactly.
TrajectoryBatch replay(const DriftFn& drift, const NoiseSchedule& sched,
                       const TrajectoryBatch& recorded, const DriftFn* base = nullptr);

/// Fills batch.kl from recorded states. Throws ConfigError on grid mismatch and
/// ContractViolation if the batch has no recorded states.
void accumulate_kl(TrajectoryBatch& batch, const DriftFn& base, const DriftFn& ctrl,
                   const NoiseSchedule& sched, const TimeGrid& grid);

}  // namespace ctrl
