#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace ctrl {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Invalid or inconsistent configuration (bad schema, grid mismatch, missing NULL rows).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A computation produced NaN/Inf or underflowed beyond recovery.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// API misuse: calling an operation outside its documented preconditions.
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// SplitMix64 finalizer; used to derive independent seeds from (seed, tag, index).
std::uint64_t mix64(std::uint64_t x);
std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag, std::uint64_t index = 0);

/// One reproducible random stream. Identical (seed, stream_id) reproduce identical draws.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream_id);

  double normal() { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }
  /// Uniform integer in [0, n).
  int index(int n);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_id() const { return stream_id_; }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_id_;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

/// Worker count from CTRL_LAB_WORKERS (default 1). Results never depend on it.
int default_workers();

/// Runs fn(i) for i in [0, count) on `workers` threads. Work items must write
/// disjoint outputs. The exception thrown by the lowest failing index is rethrown.
void parallel_for(int count, int workers, const std::function<void(int)>& fn);

}  // namespace ctrl
