#pragma once

// Small dense networks with a hand-written reverse pass, embedding tables with a
// frozen NULL row, a flat parameter view, AdamW, and a bit-exact checkpoint format.

#include "ctrl/common.hpp"

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace ctrl {

/// Fully connected tanh network with a linear output layer. Columns are samples.
class Mlp {
 public:
  struct Tape {
    std::vector<Matrix> activations;  // [0] input, [l] post-activation of layer l
  };

  Mlp() = default;
  /// widths = {input, hidden..., output}.
  Mlp(std::vector<int> widths, std::uint64_t seed, bool zero_output_layer = false);

  int input_dim() const { return widths_.front(); }
  int output_dim() const { return widths_.back(); }
  int layers() const { return static_cast<int>(widths_.size()) - 1; }
  const std::vector<int>& widths() const { return widths_; }
  Eigen::Index parameter_count() const { return params_.size(); }

  Vector& parameters() { return params_; }
  const Vector& parameters() const { return params_; }

  Matrix forward(const Matrix& x) const;
  Matrix forward(const Matrix& x, Tape& tape) const;
  /// Accumulates parameter gradients of <dy, y> into `grad` and returns the
  /// input sensitivities. `tape` must come from forward() on this network.
  Matrix backward(const Tape& tape, const Matrix& dy, Eigen::Ref<Vector> grad) const;

 private:
  Eigen::Map<const Matrix> weight(int layer) const;
  Eigen::Map<const Vector> bias(int layer) const;
  Matrix run(const Matrix& x, Tape* tape) const;

  std::vector<int> widths_;
  std::vector<Eigen::Index> offsets_;
  Vector params_;
};

/// Elementwise tanh (vectorized through exp).
void tanh_inplace(Matrix& m);

/// Lookup table with `rows` embeddings; the last row is the NULL entry, frozen at zero.
class EmbeddingTable {
 public:
  EmbeddingTable() = default;
  EmbeddingTable(int rows, int dim, std::uint64_t seed, double init_std);

  int rows() const { return rows_; }
  int dim() const { return dim_; }
  int null_row() const { return rows_ - 1; }

  Matrix lookup(std::span<const int> ids) const;
  void accumulate(std::span<const int> ids, const Matrix& d_embedding, Eigen::Ref<Vector> grad) const;
  /// Elementwise mask, true for the frozen NULL row.
  std::vector<bool> frozen_mask() const;

  Vector& parameters() { return params_; }
  const Vector& parameters() const { return params_; }

 private:
  int rows_ = 0;
  int dim_ = 0;
  Vector params_;
};

/// theta: parameters of the pre-trained drift; phi: the newly added ones.
enum class Partition { Theta, Phi };

/// Flat view over several parameter blocks owned elsewhere.
class ParamVector {
 public:
  struct Segment {
    std::string name;
    Vector* values;
    Partition partition;
    double learning_rate;
    std::vector<bool> frozen;
    Eigen::Index offset;
  };

  void add(std::string name, Vector& values, Partition partition, double learning_rate,
           std::vector<bool> frozen = {});

  Eigen::Index size() const { return size_; }
  const std::vector<Segment>& segments() const { return segments_; }
  const Segment& segment(std::string_view name) const;

  Vector gather() const;
  void scatter(const Vector& flat) const;
  /// Per-element learning rate; zero for frozen entries.
  Vector learning_rates() const;
  std::vector<Partition> partition_mask() const;

 private:
  std::vector<Segment> segments_;
  Eigen::Index size_ = 0;
};

struct AdamWConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.1;
};

/// Decoupled weight decay: p <- p (1 - lr wd) - lr mhat / (sqrt(vhat) + eps). Minimizes.
class AdamW {
 public:
  AdamW() = default;
  AdamW(Eigen::Index n, AdamWConfig config);

  void set_learning_rates(Vector per_parameter);
  /// Returns false and leaves everything untouched when `grad` is not finite.
  bool step(Vector& params, const Vector& grad);

  const AdamWConfig& config() const { return config_; }
  const Vector& first_moment() const { return m_; }
  const Vector& second_moment() const { return v_; }
  std::int64_t steps() const { return steps_; }
  void restore(Vector m, Vector v, std::int64_t steps);

 private:
  AdamWConfig config_;
  Vector lr_;
  Vector m_;
  Vector v_;
  std::int64_t steps_ = 0;
};

struct Checkpoint {
  static constexpr int kVersion = 2;
  Vector params;
  Vector adam_m;
  Vector adam_v;
  /// Exponential moving average of params; empty when not tracked.
  Vector average;
  std::int64_t adam_steps = 0;
  std::uint64_t rng_seed = 0;
  std::int64_t next_update = 0;
  std::map<std::string, std::string> meta;
};

/// Text format with hexadecimal floats; decode(encode(c)) reproduces every bit.
std::string encode_checkpoint(const Checkpoint& checkpoint);
Checkpoint decode_checkpoint(const std::string& text);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Hex-float helpers shared by the text formats.
std::string hex_double(double value);
double parse_hex_double(std::string_view text);

}  // namespace ctrl
