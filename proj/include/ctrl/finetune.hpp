#pragma once

// Conditioning by KL-regularized control: the augmented drift
//   g(t, c, y, x) = f(t, c, x) + h(t/T, x, e_c, e_y)
// is trained by back-propagating through recorded Euler–Maruyama rollouts to
// maximize E[gamma log p(y | x_T, c) - Z_T].

#include "ctrl/classifier.hpp"
#include "ctrl/neural.hpp"
#include "ctrl/sde.hpp"
#include "ctrl/worlds.hpp"

#include <filesystem>
#include <optional>
#include <span>
#include <vector>

namespace ctrl {

struct AugmentedDriftConfig {
  std::vector<int> hidden{64, 64, 64};
  int label_embedding = 8;
  int context_embedding = 8;
  double embedding_init_std = 0.1;
  double net_learning_rate = 1e-3;
  double embedding_learning_rate = 1e-2;
  double base_learning_rate = 1e-4;
  /// Only meaningful with a learned score-network base.
  bool train_base = false;
  std::uint64_t seed = 1;
};

class AugmentedDrift {
 public:
  /// Analytic base drift of the world.
  AugmentedDrift(const DiffusionWorld& world, AugmentedDriftConfig config = {});
  /// Base drift x/2 + s(T - t, x, c) from a learned score network (copied).
  AugmentedDrift(const DiffusionWorld& world, const ScoreNet& base, AugmentedDriftConfig config = {});

  const DiffusionWorld& world() const { return *world_; }
  const AugmentedDriftConfig& config() const { return config_; }
  int null_label() const { return labels_.null_row(); }
  int null_context() const { return contexts_.null_row(); }
  bool has_base_net() const { return base_.has_value(); }
  bool trains_base() const { return base_.has_value() && config_.train_base; }

  /// Frozen pre-trained drift f^pre.
  void reference_drift(const DriftQuery& q, const Matrix& x, Matrix& out) const;
  /// Base part of g: f^pre, or the trainable copy of the score network.
  void base_drift(const DriftQuery& q, const Matrix& x, Matrix& out) const;
  /// h; identically zero for the NULL label.
  void correction(const DriftQuery& q, const Matrix& x, Matrix& out) const;
  /// h with its tape, for a later correction_backward.
  Matrix correction(const DriftQuery& q, const Matrix& x, Mlp::Tape& tape) const;
  /// Accumulates (dh/dphi)^T dh into `grad` (laid out like parameters()); returns (dh/dx)^T dh.
  Matrix correction_backward(const DriftQuery& q, const Mlp::Tape& tape, const Matrix& dh,
                             Eigen::Ref<Vector> grad) const;
  /// g = base + h.
  void drift(const DriftQuery& q, const Matrix& x, Matrix& out) const;
  DriftFn drift_fn() const;
  DriftFn reference_fn() const;

  /// Flat view of the trainable parameters (net and embeddings are phi, base net is theta).
  ParamVector parameters();
  Eigen::Index parameter_count() const;
  Mlp& net() { return net_; }
  const Mlp& net() const { return net_; }
  EmbeddingTable& label_table() { return labels_; }
  EmbeddingTable& context_table() { return contexts_; }

  /// Reverse pass of one Euler step x' = x + g dt + sigma dw with KL increment
  /// k = |g - f|^2 dt / (2 sigma^2), for loss weight w per path. Given a = dLoss/dx',
  /// returns dLoss/dx for Loss = <a, x'> + w sum_k k, accumulates dLoss/dpsi into `grad`
  /// (laid out like parameters()), and optionally reports k per path.
  Matrix step_vjp(const DriftQuery& q, const Matrix& x, const Matrix& a, double dt, double sigma, double w,
                  Eigen::Ref<Vector> grad, Vector* kl_increment = nullptr) const;

 private:
  Matrix net_inputs(const DriftQuery& q, const Matrix& x) const;
  /// out = J^T v for the drift x/2 + s(T - t, x, c) of `net`; parameter gradient into grad if given.
  Matrix score_drift_vjp(const ScoreNet& net, const DriftQuery& q, const Matrix& x, const Matrix& v,
                         Vector* grad) const;
  void score_drift(const ScoreNet& net, const DriftQuery& q, const Matrix& x, Matrix& out) const;

  const DiffusionWorld* world_;
  AugmentedDriftConfig config_;
  Mlp net_;
  EmbeddingTable labels_;
  EmbeddingTable contexts_;
  std::optional<ScoreNet> base_;
  std::optional<ScoreNet> reference_;
  Eigen::Index label_offset_ = 0;
  Eigen::Index context_offset_ = 0;
  Eigen::Index base_offset_ = 0;
};

/// Per-path terminal value r(x_T) to maximize and its gradient (d x n).
using TerminalObjective = std::function<void(const Matrix& x, std::span<const int> contexts,
                                             std::span<const int> labels, Vector& value, Matrix& grad)>;
/// r = gamma log p(y | x, c).
TerminalObjective label_reward(const LabelLikelihood& likelihood, double gamma);

struct BpttResult {
  Vector gradient;  // d/dpsi of mean(r - Z_T), laid out like AugmentedDrift::parameters()
  Vector reward;    // r per path
  Vector kl;        // Z_T per path
  double objective = 0.0;
  int first_step = 0;  // earliest differentiated step
};

/// Exact reverse-mode gradient of the discretized objective mean(r(x_L) - Z_L) through a
/// recorded rollout of `aug`. With truncation K only steps j >= L - 1 - K are
/// differentiated: x_{L-1-K} is treated as a constant and earlier KL terms carry no
/// gradient. K >= L - 1 (or K < 0) is full back-propagation.
BpttResult bptt_through_rollout(const AugmentedDrift& aug, const TrajectoryBatch& batch, const TerminalObjective& objective,
                                int truncation = -1, int workers = 0);

/// Distribution over (context, label) pairs used to draw training conditions.
struct ExploratoryDistribution {
  std::vector<std::pair<int, int>> support;
  std::vector<double> weights;

  static ExploratoryDistribution uniform(int contexts, int labels);
  void validate(int contexts, int labels) const;
  std::pair<int, int> sample(RngStream& rng) const;
};

struct FinetuneConfig {
  double gamma = 10.0;
  int batch = 256;
  int updates = 500;
  /// When >= 0, stop before this update (a segment of a longer run); schedules still span `updates`.
  int stop_at = -1;
  /// K ~ Uniform{0..truncation_max}; negative means full back-propagation.
  int truncation_max = -1;
  AdamWConfig optimizer{1e-3, 0.9, 0.999, 1e-8, 0.1};
  /// Cosine decay of every learning rate to this fraction at the last update; 1 keeps them constant.
  double lr_final_fraction = 1.0;
  /// Decay of the parameter moving average kept in the checkpoint; 0 disables it.
  double average_decay = 0.0;
  std::uint64_t seed = 1;
  int workers = 0;
  int checkpoint_every = 0;
  std::filesystem::path checkpoint_path;
};

struct FinetuneLogRow {
  int update = 0;
  double mean_reward = 0.0;
  double mean_kl = 0.0;
  double grad_norm = 0.0;
  int truncation = -1;
  double wallclock = 0.0;
};

struct FinetuneResult {
  std::vector<FinetuneLogRow> log;
  Checkpoint final_state;
};

Checkpoint make_checkpoint(AugmentedDrift& aug, const AdamW& opt, std::uint64_t seed, std::int64_t next_update);
/// Copies parameters back into `aug`; returns the optimizer state.
AdamW restore_checkpoint(AugmentedDrift& aug, const Checkpoint& checkpoint, const AdamWConfig& config);
/// Installs the checkpoint's parameter average (or its raw parameters when none was tracked).
void load_for_sampling(AugmentedDrift& aug, const Checkpoint& checkpoint);

/// Fixed-budget training. A resume checkpoint continues at its next_update with the
/// same per-update seeds, so resumed and uninterrupted runs agree bit for bit.
FinetuneResult finetune(AugmentedDrift& aug, const LabelLikelihood& reward, const ExploratoryDistribution& explore,
                        const FinetuneConfig& config, const Checkpoint* resume = nullptr);

/// Monte-Carlo value of mean(gamma log p(y | x_T, c) - Z_T) over n paths drawn from explore.
double objective_estimate(const AugmentedDrift& aug, const LabelLikelihood& reward,
                          const ExploratoryDistribution& explore, int n, double gamma, std::uint64_t seed,
                          int workers = 0);

/// Samples of the augmented model for a fixed condition (rollout of drift_fn()).
Matrix sample_augmented(const AugmentedDrift& aug, int context, int label, int n, std::uint64_t seed,
                        int workers = 0);

}  // namespace ctrl
