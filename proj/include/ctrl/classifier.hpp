#pragma once

// Offline labelled data, MLE-trained label classifiers p(y | x, c) (joint or one
// per label axis), temperature calibration, and a common likelihood interface
// shared with the ground-truth oracle.

#include "ctrl/neural.hpp"
#include "ctrl/worlds.hpp"

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ctrl {

/// Batched label log-likelihood log p(y | x, c) with optional input gradient.
class LabelLikelihood {
 public:
  virtual ~LabelLikelihood() = default;
  virtual int dim() const = 0;
  virtual int num_labels() const = 0;
  /// out[k] = log p(labels[k] | x.col(k), contexts[k]); grad (if given) is d x n.
  virtual void log_prob(const Matrix& x, std::span<const int> contexts, std::span<const int> labels, Vector& out,
                        Matrix* grad = nullptr) const = 0;
  /// Full label distribution at one point.
  virtual Vector probs(const Vector& x, int context) const = 0;
};

/// Ground truth p(y | x, c) of a world.
class OracleLikelihood final : public LabelLikelihood {
 public:
  OracleLikelihood(const LabelOracle& oracle, int dim) : oracle_(&oracle), dim_(dim) {}
  int dim() const override { return dim_; }
  int num_labels() const override { return oracle_->classes(); }
  void log_prob(const Matrix& x, std::span<const int> contexts, std::span<const int> labels, Vector& out,
                Matrix* grad = nullptr) const override;
  Vector probs(const Vector& x, int context) const override { return oracle_->probs(x, context); }

 private:
  const LabelOracle* oracle_;
  int dim_;
};

/// How labels are revealed in an offline dataset.
enum class DatasetMode {
  Joint,        // (c, x, y) with every axis labelled
  ContextFree,  // (x, y): the context is not recorded
  PerAxis,      // each record labels a single axis; the others are missing
};

struct LabelRecord {
  int context = -1;         // -1 when not recorded
  std::vector<int> labels;  // one per axis, -1 when missing
  Vector x;
};

class OfflineDataset {
 public:
  OfflineDataset() = default;
  OfflineDataset(int dim, int num_contexts, std::vector<int> axis_classes);

  /// Samples c uniformly, x ~ p^pre(. | c), and labels from the oracle.
  static OfflineDataset generate(const DiffusionWorld& world, int n, std::uint64_t seed,
                                 DatasetMode mode = DatasetMode::Joint, double train_fraction = 0.8);

  int dim() const { return dim_; }
  int num_contexts() const { return num_contexts_; }
  int axes() const { return static_cast<int>(axis_classes_.size()); }
  int axis_classes(int axis) const { return axis_classes_.at(static_cast<std::size_t>(axis)); }
  const std::vector<int>& axis_class_counts() const { return axis_classes_; }
  int size() const { return static_cast<int>(records_.size()); }
  bool has_contexts() const;

  const std::vector<LabelRecord>& records() const { return records_; }
  const std::vector<int>& train() const { return train_; }
  const std::vector<int>& validation() const { return validation_; }

  /// Validates ranges and appends.
  void add(LabelRecord record);
  /// Seeded shuffle, then the first round(fraction * n) records train.
  void split(double train_fraction, std::uint64_t seed);

  /// One record per line: `<context|-> <l1,l2,..|- per axis> <x1,x2,..>` after a header
  /// `# ctrl-lab-dataset dim=<d> contexts=<C> classes=<k1,k2,..> split=<train count>`.
  void save(const std::filesystem::path& path) const;
  static OfflineDataset load(const std::filesystem::path& path);

 private:
  int dim_ = 0;
  int num_contexts_ = 0;
  std::vector<int> axis_classes_;
  std::vector<LabelRecord> records_;
  std::vector<int> train_;
  std::vector<int> validation_;
};

/// Softmax classifier over an Mlp. Inputs are [x] or [x, onehot(c)]; `axis` selects
/// the label axis it predicts (-1 for the joint label).
class ClassifierModel final : public LabelLikelihood {
 public:
  ClassifierModel() = default;
  ClassifierModel(int dim, int num_contexts, bool use_context, int classes, int axis, std::vector<int> hidden,
                  std::uint64_t seed, bool zero_output_layer = false);

  int dim() const override { return dim_; }
  int num_labels() const override { return classes_; }
  int num_contexts() const { return num_contexts_; }
  bool uses_context() const { return use_context_; }
  int axis() const { return axis_; }
  double temperature() const { return temperature_; }
  void set_temperature(double tau);

  Mlp& net() { return net_; }
  const Mlp& net() const { return net_; }

  /// Untempered logits, classes x n.
  Matrix logits(const Matrix& x, std::span<const int> contexts, Mlp::Tape* tape = nullptr) const;
  /// Tempered log-probabilities, classes x n.
  Matrix log_probs(const Matrix& x, std::span<const int> contexts) const;
  void log_prob(const Matrix& x, std::span<const int> contexts, std::span<const int> labels, Vector& out,
                Matrix* grad = nullptr) const override;
  Vector probs(const Vector& x, int context) const override;
  double log_prob(const Vector& x, int context, int label, Vector* grad = nullptr) const;

  Matrix inputs(const Matrix& x, std::span<const int> contexts) const;

  nlohmann::json to_json() const;
  static ClassifierModel from_json(const nlohmann::json& j);

 private:
  int dim_ = 0;
  int num_contexts_ = 0;
  bool use_context_ = false;
  int classes_ = 0;
  int axis_ = -1;
  double temperature_ = 1.0;
  Mlp net_;
};

/// One classifier per label axis; log p(y | x, c) = sum_a log p_a(y_a | x, c).
class FactoredClassifier final : public LabelLikelihood {
 public:
  FactoredClassifier() = default;
  explicit FactoredClassifier(std::vector<ClassifierModel> models);

  int dim() const override { return models_.front().dim(); }
  int num_labels() const override { return classes_; }
  int axes() const { return static_cast<int>(models_.size()); }
  ClassifierModel& model(int a) { return models_.at(static_cast<std::size_t>(a)); }
  const ClassifierModel& model(int a) const { return models_.at(static_cast<std::size_t>(a)); }

  /// Mixed radix, first axis most significant.
  std::vector<int> decode(int joint) const;
  void log_prob(const Matrix& x, std::span<const int> contexts, std::span<const int> labels, Vector& out,
                Matrix* grad = nullptr) const override;
  Vector probs(const Vector& x, int context) const override;

 private:
  std::vector<ClassifierModel> models_;
  int classes_ = 1;
};

struct ClassifierTrainConfig {
  int epochs = 30;
  int batch = 128;
  AdamWConfig optimizer{3e-3, 0.9, 0.999, 1e-8, 0.0};
  std::uint64_t seed = 1;
};

struct ClassifierTrainReport {
  std::vector<double> epoch_loss;  // mean training cross-entropy after each epoch
  int examples = 0;
};

/// Minimizes training-split cross-entropy. Records missing the model's axis are skipped.
ClassifierTrainReport train_mle(const OfflineDataset& data, ClassifierModel& model,
                                const ClassifierTrainConfig& config);

struct TemperatureFit {
  double temperature = 1.0;
  double nll_before = 0.0;
  double nll_after = 0.0;
  double ece_before = 0.0;
  double ece_after = 0.0;
  std::vector<std::string> warnings;
};

/// Expected calibration error with `bins` equal-width confidence bins.
double expected_calibration_error(const Matrix& logits, std::span<const int> labels, double temperature,
                                  int bins = 15);
/// Mean negative log-likelihood of softmax(logits / temperature).
double tempered_nll(const Matrix& logits, std::span<const int> labels, double temperature);
/// Golden-section search on log tau over [0.05, 20]. Keeps tau = 1 (with a warning)
/// when the minimum sits on the bracket edge or does not improve the NLL.
TemperatureFit fit_temperature(const Matrix& logits, std::span<const int> labels);
/// Fits the temperature on the validation split and installs it in the model.
TemperatureFit calibrate_temperature(ClassifierModel& model, const OfflineDataset& data);

/// Records of a split that carry a label for the model's axis, as (x, contexts, labels).
struct LabelledBlock {
  Matrix x;
  std::vector<int> contexts;
  std::vector<int> labels;
};
LabelledBlock labelled_block(const OfflineDataset& data, const ClassifierModel& model, std::span<const int> indices);

}  // namespace ctrl
