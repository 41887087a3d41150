#include "ctrl/classifier.hpp"

#include "ctrl/json_util.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace ctrl {

namespace {

// Column-wise log-softmax of logits / temperature.
Matrix log_softmax(const Matrix& logits, double temperature) {
  Matrix z = logits / temperature;
  for (Eigen::Index k = 0; k < z.cols(); ++k) {
    const double m = z.col(k).maxCoeff();
    const double lse = m + std::log((z.col(k).array() - m).exp().sum());
    z.col(k).array() -= lse;
  }
  return z;
}

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double parse_double(std::string_view s) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw ConfigError("dataset: cannot parse number '" + std::string(s) + "'");
  return v;
}

int parse_int(std::string_view s) {
  int v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw ConfigError("dataset: cannot parse integer '" + std::string(s) + "'");
  return v;
}

std::vector<std::string_view> split_on(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Oracle

void OracleLikelihood::log_prob(const Matrix& x, std::span<const int> contexts, std::span<const int> labels,
                                Vector& out, Matrix* grad) const {
  out.resize(x.cols());
  if (grad) grad->resize(x.rows(), x.cols());
  Vector g;
  for (Eigen::Index k = 0; k < x.cols(); ++k) {
    const int c = contexts.empty() ? 0 : contexts[k];
    out[k] = oracle_->log_prob(x.col(k), c, labels[k], grad ? &g : nullptr);
    if (grad) grad->col(k) = g;
  }
}

// ---------------------------------------------------------------------------
// Dataset

OfflineDataset::OfflineDataset(int dim, int num_contexts, std::vector<int> axis_classes)
    : dim_(dim), num_contexts_(num_contexts), axis_classes_(std::move(axis_classes)) {
  if (dim < 1) throw ConfigError("dataset dimension must be positive");
  if (axis_classes_.empty()) throw ConfigError("dataset needs at least one label axis");
  for (int k : axis_classes_)
    if (k < 2) throw ConfigError("each label axis needs at least two classes");
}

bool OfflineDataset::has_contexts() const {
  return std::any_of(records_.begin(), records_.end(), [](const LabelRecord& r) { return r.context >= 0; });
}

void OfflineDataset::add(LabelRecord record) {
  if (record.x.size() != dim_) throw ConfigError("dataset record has wrong dimension");
  if (record.context < -1 || record.context >= std::max(num_contexts_, 1))
    throw ConfigError("dataset record context out of range");
  if (static_cast<int>(record.labels.size()) != axes()) throw ConfigError("dataset record has wrong label count");
  bool any = false;
  for (int a = 0; a < axes(); ++a) {
    const int y = record.labels[static_cast<std::size_t>(a)];
    if (y < -1 || y >= axis_classes_[static_cast<std::size_t>(a)])
      throw ConfigError("dataset record label out of range");
    any = any || y >= 0;
  }
  if (!any) throw ConfigError("dataset record has no label");
  records_.push_back(std::move(record));
}

void OfflineDataset::split(double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction <= 1.0)) throw ConfigError("train fraction must lie in (0, 1]");
  std::vector<int> order(static_cast<std::size_t>(size()));
  std::iota(order.begin(), order.end(), 0);
  RngStream rng(seed, 0x5117);
  for (int i = size() - 1; i > 0; --i) std::swap(order[i], order[rng.index(i + 1)]);
  const auto n_train = static_cast<std::size_t>(std::lround(train_fraction * size()));
  train_.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  validation_.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
  std::sort(train_.begin(), train_.end());
  std::sort(validation_.begin(), validation_.end());
}

OfflineDataset OfflineDataset::generate(const DiffusionWorld& world, int n, std::uint64_t seed, DatasetMode mode,
                                        double train_fraction) {
  if (n < 1) throw ConfigError("dataset size must be positive");
  const LabelOracle& oracle = world.oracle();
  std::vector<int> classes;
  for (int a = 0; a < oracle.axes(); ++a) classes.push_back(oracle.axis(a).classes());
  OfflineDataset data(world.dim(), world.num_contexts(), classes);
  RngStream rng(seed, 0xda7a);
  std::vector<double> lp;
  for (int i = 0; i < n; ++i) {
    LabelRecord r;
    const int c = rng.index(world.num_contexts());
    r.x = world.data_law(c).sample(1, rng).col(0);
    r.context = mode == DatasetMode::ContextFree ? -1 : c;
    r.labels.assign(static_cast<std::size_t>(oracle.axes()), -1);
    for (int a = 0; a < oracle.axes(); ++a) {
      const LabelAxis& ax = oracle.axis(a);
      lp.resize(static_cast<std::size_t>(ax.classes()));
      ax.log_probs(r.x[ax.coordinate], c, lp);
      double u = rng.uniform();
      int y = ax.classes() - 1;
      for (int k = 0; k < ax.classes(); ++k) {
        u -= std::exp(lp[static_cast<std::size_t>(k)]);
        if (u < 0.0) {
          y = k;
          break;
        }
      }
      if (mode != DatasetMode::PerAxis || a == i % oracle.axes()) r.labels[static_cast<std::size_t>(a)] = y;
    }
    data.add(std::move(r));
  }
  data.split(train_fraction, seed);
  return data;
}

void OfflineDataset::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write dataset " + path.string());
  out << "# ctrl-lab-dataset dim=" << dim_ << " contexts=" << num_contexts_ << " classes=";
  for (int a = 0; a < axes(); ++a) out << (a ? "," : "") << axis_classes_[static_cast<std::size_t>(a)];
  out << " train=" << train_.size() << "\n";
  auto write = [&](int idx) {
    const LabelRecord& r = records_[static_cast<std::size_t>(idx)];
    if (r.context < 0) out << '-';
    else out << r.context;
    out << ' ';
    for (int a = 0; a < axes(); ++a) {
      if (a) out << ',';
      const int y = r.labels[static_cast<std::size_t>(a)];
      if (y < 0) out << '-';
      else out << y;
    }
    out << ' ';
    for (int i = 0; i < dim_; ++i) out << (i ? "," : "") << format_double(r.x[i]);
    out << '\n';
  };
  // Training records first; the header's train count restores the split.
  for (int idx : train_) write(idx);
  for (int idx : validation_) write(idx);
}

OfflineDataset OfflineDataset::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read dataset " + path.string());
  std::string line;
  if (!std::getline(in, line) || line.rfind("# ctrl-lab-dataset", 0) != 0)
    throw ConfigError("dataset: missing header in " + path.string());
  int dim = 0, contexts = 0, train = -1;
  std::vector<int> classes;
  std::istringstream header(line.substr(18));
  std::string field;
  while (header >> field) {
    const auto eq = field.find('=');
    if (eq == std::string::npos) throw ConfigError("dataset: bad header field '" + field + "'");
    const std::string key = field.substr(0, eq);
    const std::string_view value = std::string_view(field).substr(eq + 1);
    if (key == "dim") dim = parse_int(value);
    else if (key == "contexts") contexts = parse_int(value);
    else if (key == "train") train = parse_int(value);
    else if (key == "classes")
      for (auto part : split_on(value, ',')) classes.push_back(parse_int(part));
    else throw ConfigError("dataset: unknown header field '" + key + "'");
  }
  OfflineDataset data(dim, contexts, classes);
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string ctx, labels, coords, extra;
    if (!(ls >> ctx >> labels >> coords) || (ls >> extra))
      throw ConfigError("dataset: malformed line " + std::to_string(lineno));
    LabelRecord r;
    r.context = ctx == "-" ? -1 : parse_int(ctx);
    for (auto part : split_on(labels, ',')) r.labels.push_back(part == "-" ? -1 : parse_int(part));
    const auto parts = split_on(coords, ',');
    r.x.resize(static_cast<Eigen::Index>(parts.size()));
    for (std::size_t i = 0; i < parts.size(); ++i) r.x[static_cast<Eigen::Index>(i)] = parse_double(parts[i]);
    data.add(std::move(r));
  }
  if (train < 0 || train > data.size()) throw ConfigError("dataset: train count out of range");
  data.train_.resize(static_cast<std::size_t>(train));
  std::iota(data.train_.begin(), data.train_.end(), 0);
  data.validation_.resize(static_cast<std::size_t>(data.size() - train));
  std::iota(data.validation_.begin(), data.validation_.end(), train);
  return data;
}

// ---------------------------------------------------------------------------
// Classifier

ClassifierModel::ClassifierModel(int dim, int num_contexts, bool use_context, int classes, int axis,
                                 std::vector<int> hidden, std::uint64_t seed, bool zero_output_layer)
    : dim_(dim), num_contexts_(num_contexts), use_context_(use_context && num_contexts > 0), classes_(classes),
      axis_(axis) {
  if (dim < 1 || classes < 2) throw ConfigError("classifier needs dim >= 1 and at least two classes");
  std::vector<int> widths{dim + (use_context_ ? num_contexts : 0)};
  widths.insert(widths.end(), hidden.begin(), hidden.end());
  widths.push_back(classes);
  net_ = Mlp(std::move(widths), seed, zero_output_layer);
}

void ClassifierModel::set_temperature(double tau) {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("temperature must be positive");
  temperature_ = tau;
}

Matrix ClassifierModel::inputs(const Matrix& x, std::span<const int> contexts) const {
  if (x.rows() != dim_) throw ContractViolation("classifier input has wrong dimension");
  if (!use_context_) return x;
  Matrix in = Matrix::Zero(dim_ + num_contexts_, x.cols());
  in.topRows(dim_) = x;
  for (Eigen::Index k = 0; k < x.cols(); ++k) {
    const int c = contexts.empty() ? -1 : contexts[k];
    if (c >= 0 && c < num_contexts_) in(dim_ + c, k) = 1.0;
  }
  return in;
}

Matrix ClassifierModel::logits(const Matrix& x, std::span<const int> contexts, Mlp::Tape* tape) const {
  const Matrix in = inputs(x, contexts);
  return tape ? net_.forward(in, *tape) : net_.forward(in);
}

Matrix ClassifierModel::log_probs(const Matrix& x, std::span<const int> contexts) const {
  return log_softmax(logits(x, contexts), temperature_);
}

void ClassifierModel::log_prob(const Matrix& x, std::span<const int> contexts, std::span<const int> labels,
                               Vector& out, Matrix* grad) const {
  Mlp::Tape tape;
  const Matrix lp = log_softmax(logits(x, contexts, grad ? &tape : nullptr), temperature_);
  out.resize(x.cols());
  for (Eigen::Index k = 0; k < x.cols(); ++k) {
    if (labels[k] < 0 || labels[k] >= classes_) throw ContractViolation("classifier label out of range");
    out[k] = lp(labels[k], k);
  }
  if (!grad) return;
  // d log p_y / d logits = (e_y - p) / tau.
  Matrix d = -lp.array().exp().matrix();
  for (Eigen::Index k = 0; k < x.cols(); ++k) d(labels[k], k) += 1.0;
  d /= temperature_;
  Vector scratch = Vector::Zero(net_.parameter_count());
  *grad = net_.backward(tape, d, scratch).topRows(dim_);
}

Vector ClassifierModel::probs(const Vector& x, int context) const {
  const int c[1] = {context};
  return log_probs(Matrix(x), c).col(0).array().exp();
}

double ClassifierModel::log_prob(const Vector& x, int context, int label, Vector* grad) const {
  const int c[1] = {context};
  const int y[1] = {label};
  Vector out;
  Matrix g;
  log_prob(Matrix(x), c, y, out, grad ? &g : nullptr);
  if (grad) *grad = g.col(0);
  return out[0];
}

nlohmann::json ClassifierModel::to_json() const {
  std::vector<std::string> params;
  for (Eigen::Index i = 0; i < net_.parameter_count(); ++i) params.push_back(hex_double(net_.parameters()[i]));
  return {{"dim", dim_},           {"contexts", num_contexts_},
          {"use_context", use_context_}, {"classes", classes_},
          {"axis", axis_},         {"widths", net_.widths()},
          {"temperature", hex_double(temperature_)}, {"params", params}};
}

ClassifierModel ClassifierModel::from_json(const nlohmann::json& j) {
  check_keys(j, {"dim", "contexts", "use_context", "classes", "axis", "widths", "temperature", "params"},
             "classifier");
  try {
    const auto widths = j.at("widths").get<std::vector<int>>();
    if (widths.size() < 2) throw ConfigError("classifier: bad widths");
    std::vector<int> hidden(widths.begin() + 1, widths.end() - 1);
    ClassifierModel m(j.at("dim").get<int>(), j.at("contexts").get<int>(), j.at("use_context").get<bool>(),
                      j.at("classes").get<int>(), j.at("axis").get<int>(), hidden, 0);
    if (m.net().widths() != widths) throw ConfigError("classifier: widths inconsistent with dims");
    const auto params = j.at("params").get<std::vector<std::string>>();
    if (static_cast<Eigen::Index>(params.size()) != m.net().parameter_count())
      throw ConfigError("classifier: wrong parameter count");
    for (std::size_t i = 0; i < params.size(); ++i)
      m.net().parameters()[static_cast<Eigen::Index>(i)] = parse_hex_double(params[i]);
    m.set_temperature(parse_hex_double(j.at("temperature").get<std::string>()));
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("classifier: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Factored classifier

FactoredClassifier::FactoredClassifier(std::vector<ClassifierModel> models) : models_(std::move(models)) {
  if (models_.empty()) throw ConfigError("factored classifier needs at least one axis model");
  classes_ = 1;
  for (const auto& m : models_) {
    if (m.dim() != models_.front().dim()) throw ConfigError("axis classifiers disagree on dimension");
    classes_ *= m.num_labels();
  }
}

std::vector<int> FactoredClassifier::decode(int joint) const {
  if (joint < 0 || joint >= classes_) throw ContractViolation("joint label out of range");
  std::vector<int> out(models_.size());
  for (int a = axes() - 1; a >= 0; --a) {
    const int k = models_[static_cast<std::size_t>(a)].num_labels();
    out[static_cast<std::size_t>(a)] = joint % k;
    joint /= k;
  }
  return out;
}

void FactoredClassifier::log_prob(const Matrix& x, std::span<const int> contexts, std::span<const int> labels,
                                  Vector& out, Matrix* grad) const {
  out = Vector::Zero(x.cols());
  if (grad) *grad = Matrix::Zero(x.rows(), x.cols());
  std::vector<int> axis_labels(static_cast<std::size_t>(x.cols()));
  Vector part;
  Matrix part_grad;
  for (int a = 0; a < axes(); ++a) {
    for (Eigen::Index k = 0; k < x.cols(); ++k)
      axis_labels[static_cast<std::size_t>(k)] = decode(labels[k])[static_cast<std::size_t>(a)];
    models_[static_cast<std::size_t>(a)].log_prob(x, contexts, axis_labels, part, grad ? &part_grad : nullptr);
    out += part;
    if (grad) *grad += part_grad;
  }
}

Vector FactoredClassifier::probs(const Vector& x, int context) const {
  Vector p = Vector::Ones(classes_);
  std::vector<Vector> per_axis;
  for (const auto& m : models_) per_axis.push_back(m.probs(x, context));
  for (int y = 0; y < classes_; ++y) {
    const auto idx = decode(y);
    for (int a = 0; a < axes(); ++a) p[y] *= per_axis[static_cast<std::size_t>(a)][idx[static_cast<std::size_t>(a)]];
  }
  return p;
}

// ---------------------------------------------------------------------------
// Training and calibration

LabelledBlock labelled_block(const OfflineDataset& data, const ClassifierModel& model, std::span<const int> indices) {
  LabelledBlock block;
  std::vector<int> keep;
  for (int idx : indices) {
    const LabelRecord& r = data.records()[static_cast<std::size_t>(idx)];
    int y;
    if (model.axis() >= 0) {
      y = r.labels.at(static_cast<std::size_t>(model.axis()));
    } else {
      y = 0;
      for (int a = 0; a < data.axes(); ++a) {
        const int ya = r.labels[static_cast<std::size_t>(a)];
        if (ya < 0) {
          y = -1;
          break;
        }
        y = y * data.axis_classes(a) + ya;
      }
    }
    if (y < 0) continue;
    keep.push_back(idx);
    block.contexts.push_back(r.context);
    block.labels.push_back(y);
  }
  block.x.resize(data.dim(), static_cast<Eigen::Index>(keep.size()));
  for (std::size_t k = 0; k < keep.size(); ++k)
    block.x.col(static_cast<Eigen::Index>(k)) = data.records()[static_cast<std::size_t>(keep[k])].x;
  return block;
}

ClassifierTrainReport train_mle(const OfflineDataset& data, ClassifierModel& model,
                                const ClassifierTrainConfig& config) {
  if (data.size() == 0) throw ContractViolation("train_mle needs a nonempty dataset");
  if (data.dim() != model.dim()) throw ConfigError("classifier and dataset dimensions differ");
  const LabelledBlock block = labelled_block(data, model, data.train());
  const int n = static_cast<int>(block.labels.size());
  if (n == 0) throw ContractViolation("training split has no records labelled for this classifier");
  for (int y : block.labels)
    if (y >= model.num_labels()) throw ConfigError("dataset label exceeds classifier classes");

  ClassifierTrainReport report;
  report.examples = n;
  Mlp& net = model.net();
  AdamW opt(net.parameter_count(), config.optimizer);
  const Matrix all_inputs = model.inputs(block.x, block.contexts);
  const double tau = model.temperature();
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  const int b = std::max(1, std::min(config.batch, n));

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    RngStream rng(config.seed, static_cast<std::uint64_t>(epoch));
    for (int i = n - 1; i > 0; --i) std::swap(order[i], order[rng.index(i + 1)]);
    for (int start = 0; start < n; start += b) {
      const int m = std::min(b, n - start);
      Matrix in(all_inputs.rows(), m);
      for (int k = 0; k < m; ++k) in.col(k) = all_inputs.col(order[start + k]);
      Mlp::Tape tape;
      const Matrix lp = log_softmax(net.forward(in, tape), tau);
      // Gradient of the mean cross-entropy: (p - e_y) / (tau m).
      Matrix d = lp.array().exp().matrix();
      double loss = 0.0;
      for (int k = 0; k < m; ++k) {
        const int y = block.labels[static_cast<std::size_t>(order[start + k])];
        loss -= lp(y, k);
        d(y, k) -= 1.0;
      }
      if (!std::isfinite(loss))
        throw NumericalError("classifier loss is not finite at epoch " + std::to_string(epoch));
      d /= tau * m;
      Vector grad = Vector::Zero(net.parameter_count());
      net.backward(tape, d, grad);
      opt.step(net.parameters(), grad);
    }
    const Matrix lp = log_softmax(net.forward(all_inputs), tau);
    double ce = 0.0;
    for (int k = 0; k < n; ++k) ce -= lp(block.labels[static_cast<std::size_t>(k)], k);
    ce /= n;
    if (!std::isfinite(ce)) throw NumericalError("classifier loss is not finite at epoch " + std::to_string(epoch));
    report.epoch_loss.push_back(ce);
  }
  return report;
}

double tempered_nll(const Matrix& logits, std::span<const int> labels, double temperature) {
  const Matrix lp = log_softmax(logits, temperature);
  double s = 0.0;
  for (Eigen::Index k = 0; k < lp.cols(); ++k) s -= lp(labels[k], k);
  return s / static_cast<double>(lp.cols());
}

double expected_calibration_error(const Matrix& logits, std::span<const int> labels, double temperature,
                                  int bins) {
  const Matrix p = log_softmax(logits, temperature).array().exp();
  std::vector<double> conf(static_cast<std::size_t>(bins), 0.0), acc(static_cast<std::size_t>(bins), 0.0);
  std::vector<int> count(static_cast<std::size_t>(bins), 0);
  for (Eigen::Index k = 0; k < p.cols(); ++k) {
    Eigen::Index arg;
    const double c = p.col(k).maxCoeff(&arg);
    const auto b = static_cast<std::size_t>(std::min(bins - 1, static_cast<int>(c * bins)));
    conf[b] += c;
    acc[b] += arg == labels[k] ? 1.0 : 0.0;
    ++count[b];
  }
  double ece = 0.0;
  for (std::size_t b = 0; b < conf.size(); ++b)
    if (count[b] > 0) ece += std::abs(acc[b] - conf[b]);
  return ece / static_cast<double>(p.cols());
}

TemperatureFit fit_temperature(const Matrix& logits, std::span<const int> labels) {
  if (logits.cols() == 0) throw ContractViolation("temperature fit needs a nonempty validation split");
  TemperatureFit fit;
  if (logits.cols() < 2) fit.warnings.push_back("validation split has a single sample");
  fit.nll_before = tempered_nll(logits, labels, 1.0);
  fit.ece_before = expected_calibration_error(logits, labels, 1.0);

  const double lo0 = std::log(0.05), hi0 = std::log(20.0);
  const double ratio = (std::sqrt(5.0) - 1.0) / 2.0;
  auto f = [&](double u) { return tempered_nll(logits, labels, std::exp(u)); };
  double lo = lo0, hi = hi0;
  double a = hi - ratio * (hi - lo), b = lo + ratio * (hi - lo);
  double fa = f(a), fb = f(b);
  for (int it = 0; it < 80 && hi - lo > 1e-9; ++it) {
    if (fa < fb) {
      hi = b;
      b = a;
      fb = fa;
      a = hi - ratio * (hi - lo);
      fa = f(a);
    } else {
      lo = a;
      a = b;
      fa = fb;
      b = lo + ratio * (hi - lo);
      fb = f(b);
    }
  }
  const double u = 0.5 * (lo + hi);
  const double edge = 1e-3 * (hi0 - lo0);
  double tau = std::exp(u);
  if (!std::isfinite(u) || u - lo0 < edge || hi0 - u < edge) {
    fit.warnings.push_back("temperature bracket failed; keeping tau = 1");
    tau = 1.0;
  } else if (f(u) > fit.nll_before) {
    fit.warnings.push_back("fitted temperature does not improve validation NLL; keeping tau = 1");
    tau = 1.0;
  }
  fit.temperature = tau;
  fit.nll_after = tempered_nll(logits, labels, tau);
  fit.ece_after = expected_calibration_error(logits, labels, tau);
  return fit;
}

TemperatureFit calibrate_temperature(ClassifierModel& model, const OfflineDataset& data) {
  const LabelledBlock block = labelled_block(data, model, data.validation());
  if (block.labels.empty()) throw ContractViolation("calibration needs a nonempty validation split");
  const Matrix logits = model.logits(block.x, block.contexts);
  TemperatureFit fit = fit_temperature(logits, block.labels);
  model.set_temperature(fit.temperature);
  return fit;
}

}  // namespace ctrl
