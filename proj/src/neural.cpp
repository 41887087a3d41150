#include "ctrl/neural.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

namespace ctrl {

void tanh_inplace(Matrix& m) {
  // 1 - 2 / (exp(2x) + 1); saturates cleanly to +-1 when exp overflows or underflows.
  auto a = m.array();
  a = 1.0 - 2.0 / ((2.0 * a).exp() + 1.0);
}

Mlp::Mlp(std::vector<int> widths, std::uint64_t seed, bool zero_output_layer)
    : widths_(std::move(widths)) {
  if (widths_.size() < 2) throw ConfigError("an MLP needs at least input and output widths");
  for (int w : widths_)
    if (w < 1) throw ConfigError("MLP widths must be positive");
  Eigen::Index total = 0;
  for (int l = 0; l < layers(); ++l) {
    offsets_.push_back(total);
    total += static_cast<Eigen::Index>(widths_[l + 1]) * widths_[l] + widths_[l + 1];
  }
  params_ = Vector::Zero(total);
  RngStream rng(seed, 0);
  for (int l = 0; l < layers(); ++l) {
    if (zero_output_layer && l == layers() - 1) break;
    const double scale = 1.0 / std::sqrt(static_cast<double>(widths_[l]));
    const Eigen::Index count = static_cast<Eigen::Index>(widths_[l + 1]) * widths_[l];
    for (Eigen::Index i = 0; i < count; ++i) params_[offsets_[l] + i] = scale * rng.normal();
  }
}

Eigen::Map<const Matrix> Mlp::weight(int layer) const {
  return {params_.data() + offsets_[layer], widths_[layer + 1], widths_[layer]};
}

Eigen::Map<const Vector> Mlp::bias(int layer) const {
  return {params_.data() + offsets_[layer] + static_cast<Eigen::Index>(widths_[layer + 1]) * widths_[layer],
          widths_[layer + 1]};
}

Matrix Mlp::run(const Matrix& x, Tape* tape) const {
  if (x.rows() != input_dim()) throw ContractViolation("MLP input has wrong row count");
  if (tape) {
    tape->activations.resize(layers() + 1);
    tape->activations[0] = x;
  }
  Matrix h = x;
  for (int l = 0; l < layers(); ++l) {
    Matrix z = weight(l) * h;
    z.colwise() += bias(l);
    if (l + 1 < layers()) tanh_inplace(z);
    if (tape && l + 1 < layers()) tape->activations[l + 1] = z;
    h = std::move(z);
  }
  return h;
}

Matrix Mlp::forward(const Matrix& x) const { return run(x, nullptr); }

Matrix Mlp::forward(const Matrix& x, Tape& tape) const { return run(x, &tape); }

Matrix Mlp::backward(const Tape& tape, const Matrix& dy, Eigen::Ref<Vector> grad) const {
  if (static_cast<int>(tape.activations.size()) != layers() + 1 ||
      tape.activations[0].rows() != input_dim())
    throw ContractViolation("tape does not belong to this network");
  for (int l = 1; l < layers(); ++l)
    if (tape.activations[l].rows() != widths_[l] || tape.activations[l].cols() != tape.activations[0].cols())
      throw ContractViolation("tape does not belong to this network");
  if (dy.rows() != output_dim() || dy.cols() != tape.activations[0].cols())
    throw ContractViolation("output sensitivity shape does not match the tape");
  if (grad.size() != parameter_count()) throw ContractViolation("gradient buffer has wrong size");

  Matrix delta = dy;
  for (int l = layers() - 1; l >= 0; --l) {
    const Matrix& input = tape.activations[l];
    const Eigen::Index rows = widths_[l + 1];
    const Eigen::Index cols = widths_[l];
    Eigen::Map<Matrix> gw(grad.data() + offsets_[l], rows, cols);
    Eigen::Map<Vector> gb(grad.data() + offsets_[l] + rows * cols, rows);
    gw.noalias() += delta * input.transpose();
    gb += delta.rowwise().sum();
    Matrix upstream = weight(l).transpose() * delta;
    if (l > 0) upstream.array() *= 1.0 - input.array().square();
    delta = std::move(upstream);
  }
  return delta;
}

EmbeddingTable::EmbeddingTable(int rows, int dim, std::uint64_t seed, double init_std)
    : rows_(rows), dim_(dim) {
  if (rows < 1 || dim < 1) throw ConfigError("embedding table needs positive shape");
  params_ = Vector::Zero(static_cast<Eigen::Index>(rows) * dim);
  RngStream rng(seed, 0);
  for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(rows - 1) * dim; ++i)
    params_[i] = init_std * rng.normal();
}

Matrix EmbeddingTable::lookup(std::span<const int> ids) const {
  Matrix out(dim_, static_cast<Eigen::Index>(ids.size()));
  for (std::size_t k = 0; k < ids.size(); ++k) {
    if (ids[k] < 0 || ids[k] >= rows_) throw ContractViolation("embedding id out of range");
    out.col(static_cast<Eigen::Index>(k)) = params_.segment(static_cast<Eigen::Index>(ids[k]) * dim_, dim_);
  }
  return out;
}

void EmbeddingTable::accumulate(std::span<const int> ids, const Matrix& d_embedding,
                                Eigen::Ref<Vector> grad) const {
  for (std::size_t k = 0; k < ids.size(); ++k) {
    if (ids[k] == null_row()) continue;
    grad.segment(static_cast<Eigen::Index>(ids[k]) * dim_, dim_) += d_embedding.col(static_cast<Eigen::Index>(k));
  }
}

std::vector<bool> EmbeddingTable::frozen_mask() const {
  std::vector<bool> mask(static_cast<std::size_t>(params_.size()), false);
  for (int i = 0; i < dim_; ++i) mask[static_cast<std::size_t>(null_row()) * dim_ + i] = true;
  return mask;
}

void ParamVector::add(std::string name, Vector& values, Partition partition, double learning_rate,
                      std::vector<bool> frozen) {
  if (!frozen.empty() && frozen.size() != static_cast<std::size_t>(values.size()))
    throw ContractViolation("frozen mask size mismatch for segment " + name);
  if (frozen.empty()) frozen.assign(static_cast<std::size_t>(values.size()), false);
  segments_.push_back({std::move(name), &values, partition, learning_rate, std::move(frozen), size_});
  size_ += values.size();
}

const ParamVector::Segment& ParamVector::segment(std::string_view name) const {
  for (const auto& s : segments_)
    if (s.name == name) return s;
  throw ContractViolation("no parameter segment named " + std::string(name));
}

Vector ParamVector::gather() const {
  Vector flat(size_);
  for (const auto& s : segments_) flat.segment(s.offset, s.values->size()) = *s.values;
  return flat;
}

void ParamVector::scatter(const Vector& flat) const {
  if (flat.size() != size_) throw ContractViolation("flat parameter vector has wrong size");
  for (const auto& s : segments_) *s.values = flat.segment(s.offset, s.values->size());
}

Vector ParamVector::learning_rates() const {
  Vector lr(size_);
  for (const auto& s : segments_)
    for (Eigen::Index i = 0; i < s.values->size(); ++i)
      lr[s.offset + i] = s.frozen[static_cast<std::size_t>(i)] ? 0.0 : s.learning_rate;
  return lr;
}

std::vector<Partition> ParamVector::partition_mask() const {
  std::vector<Partition> mask;
  mask.reserve(static_cast<std::size_t>(size_));
  for (const auto& s : segments_) mask.insert(mask.end(), static_cast<std::size_t>(s.values->size()), s.partition);
  return mask;
}

AdamW::AdamW(Eigen::Index n, AdamWConfig config)
    : config_(config), lr_(Vector::Constant(n, config.learning_rate)), m_(Vector::Zero(n)),
      v_(Vector::Zero(n)) {}

void AdamW::set_learning_rates(Vector per_parameter) {
  if (per_parameter.size() != m_.size()) throw ContractViolation("learning-rate vector has wrong size");
  lr_ = std::move(per_parameter);
}

bool AdamW::step(Vector& params, const Vector& grad) {
  if (params.size() != m_.size() || grad.size() != m_.size())
    throw ContractViolation("AdamW shapes do not match");
  if (!grad.allFinite()) return false;
  ++steps_;
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  m_ = b1 * m_ + (1.0 - b1) * grad;
  v_ = b2 * v_ + (1.0 - b2) * grad.cwiseAbs2();
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  params.array() *= 1.0 - lr_.array() * config_.weight_decay;
  params.array() -= lr_.array() * (m_.array() / c1) / ((v_.array() / c2).sqrt() + config_.eps);
  return true;
}

void AdamW::restore(Vector m, Vector v, std::int64_t steps) {
  if (m.size() != m_.size() || v.size() != v_.size()) throw ContractViolation("restored moments have wrong size");
  m_ = std::move(m);
  v_ = std::move(v);
  steps_ = steps;
}

std::string hex_double(double value) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, value, std::chars_format::hex);
  return std::string(buf, res.ptr);
}

double parse_hex_double(std::string_view text) {
  double value = 0.0;
  auto res = std::from_chars(text.data(), text.data() + text.size(), value, std::chars_format::hex);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size())
    throw ConfigError("malformed hex float: " + std::string(text));
  return value;
}

namespace {

void write_vector(std::ostream& os, const char* name, const Vector& v) {
  os << name << ' ' << v.size();
  for (Eigen::Index i = 0; i < v.size(); ++i) os << ' ' << hex_double(v[i]);
  os << '\n';
}

Vector read_vector(std::istream& is, const char* name) {
  std::string tag;
  Eigen::Index n = 0;
  if (!(is >> tag >> n) || tag != name || n < 0) throw ConfigError(std::string("checkpoint: expected ") + name);
  Vector v(n);
  std::string token;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!(is >> token)) throw ConfigError(std::string("checkpoint: truncated ") + name);
    v[i] = parse_hex_double(token);
  }
  return v;
}

}  // namespace

std::string encode_checkpoint(const Checkpoint& c) {
  std::ostringstream os;
  os << "ctrl-lab-checkpoint " << Checkpoint::kVersion << '\n';
  write_vector(os, "params", c.params);
  write_vector(os, "adam_m", c.adam_m);
  write_vector(os, "adam_v", c.adam_v);
  write_vector(os, "average", c.average);
  os << "adam_steps " << c.adam_steps << '\n';
  os << "rng_seed " << c.rng_seed << '\n';
  os << "next_update " << c.next_update << '\n';
  os << "meta " << c.meta.size() << '\n';
  for (const auto& [k, v] : c.meta) os << k << '\t' << v << '\n';
  return os.str();
}

Checkpoint decode_checkpoint(const std::string& text) {
  std::istringstream is(text);
  std::string magic;
  int version = 0;
  if (!(is >> magic >> version) || magic != "ctrl-lab-checkpoint")
    throw ConfigError("not a ctrl-lab checkpoint");
  if (version != Checkpoint::kVersion) throw ConfigError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint c;
  c.params = read_vector(is, "params");
  c.adam_m = read_vector(is, "adam_m");
  c.adam_v = read_vector(is, "adam_v");
  c.average = read_vector(is, "average");
  std::string tag;
  if (!(is >> tag >> c.adam_steps) || tag != "adam_steps") throw ConfigError("checkpoint: expected adam_steps");
  if (!(is >> tag >> c.rng_seed) || tag != "rng_seed") throw ConfigError("checkpoint: expected rng_seed");
  if (!(is >> tag >> c.next_update) || tag != "next_update") throw ConfigError("checkpoint: expected next_update");
  std::size_t meta_count = 0;
  if (!(is >> tag >> meta_count) || tag != "meta") throw ConfigError("checkpoint: expected meta");
  std::string line;
  std::getline(is, line);
  for (std::size_t i = 0; i < meta_count; ++i) {
    if (!std::getline(is, line)) throw ConfigError("checkpoint: truncated meta");
    auto tab = line.find('\t');
    if (tab == std::string::npos) throw ConfigError("checkpoint: malformed meta line");
    c.meta[line.substr(0, tab)] = line.substr(tab + 1);
  }
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot write checkpoint " + path.string());
  os << encode_checkpoint(checkpoint);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot read checkpoint " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return decode_checkpoint(ss.str());
}

}  // namespace ctrl
