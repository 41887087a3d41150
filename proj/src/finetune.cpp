#include "ctrl/finetune.hpp"

#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>

namespace ctrl {

namespace {

constexpr int kChunk = 256;

// Time enters as t/T and as the forward noise std sqrt(1 - e^{-(T-t)}), which resolves
// the fast change of the optimal control as t -> T.
constexpr int kTimeFeatures = 2;

Mlp make_correction_net(const DiffusionWorld& world, const AugmentedDriftConfig& cfg) {
  if (cfg.label_embedding < 1 || cfg.context_embedding < 1) throw ConfigError("embedding dims must be positive");
  std::vector<int> widths{kTimeFeatures + world.dim() + cfg.context_embedding + cfg.label_embedding};
  widths.insert(widths.end(), cfg.hidden.begin(), cfg.hidden.end());
  widths.push_back(world.dim());
  return Mlp(std::move(widths), derive_seed(cfg.seed, "correction"), true);
}

void zero_null_columns(Matrix& m, std::span<const int> labels, int null_label) {
  for (Eigen::Index k = 0; k < m.cols(); ++k)
    if (labels[k] == null_label) m.col(k).setZero();
}

}  // namespace

AugmentedDrift::AugmentedDrift(const DiffusionWorld& world, AugmentedDriftConfig config)
    : world_(&world), config_(std::move(config)) {
  net_ = make_correction_net(world, config_);
  labels_ = EmbeddingTable(world.num_labels() + 1, config_.label_embedding, derive_seed(config_.seed, "labels"),
                           config_.embedding_init_std);
  contexts_ = EmbeddingTable(world.num_contexts() + 1, config_.context_embedding,
                             derive_seed(config_.seed, "contexts"), config_.embedding_init_std);
  label_offset_ = net_.parameter_count();
  context_offset_ = label_offset_ + labels_.parameters().size();
  base_offset_ = context_offset_ + contexts_.parameters().size();
}

AugmentedDrift::AugmentedDrift(const DiffusionWorld& world, const ScoreNet& base, AugmentedDriftConfig config)
    : AugmentedDrift(world, std::move(config)) {
  if (&base.world() != &world) throw ConfigError("score network belongs to a different world");
  base_.emplace(base);
  reference_.emplace(base);
}

ParamVector AugmentedDrift::parameters() {
  ParamVector pv;
  pv.add("correction", net_.parameters(), Partition::Phi, config_.net_learning_rate);
  pv.add("label_embedding", labels_.parameters(), Partition::Phi, config_.embedding_learning_rate,
         labels_.frozen_mask());
  pv.add("context_embedding", contexts_.parameters(), Partition::Phi, config_.embedding_learning_rate,
         contexts_.frozen_mask());
  if (base_) {
    const auto n = static_cast<std::size_t>(base_->net().parameter_count());
    pv.add("base", base_->net().parameters(), Partition::Theta, config_.base_learning_rate,
           std::vector<bool>(n, !config_.train_base));
  }
  return pv;
}

Eigen::Index AugmentedDrift::parameter_count() const {
  return base_offset_ + (base_ ? base_->net().parameter_count() : 0);
}

Matrix AugmentedDrift::net_inputs(const DriftQuery& q, const Matrix& x) const {
  const int d = world_->dim();
  const int ec = contexts_.dim(), ey = labels_.dim();
  const double horizon = world_->grid().horizon();
  Matrix in(kTimeFeatures + d + ec + ey, x.cols());
  in.row(0).setConstant(q.t / horizon);
  in.row(1).setConstant(std::sqrt(DiffusionWorld::noise_variance(horizon - q.t)));
  in.middleRows(kTimeFeatures, d) = x;
  in.middleRows(kTimeFeatures + d, ec) = contexts_.lookup(q.contexts);
  in.bottomRows(ey) = labels_.lookup(q.labels);
  return in;
}

void AugmentedDrift::score_drift(const ScoreNet& net, const DriftQuery& q, const Matrix& x, Matrix& out) const {
  out = net.evaluate(world_->grid().horizon() - q.t, x, q.contexts);
  out += 0.5 * x;
}

Matrix AugmentedDrift::score_drift_vjp(const ScoreNet& net, const DriftQuery& q, const Matrix& x, const Matrix& v,
                                       Vector* grad) const {
  const double tau = world_->grid().horizon() - q.t;
  Mlp::Tape tape;
  net.evaluate(tau, x, q.contexts, &tape);
  Vector scratch;
  if (!grad) scratch = Vector::Zero(net.net().parameter_count());
  Matrix out = net.backward(tau, x, q.contexts, tape, v, grad ? *grad : scratch);
  out += 0.5 * v;
  return out;
}

void AugmentedDrift::reference_drift(const DriftQuery& q, const Matrix& x, Matrix& out) const {
  if (reference_) score_drift(*reference_, q, x, out);
  else world_->pretrained_drift(q, x, out);
}

void AugmentedDrift::base_drift(const DriftQuery& q, const Matrix& x, Matrix& out) const {
  if (base_) score_drift(*base_, q, x, out);
  else world_->pretrained_drift(q, x, out);
}

void AugmentedDrift::correction(const DriftQuery& q, const Matrix& x, Matrix& out) const {
  out = net_.forward(net_inputs(q, x));
  zero_null_columns(out, q.labels, null_label());
}

Matrix AugmentedDrift::correction(const DriftQuery& q, const Matrix& x, Mlp::Tape& tape) const {
  Matrix h = net_.forward(net_inputs(q, x), tape);
  zero_null_columns(h, q.labels, null_label());
  return h;
}

Matrix AugmentedDrift::correction_backward(const DriftQuery& q, const Mlp::Tape& tape, const Matrix& dh,
                                           Eigen::Ref<Vector> grad) const {
  const int d = world_->dim();
  Matrix masked = dh;
  zero_null_columns(masked, q.labels, null_label());
  const Matrix d_in = net_.backward(tape, masked, grad.segment(0, net_.parameter_count()));
  labels_.accumulate(q.labels, d_in.bottomRows(labels_.dim()), grad.segment(label_offset_, labels_.parameters().size()));
  contexts_.accumulate(q.contexts, d_in.middleRows(kTimeFeatures + d, contexts_.dim()),
                       grad.segment(context_offset_, contexts_.parameters().size()));
  return d_in.middleRows(kTimeFeatures, d);
}

void AugmentedDrift::drift(const DriftQuery& q, const Matrix& x, Matrix& out) const {
  Matrix h;
  correction(q, x, h);
  base_drift(q, x, out);
  out += h;
}

DriftFn AugmentedDrift::drift_fn() const {
  return [this](const DriftQuery& q, const Matrix& x, Matrix& out) { drift(q, x, out); };
}

DriftFn AugmentedDrift::reference_fn() const {
  return [this](const DriftQuery& q, const Matrix& x, Matrix& out) { reference_drift(q, x, out); };
}

Matrix AugmentedDrift::step_vjp(const DriftQuery& q, const Matrix& x, const Matrix& a, double dt, double sigma,
                                double w, Eigen::Ref<Vector> grad, Vector* kl_increment) const {
  Mlp::Tape tape;
  const Matrix h = correction(q, x, tape);

  // g - f: h alone unless the base network has moved away from the reference.
  Matrix diff = h;
  if (trains_base()) {
    Matrix gb, f;
    base_drift(q, x, gb);
    reference_drift(q, x, f);
    diff += gb - f;
  }
  const double inv_var = 1.0 / (sigma * sigma);
  if (kl_increment) *kl_increment = (0.5 * dt * inv_var) * diff.colwise().squaredNorm().transpose();

  // dLoss/dg = s, dLoss/df = -u.
  const Matrix u = (w * dt * inv_var) * diff;
  Matrix s = dt * a + u;

  Matrix dx = a + correction_backward(q, tape, s, grad);

  if (!trains_base()) {
    // The base part of g is f itself, so J_base^T s - J_f^T u = J_f^T (s - u).
    const Matrix v = s - u;
    if (reference_) {
      dx += score_drift_vjp(*reference_, q, x, v, nullptr);
    } else {
      Matrix out;
      world_->pretrained_drift_vjp(q, x, v, out);
      dx += out;
    }
  } else {
    Vector base_grad = Vector::Zero(base_->net().parameter_count());
    dx += score_drift_vjp(*base_, q, x, s, &base_grad);
    grad.segment(base_offset_, base_grad.size()) += base_grad;
    dx -= score_drift_vjp(*reference_, q, x, u, nullptr);
  }
  return dx;
}

TerminalObjective label_reward(const LabelLikelihood& likelihood, double gamma) {
  if (!(gamma >= 0.0)) throw ConfigError("gamma must be nonnegative");
  return [&likelihood, gamma](const Matrix& x, std::span<const int> contexts, std::span<const int> labels,
                              Vector& value, Matrix& grad) {
    likelihood.log_prob(x, contexts, labels, value, &grad);
    value *= gamma;
    grad *= gamma;
  };
}

BpttResult bptt_through_rollout(const AugmentedDrift& aug, const TrajectoryBatch& batch,
                                const TerminalObjective& objective, int truncation, int workers) {
  if (!batch.recorded()) throw ContractViolation("bptt_through_rollout needs a rollout recorded with its tape");
  const TimeGrid& grid = batch.grid;
  if (!(grid == aug.world().grid())) throw ConfigError("batch grid does not match the world grid");
  const NoiseSchedule sched = aug.world().schedule();
  sched.validate(grid, true);
  const int L = grid.steps();
  const int n = batch.size();
  const int j0 = (truncation < 0 || truncation >= L - 1) ? 0 : L - 1 - truncation;
  const double w = 1.0 / n;
  const Eigen::Index p = aug.parameter_count();

  BpttResult result;
  result.first_step = j0;
  result.reward.resize(n);
  result.kl.resize(n);
  const int chunks = (n + kChunk - 1) / kChunk;
  std::vector<Vector> partial(static_cast<std::size_t>(chunks));

  parallel_for(chunks, workers, [&](int ci) {
    const int begin = ci * kChunk;
    const int m = std::min(kChunk, n - begin);
    DriftQuery q;
    q.contexts = std::span<const int>(batch.contexts).subspan(begin, m);
    q.labels = std::span<const int>(batch.labels).subspan(begin, m);
    Vector grad = Vector::Zero(p);

    Vector value;
    Matrix value_grad;
    const Matrix xT = batch.terminal.middleCols(begin, m);
    objective(xT, q.contexts, q.labels, value, value_grad);
    result.reward.segment(begin, m) = value;
    Matrix a = -w * value_grad;

    Vector kl = Vector::Zero(m), inc;
    for (int j = L - 1; j >= j0; --j) {
      q.step = j;
      q.t = grid.time(j);
      const Matrix x = batch.states[static_cast<std::size_t>(j)].middleCols(begin, m);
      a = aug.step_vjp(q, x, a, grid.dt(), sched(q.t), w, grad, &inc);
      kl += inc;
    }
    // Steps outside the differentiated window still count toward the reported Z_T.
    if (j0 > 0) {
      if (batch.has_kl()) {
        kl += batch.kl.block(j0, begin, 1, m).transpose();
      } else {
        Matrix g, f;
        for (int j = 0; j < j0; ++j) {
          q.step = j;
          q.t = grid.time(j);
          const Matrix x = batch.states[static_cast<std::size_t>(j)].middleCols(begin, m);
          aug.drift(q, x, g);
          aug.reference_drift(q, x, f);
          const double sigma = sched(q.t);
          kl += (grid.dt() / (2.0 * sigma * sigma)) * (g - f).colwise().squaredNorm().transpose();
        }
      }
    }
    result.kl.segment(begin, m) = kl;
    partial[static_cast<std::size_t>(ci)] = std::move(grad);
  });

  // Loss gradient summed in chunk order, negated to the objective gradient.
  result.gradient = Vector::Zero(p);
  for (const auto& g : partial) result.gradient -= g;
  result.objective = (result.reward - result.kl).mean();
  return result;
}

ExploratoryDistribution ExploratoryDistribution::uniform(int contexts, int labels) {
  ExploratoryDistribution pi;
  for (int c = 0; c < contexts; ++c)
    for (int y = 0; y < labels; ++y) {
      pi.support.emplace_back(c, y);
      pi.weights.push_back(1.0);
    }
  return pi;
}

void ExploratoryDistribution::validate(int contexts, int labels) const {
  if (support.empty() || support.size() != weights.size())
    throw ConfigError("exploratory distribution needs matching nonempty support and weights");
  double total = 0.0;
  for (std::size_t i = 0; i < support.size(); ++i) {
    const auto [c, y] = support[i];
    if (c < 0 || c > contexts || y < 0 || y > labels) throw ConfigError("exploratory support out of range");
    if (!(weights[i] >= 0.0)) throw ConfigError("exploratory weights must be nonnegative");
    total += weights[i];
  }
  if (!(total > 0.0)) throw ConfigError("exploratory weights sum to zero");
}

std::pair<int, int> ExploratoryDistribution::sample(RngStream& rng) const {
  const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
  double u = rng.uniform() * total;
  for (std::size_t i = 0; i < support.size(); ++i) {
    u -= weights[i];
    if (u < 0.0) return support[i];
  }
  return support.back();
}

Checkpoint make_checkpoint(AugmentedDrift& aug, const AdamW& opt, std::uint64_t seed, std::int64_t next_update) {
  Checkpoint c;
  c.params = aug.parameters().gather();
  c.adam_m = opt.first_moment();
  c.adam_v = opt.second_moment();
  c.adam_steps = opt.steps();
  c.rng_seed = seed;
  c.next_update = next_update;
  c.meta["kind"] = "augmented_drift";
  c.meta["world"] = aug.world().name();
  return c;
}

AdamW restore_checkpoint(AugmentedDrift& aug, const Checkpoint& checkpoint, const AdamWConfig& config) {
  ParamVector pv = aug.parameters();
  if (checkpoint.params.size() != pv.size())
    throw ConfigError("checkpoint has " + std::to_string(checkpoint.params.size()) + " parameters, model has " +
                      std::to_string(pv.size()));
  pv.scatter(checkpoint.params);
  AdamW opt(pv.size(), config);
  opt.set_learning_rates(pv.learning_rates());
  if (checkpoint.adam_m.size() == pv.size())
    opt.restore(checkpoint.adam_m, checkpoint.adam_v, checkpoint.adam_steps);
  return opt;
}

void load_for_sampling(AugmentedDrift& aug, const Checkpoint& checkpoint) {
  ParamVector pv = aug.parameters();
  const Vector& p = checkpoint.average.size() > 0 ? checkpoint.average : checkpoint.params;
  if (p.size() != pv.size())
    throw ConfigError("checkpoint has " + std::to_string(p.size()) + " parameters, model has " +
                      std::to_string(pv.size()));
  pv.scatter(p);
}

namespace {

std::pair<std::vector<int>, std::vector<int>> draw_conditions(const ExploratoryDistribution& explore, int n,
                                                               std::uint64_t seed) {
  RngStream rng(seed, 0xc0d);
  std::vector<int> ctx(static_cast<std::size_t>(n)), lab(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) std::tie(ctx[k], lab[k]) = explore.sample(rng);
  return {std::move(ctx), std::move(lab)};
}

}  // namespace

FinetuneResult finetune(AugmentedDrift& aug, const LabelLikelihood& reward, const ExploratoryDistribution& explore,
                        const FinetuneConfig& config, const Checkpoint* resume) {
  const DiffusionWorld& world = aug.world();
  if (!(config.gamma >= 0.0)) throw ConfigError("gamma must be nonnegative");
  if (config.batch < 1) throw ConfigError("batch size must be at least 1");
  if (reward.dim() != world.dim()) throw ConfigError("reward model dimension does not match the world");
  explore.validate(world.num_contexts(), world.num_labels());

  if (!(config.lr_final_fraction >= 0.0 && config.lr_final_fraction <= 1.0))
    throw ConfigError("lr_final_fraction must lie in [0, 1]");
  if (!(config.average_decay >= 0.0 && config.average_decay < 1.0))
    throw ConfigError("average_decay must lie in [0, 1)");

  ParamVector pv = aug.parameters();
  const Vector base_rates = pv.learning_rates();
  AdamW opt(pv.size(), config.optimizer);
  opt.set_learning_rates(base_rates);
  int start = 0;
  if (resume) {
    opt = restore_checkpoint(aug, *resume, config.optimizer);
    start = static_cast<int>(resume->next_update);
  }
  Vector average;
  if (config.average_decay > 0.0)
    average = resume && resume->average.size() == pv.size() ? resume->average : pv.gather();

  const TerminalObjective objective = label_reward(reward, config.gamma);
  const DriftFn drift = aug.drift_fn();
  const DriftFn reference = aug.reference_fn();
  FinetuneResult result;
  const auto clock0 = std::chrono::steady_clock::now();

  const int end = config.stop_at >= 0 ? std::min(config.stop_at, config.updates) : config.updates;
  for (int i = start; i < end; ++i) {
    const std::uint64_t seed = derive_seed(config.seed, "update", static_cast<std::uint64_t>(i));
    auto [ctx, lab] = draw_conditions(explore, config.batch, seed);
    int k = -1;
    if (config.truncation_max >= 0) {
      RngStream rng(seed, 0x7a);
      k = rng.index(config.truncation_max + 1);
    }
    RolloutOptions opts;
    opts.base = &reference;
    opts.workers = config.workers;
    const TrajectoryBatch batch = rollout(drift, world.schedule(), world.grid(), InitialLaw::standard_gaussian(),
                                          world.dim(), std::move(ctx), std::move(lab), seed, opts);
    const BpttResult g = bptt_through_rollout(aug, batch, objective, k, config.workers);
    if (!std::isfinite(g.objective) || !g.gradient.allFinite()) {
      std::ostringstream msg;
      msg << "non-finite objective at update " << i << "; replay the batch with rollout seed " << seed;
      throw NumericalError(msg.str());
    }
    if (config.lr_final_fraction < 1.0) {
      const double f = config.lr_final_fraction;
      const double progress = config.updates > 1 ? static_cast<double>(i) / (config.updates - 1) : 1.0;
      opt.set_learning_rates(base_rates * (f + (1.0 - f) * 0.5 * (1.0 + std::cos(M_PI * progress))));
    }
    Vector flat = pv.gather();
    opt.step(flat, -g.gradient);
    pv.scatter(flat);
    if (average.size() > 0) average = config.average_decay * average + (1.0 - config.average_decay) * flat;

    FinetuneLogRow row;
    row.update = i;
    row.mean_reward = g.reward.mean();
    row.mean_kl = g.kl.mean();
    row.grad_norm = g.gradient.norm();
    row.truncation = k;
    row.wallclock = std::chrono::duration<double>(std::chrono::steady_clock::now() - clock0).count();
    result.log.push_back(row);

    if (config.checkpoint_every > 0 && !config.checkpoint_path.empty() && (i + 1) % config.checkpoint_every == 0) {
      Checkpoint ck = make_checkpoint(aug, opt, config.seed, i + 1);
      ck.average = average;
      save_checkpoint(config.checkpoint_path, ck);
    }
  }
  result.final_state = make_checkpoint(aug, opt, config.seed, std::max(start, end));
  result.final_state.average = average;
  return result;
}

double objective_estimate(const AugmentedDrift& aug, const LabelLikelihood& reward,
                          const ExploratoryDistribution& explore, int n, double gamma, std::uint64_t seed,
                          int workers) {
  const DiffusionWorld& world = aug.world();
  explore.validate(world.num_contexts(), world.num_labels());
  auto [ctx, lab] = draw_conditions(explore, n, seed);
  const DriftFn drift = aug.drift_fn();
  const DriftFn reference = aug.reference_fn();
  RolloutOptions opts;
  opts.base = &reference;
  opts.record = false;
  opts.workers = workers;
  const TrajectoryBatch batch = rollout(drift, world.schedule(), world.grid(), InitialLaw::standard_gaussian(),
                                        world.dim(), std::move(ctx), std::move(lab), seed, opts);
  Vector lp;
  reward.log_prob(batch.terminal, batch.contexts, batch.labels, lp);
  return (gamma * lp - batch.path_kl()).mean();
}

Matrix sample_augmented(const AugmentedDrift& aug, int context, int label, int n, std::uint64_t seed, int workers) {
  const DiffusionWorld& world = aug.world();
  RolloutOptions opts;
  opts.record = false;
  opts.workers = workers;
  return rollout(aug.drift_fn(), world.schedule(), world.grid(), InitialLaw::standard_gaussian(), world.dim(),
                 std::vector<int>(static_cast<std::size_t>(n), context),
                 std::vector<int>(static_cast<std::size_t>(n), label), seed, opts)
      .terminal;
}

}  // namespace ctrl
