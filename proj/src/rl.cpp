#include "sdassist/rl.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "json.hpp"
#include "sdassist/metrics.hpp"

namespace sdassist::rl {

using nnet::Matrix;
using nnet::Parameters;
using nnet::Vector;

void EnvConfig::validate() const {
  physics.validate();
  if (!(train_dt > 0.0)) throw InvalidArgument("env config: train_dt must be positive");
  if (!(episode_seconds > 0.0)) throw InvalidArgument("env config: episode_seconds must be positive");
  if (!(start_range > 0.0) || start_range > physics.crash_bound) {
    throw InvalidArgument("env config: start_range must lie in (0, crash_bound]");
  }
  if (!(reward_inner_bound > 0.0) || !(reward_inner_bound < physics.crash_bound)) {
    throw InvalidArgument("env config: need 0 < reward_inner_bound < crash_bound");
  }
}

void AlgoConfig::validate() const {
  if (!(gamma > 0.0 && gamma < 1.0)) throw InvalidArgument("algo config: gamma must lie in (0,1)");
  if (!(tau > 0.0 && tau <= 1.0)) throw InvalidArgument("algo config: tau must lie in (0,1]");
  if (!(lr > 0.0) || batch == 0 || buffer_capacity < batch) {
    throw InvalidArgument("algo config: need lr > 0 and 0 < batch <= buffer capacity");
  }
  if (!(reward_scale > 0.0) || !(centering_weight >= 0.0)) {
    throw InvalidArgument("algo config: need reward_scale > 0 and centering_weight >= 0");
  }
}

double reward(double theta, double omega, double deflection, double inner_bound) {
  if (std::abs(theta) <= inner_bound) return 0.0;
  return -(theta * theta + 0.1 * omega * omega + 0.01 * deflection * deflection);
}

State env_reset(const EnvConfig& cfg, Rng& rng) {
  double theta = uniform(rng, -cfg.start_range, cfg.start_range);
  while (std::abs(theta) >= cfg.start_range) theta = uniform(rng, -cfg.start_range, cfg.start_range);
  return {theta, 0.0, 0.0};
}

EnvStep env_step(const State& state, double action, const EnvConfig& cfg) {
  physics::PhysicsConfig pc = cfg.physics;
  pc.dt = cfg.train_dt;
  const auto next = physics::integrate({state.theta, state.omega, state.t}, action, pc);
  EnvStep out;
  out.next = {next.theta, next.omega, next.t};
  out.reward = reward(next.theta, next.omega, action, cfg.reward_inner_bound);
  out.crashed = std::abs(next.theta) >= pc.crash_bound;
  // Small tolerance so an accumulated clock lands on the episode end.
  out.done = out.crashed || next.t >= cfg.episode_seconds - 1e-9;
  return out;
}

ReplayBuffer::ReplayBuffer(std::size_t capacity) : data_(capacity) {
  if (capacity == 0) throw InvalidArgument("replay buffer: capacity must be positive");
}

void ReplayBuffer::push(const Transition& tr) {
  data_[next_] = tr;
  next_ = (next_ + 1) % data_.size();
  size_ = std::min(size_ + 1, data_.size());
}

const Transition& ReplayBuffer::at(std::size_t i) const {
  if (i >= size_) throw InvalidArgument("replay buffer: index out of range");
  const std::size_t oldest = size_ < data_.size() ? 0 : next_;
  return data_[(oldest + i) % data_.size()];
}

std::vector<Transition> ReplayBuffer::sample(std::size_t n, Rng& rng) const {
  if (size_ == 0) throw InvalidArgument("replay buffer: empty");
  std::vector<Transition> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(data_[rng() % size_]);
  return out;
}

void polyak_update(Parameters& target, const Parameters& online, double tau) {
  if (target.size() != online.size()) throw ShapeError("polyak_update: size mismatch");
  auto t = target.values();
  const auto o = online.values();
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = tau * o[i] + (1.0 - tau) * t[i];
}

pilots::WindowConfig state_window() { return {0.0, 0.0, false, 200.0}; }

void write_training_log(std::span<const LogRow> rows, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& r : rows) {
    out << nlohmann::json{{"step", r.step},
                          {"episode_return", r.episode_return},
                          {"critic_loss", r.critic_loss},
                          {"actor_loss", r.actor_loss}}
               .dump()
        << '\n';
  }
}

nnet::NetworkSpec ddpg_actor_spec(const AlgoConfig& algo) {
  return {nnet::Arch::MLP, 2, algo.actor_hidden, 1, nnet::Activation::Tanh};
}

nnet::NetworkSpec sac_actor_spec(const AlgoConfig& algo) {
  return {nnet::Arch::MLP, 2, algo.actor_hidden, 2, nnet::Activation::Linear};
}

nnet::NetworkSpec critic_spec(const AlgoConfig& algo) {
  return {nnet::Arch::MLP, 3, algo.critic_hidden, 1, nnet::Activation::Linear};
}

pilots::Policy greedy_from_sac(const Parameters& sac_actor, const AlgoConfig& algo) {
  const auto greedy_spec = ddpg_actor_spec(algo);
  Parameters greedy(nnet::layout(greedy_spec));
  const std::size_t blocks = greedy.shapes().size();
  for (std::size_t i = 0; i + 2 < blocks; ++i) greedy.block(i) = sac_actor.block(i);
  greedy.block(blocks - 2) = sac_actor.block(blocks - 2).row(0);
  greedy.block(blocks - 1) = sac_actor.block(blocks - 1).row(0);
  return {greedy_spec, std::move(greedy), state_window()};
}

Parameters sac_from_greedy(const pilots::Policy& greedy, const AlgoConfig& algo, std::uint64_t seed) {
  Parameters sac = nnet::init(sac_actor_spec(algo), seed);
  const std::size_t blocks = sac.shapes().size();
  if (greedy.params.shapes().size() != blocks) throw ShapeError("sac_from_greedy: architecture mismatch");
  for (std::size_t i = 0; i + 2 < blocks; ++i) sac.block(i) = greedy.params.block(i);
  sac.block(blocks - 2).row(0) = greedy.params.block(blocks - 2).row(0);
  sac.block(blocks - 1).row(0) = greedy.params.block(blocks - 1).row(0);
  return sac;
}

namespace {

constexpr double kLogStdMin = -20.0;
constexpr double kLogStdMax = 2.0;
constexpr double kHalfLog2Pi = 0.91893853320467274178;

Matrix states_of(const std::vector<Transition>& batch, bool next) {
  Matrix s(2, static_cast<Eigen::Index>(batch.size()));
  for (std::size_t j = 0; j < batch.size(); ++j) {
    const auto& tr = batch[j];
    s(0, static_cast<Eigen::Index>(j)) = (next ? tr.next_theta : tr.theta) / pilots::kThetaScale;
    s(1, static_cast<Eigen::Index>(j)) = (next ? tr.next_omega : tr.omega) / pilots::kOmegaScale;
  }
  return s;
}

Matrix with_actions(const Matrix& states, const Matrix& actions) {
  Matrix x(3, states.cols());
  x.topRows(2) = states;
  x.row(2) = actions.row(0);
  return x;
}

Vector state_vector(double theta, double omega) {
  Vector v(2);
  v << theta / pilots::kThetaScale, omega / pilots::kOmegaScale;
  return v;
}

// log(1 - tanh(u)^2), stable for large |u|.
double log1m_tanh2(double u) {
  const double x = -2.0 * u;
  const double softplus = x > 30.0 ? x : std::log1p(std::exp(x));
  return 2.0 * (std::log(2.0) - u - softplus);
}

void check_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw DivergenceError(std::string(what) + " became non-finite");
}

struct Critic {
  nnet::NetworkSpec spec;
  Parameters online;
  Parameters target;
  nnet::AdamState opt;

  Critic(const AlgoConfig& algo, std::uint64_t seed)
      : spec(critic_spec(algo)), online(nnet::init(spec, seed)), target(online),
        opt(nnet::AdamState::create(online.size(), algo.lr)) {}

  // One MSE regression step toward y; returns the loss.
  double fit(const Matrix& inputs, const Matrix& y) {
    nnet::Tape tape;
    const Matrix q = nnet::forward_batch(spec, online, {inputs}, &tape);
    const double n = static_cast<double>(q.cols());
    const double loss = (q - y).squaredNorm() / n;
    check_finite(loss, "critic loss");
    std::vector<double> grad(online.size(), 0.0);
    nnet::backward_batch(spec, online, tape, 2.0 * (q - y) / n, grad);
    nnet::adam_step(online, grad, opt);
    return loss;
  }

  // Q values and dQ/da for each column.
  std::pair<Matrix, Matrix> value_and_action_grad(const Matrix& inputs) const {
    nnet::Tape tape;
    Matrix q = nnet::forward_batch(spec, online, {inputs}, &tape);
    std::vector<double> scratch(online.size(), 0.0);
    std::vector<Matrix> d_in;
    nnet::backward_batch(spec, online, tape, Matrix::Ones(1, q.cols()), scratch, &d_in);
    return {std::move(q), d_in[0].row(2)};
  }
};

// Collects transitions from the environment and keeps episode bookkeeping.
class Collector {
 public:
  Collector(const EnvConfig& env, Rng& rng) : env_(env), rng_(rng), state_(env_reset(env, rng)) {}

  const State& state() const { return state_; }

  // Returns the transition and whether an episode finished (with its return).
  std::pair<Transition, std::optional<double>> step(double action) {
    const auto es = env_step(state_, action, env_);
    Transition tr{state_.theta, state_.omega, action, es.reward, es.next.theta, es.next.omega, es.done, es.crashed};
    episode_return_ += es.reward;
    std::optional<double> finished;
    if (es.done) {
      finished = episode_return_;
      episode_return_ = 0.0;
      state_ = env_reset(env_, rng_);
    } else {
      state_ = es.next;
    }
    return {tr, finished};
  }

 private:
  const EnvConfig& env_;
  Rng& rng_;
  State state_;
  double episode_return_ = 0.0;
};

using RewardFn = std::function<Vector(const std::vector<Transition>&)>;

Vector env_rewards(const std::vector<Transition>& batch, const AlgoConfig& algo, const EnvConfig& env) {
  Vector r(static_cast<Eigen::Index>(batch.size()));
  for (std::size_t j = 0; j < batch.size(); ++j) {
    const double x = batch[j].next_theta / env.reward_inner_bound;
    r(static_cast<Eigen::Index>(j)) = batch[j].reward * algo.reward_scale - algo.centering_weight * x * x;
  }
  return r;
}

// Bellman target with the crash treated as an absorbing state that repeats
// its reward forever; time-limit ends bootstrap normally.
Matrix bellman_targets(const std::vector<Transition>& batch, const Vector& r, const Matrix& next_value,
                       double gamma) {
  Matrix y(1, r.size());
  for (Eigen::Index j = 0; j < r.size(); ++j) {
    y(0, j) = batch[static_cast<std::size_t>(j)].crashed ? r(j) / (1.0 - gamma) : r(j) + gamma * next_value(0, j);
  }
  return y;
}

class SacLearner {
 public:
  SacLearner(const AlgoConfig& algo, std::uint64_t seed, const std::optional<Parameters>& initial)
      : algo_(algo),
        spec_(sac_actor_spec(algo)),
        actor_(initial ? *initial : nnet::init(spec_, split_seed(seed, 1))),
        actor_opt_(nnet::AdamState::create(actor_.size(), algo.lr)),
        q1_(algo, split_seed(seed, 2)),
        q2_(algo, split_seed(seed, 3)),
        log_alpha_{algo.initial_log_alpha},
        alpha_opt_(nnet::AdamState::create(1, algo.lr)) {
    if (actor_.shapes() != nnet::layout(spec_)) throw ShapeError("SAC: initial actor has the wrong shape");
  }

  const Parameters& actor() const { return actor_; }

  double sample_action(double theta, double omega, Rng& rng) const {
    const Vector out = nnet::forward(spec_, actor_, {state_vector(theta, omega)});
    const double log_std = std::clamp(out(1), kLogStdMin, kLogStdMax);
    return std::tanh(out(0) + std::exp(log_std) * gaussian(rng));
  }

  struct Losses {
    double critic = 0.0;
    double actor = 0.0;
  };

  Losses update(const std::vector<Transition>& batch, const Vector& rewards, Rng& rng) {
    const auto n = static_cast<Eigen::Index>(batch.size());
    const double alpha = std::exp(log_alpha_[0]);
    Losses losses;

    // Critic targets from the current policy at s'.
    {
      const Matrix s2 = states_of(batch, true);
      const Matrix out = nnet::forward_batch(spec_, actor_, {s2});
      Matrix a2(1, n);
      Vector logp2(n);
      for (Eigen::Index j = 0; j < n; ++j) {
        const double ls = std::clamp(out(1, j), kLogStdMin, kLogStdMax);
        const double eps = gaussian(rng);
        const double u = out(0, j) + std::exp(ls) * eps;
        a2(0, j) = std::tanh(u);
        logp2(j) = -0.5 * eps * eps - ls - kHalfLog2Pi - log1m_tanh2(u);
      }
      const Matrix in2 = with_actions(s2, a2);
      const Matrix qt1 = nnet::forward_batch(q1_.spec, q1_.target, {in2});
      const Matrix qt2 = nnet::forward_batch(q2_.spec, q2_.target, {in2});
      Matrix next_value = qt1.cwiseMin(qt2);
      next_value.row(0) -= alpha * logp2.transpose();
      const Matrix y = bellman_targets(batch, rewards, next_value, algo_.gamma);
      Matrix a(1, n);
      for (Eigen::Index j = 0; j < n; ++j) a(0, j) = batch[static_cast<std::size_t>(j)].action;
      const Matrix in = with_actions(states_of(batch, false), a);
      losses.critic = 0.5 * (q1_.fit(in, y) + q2_.fit(in, y));
    }

    // Actor: minimize alpha * log pi(a|s) - min_i Q_i(s, a) through the reparameterization.
    const Matrix s = states_of(batch, false);
    nnet::Tape tape;
    const Matrix out = nnet::forward_batch(spec_, actor_, {s}, &tape);
    Matrix a(1, n);
    Vector eps(n), u(n), logp(n), ls(n);
    std::vector<bool> clamped(static_cast<std::size_t>(n));
    for (Eigen::Index j = 0; j < n; ++j) {
      clamped[static_cast<std::size_t>(j)] = out(1, j) < kLogStdMin || out(1, j) > kLogStdMax;
      ls(j) = std::clamp(out(1, j), kLogStdMin, kLogStdMax);
      eps(j) = gaussian(rng);
      u(j) = out(0, j) + std::exp(ls(j)) * eps(j);
      a(0, j) = std::tanh(u(j));
      logp(j) = -0.5 * eps(j) * eps(j) - ls(j) - kHalfLog2Pi - log1m_tanh2(u(j));
    }
    const Matrix in = with_actions(s, a);
    const auto [qv1, dq1] = q1_.value_and_action_grad(in);
    const auto [qv2, dq2] = q2_.value_and_action_grad(in);
    Matrix d_out(2, n);
    double actor_loss = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      const bool first = qv1(0, j) <= qv2(0, j);
      const double q = first ? qv1(0, j) : qv2(0, j);
      const double dq_da = first ? dq1(0, j) : dq2(0, j);
      actor_loss += (alpha * logp(j) - q) / static_cast<double>(n);
      const double dl_du = alpha * 2.0 * a(0, j) - dq_da * (1.0 - a(0, j) * a(0, j));
      d_out(0, j) = dl_du / static_cast<double>(n);
      d_out(1, j) = clamped[static_cast<std::size_t>(j)]
                        ? 0.0
                        : (dl_du * std::exp(ls(j)) * eps(j) - alpha) / static_cast<double>(n);
    }
    check_finite(actor_loss, "actor loss");
    std::vector<double> grad(actor_.size(), 0.0);
    nnet::backward_batch(spec_, actor_, tape, d_out, grad);
    nnet::adam_step(actor_, grad, actor_opt_);
    losses.actor = actor_loss;

    // Temperature toward the entropy target.
    const double alpha_grad = -(logp.mean() + algo_.target_entropy);
    nnet::adam_step(std::span<double>(log_alpha_), std::vector<double>{alpha_grad}, alpha_opt_);

    polyak_update(q1_.target, q1_.online, algo_.tau);
    polyak_update(q2_.target, q2_.online, algo_.tau);
    return losses;
  }

 private:
  AlgoConfig algo_;
  nnet::NetworkSpec spec_;
  Parameters actor_;
  nnet::AdamState actor_opt_;
  Critic q1_;
  Critic q2_;
  std::vector<double> log_alpha_;
  nnet::AdamState alpha_opt_;
};

// Keeps the best greedy actor seen at validation checkpoints.
class Checkpoints {
 public:
  Checkpoints(const TrainOptions& opts, const EnvConfig& env) : opts_(opts), env_(env) {}

  bool enabled() const { return opts_.checkpoint_every > 0 && !opts_.validation_seeds.empty(); }
  bool due(long step) const { return enabled() && step % opts_.checkpoint_every == 0; }

  void consider(const pilots::Policy& policy, long step) {
    const auto ev = evaluate(policy, env_, opts_.validation_seeds, opts_.validation_seconds);
    if (!best_ || ev.crashes < best_crashes_ || (ev.crashes == best_crashes_ && ev.mean_abs_theta < best_mean_)) {
      best_ = policy;
      best_crashes_ = ev.crashes;
      best_mean_ = ev.mean_abs_theta;
      best_step_ = step;
    }
  }

  // Final choice between the best checkpoint and the last actor.
  void finish(TrainResult& result, pilots::Policy last, long last_step) {
    if (enabled()) consider(last, last_step);
    if (best_) {
      result.actor = std::move(*best_);
      result.selected_step = best_step_;
    } else {
      result.actor = std::move(last);
      result.selected_step = last_step;
    }
  }

 private:
  const TrainOptions& opts_;
  const EnvConfig& env_;
  std::optional<pilots::Policy> best_;
  int best_crashes_ = 0;
  double best_mean_ = 0.0;
  long best_step_ = 0;
};

void check_budget(const AlgoConfig& algo, long total_steps) {
  if (total_steps < static_cast<long>(algo.batch)) throw InvalidArgument("training: total_steps must be >= batch");
}

// Shared SAC loop; `rewards` maps a sampled batch to critic rewards.
// `checkpoints`, when given, sees the greedy actor at every due step.
TrainResult run_sac(SacLearner& learner, const EnvConfig& env, const AlgoConfig& algo, Rng& rng, long steps,
                    const RewardFn& rewards, const TrainOptions& opts, ReplayBuffer& buffer, long& global_step,
                    Checkpoints* checkpoints = nullptr) {
  TrainResult result;
  Collector collector(env, rng);
  SacLearner::Losses last;
  for (long i = 0; i < steps; ++i) {
    ++global_step;
    const auto& s = collector.state();
    const double action = static_cast<std::size_t>(global_step) <= algo.learning_starts
                              ? uniform(rng, -1.0, 1.0)
                              : learner.sample_action(s.theta, s.omega, rng);
    const auto [tr, finished] = collector.step(action);
    buffer.push(tr);
    if (result.first_transitions.size() < opts.record_transitions) result.first_transitions.push_back(tr);
    if (finished) result.log.push_back({global_step, *finished, last.critic, last.actor});
    if (static_cast<std::size_t>(global_step) > algo.learning_starts && buffer.size() >= algo.batch) {
      const auto batch = buffer.sample(algo.batch, rng);
      last = learner.update(batch, rewards(batch), rng);
    }
    if (checkpoints && checkpoints->due(global_step)) {
      checkpoints->consider(greedy_from_sac(learner.actor(), algo), global_step);
    }
    if (opts.on_step && !opts.on_step(global_step)) break;
  }
  return result;
}

}  // namespace

TrainResult train_ddpg(const EnvConfig& env, const AlgoConfig& algo, std::uint64_t seed, long total_steps,
                       const TrainOptions& opts) {
  env.validate();
  algo.validate();
  check_budget(algo, total_steps);
  Rng rng(seed);
  const auto aspec = ddpg_actor_spec(algo);
  Parameters actor = nnet::init(aspec, split_seed(seed, 1));
  Parameters actor_target = actor;
  auto actor_opt = nnet::AdamState::create(actor.size(), algo.lr);
  Critic critic(algo, split_seed(seed, 2));
  ReplayBuffer buffer(algo.buffer_capacity);
  Collector collector(env, rng);
  TrainResult result;
  double critic_loss = 0.0;
  double actor_loss = 0.0;
  Checkpoints checkpoints(opts, env);
  long last_step = 0;

  for (long step = 1; step <= total_steps; ++step) {
    const auto& s = collector.state();
    double action;
    if (static_cast<std::size_t>(step) <= algo.learning_starts) {
      action = uniform(rng, -1.0, 1.0);
    } else {
      const double mu = nnet::forward(aspec, actor, {state_vector(s.theta, s.omega)})(0);
      action = std::clamp(mu + algo.exploration_sigma * gaussian(rng), -1.0, 1.0);
    }
    const auto [tr, finished] = collector.step(action);
    buffer.push(tr);
    if (result.first_transitions.size() < opts.record_transitions) result.first_transitions.push_back(tr);
    if (finished) result.log.push_back({step, *finished, critic_loss, actor_loss});

    if (static_cast<std::size_t>(step) > algo.learning_starts && buffer.size() >= algo.batch) {
      const auto batch = buffer.sample(algo.batch, rng);
      const auto n = static_cast<Eigen::Index>(batch.size());
      const Matrix s1 = states_of(batch, false);
      const Matrix s2 = states_of(batch, true);
      const Matrix a2 = nnet::forward_batch(aspec, actor_target, {s2});
      const Matrix q2 = nnet::forward_batch(critic.spec, critic.target, {with_actions(s2, a2)});
      const Matrix y = bellman_targets(batch, env_rewards(batch, algo, env), q2, algo.gamma);
      Matrix a(1, n);
      for (Eigen::Index j = 0; j < n; ++j) a(0, j) = batch[static_cast<std::size_t>(j)].action;
      critic_loss = critic.fit(with_actions(s1, a), y);

      nnet::Tape tape;
      const Matrix mu = nnet::forward_batch(aspec, actor, {s1}, &tape);
      const auto [q, dq_da] = critic.value_and_action_grad(with_actions(s1, mu));
      actor_loss = -q.mean();
      check_finite(actor_loss, "actor loss");
      std::vector<double> grad(actor.size(), 0.0);
      nnet::backward_batch(aspec, actor, tape, -dq_da / static_cast<double>(n), grad);
      nnet::adam_step(actor, grad, actor_opt);

      polyak_update(critic.target, critic.online, algo.tau);
      polyak_update(actor_target, actor, algo.tau);
    }
    last_step = step;
    if (checkpoints.due(step)) checkpoints.consider({aspec, actor, state_window()}, step);
    if (opts.on_step && !opts.on_step(step)) break;
  }
  checkpoints.finish(result, {aspec, std::move(actor), state_window()}, last_step);
  return result;
}

TrainResult train_sac(const EnvConfig& env, const AlgoConfig& algo, std::uint64_t seed, long total_steps,
                      const TrainOptions& opts) {
  env.validate();
  algo.validate();
  check_budget(algo, total_steps);
  Rng rng(seed);
  SacLearner learner(algo, seed, opts.initial_sac_actor);
  ReplayBuffer buffer(algo.buffer_capacity);
  long global_step = 0;
  Checkpoints checkpoints(opts, env);
  auto result = run_sac(learner, env, algo, rng, total_steps,
                        [&](const std::vector<Transition>& b) { return env_rewards(b, algo, env); }, opts, buffer,
                        global_step, &checkpoints);
  checkpoints.finish(result, greedy_from_sac(learner.actor(), algo), global_step);
  return result;
}

Parameters train_bc(const nnet::NetworkSpec& spec, std::span<const pilots::Demonstration> demos, std::uint64_t seed,
                    int epochs, const BcOptions& opts) {
  if (demos.empty()) throw InvalidArgument("train_bc: no demonstrations");
  if (epochs < 0) throw InvalidArgument("train_bc: negative epochs");
  Parameters params = opts.initial ? *opts.initial : nnet::init(spec, seed);
  if (epochs == 0) return params;
  std::vector<nnet::Example> examples;
  examples.reserve(demos.size());
  for (const auto& d : demos) {
    examples.push_back({pilots::encode(d.window, spec.arch), Vector::Constant(1, d.action)});
    if (spec.arch == nnet::Arch::MLP && examples.back().sequence.front().size() != spec.input_dim) {
      throw ShapeError("train_bc: window does not match network input");
    }
  }
  Rng rng(split_seed(seed, 7));
  auto opt = nnet::AdamState::create(params.size(), opts.lr);
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t bs = std::max<std::size_t>(1, opts.batch);
  std::vector<nnet::Example> mb;
  for (int e = 0; e < epochs; ++e) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
    for (std::size_t b = 0; b < order.size(); b += bs) {
      mb.clear();
      for (std::size_t k = b; k < std::min(order.size(), b + bs); ++k) mb.push_back(examples[order[k]]);
      const auto g = nnet::gradients(spec, params, mb, nnet::Loss::MSE);
      nnet::adam_step(params, g.grad, opt);
    }
  }
  return params;
}

double Discriminator::prob(double theta, double omega, double action) const {
  Vector x(3);
  x << theta / pilots::kThetaScale, omega / pilots::kOmegaScale, action;
  return nnet::forward(spec, params, {x})(0);
}

double Discriminator::reward(double theta, double omega, double action) const {
  const double p = std::clamp(prob(theta, omega, action), 1e-6, 1.0 - 1e-6);
  return std::log(p) - std::log1p(-p);
}

AirlResult train_airl(const EnvConfig& env, const AlgoConfig& algo, std::span<const ExpertSample> expert,
                      std::uint64_t seed, int iterations, const TrainOptions& opts) {
  env.validate();
  algo.validate();
  if (expert.empty()) throw InvalidArgument("train_airl: no expert demonstrations");
  if (iterations < 0) throw InvalidArgument("train_airl: negative iterations");
  Rng rng(seed);
  SacLearner learner(algo, seed, opts.initial_sac_actor);
  AirlResult result;
  result.discriminator.spec = {nnet::Arch::MLP, 3, algo.critic_hidden, 1, nnet::Activation::Sigmoid};
  result.discriminator.params = nnet::init(result.discriminator.spec, split_seed(seed, 5));
  auto& disc = result.discriminator;
  auto disc_opt = nnet::AdamState::create(disc.params.size(), algo.airl_disc_lr);
  ReplayBuffer buffer(algo.buffer_capacity);
  long global_step = 0;

  const RewardFn learned = [&disc](const std::vector<Transition>& batch) {
    Matrix x(3, static_cast<Eigen::Index>(batch.size()));
    for (std::size_t j = 0; j < batch.size(); ++j) {
      const auto c = static_cast<Eigen::Index>(j);
      x(0, c) = batch[j].theta / pilots::kThetaScale;
      x(1, c) = batch[j].omega / pilots::kOmegaScale;
      x(2, c) = batch[j].action;
    }
    const Matrix p = nnet::forward_batch(disc.spec, disc.params, {x});
    Vector r(p.cols());
    for (Eigen::Index j = 0; j < p.cols(); ++j) {
      const double q = std::clamp(p(0, j), 1e-6, 1.0 - 1e-6);
      r(j) = std::log(q) - std::log1p(-q);
    }
    return r;
  };

  const auto train_discriminator = [&] {
    const std::size_t half = algo.batch;
    std::vector<nnet::Example> batch;
    batch.reserve(2 * half);
    for (int u = 0; u < static_cast<int>(algo.airl_disc_updates); ++u) {
      batch.clear();
      for (std::size_t k = 0; k < half; ++k) {
        const auto& e = expert[rng() % expert.size()];
        Vector x(3);
        x << e.theta / pilots::kThetaScale, e.omega / pilots::kOmegaScale, e.action;
        batch.push_back({{x}, Vector::Constant(1, 1.0)});
      }
      for (const auto& tr : buffer.sample(half, rng)) {
        Vector x(3);
        x << tr.theta / pilots::kThetaScale, tr.omega / pilots::kOmegaScale, tr.action;
        batch.push_back({{x}, Vector::Constant(1, 0.0)});
      }
      const auto g = nnet::gradients(disc.spec, disc.params, batch, nnet::Loss::BCE);
      nnet::adam_step(disc.params, g.grad, disc_opt);
    }
  };

  TrainOptions inner = opts;
  for (int it = 0; it < iterations; ++it) {
    auto chunk = run_sac(learner, env, algo, rng, static_cast<long>(algo.airl_steps_per_iteration), learned, inner,
                         buffer, global_step);
    auto& gen = result.generator;
    gen.log.insert(gen.log.end(), chunk.log.begin(), chunk.log.end());
    for (auto& tr : chunk.first_transitions) {
      if (gen.first_transitions.size() < opts.record_transitions) gen.first_transitions.push_back(tr);
    }
    inner.record_transitions = opts.record_transitions - gen.first_transitions.size();
    if (buffer.size() >= algo.batch) train_discriminator();
    if (opts.on_step && !opts.on_step(global_step)) break;
  }
  result.sac_actor = learner.actor();
  result.generator.actor = greedy_from_sac(learner.actor(), algo);
  result.generator.selected_step = global_step;
  return result;
}

double pd_expert(double theta, double omega) { return std::clamp(-(0.02 * theta + 0.008 * omega), -1.0, 1.0); }

std::vector<ExpertSample> collect_expert(const EnvConfig& env, const Controller& controller, std::uint64_t seed,
                                         std::size_t samples) {
  env.validate();
  Rng rng(seed);
  std::vector<ExpertSample> out;
  out.reserve(samples);
  State s = env_reset(env, rng);
  while (out.size() < samples) {
    const double a = std::clamp(controller(s.theta, s.omega, rng), -1.0, 1.0);
    out.push_back({s.theta, s.omega, a});
    const auto es = env_step(s, a, env);
    s = es.done ? env_reset(env, rng) : es.next;
  }
  return out;
}

Evaluation evaluate(const pilots::Policy& policy, const EnvConfig& env, std::span<const std::uint64_t> seeds,
                    double seconds) {
  env.validate();
  if (policy.window.length() != 1 || policy.window.include_deflections) {
    throw ShapeError("evaluate: policy must take the state-only input");
  }
  const auto steps = static_cast<long>(std::lround(seconds / env.physics.dt));
  Evaluation ev;
  double abs_sum = 0.0;
  long count = 0;
  for (const auto seed : seeds) {
    Rng rng(seed);
    const State start = env_reset(env, rng);
    physics::PendulumState s{start.theta, 0.0, 0.0};
    TrialLog log;
    log.rows.reserve(static_cast<std::size_t>(steps));
    for (long k = 0; k < steps; ++k) {
      const double t = static_cast<double>(k) * env.physics.dt;
      pilots::ObservationWindow w{{s.theta}, {s.omega}, std::nullopt};
      const double d = policy.act(w);
      TrialRow row;
      row.t = t;
      row.theta = s.theta;
      row.omega = s.omega;
      row.executed_deflection = d;
      row.pilot_deflection = d;
      row.deflection_class = metrics::classify_deflection(s.theta, s.omega, d);
      abs_sum += std::abs(s.theta);
      ++count;
      const auto out = physics::step(s, d, env.physics);
      row.crash_flag = out.crashed;
      ev.crashes += out.crashed;
      s = out.state;
      log.rows.push_back(row);
    }
    ev.logs.push_back(std::move(log));
  }
  ev.mean_abs_theta = count ? abs_sum / static_cast<double>(count) : 0.0;
  return ev;
}

}  // namespace sdassist::rl
