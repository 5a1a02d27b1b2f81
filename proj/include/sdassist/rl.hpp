#pragma once

// Bounded pendulum environment and the trainers that produce assistant and
// pilot policies: DDPG, SAC, behavior cloning and AIRL with a SAC generator.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "sdassist/nnet.hpp"
#include "sdassist/physics.hpp"
#include "sdassist/pilots.hpp"
#include "sdassist/trial_log.hpp"

namespace sdassist::rl {

struct EnvConfig {
  physics::PhysicsConfig physics;
  double episode_seconds = 30.0;
  double train_dt = 0.02;
  double start_range = 60.0;         // starts drawn from the open interval (-range, range)
  double reward_inner_bound = 30.0;  // dead zone half-width

  void validate() const;
};

struct State {
  double theta = 0.0;
  double omega = 0.0;
  double t = 0.0;
};

struct Transition {
  double theta = 0.0;
  double omega = 0.0;
  double action = 0.0;
  double reward = 0.0;
  double next_theta = 0.0;
  double next_omega = 0.0;
  bool done = false;     // crash or end of episode
  bool crashed = false;  // terminal: the pendulum hit the bound

  bool operator==(const Transition&) const = default;
};

// 0 inside the dead zone (inclusive), else -(theta^2 + 0.1 omega^2 + 0.01 d^2).
double reward(double theta, double omega, double deflection, double inner_bound = 30.0);

State env_reset(const EnvConfig& cfg, Rng& rng);

struct EnvStep {
  State next;  // pre-reset state; a crashed episode ends here
  double reward = 0.0;
  bool done = false;
  bool crashed = false;
};
EnvStep env_step(const State& state, double action, const EnvConfig& cfg);

// Fixed-capacity FIFO replay storage.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity);
  void push(const Transition& tr);
  std::size_t size() const { return size_; }
  std::size_t capacity() const { return data_.size(); }
  // i = 0 is the oldest retained transition.
  const Transition& at(std::size_t i) const;
  std::vector<Transition> sample(std::size_t n, Rng& rng) const;

 private:
  std::vector<Transition> data_;
  std::size_t next_ = 0;
  std::size_t size_ = 0;
};

// target <- tau * online + (1 - tau) * target
void polyak_update(nnet::Parameters& target, const nnet::Parameters& online, double tau);

enum class Algo { DDPG, SAC, BC, AIRL };

struct AlgoConfig {
  Algo algo = Algo::DDPG;
  std::vector<int> actor_hidden{64, 64};
  std::vector<int> critic_hidden{64, 64};
  double gamma = 0.99;
  double tau = 0.005;
  double lr = 3e-4;
  std::size_t batch = 256;
  std::size_t buffer_capacity = 100000;
  double exploration_sigma = 0.1;  // DDPG Gaussian action noise
  double target_entropy = -1.0;    // SAC
  double initial_log_alpha = 0.0;  // SAC
  std::size_t learning_starts = 1000;  // uniform-random actions before updates begin
  // Env rewards are multiplied by this before they reach the critic.
  double reward_scale = 1e-3;
  // DDPG/SAC: subtracts weight * (theta / reward_inner_bound)^2 from the scaled
  // reward so the flat dead zone has a preferred point at the DOB. 0 trains on
  // the bare reward.
  double centering_weight = 1.0;
  // AIRL
  std::size_t airl_steps_per_iteration = 1000;
  std::size_t airl_disc_updates = 20;
  double airl_disc_lr = 3e-4;

  void validate() const;
};

// Observation fed to every RL network: (theta/60, omega/300).
pilots::WindowConfig state_window();

struct LogRow {
  long step = 0;
  double episode_return = 0.0;
  double critic_loss = 0.0;
  double actor_loss = 0.0;
};
void write_training_log(std::span<const LogRow> rows, const std::filesystem::path& path);

struct TrainResult {
  pilots::Policy actor;  // greedy, tanh-bounded, state-only input
  std::vector<LogRow> log;
  std::vector<Transition> first_transitions;  // the first `record_transitions` collected
  long selected_step = 0;  // step of the returned actor (the last step without checkpointing)
};

struct TrainOptions {
  std::size_t record_transitions = 0;
  // SAC/AIRL: resume from an existing two-output SAC actor.
  std::optional<nnet::Parameters> initial_sac_actor;
  // Called after every environment step with the step count; return false to stop early.
  std::function<bool(long)> on_step;
  // DDPG/SAC checkpointing: every `checkpoint_every` steps the greedy actor is
  // evaluated on `validation_seeds` and the best one (fewest crashes, then
  // lowest mean |theta|) is returned. 0 disables it.
  long checkpoint_every = 0;
  std::vector<std::uint64_t> validation_seeds{1001, 1002, 1003};
  double validation_seconds = 30.0;
};

TrainResult train_ddpg(const EnvConfig& env, const AlgoConfig& algo, std::uint64_t seed, long total_steps,
                       const TrainOptions& opts = {});
TrainResult train_sac(const EnvConfig& env, const AlgoConfig& algo, std::uint64_t seed, long total_steps,
                      const TrainOptions& opts = {});

nnet::NetworkSpec sac_actor_spec(const AlgoConfig& algo);
nnet::NetworkSpec ddpg_actor_spec(const AlgoConfig& algo);
nnet::NetworkSpec critic_spec(const AlgoConfig& algo);
// The mean head of a SAC actor as a standalone tanh policy.
pilots::Policy greedy_from_sac(const nnet::Parameters& sac_actor, const AlgoConfig& algo);
// A SAC actor whose mean head equals `greedy`; the log-std head is freshly initialized.
nnet::Parameters sac_from_greedy(const pilots::Policy& greedy, const AlgoConfig& algo, std::uint64_t seed);

struct BcOptions {
  double lr = 1e-3;
  std::size_t batch = 64;
  std::optional<nnet::Parameters> initial;  // fine-tune instead of fresh init
};

// Supervised MSE regression of actions on windows.
nnet::Parameters train_bc(const nnet::NetworkSpec& spec, std::span<const pilots::Demonstration> demos,
                          std::uint64_t seed, int epochs, const BcOptions& opts = {});

struct ExpertSample {
  double theta = 0.0;
  double omega = 0.0;
  double action = 0.0;
};

// MLP over (theta/60, omega/300, d) with a sigmoid head.
struct Discriminator {
  nnet::NetworkSpec spec;
  nnet::Parameters params;

  double prob(double theta, double omega, double action) const;
  // log D - log(1 - D)
  double reward(double theta, double omega, double action) const;
};

struct AirlResult {
  TrainResult generator;
  nnet::Parameters sac_actor;
  Discriminator discriminator;
};

AirlResult train_airl(const EnvConfig& env, const AlgoConfig& algo, std::span<const ExpertSample> expert,
                      std::uint64_t seed, int iterations, const TrainOptions& opts = {});

// Scripted controllers used as experts and corpus generators.
double pd_expert(double theta, double omega);
using Controller = std::function<double(double theta, double omega, Rng& rng)>;

// Rolls `controller` out at train_dt from env_reset starts and records expert samples.
std::vector<ExpertSample> collect_expert(const EnvConfig& env, const Controller& controller, std::uint64_t seed,
                                         std::size_t samples);

struct Evaluation {
  int crashes = 0;
  double mean_abs_theta = 0.0;
  std::vector<TrialLog> logs;
};

// Runs a state-only policy at the physics rate for `seeds.size()` trials of
// `seconds`, each starting from env_reset(seed). Crashes reset to the DOB.
Evaluation evaluate(const pilots::Policy& policy, const EnvConfig& env, std::span<const std::uint64_t> seeds,
                    double seconds = 30.0);

}  // namespace sdassist::rl
