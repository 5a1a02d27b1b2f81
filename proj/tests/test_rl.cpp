#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "json.hpp"
#include "sdassist/rl.hpp"

using namespace sdassist;
using namespace sdassist::rl;

namespace {

AlgoConfig small_algo() {
  AlgoConfig a;
  a.actor_hidden = {16, 16};
  a.critic_hidden = {16, 16};
  a.batch = 32;
  a.learning_starts = 64;
  a.buffer_capacity = 5000;
  return a;
}

pilots::Demonstration state_demo(double theta, double omega, double action) {
  return {{{theta}, {omega}, std::nullopt}, action};
}

}  // namespace

TEST_CASE("reward") {
  CHECK(reward(0, 0, 0) == 0.0);
  CHECK(reward(30, 999, 1) == 0.0);
  CHECK(reward(-30, -999, -1) == 0.0);
  CHECK(reward(40, 10, 0.5) == doctest::Approx(-1610.0025).epsilon(1e-15));
  CHECK(reward(-40, -10, -0.5) == reward(40, 10, 0.5));
  SUBCASE("never positive") {
    Rng rng(1);
    for (int i = 0; i < 10000; ++i) {
      CHECK(reward(uniform(rng, -70, 70), uniform(rng, -500, 500), uniform(rng, -1, 1)) <= 0.0);
    }
  }
  // jump at the dead-zone edge, continuous elsewhere
  CHECK(reward(30.000001, 0, 0) < -899.0);
  CHECK(std::abs(reward(45, 3, 0.2) - reward(45.000001, 3, 0.2)) < 1e-3);
}

TEST_CASE("env_reset") {
  const EnvConfig env;
  Rng a(5), b(5);
  CHECK(env_reset(env, a).theta == env_reset(env, b).theta);
  Rng rng(6);
  double sum = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const auto s = env_reset(env, rng);
    REQUIRE(std::abs(s.theta) < 60.0);
    CHECK(s.omega == 0.0);
    CHECK(s.t == 0.0);
    sum += s.theta;
  }
  // sd of the mean of 1e4 U(-60,60) draws is ~0.35 deg
  CHECK(std::abs(sum / 10000.0) < 2.0);
}

TEST_CASE("env_step") {
  const EnvConfig env;
  SUBCASE("at the DOB") {
    const auto r = env_step({0, 0, 0}, 0.0, env);
    CHECK(r.reward == 0.0);
    CHECK_FALSE(r.done);
    CHECK(r.next.t == doctest::Approx(0.02));
  }
  SUBCASE("free fall from 45 degrees ends the episode with a large penalty") {
    State s{45, 0, 0};
    // independent integration of the same free fall
    double th = 45, om = 0;
    int steps = 0;
    EnvStep r;
    do {
      r = env_step(s, 0.0, env);
      om += 0.02 * 600.0 * std::sin(th * M_PI / 180.0);
      th += 0.02 * om;
      CHECK(r.next.theta == doctest::Approx(th).epsilon(1e-12));
      s = r.next;
      ++steps;
    } while (!r.done && steps < 1000);
    CHECK(r.done);
    CHECK(r.crashed);
    CHECK(std::abs(r.next.theta) >= 60.0);
    CHECK(r.reward <= -3600.0);
  }
  SUBCASE("time limit") {
    State s{0, 0, 0};
    EnvStep r;
    int steps = 0;
    do {
      r = env_step(s, 0.0, env);
      s = r.next;
      ++steps;
    } while (!r.done);
    CHECK(steps == 1500);
    CHECK_FALSE(r.crashed);
  }
  CHECK_THROWS_AS(env_step({0, 0, 0}, 1.5, env), InvalidArgument);
  EnvConfig bad;
  bad.reward_inner_bound = 60;
  CHECK_THROWS_AS(bad.validate(), InvalidArgument);
}

TEST_CASE("replay buffer") {
  ReplayBuffer buf(3);
  for (int i = 0; i < 5; ++i) buf.push({static_cast<double>(i), 0, 0, 0, 0, 0, false, false});
  CHECK(buf.size() == 3);
  CHECK(buf.at(0).theta == 2.0);
  CHECK(buf.at(2).theta == 4.0);
  CHECK_THROWS_AS(buf.at(3), InvalidArgument);
  Rng rng(1);
  for (const auto& tr : buf.sample(50, rng)) CHECK(tr.theta >= 2.0);
  CHECK_THROWS_AS(ReplayBuffer(0), InvalidArgument);
}

TEST_CASE("polyak update") {
  const nnet::NetworkSpec spec{nnet::Arch::MLP, 2, {3}, 1, nnet::Activation::Linear};
  auto target = nnet::init(spec, 1);
  const auto online = nnet::init(spec, 2);
  const auto before = target;
  polyak_update(target, online, 0.25);
  for (std::size_t i = 0; i < target.size(); ++i) {
    CHECK(target.values()[i] == doctest::Approx(0.25 * online.values()[i] + 0.75 * before.values()[i]));
  }
  auto copy = before;
  polyak_update(copy, online, 1.0);
  CHECK(copy == online);
}

TEST_CASE("trainer determinism and logs") {
  const EnvConfig env;
  const auto algo = small_algo();
  TrainOptions opts;
  opts.record_transitions = 100;
  for (int which = 0; which < 2; ++which) {
    auto run = [&](std::uint64_t seed) {
      return which == 0 ? train_ddpg(env, algo, seed, 400, opts) : train_sac(env, algo, seed, 400, opts);
    };
    const auto a = run(7);
    const auto b = run(7);
    const auto c = run(8);
    REQUIRE(a.first_transitions.size() == 100);
    CHECK(a.first_transitions == b.first_transitions);
    CHECK(a.first_transitions != c.first_transitions);
    CHECK(a.actor.params == b.actor.params);
    CHECK(a.actor.spec.input_dim == 2);
    for (const auto& tr : a.first_transitions) CHECK(std::abs(tr.action) <= 1.0);
  }
  const auto r = train_ddpg(env, algo, 3, 2000);
  REQUIRE_FALSE(r.log.empty());
  const auto path = std::filesystem::temp_directory_path() / "sdassist_rl_log.jsonl";
  write_training_log(r.log, path);
  std::ifstream in(path);
  std::string line;
  std::size_t lines = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.contains("step"));
    CHECK(j.contains("episode_return"));
    CHECK(j.contains("critic_loss"));
    CHECK(j.contains("actor_loss"));
    ++lines;
  }
  CHECK(lines == r.log.size());
  std::filesystem::remove(path);
  CHECK_THROWS_AS(train_sac(env, algo, 1, 10), InvalidArgument);
}

TEST_CASE("SAC actor conversions") {
  const auto algo = small_algo();
  const auto sac = nnet::init(sac_actor_spec(algo), 3);
  const auto greedy = greedy_from_sac(sac, algo);
  const nnet::Vector x = (nnet::Vector(2) << 0.3, -0.2).finished();
  const auto out = nnet::forward(sac_actor_spec(algo), sac, {x});
  CHECK(nnet::forward(greedy.spec, greedy.params, {x})(0) == doctest::Approx(std::tanh(out(0))));
  const auto back = sac_from_greedy(greedy, algo, 9);
  CHECK(nnet::forward(sac_actor_spec(algo), back, {x})(0) == doctest::Approx(out(0)));
}

TEST_CASE("behavior cloning") {
  const EnvConfig env;
  const auto spec = ddpg_actor_spec(small_algo());
  SUBCASE("PD expert: held-out sign agreement") {
    Rng rng(2);
    const Controller noisy = [](double th, double om, Rng& r) { return pd_expert(th, om) + 0.05 * gaussian(r); };
    std::vector<pilots::Demonstration> train;
    for (const auto& e : collect_expert(env, noisy, 1, 4000)) train.push_back(state_demo(e.theta, e.omega, e.action));
    const auto params = train_bc(spec, train, 4, 30);
    const pilots::Policy policy{spec, params, state_window()};
    int agree = 0, total = 0;
    for (int i = 0; i < 2000; ++i) {
      const double th = uniform(rng, -55, 55), om = uniform(rng, -150, 150);
      const double want = pd_expert(th, om);
      if (std::abs(want) < 0.05) continue;
      ++total;
      agree += sign_of(policy.act({{th}, {om}, std::nullopt})) == sign_of(want);
    }
    CHECK(static_cast<double>(agree) / total > 0.9);
  }
  SUBCASE("a single repeated demonstration is reproduced") {
    std::vector<pilots::Demonstration> one(64, state_demo(12, -30, 0.37));
    const auto params = train_bc(spec, one, 1, 100);
    const pilots::Policy policy{spec, params, state_window()};
    CHECK(std::abs(policy.act({{12}, {-30}, std::nullopt}) - 0.37) < 1e-2);
  }
  SUBCASE("zero epochs leaves the parameters unchanged") {
    const auto init = nnet::init(spec, 5);
    BcOptions o;
    o.initial = init;
    CHECK(train_bc(spec, std::vector{state_demo(1, 1, 0.5)}, 5, 0, o) == init);
  }
  CHECK_THROWS_AS(train_bc(spec, {}, 1, 3), InvalidArgument);
}

TEST_CASE("AIRL") {
  const EnvConfig env;
  auto algo = small_algo();
  const auto expert = collect_expert(env, [](double th, double om, Rng&) { return pd_expert(th, om); }, 3, 3000);
  SUBCASE("zero iterations returns the freshly initialized actor") {
    const auto r = train_airl(env, algo, expert, 11, 0);
    CHECK(r.sac_actor == nnet::init(sac_actor_spec(algo), split_seed(11, 1)));
  }
  SUBCASE("discriminator separates expert from random actions") {
    algo.airl_steps_per_iteration = 500;
    algo.airl_disc_updates = 100;
    algo.airl_disc_lr = 1e-3;
    const auto r = train_airl(env, algo, expert, 11, 20);
    Rng rng(8);
    int correct = 0;
    const int n = 1000;
    for (int i = 0; i < n; ++i) {
      const auto& e = expert[static_cast<std::size_t>(rng() % expert.size())];
      correct += r.discriminator.prob(e.theta, e.omega, e.action) > 0.5;
      correct += r.discriminator.prob(e.theta, e.omega, uniform(rng, -1, 1)) < 0.5;
    }
    MESSAGE("discriminator accuracy " << correct / (2.0 * n));
    CHECK(correct / (2.0 * n) > 0.9);
  }
  CHECK_THROWS_AS(train_airl(env, algo, {}, 1, 1), InvalidArgument);
}

TEST_CASE("evaluate") {
  const EnvConfig env;
  const auto spec = ddpg_actor_spec(small_algo());
  const pilots::Policy idle{spec, nnet::Parameters(nnet::layout(spec)), state_window()};
  const std::vector<std::uint64_t> seeds{1, 2};
  const auto ev = evaluate(idle, env, seeds, 5.0);
  REQUIRE(ev.logs.size() == 2);
  CHECK(ev.logs[0].rows.size() == 1000);
  CHECK(ev.crashes >= 2);  // nobody is steering
  CHECK(evaluate(idle, env, seeds, 5.0).logs == ev.logs);
  pilots::Policy windowed = idle;
  windowed.window = {0.1, 0.0, true, 200.0};
  CHECK_THROWS_AS(evaluate(windowed, env, seeds), ShapeError);
}
