#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "sdassist/harness.hpp"
#include "sdassist/rl.hpp"

using namespace sdassist;
using namespace sdassist::harness;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "sdassist_harness_test";
  fs::create_directories(dir);
  return dir / name;
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  out << text;
}

// State-only MLP cloned from the PD expert; stands in for a trained assistant.
const assistant::Assistant& pd_assistant() {
  static const assistant::Assistant a = [] {
    rl::AlgoConfig algo;
    algo.actor_hidden = {16, 16};
    const auto spec = rl::ddpg_actor_spec(algo);
    Rng rng(3);
    std::vector<pilots::Demonstration> demos;
    for (int i = 0; i < 4000; ++i) {
      const double th = uniform(rng, -60, 60), om = uniform(rng, -200, 200);
      demos.push_back({{{th}, {om}, std::nullopt}, rl::pd_expert(th, om)});
    }
    rl::BcOptions bc;
    bc.lr = 3e-3;
    return assistant::Assistant{assistant::AssistantKind::DL,
                                {spec, rl::train_bc(spec, demos, 4, 40, bc), rl::state_window()},
                                std::nullopt};
  }();
  return a;
}

PilotSpec network_pilot(double future) {
  const pilots::WindowConfig cfg{0.05, future, true, 200.0};
  const auto spec = pilots::default_pilot_spec(nnet::Arch::MLP, cfg);
  PilotSpec p;
  p.name = "net";
  p.kind = PilotKind::Network;
  p.policy = pilots::Policy{spec, nnet::init(spec, 12), cfg};
  return p;
}

TrialConfig short_trial(double seconds = 5.0) {
  TrialConfig c;
  c.seconds = seconds;
  return c;
}

}  // namespace

TEST_CASE("scripted pilots") {
  SUBCASE("the PD pilot balances alone") {
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
      const auto log = run_trial(PilotSpec{}, {}, TrialConfig{}, seed);
      CHECK(log.rows.size() == 6000);
      const auto m = metrics::trial_metrics(log);
      CHECK(m.crashes == 0);
      CHECK(m.mean_abs_theta < 5.0);
    }
  }
  SUBCASE("random and sluggish pilots crash") {
    PilotSpec random;
    random.kind = PilotKind::Random;
    CHECK(metrics::trial_metrics(run_trial(random, {}, TrialConfig{}, 1)).crashes > 0);
    CHECK(metrics::trial_metrics(run_trial(sluggish_pilot(), {}, TrialConfig{}, 1)).crashes > 0);
  }
  SUBCASE("crash rows reset the next row to the DOB") {
    PilotSpec random;
    random.kind = PilotKind::Random;
    const auto log = run_trial(random, {}, short_trial(20), 2);
    int seen = 0;
    for (std::size_t i = 0; i + 1 < log.rows.size(); ++i) {
      if (!log.rows[i].crash_flag) continue;
      ++seen;
      CHECK(log.rows[i + 1].theta == 0.0);
      CHECK(log.rows[i + 1].omega == 0.0);
      CHECK(log.rows[i + 1].t == doctest::Approx(log.rows[i].t + 0.005));
    }
    CHECK(seen > 0);
  }
  SUBCASE("validation") {
    PilotSpec bad;
    bad.kind = PilotKind::Network;
    CHECK_THROWS_AS(run_trial(bad, {}, short_trial(), 1), InvalidArgument);
    bad = PilotSpec{};
    bad.noise = -1;
    CHECK_THROWS_AS(run_trial(bad, {}, short_trial(), 1), InvalidArgument);
    auto cfg = short_trial();
    cfg.start_range = 60;
    CHECK_THROWS_AS(run_trial(PilotSpec{}, {}, cfg, 1), InvalidArgument);
    auto wrong = network_pilot(0.0);
    wrong.policy->window.win_size = 0.1;  // the net was built for 0.05 s
    CHECK_THROWS_WITH_AS(run_trial(wrong, {}, short_trial(), 1), doctest::Contains("pilot net"), ShapeError);
    CHECK(to_string(PilotKind::Sluggish) == "sluggish");
    CHECK(pilot_kind_from_string("network") == PilotKind::Network);
    CHECK_THROWS_AS(pilot_kind_from_string("robot"), FormatError);
  }
}

TEST_CASE("run_trial is a pure function of its inputs") {
  const auto& a = pd_assistant();
  const Models m{&a, nullptr};
  const auto x = run_trial(sluggish_pilot(), m, short_trial(10), 42);
  const auto y = run_trial(sluggish_pilot(), m, short_trial(10), 42);
  CHECK(x == y);
  CHECK_FALSE(x == run_trial(sluggish_pilot(), m, short_trial(10), 43));
  CHECK(trial_seed(1, 0, 0) != trial_seed(1, 0, 1));
  CHECK(trial_seed(1, 0, 0) != trial_seed(1, 1, 0));
}

TEST_CASE("unassisted twin output is the policy output delayed by its lead") {
  const auto pilot = network_pilot(0.1);
  const auto log = run_trial(pilot, {}, short_trial(3), 5);
  // Rebuild the pilot's view from the log and replay its decisions.
  std::vector<pilots::Sample> history;
  const int lag = 20;
  for (std::size_t k = 0; k < log.rows.size(); ++k) {
    const auto& r = log.rows[k];
    history.push_back({r.t, r.theta, r.omega, k > 0 ? log.rows[k - 1].executed_deflection : 0.0});
    CHECK_FALSE(r.assistant_deflection.has_value());
    CHECK(r.executor == Executor::Pilot);
    CHECK(r.executed_deflection == r.pilot_deflection);
    CHECK(r.crash_probability == 0.0);
    const double decided = pilot.policy->act(pilots::build_window(history, r.t, pilot.policy->window));
    if (k + lag < log.rows.size()) CHECK(log.rows[k + lag].pilot_deflection == decided);
    if (k < static_cast<std::size_t>(lag)) CHECK(r.pilot_deflection == 0.0);
  }
}

TEST_CASE("gating and suggestion execution") {
  const auto& a = pd_assistant();
  auto cfg = short_trial(20);
  cfg.suggestion_lead = 0.0;

  SUBCASE("without a predictor only the outer angle opens the gate") {
    const auto log = run_trial(sluggish_pilot(), {&a, nullptr}, cfg, 7);
    int cues = 0;
    for (const auto& r : log.rows) {
      CHECK(r.assistant_deflection.has_value() == (std::abs(r.theta) > 15.0));
      if (r.assistant_deflection) {
        ++cues;
        // no lead: the cue is the policy's output for the current state
        CHECK(*r.assistant_deflection == a.policy.act({{r.theta}, {r.omega}, std::nullopt}));
      }
    }
    CHECK(cues > 0);
  }

  SUBCASE("assistant-executed rows follow an accepted cue 0.35-0.45 s earlier") {
    const auto log = run_trial(sluggish_pilot(), {&a, nullptr}, cfg, 8);
    int executed = 0;
    for (std::size_t k = 0; k < log.rows.size(); ++k) {
      const auto& r = log.rows[k];
      if (r.executor != Executor::Assistant) continue;
      ++executed;
      bool matched = false;
      for (std::size_t j = 0; j < k; ++j) {
        const auto& c = log.rows[j];
        if (!c.assistant_deflection) continue;
        const double lag = r.t - c.t;
        if (lag < 0.35 - 0.005 || lag > 0.45 + 0.005) continue;
        if (std::abs(r.executed_deflection - std::clamp(*c.assistant_deflection, -1.0, 1.0)) <= 0.05 + 1e-12) {
          matched = true;
        }
      }
      CHECK(matched);
    }
    CHECK(executed > 0);
  }

  SUBCASE("with a predictor the gate follows the logged probability") {
    crashpred::CrashPredictorSpec spec;
    spec.hidden = 4;
    spec.layers = 1;
    const crashpred::CrashPredictor pred{spec, nnet::init(spec.network(), 2)};
    const auto log = run_trial(sluggish_pilot(), {&a, &pred}, cfg, 9);
    for (std::size_t k = 0; k < log.rows.size(); ++k) {
      const auto& r = log.rows[k];
      CHECK(r.assistant_deflection.has_value() == assistant::gate(r.crash_probability, r.theta, cfg.gating));
      CHECK(r.crash_probability >= 0.0);
      CHECK(r.crash_probability <= 1.0);
      // the estimate refreshes at 50 Hz and is held in between
      if (k % 4 != 0 && !log.rows[k - 1].crash_flag) CHECK(r.crash_probability == log.rows[k - 1].crash_probability);
    }
  }

  SUBCASE("with a lead the first cue advises for the extrapolated state") {
    cfg.suggestion_lead = 0.4;
    const auto log = run_trial(sluggish_pilot(), {&a, nullptr}, cfg, 7);
    std::size_t k = 0;
    while (k < log.rows.size() && !log.rows[k].assistant_deflection) ++k;
    REQUIRE(k < log.rows.size());
    REQUIRE(k > 0);
    // No earlier cues, so the roll-forward holds the current deflection for 80 steps.
    physics::PendulumState s{log.rows[k].theta, log.rows[k].omega, 0.0};
    const double held = log.rows[k - 1].executed_deflection;
    for (int i = 0; i < 80 && std::abs(s.theta) < 60.0; ++i) {
      s.omega += (600.0 * std::sin(s.theta * M_PI / 180.0) + 600.0 * held) * 0.005;
      s.theta += s.omega * 0.005;
    }
    const double th = std::clamp(s.theta, -60.0, 60.0);
    CHECK(*log.rows[k].assistant_deflection == doctest::Approx(a.policy.act({{th}, {s.omega}, std::nullopt})).epsilon(1e-12));
  }
}

TEST_CASE("a trained assistant with reaction-time lead helps a sluggish pilot") {
  rl::AlgoConfig algo;
  algo.actor_hidden = {16, 16};
  algo.critic_hidden = {16, 16};
  algo.batch = 64;
  algo.lr = 1e-3;
  algo.learning_starts = 500;
  rl::TrainOptions opts;
  opts.checkpoint_every = 2000;
  const auto r = rl::train_ddpg(rl::EnvConfig{}, algo, 4, 10000, opts);
  const assistant::Assistant a{assistant::AssistantKind::DDPG, r.actor, std::nullopt};

  auto crashes = [&](const Models& m, double lead) {
    TrialConfig cfg;
    cfg.suggestion_lead = lead;
    double total = 0;
    for (std::size_t i = 0; i < 8; ++i) {
      total += metrics::trial_metrics(run_trial(sluggish_pilot(), m, cfg, trial_seed(5, 0, i))).crashes;
    }
    return total;
  };
  const double none = crashes({}, 0.4);
  const double lead = crashes({&a, nullptr}, 0.4);
  const double late = crashes({&a, nullptr}, 0.0);
  MESSAGE("sluggish pilot crashes: unassisted " << none << ", assisted " << lead << ", assisted without lead " << late);
  CHECK(lead < none);
  CHECK(lead < late);
}

TEST_CASE("trial files round-trip exactly") {
  const auto& a = pd_assistant();
  std::vector<TrialLog> logs{run_trial(sluggish_pilot(), {&a, nullptr}, short_trial(4), 1),
                             run_trial(PilotSpec{}, {}, short_trial(1), 2)};
  logs[1].rows[3].t = 0.1 + 0.2;  // not representable in short decimal
  for (const char* name : {"logs.csv", "logs.jsonl"}) {
    const auto p = scratch(name);
    write_trials(logs, p);
    CHECK(read_trials(p) == logs);
  }
  SUBCASE("empty") {
    const auto p = scratch("empty.csv");
    write_trials_csv({}, p);
    CHECK(read_trials_csv(p).empty());
  }
  SUBCASE("malformed files") {
    const auto p = scratch("bad.csv");
    write_file(p, "t,theta\n0,1\n");
    CHECK_THROWS_AS(read_trials_csv(p), FormatError);
    write_file(p,
               "trial,t,theta,omega,executed_deflection,crash_probability,pilot_deflection,assistant_deflection,"
               "executor,deflection_class,crash_flag\n1,0,0,0,0,0,0,,pilot,none,0\n");
    CHECK_THROWS_AS(read_trials_csv(p), FormatError);  // trial 1 before trial 0
    write_file(p,
               "trial,t,theta,omega,executed_deflection,crash_probability,pilot_deflection,assistant_deflection,"
               "executor,deflection_class,crash_flag\n0,0,x,0,0,0,0,,pilot,none,0\n");
    CHECK_THROWS_AS(read_trials_csv(p), FormatError);
    write_file(p,
               "trial,t,theta,omega,executed_deflection,crash_probability,pilot_deflection,assistant_deflection,"
               "executor,deflection_class,crash_flag\n0,0,0,0,0,0,0,,robot,none,0\n");
    CHECK_THROWS_AS(read_trials_csv(p), FormatError);
    const auto j = scratch("bad.jsonl");
    write_file(j, "{\"trial\":0}\n");
    CHECK_THROWS_AS(read_trials_jsonl(j), FormatError);
    CHECK_THROWS_AS(write_trials(logs, scratch("logs.txt")), InvalidArgument);
  }
}

TEST_CASE("hand-counted disagreement fixture") {
  const auto logs = read_trials(fs::path(SDASSIST_FIXTURE_DIR) / "disagreements.csv");
  REQUIRE(logs.size() == 1);
  REQUIRE(logs[0].rows.size() == 15);
  // Rows 1, 3, 5, 7, 10, 12 and 14 disagree; row 5 sits exactly on the dead band.
  const auto eps = assistant::extract_disagreements(logs[0], rl::state_window());
  REQUIRE(eps.size() == 7);
  const double times[] = {0.005, 0.015, 0.025, 0.035, 0.05, 0.06, 0.07};
  for (std::size_t i = 0; i < eps.size(); ++i) CHECK(eps[i].t == doctest::Approx(times[i]));
}

TEST_CASE("experiment configs") {
  const auto dir = scratch("cfg").parent_path();
  const std::string text = R"({"seed": 9, "trials": 2, "seconds": 2, "start_range": 3, "suggestion_lead": 0.2,
    "gating": {"prob_threshold": 0.7, "inner_angle": 10, "outer_angle": 14},
    "behavior": {"accept_prob": 0.5},
    "predictor": "models/pred.json",
    "pilots": [{"name": "pd", "kind": "pd"}, {"name": "slow", "kind": "sluggish", "noise": 0.1},
               {"name": "twin", "kind": "network", "policy": "/abs/twin.json"}],
    "assistants": [{"name": "ddpg", "path": "ddpg.json"}]})";
  const auto c = experiment_config_from_json_string(text, dir);
  CHECK(c.seed == 9);
  CHECK(c.trials == 2);
  CHECK(c.trial.seconds == 2);
  CHECK(c.trial.start_range == 3);
  CHECK(c.trial.suggestion_lead == 0.2);
  CHECK(c.trial.gating.prob_threshold == 0.7);
  CHECK(c.trial.gating.outer_angle == 14);
  CHECK(c.trial.behavior.accept_prob == 0.5);
  CHECK(c.trial.behavior.delay_base == 0.4);
  CHECK(*c.predictor_path == dir / "models/pred.json");
  REQUIRE(c.pilots.size() == 3);
  CHECK(c.pilots[1].spec.kind == PilotKind::Sluggish);
  CHECK(c.pilots[1].spec.noise == 0.1);
  CHECK(c.pilots[1].spec.gain == sluggish_pilot().gain);
  CHECK(c.pilots[2].policy_path == fs::path("/abs/twin.json"));
  CHECK(c.assistants[0].path == dir / "ddpg.json");

  CHECK_THROWS_AS(experiment_config_from_json_string("{", dir), ConfigError);
  CHECK_THROWS_AS(experiment_config_from_json_string(R"({"pilots": []})", dir), ConfigError);
  CHECK_THROWS_AS(experiment_config_from_json_string(R"({"pilots": [{"name": "a", "kind": "jet"}]})", dir),
                  ConfigError);
  CHECK_THROWS_AS(experiment_config_from_json_string(
                      R"({"pilots": [{"name": "a", "kind": "pd"}, {"name": "a", "kind": "pd"}]})", dir),
                  ConfigError);
  CHECK_THROWS_AS(experiment_config_from_json_string(
                      R"({"pilots": [{"name": "a", "kind": "pd"}], "assistants": [{"name": "none", "path": "x"}]})",
                      dir),
                  ConfigError);
  CHECK_THROWS_AS(
      experiment_config_from_json_string(R"({"trials": 0, "pilots": [{"name": "a", "kind": "pd"}]})", dir),
      ConfigError);
  CHECK_THROWS_AS(experiment_config_from_json_string(
                      R"({"gating": {"inner_angle": 20}, "pilots": [{"name": "a", "kind": "pd"}]})", dir),
                  ConfigError);
  CHECK_THROWS_AS(load_experiment_config(dir / "missing.json"), ConfigError);
}

TEST_CASE("experiments") {
  const auto dir = scratch("exp").parent_path() / "exp";
  fs::create_directories(dir);
  assistant::save_assistant(pd_assistant(), dir / "pd_assistant.json");
  write_file(dir / "config.json", R"({"seed": 3, "trials": 6, "seconds": 10,
    "pilots": [{"name": "slow", "kind": "sluggish"}, {"name": "twin", "kind": "network", "policy": "nope.json"}],
    "assistants": [{"name": "pd", "path": "pd_assistant.json"}, {"name": "ghost", "path": "ghost.json"}]})");
  const auto e = load_experiment(load_experiment_config(dir / "config.json"));
  CHECK(e.pilots[1].error.has_value());
  CHECK(e.assistants[1].error.has_value());
  const auto r = run_experiment(e, true);
  REQUIRE(r.cells.size() == 6);
  const auto* base = r.find("slow", kUnassisted);
  const auto* pd = r.find("slow", "pd");
  REQUIRE(base);
  REQUIRE(pd);
  CHECK_FALSE(base->error);
  CHECK_FALSE(pd->error);
  CHECK(r.find("slow", "ghost")->error.has_value());
  CHECK(r.find("twin", kUnassisted)->error.has_value());
  CHECK(r.find("twin", "pd")->error.has_value());
  CHECK(r.find("nobody", "pd") == nullptr);
  CHECK(base->trials.size() == 6);
  CHECK(base->logs.size() == 6);

  // cells replay as individual seeded trials
  const auto again = run_trial(e.pilots[0].spec, {}, e.config.trial, trial_seed(3, 0, 4));
  CHECK(again == base->logs[4]);
  CHECK(metrics::aggregate_metrics(base->logs).crashes == base->pooled.crashes);

  REQUIRE(r.deltas.size() == 1);
  const auto& d = r.deltas[0];
  CHECK(d.crashes == pd->pooled.crashes - base->pooled.crashes);
  CHECK(d.mean_abs_theta == doctest::Approx(pd->pooled.mean_abs_theta - base->pooled.mean_abs_theta));
  CHECK(d.crash_sign_test.fewer + d.crash_sign_test.more <= 6);

  write_experiment_result(r, dir / "out");
  for (const char* f : {"cells.csv", "deltas.csv", "summary.json"}) CHECK(fs::exists(dir / "out" / f));
  std::ifstream cells(dir / "out" / "cells.csv");
  std::string header;
  std::getline(cells, header);
  CHECK(header.rfind("pilot,assistant,trials,crashes", 0) == 0);
}

TEST_CASE("human recordings") {
  const auto csv = scratch("human.csv");
  std::string text = "t,theta,omega,deflection\n";
  for (int k = 0; k < 50; ++k) {
    text += std::to_string(k * 0.02) + "," + std::to_string(k * 0.5) + "," + std::to_string(25.0) + "," +
            std::to_string(k % 2 ? 0.25 : -0.25) + "\n";
  }
  write_file(csv, text);
  auto sidecar = csv;
  sidecar.replace_extension(".json");
  write_file(sidecar, R"({"subject": "S07", "session": 2, "trial": 3, "sample_hz": 50})");
  const auto rec = ingest_human_csv(csv);
  CHECK(rec.subject == "S07");
  CHECK(rec.session == 2);
  CHECK(rec.trial == 3);
  CHECK(rec.sample_hz == 50);
  REQUIRE(rec.rows.size() == 50);
  CHECK(rec.rows[10].theta == doctest::Approx(5.0));

  SUBCASE("rate inferred without a sidecar") {
    fs::remove(sidecar);
    CHECK(ingest_human_csv(csv).sample_hz == doctest::Approx(50.0));
  }
  SUBCASE("sidecar rate mismatch") {
    write_file(sidecar, R"({"sample_hz": 200})");
    CHECK_THROWS_AS(ingest_human_csv(csv), FormatError);
  }
  SUBCASE("invalid rows") {
    const auto bad = scratch("bad_human.csv");
    write_file(bad, "t,theta,omega,deflection\n0,0,0,0\n0.02,0,0,1.5\n");
    CHECK_THROWS_AS(ingest_human_csv(bad), FormatError);
    write_file(bad, "t,theta,omega,deflection\n0,0,0,0\n0,0,0,0\n");
    CHECK_THROWS_AS(ingest_human_csv(bad), FormatError);
    write_file(bad, "t,theta,omega,deflection\n0,0,0,0\n0.02,61,0,0\n");
    CHECK_THROWS_AS(ingest_human_csv(bad), FormatError);
    write_file(bad, "t,theta,omega,deflection\n0,0,0,0\n0.02,nan,0,0\n");
    CHECK_THROWS_AS(ingest_human_csv(bad), FormatError);
    write_file(bad, "time,theta,omega,deflection\n0,0,0,0\n0.02,0,0,0\n");
    CHECK_THROWS_AS(ingest_human_csv(bad), FormatError);
    CHECK_THROWS_AS(ingest_human_csv(scratch("absent.csv")), Error);
  }

  SUBCASE("resampling 50 Hz to 200 Hz") {
    const auto up = resample(rec.rows, 200.0);
    REQUIRE(up.size() == 197);  // 0 .. 0.98 s inclusive
    for (std::size_t k = 0; k < up.size(); ++k) {
      const double t = k / 200.0;
      CHECK(up[k].t == doctest::Approx(t));
      CHECK(up[k].theta == doctest::Approx(t * 25.0));  // linear in t
      const auto src = static_cast<std::size_t>(std::floor(t / 0.02 + 1e-9));
      CHECK(up[k].deflection == rec.rows[src].deflection);  // held, not interpolated
    }
    const auto down = resample(up, 50.0);
    REQUIRE(down.size() == rec.rows.size());
    for (std::size_t k = 0; k < down.size(); ++k) CHECK(down[k].theta == doctest::Approx(rec.rows[k].theta));
    CHECK(resample({}, 50).empty());
    // endpoints survive even off-grid
    const auto odd = resample(std::vector<pilots::Sample>{{0, 0, 0, 0}, {0.013, 1.3, 0, 0.5}}, 200.0);
    REQUIRE(odd.size() == 4);
    CHECK(odd.back().t == 0.013);
    CHECK(odd.back().theta == 1.3);
    CHECK(odd[2].deflection == 0.0);
    CHECK_THROWS_AS(resample(rec.rows, 0), InvalidArgument);
  }

  SUBCASE("pilot-only trial logs") {
    std::vector<pilots::Sample> rows{{0, 50, 100, 0.5}, {0.02, 0, 0, 0}, {0.04, 2, 10, -0.5}};
    const auto log = to_trial_log(rows);
    CHECK(log.rows[0].crash_flag);
    CHECK_FALSE(log.rows[1].crash_flag);
    CHECK(log.rows[0].deflection_class == DeflectionClass::Destabilizing);
    CHECK(log.rows[2].deflection_class == DeflectionClass::Corrective);
    CHECK(log.rows[2].executed_deflection == -0.5);
  }
}

TEST_CASE("cloned twins take the profile's shape and are reproducible") {
  const auto profile = pilots::exemplar(pilots::Proficiency::Bad, pilots::TrainingSource::MARS);
  CloneOptions opts;
  opts.trials = 2;
  opts.epochs = 1;
  const auto cfg = short_trial(3.0);
  const auto a = clone_pilot(sluggish_pilot(), profile, cfg, 4, opts);
  const auto b = clone_pilot(sluggish_pilot(), profile, cfg, 4, opts);
  CHECK(a.spec == pilots::default_pilot_spec(profile.arch, profile.window()));
  CHECK(a.window.win_size == profile.win_size);
  CHECK(pilots::policy_to_json_string(a) == pilots::policy_to_json_string(b));

  PilotSpec twin;
  twin.name = "twin";
  twin.kind = PilotKind::Network;
  twin.policy = a;
  CHECK(run_trial(twin, {}, cfg, 1).rows.size() == 600);

  const std::vector<std::vector<pilots::Sample>> no_rows(2);
  CHECK_THROWS_AS(clone_from_trajectories(no_rows, profile, 1, opts), InvalidArgument);
}

TEST_CASE("the faithful clone is the candidate closest to the source's crash count") {
  const auto profile = pilots::exemplar(pilots::Proficiency::Bad, pilots::TrainingSource::MARS);
  CloneOptions opts;
  opts.trials = 2;
  opts.epochs = 1;
  FidelityOptions fid;
  fid.candidates = 3;
  fid.validation_trials = 2;
  fid.validation_seed = 9;
  const auto cfg = short_trial(5.0);
  const auto pick = clone_faithful(sluggish_pilot(), profile, cfg, 20, fid, opts);

  const auto count = [&](const PilotSpec& p) {
    int c = 0;
    for (std::size_t i = 0; i < 2; ++i) c += metrics::trial_metrics(run_trial(p, {}, cfg, trial_seed(9, 0, i))).crashes;
    return c;
  };
  const int source = count(sluggish_pilot());
  CHECK(pick.source_crashes == source);
  std::uint64_t expect = 0;
  double best = 1e300;
  for (std::uint64_t s = 20; s < 23; ++s) {
    PilotSpec twin;
    twin.name = "twin";
    twin.kind = PilotKind::Network;
    twin.policy = clone_pilot(sluggish_pilot(), profile, cfg, s, opts);
    const double err = std::abs(std::log((count(twin) + 1.0) / (source + 1.0)));
    if (err < best) best = err, expect = s;
  }
  CHECK(pick.seed == expect);
  CHECK(pilots::policy_to_json_string(pick.policy) ==
        pilots::policy_to_json_string(clone_pilot(sluggish_pilot(), profile, cfg, expect, opts)));
  CHECK_THROWS_AS(clone_faithful(sluggish_pilot(), profile, cfg, 20, {.candidates = 0}, opts), InvalidArgument);
}
