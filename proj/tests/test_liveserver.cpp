#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <future>
#include <numbers>

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/websocket.hpp>

#include "doctest.h"
#include "json.hpp"
#include "sdassist/harness.hpp"
#include "sdassist/liveserver.hpp"

using namespace sdassist;
using namespace sdassist::liveserver;
using nlohmann::json;
namespace fs = std::filesystem;
namespace net = boost::asio;
namespace websocket = boost::beast::websocket;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "sdassist_liveserver_test" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

assistant::Assistant pd_clone() {
  rl::AlgoConfig algo;
  algo.actor_hidden = {8};
  const auto spec = rl::ddpg_actor_spec(algo);
  Rng rng(5);
  std::vector<pilots::Demonstration> demos;
  for (int i = 0; i < 1000; ++i) {
    const double th = uniform(rng, -60, 60), om = uniform(rng, -200, 200);
    demos.push_back({{{th}, {om}, std::nullopt}, rl::pd_expert(th, om)});
  }
  return {assistant::AssistantKind::DL, {spec, rl::train_bc(spec, demos, 4, 10, {}), rl::state_window()}, std::nullopt};
}

SessionModels models_with_predictor() {
  SessionModels m;
  m.assistants["pd"] = pd_clone();
  crashpred::CrashPredictorSpec spec;
  spec.hidden = 4;
  spec.layers = 1;
  m.predictor = crashpred::CrashPredictor{spec, nnet::init(spec.network(), 2)};
  return m;
}

struct Received {
  std::vector<json> messages;
  std::vector<json> frames() const {
    std::vector<json> out;
    for (const auto& m : messages)
      if (m["type"] == "frame") out.push_back(m);
    return out;
  }
  std::size_t count(const std::string& type) const {
    std::size_t n = 0;
    for (const auto& m : messages) n += m["type"] == type;
    return n;
  }
};

// What the scripted client does on each message. Return false to hang up.
struct ClientScript {
  std::function<std::optional<double>(const json& frame)> joystick = [](const json&) { return std::nullopt; };
  bool abort_on_first_start = false;
  int disconnect_after_frames = -1;
};

Received run_client(unsigned short port, const ClientScript& script) {
  net::io_context ioc;
  net::ip::tcp::socket sock(ioc);
  sock.connect({net::ip::make_address("127.0.0.1"), port});
  websocket::stream<net::ip::tcp::socket> ws(std::move(sock));
  ws.handshake("127.0.0.1", "/");
  ws.text(true);
  Received got;
  int frames = 0;
  for (;;) {
    boost::beast::flat_buffer buf;
    boost::beast::error_code ec;
    ws.read(buf, ec);
    if (ec) break;
    const auto m = json::parse(boost::beast::buffers_to_string(buf.data()));
    got.messages.push_back(m);
    const auto type = m["type"].get<std::string>();
    if (type == "trial_start") {
      ws.write(net::buffer(json{{"type", script.abort_on_first_start ? "abort" : "ready"}}.dump()));
    } else if (type == "frame") {
      if (++frames == script.disconnect_after_frames) break;
      if (const auto d = script.joystick(m)) {
        ws.write(net::buffer(json{{"type", "joystick"}, {"t_client", m["t"]}, {"deflection", *d}}.dump()));
      }
    } else if (type == "session_end") {
      break;
    }
  }
  boost::beast::error_code ec;
  ws.next_layer().close(ec);
  return got;
}

struct Session {
  SessionRecord record;
  Received client;
  PacingStats stats;
};

Session run_session(const SessionScript& script, const SessionModels& models, ServerOptions opts,
                    const ClientScript& client) {
  Server server(script, models, opts);
  auto fut = std::async(std::launch::async, [&] { return server.run(); });
  Session s;
  s.client = run_client(server.port(), client);
  s.record = fut.get();
  s.stats = server.stats();
  return s;
}

SessionScript three_task_script(double seconds) {
  SessionScript s;
  s.tasks = {{Mode::Solo, 1, seconds, "", 0.3}, {Mode::Assisted, 2, seconds, "pd", 0.5},
             {Mode::Observe, 1, seconds, "pd", 0.8}};
  return s;
}

std::size_t row_of(const json& frame) { return static_cast<std::size_t>(std::lround(frame["t"].get<double>() * 200.0)); }

}  // namespace

// One real-time session shared by the subcases below (doctest re-enters the
// test case once per subcase). Real time, so the client's replies land while
// the trial runs.
const Session& three_task_session(const SessionModels& models, const SessionScript& script) {
  static const Session s = [&] {
    ServerOptions opts;
    opts.seed = 42;
    ClientScript client;
    // a half-hearted human: moves the stick every third frame, and every fourth
    // move goes the wrong way
    client.joystick = [n = 0](const json& f) mutable -> std::optional<double> {
      if (n++ % 3) return std::nullopt;
      const double pd = rl::pd_expert(f["theta"].get<double>(), f["omega"].get<double>());
      return (n / 3) % 4 == 0 ? -0.3 * pd : 0.5 * pd;
    };
    return run_session(script, models, opts, client);
  }();
  return s;
}

TEST_CASE("scripted client completes a solo / assisted / observe session") {
  static const auto models = models_with_predictor();
  const auto script = three_task_script(2.0);
  const auto& s = three_task_session(models, script);

  REQUIRE_FALSE(s.record.aborted);
  REQUIRE(s.record.trials.size() == 4);
  CHECK(s.client.count("trial_start") == 4);
  CHECK(s.client.count("trial_end") == 4);
  CHECK(s.client.count("session_end") == 1);
  CHECK(s.client.messages.back()["type"] == "session_end");
  CHECK(s.stats.frames_dropped == 0);

  for (std::size_t i = 0; i < s.record.trials.size(); ++i) {
    const auto& t = s.record.trials[i];
    CHECK(t.complete);
    CHECK(t.log.rows.size() == 400);
    CHECK(t.seed == session_trial_seed(42, i));
    CHECK_FALSE(t.inputs.empty());
  }
  CHECK(s.record.trials[0].mode == Mode::Solo);
  CHECK(s.record.trials[1].mode == Mode::Assisted);
  CHECK(s.record.trials[3].mode == Mode::Observe);

  SUBCASE("replay is bit-exact") {
    CHECK(verify_replay(s.record, models));
    for (const auto& t : s.record.trials) CHECK(replay_trial(t, script, models) == t.log);
  }

  SUBCASE("cues appear iff the gate recomputed from the log holds") {
    std::size_t cued = 0, frames_checked = 0;
    std::size_t trial = 0;
    for (const auto& m : s.client.messages) {
      if (m["type"] == "trial_start") {
        trial = 0;
        for (const auto& r : s.record.trials) {
          if (r.task_index == m["task_index"].get<std::size_t>() && r.trial_index == m["trial_index"].get<std::size_t>())
            break;
          ++trial;
        }
        continue;
      }
      if (m["type"] != "frame") continue;
      const auto& rec = s.record.trials.at(trial);
      const auto& row = rec.log.rows.at(row_of(m));
      CHECK(m["theta"].get<double>() == row.theta);
      CHECK(m["omega"].get<double>() == row.omega);
      const bool gated = rec.mode == Mode::Assisted && assistant::gate(row.crash_probability, row.theta, script.gating);
      CHECK((m["cue"].get<int>() != 0) == gated);
      if (gated) CHECK(m["cue"].get<int>() == static_cast<int>(sign_of(*row.assistant_deflection)));
      cued += gated;
      ++frames_checked;
    }
    CHECK(frames_checked == 4 * 120);
    CHECK(cued > 0);
    // the log side of the same invariant, at every 200 Hz sample
    for (const auto& rec : s.record.trials) {
      if (rec.mode != Mode::Assisted) continue;
      for (const auto& r : rec.log.rows)
        CHECK(r.assistant_deflection.has_value() == assistant::gate(r.crash_probability, r.theta, script.gating));
    }
  }

  SUBCASE("who flies follows the task mode") {
    for (const auto& rec : s.record.trials) {
      for (const auto& r : rec.log.rows) {
        if (rec.mode == Mode::Observe) {
          CHECK(r.executor == Executor::Assistant);
          CHECK(r.executed_deflection == *r.assistant_deflection);
        } else {
          CHECK(r.executor == Executor::Pilot);
          CHECK(r.executed_deflection == r.pilot_deflection);
        }
        if (rec.mode == Mode::Solo) CHECK_FALSE(r.assistant_deflection.has_value());
      }
    }
  }

  SUBCASE("observe episodes follow the disagreement definition") {
    const auto& obs = s.record.trials[3];
    // every sample where both sticks are outside the dead band and point opposite ways
    std::size_t expected = 0;
    for (const auto& r : obs.log.rows) {
      const double h = r.pilot_deflection, a = *r.assistant_deflection;
      expected += std::abs(h) >= 0.01 && std::abs(a) >= 0.01 && (h > 0) != (a > 0);
    }
    CHECK(s.record.episodes.size() == expected);
    CHECK(expected > 0);
    for (const auto& e : s.record.episodes) CHECK(e.human_deflection * e.agent_deflection < 0.0);
  }

  SUBCASE("the recorded session round-trips through files") {
    const auto dir = scratch("full");
    record_session(s.record, dir, true);
    const auto logs = harness::read_trials_csv(dir / "trials.csv");
    REQUIRE(logs.size() == 4);
    for (std::size_t i = 0; i < 4; ++i) CHECK(logs[i] == s.record.trials[i].log);
    std::ifstream meta_in(dir / "session.json");
    const auto meta = json::parse(meta_in);
    CHECK(meta["replay_verified"] == true);
    CHECK(meta["trials"].size() == 4);
    CHECK(meta["episodes"] == s.record.episodes.size());
    std::ifstream inputs(dir / "inputs.jsonl");
    std::size_t lines = 0;
    for (std::string l; std::getline(inputs, l);) ++lines;
    std::size_t n_inputs = 0;
    for (const auto& t : s.record.trials) n_inputs += t.inputs.size();
    CHECK(lines == n_inputs);
    CHECK(fs::exists(dir / "suggestions.jsonl"));
    const auto episodes = assistant::read_episodes(dir / "episodes.jsonl");
    CHECK(episodes.size() == s.record.episodes.size());
    const auto tuned = assistant::finetune(models.assistants.at("pd"), episodes, 1, {.epochs = 1});
    CHECK(tuned.policy.spec == models.assistants.at("pd").policy.spec);
  }
}

TEST_CASE("a solo trial with a hands-off client is free fall") {
  SessionScript script;
  script.tasks = {{Mode::Solo, 1, 2.0, "", 0.5}};
  ServerOptions opts;
  opts.seed = 7;
  opts.realtime = false;
  opts.max_pending_frames = 100000;
  const auto s = run_session(script, {}, opts, {});
  REQUIRE(s.record.trials.size() == 1);
  const auto& log = s.record.trials[0].log;
  REQUIRE(log.rows.size() == 400);

  Rng rng(split_seed(session_trial_seed(7, 0), 0));
  double th = uniform(rng, -5.0, 5.0), om = 0.0;
  CHECK(std::abs(th) <= 5.0);
  for (const auto& r : log.rows) {
    CHECK(r.theta == doctest::Approx(th).epsilon(1e-12));
    CHECK(r.omega == doctest::Approx(om).epsilon(1e-12));
    CHECK(r.executed_deflection == 0.0);
    om += 600.0 * std::sin(th * std::numbers::pi / 180.0) / 200.0;
    th += om / 200.0;
    if (std::abs(th) >= 60.0) th = om = 0.0;
  }
  // started within ±5 with no input: falls over at least once in 2 s unless it
  // started almost exactly upright
  CHECK(metrics::trial_metrics(log).crashes >= (std::abs(log.rows[0].theta) > 0.5 ? 1 : 0));
}

TEST_CASE("a forced-open gate puts the cue in the next frame") {
  SessionModels models = models_with_predictor();
  SessionScript script;
  script.tasks = {{Mode::Assisted, 1, 2.0, "pd", 0.5}};
  script.gating.prob_threshold = 0.0;  // any crash probability counts as high
  script.start_range = 4.0;
  ServerOptions opts;
  opts.seed = 3;
  opts.realtime = false;
  opts.max_pending_frames = 100000;
  const auto s = run_session(script, models, opts, {});
  const auto& log = s.record.trials.at(0).log;
  // hands off: the pendulum falls through 12 degrees, which opens the gate
  std::size_t first = 0;
  while (first < log.rows.size() && std::abs(log.rows[first].theta) <= 12.0) ++first;
  REQUIRE(first < log.rows.size());
  CHECK(log.rows[first].assistant_deflection.has_value());
  const auto frames = s.client.frames();
  const auto next = std::find_if(frames.begin(), frames.end(),
                                 [&](const json& f) { return f["t"].get<double>() >= log.rows[first].t; });
  REQUIRE(next != frames.end());
  CHECK((*next)["t"].get<double>() - log.rows[first].t < 1.0 / 60.0);
  if (row_of(*next) < log.rows.size() && log.rows[row_of(*next)].assistant_deflection) CHECK((*next)["cue"] != 0);
  for (const auto& f : frames) {
    const auto& r = log.rows.at(row_of(f));
    CHECK((f["cue"].get<int>() != 0) == r.assistant_deflection.has_value());
  }
}

TEST_CASE("an always-opposing observer yields one episode per disagreeing sample") {
  SessionModels models = models_with_predictor();
  SessionScript script;
  script.tasks = {{Mode::Observe, 1, 2.0, "pd", 0.5}};
  ClientScript client;
  client.joystick = [](const json& f) -> std::optional<double> {
    return -rl::pd_expert(f["theta"].get<double>(), f["omega"].get<double>());
  };
  const auto s = run_session(script, models, {}, client);
  const auto& log = s.record.trials.at(0).log;
  std::size_t both = 0, opposed = 0;
  for (const auto& r : log.rows) {
    const double h = r.pilot_deflection, a = *r.assistant_deflection;
    if (std::abs(h) < 0.01 || std::abs(a) < 0.01) continue;
    ++both;
    opposed += (h > 0) != (a > 0);
  }
  CHECK(s.record.episodes.size() == opposed);
  // the held stick lags the AI by up to a frame, so a few samples agree
  CHECK(opposed >= 0.8 * static_cast<double>(both));
  CHECK(opposed > 0);
}

TEST_CASE("real-time pacing at 60 Hz") {
  SessionScript script;
  script.tasks = {{Mode::Solo, 1, 2.0, "", 0.5}};
  ServerOptions opts;
  opts.realtime = true;
  ClientScript client;
  client.joystick = [](const json& f) -> std::optional<double> {
    return rl::pd_expert(f["theta"].get<double>(), f["omega"].get<double>());
  };
  const auto s = run_session(script, {}, opts, client);
  const auto frames = s.client.frames();
  CHECK(frames.size() >= 119);
  CHECK(frames.size() <= 121);
  for (std::size_t i = 1; i < frames.size(); ++i) {
    CHECK(frames[i]["t"].get<double>() > frames[i - 1]["t"].get<double>());
    CHECK(frames[i]["coherence_seed"] != frames[i - 1]["coherence_seed"]);
  }
  CHECK(std::abs(s.stats.final_drift) < 0.05);
  CHECK(s.stats.frames_sent == frames.size());
  CHECK(verify_replay(s.record, {}));
}

TEST_CASE("abort before the first trial leaves a metadata-only record") {
  SessionScript script;
  script.tasks = {{Mode::Solo, 2, 1.0, "", 0.5}};
  ServerOptions opts;
  opts.realtime = false;
  ClientScript client;
  client.abort_on_first_start = true;
  const auto s = run_session(script, {}, opts, client);
  CHECK(s.record.aborted);
  CHECK(s.record.abort_reason == "client abort");
  CHECK(s.record.trials.empty());
  CHECK(s.client.count("session_end") == 0);
  const auto dir = scratch("aborted");
  record_session(s.record, dir, true);
  CHECK(fs::exists(dir / "session.json"));
  CHECK_FALSE(fs::exists(dir / "trials.csv"));
}

TEST_CASE("a client that disconnects mid-trial leaves a partial, replayable record") {
  SessionScript script;
  script.tasks = {{Mode::Solo, 2, 3.0, "", 0.5}};
  ServerOptions opts;
  opts.realtime = true;  // so the hang-up lands mid-trial
  ClientScript client;
  client.joystick = [](const json& f) -> std::optional<double> {
    return rl::pd_expert(f["theta"].get<double>(), f["omega"].get<double>());
  };
  client.disconnect_after_frames = 60;
  const auto s = run_session(script, {}, opts, client);
  CHECK(s.record.aborted);
  CHECK(s.record.abort_reason == "client disconnected");
  REQUIRE(s.record.trials.size() == 1);
  const auto& t = s.record.trials[0];
  CHECK_FALSE(t.complete);
  CHECK(t.log.rows.size() > 150);
  CHECK(t.log.rows.size() < 600);
  CHECK(replay_trial(t, script, {}) == t.log);
}

TEST_CASE("session scripts") {
  const auto f = script_from_json_string(R"({
    "tasks": [{"mode": "solo", "trials": 1, "trial_seconds": 5},
              {"mode": "observe", "assistant": "a", "coherence": 0.9}],
    "assistants": {"a": "models/a.json"},
    "predictor": "/abs/pred.json",
    "gating": {"prob_threshold": 0.7},
    "start_range": 2
  })",
                                         "/base");
  REQUIRE(f.script.tasks.size() == 2);
  CHECK(f.script.tasks[0].trials == 1);
  CHECK(f.script.tasks[0].trial_seconds == 5.0);
  CHECK(f.script.tasks[1].mode == Mode::Observe);
  CHECK(f.script.tasks[1].trials == 3);
  CHECK(f.script.tasks[1].coherence == 0.9);
  CHECK(f.assistant_paths.at("a") == fs::path("/base/models/a.json"));
  CHECK(*f.predictor_path == fs::path("/abs/pred.json"));
  CHECK(f.script.gating.prob_threshold == 0.7);
  CHECK(f.script.start_range == 2.0);

  CHECK_THROWS_AS(script_from_json_string("{"), ConfigError);
  CHECK_THROWS_AS(script_from_json_string(R"({"tasks":[{"mode":"fly"}]})"), ConfigError);
  CHECK_THROWS_AS(script_from_json_string(R"({"tasks":[{"mode":"observe"}]})"), ConfigError);
  CHECK_THROWS_AS(script_from_json_string(R"({"tasks":[{"mode":"assisted","assistant":"x"}]})"), ConfigError);
  CHECK_THROWS_AS(script_from_json_string(R"({"tasks":[{"mode":"solo","trials":0}]})"), ConfigError);
  CHECK_THROWS_AS(load_script("/nonexistent/script.json"), ConfigError);

  ScriptFile missing;
  missing.script.tasks = {{Mode::Assisted, 1, 1.0, "a", 0.5}};
  missing.assistant_paths["a"] = "/nonexistent/a.json";
  CHECK_THROWS_AS(load_models(missing), ModelLoadError);
  CHECK_THROWS_AS(Server(missing.script, {}, {}), ConfigError);
}
