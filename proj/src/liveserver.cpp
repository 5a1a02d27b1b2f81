#include "sdassist/liveserver.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <deque>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/websocket.hpp>

#include "json.hpp"
#include "sdassist/harness.hpp"

namespace sdassist::liveserver {

using nlohmann::json;
namespace net = boost::asio;
namespace beast = boost::beast;
namespace websocket = beast::websocket;
using tcp = net::ip::tcp;

std::string to_string(Mode m) {
  switch (m) {
    case Mode::Solo: return "solo";
    case Mode::Assisted: return "assisted";
    case Mode::Observe: return "observe";
  }
  return "?";
}

Mode mode_from_string(const std::string& s) {
  if (s == "solo") return Mode::Solo;
  if (s == "assisted") return Mode::Assisted;
  if (s == "observe") return Mode::Observe;
  throw FormatError("unknown task mode: " + s);
}

void SessionScript::validate() const {
  physics.validate();
  gating.validate();
  if (!(start_range >= 0.0 && start_range < physics.crash_bound)) throw ConfigError("script: bad start_range");
  for (const auto& t : tasks) {
    if (t.trials < 1) throw ConfigError("script: a task needs at least one trial");
    if (!(t.trial_seconds > 0.0)) throw ConfigError("script: trial_seconds must be positive");
    if (!(t.coherence >= 0.0 && t.coherence <= 1.0)) throw ConfigError("script: coherence outside [0,1]");
    if (t.mode == Mode::Observe && t.assistant.empty()) throw ConfigError("script: observe tasks need an assistant");
    if (t.mode == Mode::Assisted && t.assistant.empty()) throw ConfigError("script: assisted tasks need an assistant");
  }
}

namespace {

template <typename T>
void read_opt(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  const std::filesystem::path path(p);
  return path.is_absolute() ? path : base / path;
}

}  // namespace

ScriptFile script_from_json_string(const std::string& text, const std::filesystem::path& base_dir) {
  ScriptFile f;
  try {
    const auto j = json::parse(text);
    for (const auto& tj : j.at("tasks")) {
      Task t;
      t.mode = mode_from_string(tj.at("mode").get<std::string>());
      read_opt(tj, "trials", t.trials);
      read_opt(tj, "trial_seconds", t.trial_seconds);
      read_opt(tj, "assistant", t.assistant);
      read_opt(tj, "coherence", t.coherence);
      f.script.tasks.push_back(t);
    }
    if (j.contains("assistants")) {
      for (const auto& [id, p] : j.at("assistants").items()) f.assistant_paths[id] = resolve(base_dir, p.get<std::string>());
    }
    if (j.contains("predictor")) f.predictor_path = resolve(base_dir, j.at("predictor").get<std::string>());
    if (j.contains("gating")) {
      const auto& g = j.at("gating");
      read_opt(g, "prob_threshold", f.script.gating.prob_threshold);
      read_opt(g, "inner_angle", f.script.gating.inner_angle);
      read_opt(g, "outer_angle", f.script.gating.outer_angle);
    }
    read_opt(j, "start_range", f.script.start_range);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("session script: ") + e.what());
  } catch (const FormatError& e) {
    throw ConfigError(std::string("session script: ") + e.what());
  }
  try {
    f.script.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(std::string("session script: ") + e.what());
  }
  for (const auto& t : f.script.tasks) {
    if (!t.assistant.empty() && !f.assistant_paths.count(t.assistant)) {
      throw ConfigError("session script: unknown assistant id '" + t.assistant + "'");
    }
  }
  return f;
}

ScriptFile load_script(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open session script " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return script_from_json_string(ss.str(), path.parent_path());
}

SessionModels load_models(const ScriptFile& f) {
  SessionModels m;
  for (const auto& [id, p] : f.assistant_paths) m.assistants[id] = assistant::load_assistant(p);
  if (f.predictor_path) m.predictor = crashpred::load_predictor(*f.predictor_path);
  check_models(f.script, m);
  return m;
}

void check_models(const SessionScript& script, const SessionModels& models) {
  script.validate();
  for (const auto& t : script.tasks) {
    if (!t.assistant.empty() && !models.assistants.count(t.assistant)) {
      throw ConfigError("session: no model for assistant '" + t.assistant + "'");
    }
  }
}

std::uint64_t session_trial_seed(std::uint64_t session_seed, std::size_t n) { return split_seed(session_seed, n); }

std::uint64_t coherence_seed(std::uint64_t trial_seed, long frame) {
  return split_seed(split_seed(trial_seed, 7), static_cast<std::uint64_t>(frame));
}

namespace {

// The per-step simulation shared by live sessions and replay.
class TrialSim {
 public:
  struct Step {
    int cue = 0;
    bool crashed = false;
  };

  TrialSim(const TrialRecord& meta, const SessionScript& script, const SessionModels& models)
      : mode_(meta.mode),
        script_(script),
        agent_(meta.assistant.empty() ? nullptr : &models.assistants.at(meta.assistant)),
        monitor_(models.predictor ? &*models.predictor : nullptr, 1.0 / script.physics.dt) {
    Rng rng(split_seed(meta.seed, 0));
    state_ = {uniform(rng, -script.start_range, script.start_range), 0.0, 0.0};
    steps_ = std::lround(meta.seconds / script.physics.dt);
  }

  long steps() const { return steps_; }
  long k() const { return k_; }
  const physics::PendulumState& state() const { return state_; }
  double t() const { return static_cast<double>(k_) * script_.physics.dt; }

  Step step(double human, TrialLog& log, std::vector<Suggestion>& suggestions) {
    const double t = this->t();
    const pilots::Sample sample{t, state_.theta, state_.omega, held_};
    TrialRow row;
    row.t = t;
    row.theta = state_.theta;
    row.omega = state_.omega;
    row.crash_probability = monitor_.push(sample, k_);
    row.pilot_deflection = human;
    row.executed_deflection = human;
    Step out;
    if (agent_) {
      agent_history_.push_back(sample);
      const double agent_d = agent_->policy.act(pilots::build_window(agent_history_, t, agent_->policy.window));
      if (mode_ == Mode::Assisted) {
        if (assistant::gate(row.crash_probability, state_.theta, script_.gating)) {
          row.assistant_deflection = agent_d;
          out.cue = static_cast<int>(sign_of(agent_d));
          suggestions.push_back({t, agent_d});
        }
      } else if (mode_ == Mode::Observe) {
        row.assistant_deflection = agent_d;
        row.executed_deflection = agent_d;
        row.executor = Executor::Assistant;
      }
    }
    row.deflection_class = metrics::classify_deflection(state_.theta, state_.omega, row.executed_deflection);
    const auto res = physics::step(state_, row.executed_deflection, script_.physics);
    row.crash_flag = res.crashed;
    out.crashed = res.crashed;
    if (res.crashed) monitor_.reset();
    state_ = res.state;
    held_ = row.executed_deflection;
    log.rows.push_back(row);
    ++k_;
    return out;
  }

 private:
  Mode mode_;
  const SessionScript& script_;
  const assistant::Assistant* agent_;
  harness::CrashMonitor monitor_;
  std::vector<pilots::Sample> agent_history_;
  physics::PendulumState state_;
  double held_ = 0.0;
  long steps_ = 0;
  long k_ = 0;
};

}  // namespace

TrialLog replay_trial(const TrialRecord& trial, const SessionScript& script, const SessionModels& models) {
  TrialSim sim(trial, script, models);
  TrialLog log;
  std::vector<Suggestion> ignored;
  const long n = trial.complete ? sim.steps() : static_cast<long>(trial.log.rows.size());
  std::size_t next = 0;
  double held = 0.0;
  for (long k = 0; k < n; ++k) {
    while (next < trial.inputs.size() && trial.inputs[next].step <= k) held = trial.inputs[next++].deflection;
    sim.step(held, log, ignored);
  }
  return log;
}

bool verify_replay(const SessionRecord& record, const SessionModels& models) {
  return std::all_of(record.trials.begin(), record.trials.end(), [&](const TrialRecord& t) {
    return replay_trial(t, record.script, models) == t.log;
  });
}

namespace {

json metrics_json(const metrics::TrialMetrics& m) {
  return {{"crashes", m.crashes},         {"pct_destab", m.pct_destab}, {"pct_anticipatory", m.pct_anticipatory},
          {"mean_abs_theta", m.mean_abs_theta}, {"sd_theta", m.sd_theta},   {"mean_abs_vel", m.mean_abs_vel},
          {"rms_vel", m.rms_vel},         {"recoveries", m.recoveries}};
}

json task_json(const Task& t) {
  return {{"mode", to_string(t.mode)},
          {"trials", t.trials},
          {"trial_seconds", t.trial_seconds},
          {"assistant", t.assistant},
          {"coherence", t.coherence}};
}

}  // namespace

void record_session(const SessionRecord& record, const std::filesystem::path& dir, bool replay_verified) {
  std::filesystem::create_directories(dir);
  json meta;
  meta["seed"] = record.seed;
  meta["aborted"] = record.aborted;
  if (record.aborted) meta["abort_reason"] = record.abort_reason;
  meta["replay_verified"] = replay_verified;
  meta["tasks"] = json::array();
  for (const auto& t : record.script.tasks) meta["tasks"].push_back(task_json(t));
  meta["trials"] = json::array();
  std::vector<TrialLog> logs;
  for (const auto& t : record.trials) {
    json tj{{"task_index", t.task_index}, {"trial_index", t.trial_index}, {"mode", to_string(t.mode)},
            {"assistant", t.assistant},   {"coherence", t.coherence},     {"seed", t.seed},
            {"seconds", t.seconds},       {"complete", t.complete},       {"rows", t.log.rows.size()}};
    if (!t.log.rows.empty()) tj["metrics"] = metrics_json(metrics::trial_metrics(t.log));
    meta["trials"].push_back(tj);
    logs.push_back(t.log);
  }
  meta["episodes"] = record.episodes.size();
  {
    std::ofstream out(dir / "session.json");
    if (!out) throw Error("cannot write " + (dir / "session.json").string());
    out << meta.dump(2) << '\n';
  }
  if (record.trials.empty()) return;  // metadata-only record
  harness::write_trials_csv(logs, dir / "trials.csv");
  std::ofstream inputs(dir / "inputs.jsonl");
  std::ofstream suggestions(dir / "suggestions.jsonl");
  for (std::size_t i = 0; i < record.trials.size(); ++i) {
    for (const auto& e : record.trials[i].inputs) {
      inputs << json{{"trial", i}, {"step", e.step}, {"t_client", e.t_client}, {"deflection", e.deflection}}.dump()
             << '\n';
    }
    for (const auto& s : record.trials[i].suggestions) {
      suggestions << json{{"trial", i}, {"t", s.t_issued}, {"deflection", s.deflection}}.dump() << '\n';
    }
  }
  assistant::write_episodes(record.episodes, dir / "episodes.jsonl");
}

// ---------------------------------------------------------------------------
// Server

struct Server::Impl {
  SessionScript script;
  SessionModels models;
  ServerOptions opts;
  PacingStats stats;

  net::io_context ioc;
  tcp::acceptor acceptor{ioc};
  std::optional<websocket::stream<tcp::socket>> ws;
  beast::flat_buffer read_buf;

  std::mutex mu;
  std::condition_variable cv;
  std::deque<std::string> inbound;
  bool closed = false;

  // io-thread only
  struct Outgoing {
    std::string text;
    bool frame = false;
  };
  std::deque<Outgoing> outbound;
  bool writing = false;
  std::size_t frames_dropped = 0;
  std::size_t frames_sent = 0;
  std::size_t in_flight = 0;  // messages queued or being written, guarded by mu

  void start_read() {
    ws->async_read(read_buf, [this](beast::error_code ec, std::size_t) {
      std::lock_guard<std::mutex> lock(mu);
      if (ec) {
        closed = true;
        cv.notify_all();
        return;
      }
      inbound.push_back(beast::buffers_to_string(read_buf.data()));
      read_buf.consume(read_buf.size());
      cv.notify_all();
      start_read();
    });
  }

  void send(std::string text, bool frame) {
    {
      std::lock_guard<std::mutex> lock(mu);
      ++in_flight;
    }
    net::post(ioc, [this, text = std::move(text), frame]() mutable {
      outbound.push_back({std::move(text), frame});
      if (frame) {
        std::size_t frames = 0;
        for (const auto& o : outbound) frames += o.frame;
        // Drop the oldest unsent frames; the head may be mid-write.
        for (std::size_t i = writing ? 1 : 0; frames > opts.max_pending_frames && i < outbound.size();) {
          if (outbound[i].frame) {
            outbound.erase(outbound.begin() + static_cast<long>(i));
            --frames;
            ++frames_dropped;
            std::lock_guard<std::mutex> lock(mu);
            --in_flight;
            cv.notify_all();
          } else {
            ++i;
          }
        }
      }
      if (!writing) write_next();
    });
  }

  void write_next() {
    if (outbound.empty()) {
      writing = false;
      return;
    }
    writing = true;
    ws->text(true);
    ws->async_write(net::buffer(outbound.front().text), [this](beast::error_code ec, std::size_t) {
      if (outbound.front().frame) ++frames_sent;
      outbound.pop_front();
      {
        std::lock_guard<std::mutex> lock(mu);
        --in_flight;
        if (ec) closed = true;
        cv.notify_all();
      }
      if (ec) {
        // drain: nothing more can be delivered
        std::lock_guard<std::mutex> lock(mu);
        in_flight -= outbound.size();
        outbound.clear();
        writing = false;
        cv.notify_all();
        return;
      }
      write_next();
    });
  }

  // Blocks until a message arrives or the client is gone.
  std::optional<std::string> wait_message() {
    std::unique_lock<std::mutex> lock(mu);
    cv.wait(lock, [&] { return !inbound.empty() || closed; });
    if (inbound.empty()) return std::nullopt;
    auto m = std::move(inbound.front());
    inbound.pop_front();
    return m;
  }

  std::deque<std::string> drain_inbound(bool& gone) {
    std::lock_guard<std::mutex> lock(mu);
    std::deque<std::string> out;
    out.swap(inbound);
    gone = closed;
    return out;
  }

  void flush(std::chrono::milliseconds timeout) {
    std::unique_lock<std::mutex> lock(mu);
    cv.wait_for(lock, timeout, [&] { return in_flight == 0 || closed; });
  }
};

namespace {

struct ClientMessage {
  enum class Kind { Joystick, Ready, Abort, Invalid } kind = Kind::Invalid;
  double t_client = 0.0;
  double deflection = 0.0;
};

ClientMessage parse_client(const std::string& text) {
  ClientMessage m;
  try {
    const auto j = json::parse(text);
    const auto type = j.at("type").get<std::string>();
    if (type == "joystick") {
      m.kind = ClientMessage::Kind::Joystick;
      m.deflection = j.at("deflection").get<double>();
      if (!std::isfinite(m.deflection)) return {};
      m.deflection = std::clamp(m.deflection, -1.0, 1.0);  // clamped server-side
      if (j.contains("t_client")) m.t_client = j.at("t_client").get<double>();
    } else if (type == "ready") {
      m.kind = ClientMessage::Kind::Ready;
    } else if (type == "abort") {
      m.kind = ClientMessage::Kind::Abort;
    }
  } catch (const json::exception&) {
    return {};
  }
  return m;
}

}  // namespace

Server::Server(SessionScript script, SessionModels models, ServerOptions opts) : impl_(std::make_unique<Impl>()) {
  check_models(script, models);
  if (!(opts.broadcast_hz > 0.0)) throw ConfigError("server: broadcast rate must be positive");
  impl_->script = std::move(script);
  impl_->models = std::move(models);
  impl_->opts = opts;
  const tcp::endpoint ep(net::ip::make_address("127.0.0.1"), opts.port);
  impl_->acceptor.open(ep.protocol());
  impl_->acceptor.set_option(net::socket_base::reuse_address(true));
  impl_->acceptor.bind(ep);
  impl_->acceptor.listen();
}

Server::~Server() = default;

unsigned short Server::port() const { return impl_->acceptor.local_endpoint().port(); }

const PacingStats& Server::stats() const { return impl_->stats; }

SessionRecord Server::run() {
  auto& I = *impl_;
  SessionRecord record;
  record.seed = I.opts.seed;
  record.script = I.script;

  tcp::socket sock(I.ioc);
  I.acceptor.accept(sock);
  I.ws.emplace(std::move(sock));
  I.ws->accept();
  I.start_read();
  auto guard = net::make_work_guard(I.ioc);
  std::thread io([&] { I.ioc.run(); });

  auto abort = [&](const std::string& why) {
    record.aborted = true;
    record.abort_reason = why;
  };

  const double dt = I.script.physics.dt;
  using clock = std::chrono::steady_clock;
  std::size_t global_trial = 0;
  for (std::size_t ti = 0; ti < I.script.tasks.size() && !record.aborted; ++ti) {
    const auto& task = I.script.tasks[ti];
    for (int tr = 0; tr < task.trials && !record.aborted; ++tr, ++global_trial) {
      TrialRecord rec;
      rec.task_index = ti;
      rec.trial_index = static_cast<std::size_t>(tr);
      rec.mode = task.mode;
      rec.assistant = task.assistant;
      rec.coherence = task.coherence;
      rec.seed = session_trial_seed(I.opts.seed, global_trial);
      rec.seconds = task.trial_seconds;

      I.send(json{{"type", "trial_start"},
                  {"task_index", ti},
                  {"trial_index", tr},
                  {"mode", to_string(task.mode)},
                  {"coherence", task.coherence},
                  {"seconds", task.trial_seconds}}
                 .dump(),
             false);
      // Wait for ready; stray joystick input before the trial is ignored.
      bool ready = false;
      while (!ready && !record.aborted) {
        const auto msg = I.wait_message();
        if (!msg) {
          abort("client disconnected");
          break;
        }
        const auto m = parse_client(*msg);
        if (m.kind == ClientMessage::Kind::Ready) ready = true;
        if (m.kind == ClientMessage::Kind::Abort) abort("client abort");
      }
      if (record.aborted) break;

      TrialSim sim(rec, I.script, I.models);
      double held = 0.0;
      long next_frame = 0;
      bool crash_since_frame = false;
      const auto t0 = clock::now();
      for (long k = 0; k < sim.steps(); ++k) {
        if (I.opts.realtime) {
          const auto due = t0 + std::chrono::duration_cast<clock::duration>(std::chrono::duration<double>(k * dt));
          std::this_thread::sleep_until(due);
          I.stats.max_lag = std::max(I.stats.max_lag, std::chrono::duration<double>(clock::now() - due).count());
        }
        bool gone = false;
        for (const auto& text : I.drain_inbound(gone)) {
          const auto m = parse_client(text);
          if (m.kind == ClientMessage::Kind::Joystick) {
            held = m.deflection;
            rec.inputs.push_back({k, m.t_client, m.deflection});
            if (task.mode == Mode::Observe) rec.suggestions.push_back({sim.t(), m.deflection});
          } else if (m.kind == ClientMessage::Kind::Abort) {
            abort("client abort");
          }
        }
        if (gone && !record.aborted) abort("client disconnected");
        if (record.aborted) break;

        const double t = sim.t();
        const auto st = sim.state();
        const auto out = sim.step(held, rec.log, rec.suggestions);
        crash_since_frame = crash_since_frame || out.crashed;
        if (static_cast<double>(k) * dt * I.opts.broadcast_hz >= static_cast<double>(next_frame) - 1e-9) {
          I.send(json{{"type", "frame"},
                      {"t", t},
                      {"theta", st.theta},
                      {"omega", st.omega},
                      {"coherence_seed", coherence_seed(rec.seed, next_frame)},
                      {"cue", out.cue},
                      {"crash_flag", crash_since_frame},
                      {"trial_index", tr}}
                     .dump(),
                 true);
          ++next_frame;
          crash_since_frame = false;
        }
      }
      if (I.opts.realtime) {
        I.stats.final_drift = std::chrono::duration<double>(clock::now() - t0).count() -
                              static_cast<double>(rec.log.rows.size()) * dt;
      }
      rec.complete = !record.aborted;
      if (rec.complete) {
        I.send(json{{"type", "trial_end"},
                    {"task_index", ti},
                    {"trial_index", tr},
                    {"metrics", metrics_json(metrics::trial_metrics(rec.log))}}
                   .dump(),
               false);
        if (task.mode == Mode::Observe) {
          const auto& agent = I.models.assistants.at(task.assistant);
          auto eps = assistant::extract_disagreements(rec.log, agent.policy.window);
          record.episodes.insert(record.episodes.end(), eps.begin(), eps.end());
        }
      }
      if (!rec.log.rows.empty() || rec.complete) record.trials.push_back(std::move(rec));
    }
  }

  if (!record.aborted) {
    json summary{{"trials", record.trials.size()}, {"episodes", record.episodes.size()}};
    std::vector<TrialLog> logs;
    for (const auto& t : record.trials) logs.push_back(t.log);
    if (!logs.empty()) summary["metrics"] = metrics_json(metrics::aggregate_metrics(logs));
    I.send(json{{"type", "session_end"}, {"summary", summary}}.dump(), false);
  }
  I.flush(std::chrono::seconds(5));
  net::post(I.ioc, [&] {
    beast::error_code ec;
    I.ws->next_layer().shutdown(tcp::socket::shutdown_send, ec);
  });
  guard.reset();
  // Give the client a moment to read the tail, then tear down.
  {
    std::unique_lock<std::mutex> lock(I.mu);
    I.cv.wait_for(lock, std::chrono::seconds(2), [&] { return I.closed; });
  }
  net::post(I.ioc, [&] {
    beast::error_code ec;
    I.ws->next_layer().close(ec);
  });
  io.join();
  I.stats.frames_sent = I.frames_sent;
  I.stats.frames_dropped = I.frames_dropped;
  return record;
}

}  // namespace sdassist::liveserver
