#pragma once

// Real-time session service for human co-performance. One websocket client,
// one authoritative 200 Hz simulation, JSON text messages both ways.
//
// Client -> server:
//   {"type":"joystick", "t_client":<s>, "deflection":<[-1,1]>}
//   {"type":"ready"}     start the announced trial
//   {"type":"abort"}     end the session
// Server -> client:
//   {"type":"trial_start", "task_index", "trial_index", "mode", "coherence", "seconds"}
//   {"type":"frame", "t", "theta", "omega", "coherence_seed", "cue", "crash_flag", "trial_index"}
//   {"type":"trial_end", "task_index", "trial_index", "metrics":{...}}
//   {"type":"session_end", "summary":{...}}

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "sdassist/assistant.hpp"
#include "sdassist/crashpred.hpp"
#include "sdassist/metrics.hpp"
#include "sdassist/physics.hpp"
#include "sdassist/trial_log.hpp"

namespace sdassist::liveserver {

enum class Mode { Solo, Assisted, Observe };
std::string to_string(Mode m);
Mode mode_from_string(const std::string& s);

struct Task {
  Mode mode = Mode::Solo;
  int trials = 3;
  double trial_seconds = 30.0;
  std::string assistant;  // id into SessionModels::assistants; empty for none
  double coherence = 0.5;
};

struct SessionScript {
  std::vector<Task> tasks;
  physics::PhysicsConfig physics;
  assistant::GatingPolicy gating;
  double start_range = 5.0;

  void validate() const;
};

struct SessionModels {
  std::map<std::string, assistant::Assistant> assistants;
  std::optional<crashpred::CrashPredictor> predictor;
};

// Script file (JSON):
// {"tasks":[{"mode":"solo"}, {"mode":"assisted", "assistant":"ddpg", "trials":3, "trial_seconds":30, "coherence":0.5}],
//  "assistants":{"ddpg":"ddpg.json"}, "predictor":"crash.json", "gating":{...}, "start_range":5}
// Relative model paths resolve against the script's directory.
struct ScriptFile {
  SessionScript script;
  std::map<std::string, std::filesystem::path> assistant_paths;
  std::optional<std::filesystem::path> predictor_path;
};
// ConfigError on malformed scripts; ModelLoadError from load_models.
ScriptFile script_from_json_string(const std::string& text, const std::filesystem::path& base_dir = ".");
ScriptFile load_script(const std::filesystem::path& path);
SessionModels load_models(const ScriptFile& f);
// Every task's assistant must exist; observe tasks need one.
void check_models(const SessionScript& script, const SessionModels& models);

// The held deflection changes to `deflection` from simulation step `step` on.
struct InputEvent {
  long step = 0;
  double t_client = 0.0;
  double deflection = 0.0;

  bool operator==(const InputEvent&) const = default;
};

struct TrialRecord {
  std::size_t task_index = 0;
  std::size_t trial_index = 0;  // within the task
  Mode mode = Mode::Solo;
  std::string assistant;
  double coherence = 0.5;
  std::uint64_t seed = 0;
  double seconds = 0.0;
  bool complete = false;
  TrialLog log;
  std::vector<InputEvent> inputs;
  std::vector<Suggestion> suggestions;  // every gated sample (assisted) / human deflections (observe)
};

struct SessionRecord {
  std::uint64_t seed = 0;
  SessionScript script;
  std::vector<TrialRecord> trials;
  std::vector<assistant::DisagreementEpisode> episodes;  // observe tasks
  bool aborted = false;
  std::string abort_reason;
};

// Seed of the n-th trial of a session (counted across tasks).
std::uint64_t session_trial_seed(std::uint64_t session_seed, std::size_t n);
// Frame coherence seed for the client-side dot field.
std::uint64_t coherence_seed(std::uint64_t trial_seed, long frame);

// Re-simulates one trial from its recorded inputs. Bit-identical to the live
// run because the loop only ever reads the held deflection.
TrialLog replay_trial(const TrialRecord& trial, const SessionScript& script, const SessionModels& models);
// True when every recorded trial replays to the identical log.
bool verify_replay(const SessionRecord& record, const SessionModels& models);

// Writes session.json (metadata + replay flag), trials.csv (harness format),
// inputs.jsonl, suggestions.jsonl and episodes.jsonl (assistant format).
void record_session(const SessionRecord& record, const std::filesystem::path& dir, bool replay_verified);

struct ServerOptions {
  unsigned short port = 0;  // 0 picks a free port
  std::uint64_t seed = 1;
  double broadcast_hz = 60.0;
  bool realtime = true;  // pace steps to the wall clock
  std::size_t max_pending_frames = 32;  // beyond this, the oldest unsent frames are dropped
};

struct PacingStats {
  double max_lag = 0.0;     // seconds a step ran behind its schedule
  double final_drift = 0.0; // wall time minus simulated time at the end of the last trial
  std::size_t frames_sent = 0;
  std::size_t frames_dropped = 0;
};

// Binds on construction (so port() is known before a client connects);
// run() accepts one client and runs the script to completion or abort.
class Server {
 public:
  Server(SessionScript script, SessionModels models, ServerOptions opts);
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  unsigned short port() const;
  SessionRecord run();
  const PacingStats& stats() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace sdassist::liveserver
