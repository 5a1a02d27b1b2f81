#pragma once

// Co-performance simulation. A pilot (network twin or scripted controller)
// flies the pendulum at the physics rate; the crash predictor and the gate
// decide when the assistant may cue, and the twin executor decides what the
// pilot does with each cue. Also trial-log I/O and human recording ingestion.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sdassist/assistant.hpp"
#include "sdassist/crashpred.hpp"
#include "sdassist/metrics.hpp"
#include "sdassist/physics.hpp"
#include "sdassist/pilots.hpp"
#include "sdassist/trial_log.hpp"

namespace sdassist::harness {

enum class PilotKind { Network, PD, Random, Sluggish };
std::string to_string(PilotKind k);
PilotKind pilot_kind_from_string(const std::string& s);

struct PilotSpec {
  std::string name = "pilot";
  PilotKind kind = PilotKind::PD;
  std::optional<pilots::Policy> policy;  // Network only
  // PD / Sluggish: d = clamp(gain * pd(theta, omega) + noise * N(0,1)),
  // executed `delay` seconds after it is decided. Sluggish pilots also only
  // re-decide every `hold` seconds.
  double gain = 1.0;
  double noise = 0.0;
  double delay = 0.0;
  double hold = 0.0;

  void validate() const;
};

// The noisy, sluggish synthetic pilot whose demonstrations train the Bad twin.
PilotSpec sluggish_pilot();

struct TrialConfig {
  physics::PhysicsConfig physics;
  double seconds = 30.0;
  double start_range = 5.0;  // initial theta ~ U(-start_range, start_range)
  assistant::GatingPolicy gating;
  pilots::TwinBehavior behavior;
  // The assistant advises for the state this far ahead, rolled forward with
  // its own outstanding cues (and the held deflection elsewhere), so advice
  // lands where the pendulum will be once the pilot reacts. 0 disables.
  double suggestion_lead = 0.4;

  void validate() const;
  long steps() const;
};

// Non-owning. Without a predictor the crash probability is 0 and only the
// outer angle opens the gate; without an assistant nothing is offered.
struct Models {
  const assistant::Assistant* assistant = nullptr;
  const crashpred::CrashPredictor* predictor = nullptr;
};

// Crash-probability estimator fed at the physics rate. Decimates to the
// predictor rate, refreshes the estimate on every decimated sample and holds
// it in between. `reset` forgets history (after a crash).
class CrashMonitor {
 public:
  CrashMonitor(const crashpred::CrashPredictor* predictor, double physics_hz);
  double push(const pilots::Sample& s, long step);
  void reset();

 private:
  const crashpred::CrashPredictor* predictor_;
  long every_ = 1;
  std::vector<pilots::Sample> history_;
  double p_ = 0.0;
};

// One seeded trial. Every random stream (start angle, pilot noise, twin
// executor) is split from `seed`, so the log is a pure function of the inputs.
TrialLog run_trial(const PilotSpec& pilot, const Models& models, const TrialConfig& cfg, std::uint64_t seed);

// Seed of trial `trial` for pilot row `pilot_index`. Assistant conditions of
// one pilot share seeds so trials pair up across conditions.
std::uint64_t trial_seed(std::uint64_t master, std::size_t pilot_index, std::size_t trial);

// Behavior cloning of a digital twin. The trajectories carry the deflection
// executed at each 200 Hz sample; the profile fixes architecture and window.
struct CloneOptions {
  int trials = 10;  // scripted source only
  std::size_t stride = 4;
  int epochs = 5;
  double lr = 1e-3;
};
pilots::Policy clone_from_trajectories(std::span<const std::vector<pilots::Sample>> trajectories,
                                       const pilots::TwinProfile& profile, std::uint64_t seed,
                                       const CloneOptions& opts = {});
// Clones a scripted pilot from `opts.trials` unassisted trials.
pilots::Policy clone_pilot(const PilotSpec& source, const pilots::TwinProfile& profile, const TrialConfig& cfg,
                           std::uint64_t seed, const CloneOptions& opts = {});

// Behavior cloning denoises: clones of one noisy pilot range from never crashing
// to crashing far more than it does. This clones `candidates` twins (seeds
// seed, seed+1, ...) and keeps the one whose unassisted crash count on the
// validation trials is closest to the source's, in log ratio.
struct FidelityOptions {
  int candidates = 16;
  int validation_trials = 10;
  std::uint64_t validation_seed = 77;
};
struct FaithfulClone {
  pilots::Policy policy;
  std::uint64_t seed = 0;
  int source_crashes = 0;
  int clone_crashes = 0;
};
FaithfulClone clone_faithful(const PilotSpec& source, const pilots::TwinProfile& profile, const TrialConfig& cfg,
                             std::uint64_t seed, const FidelityOptions& fidelity = {},
                             const CloneOptions& opts = {});

// Experiment configuration (JSON):
// {"seed":1, "trials":3, "seconds":30, "start_range":5, "suggestion_lead":0.4,
//  "gating":{...}, "behavior":{...}, "predictor":"path",
//  "pilots":[{"name":"bad", "kind":"network", "policy":"path"}, {"name":"pd", "kind":"pd", "gain":1}],
//  "assistants":[{"name":"ddpg", "path":"path"}]}
// Relative paths resolve against the config file's directory. An unassisted
// condition is always run as the baseline.
struct PilotEntry {
  PilotSpec spec;  // policy loaded from `policy_path` for network pilots
  std::filesystem::path policy_path;
};
struct AssistantEntry {
  std::string name;
  std::filesystem::path path;
};
struct ExperimentConfig {
  std::uint64_t seed = 1;
  int trials = 3;
  TrialConfig trial;
  std::optional<std::filesystem::path> predictor_path;
  std::vector<PilotEntry> pilots;
  std::vector<AssistantEntry> assistants;

  void validate() const;
};
// Throws ConfigError on malformed or inconsistent configs.
ExperimentConfig experiment_config_from_json_string(const std::string& text,
                                                    const std::filesystem::path& base_dir = ".");
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

// Loaded models for an experiment. A model that fails to load is kept as
// an error and reported on its cells instead of aborting the experiment.
struct LoadedPilot {
  PilotSpec spec;
  std::optional<std::string> error;
};
struct LoadedAssistant {
  std::string name;
  std::optional<assistant::Assistant> model;
  std::optional<std::string> error;
};
struct Experiment {
  ExperimentConfig config;
  std::vector<LoadedPilot> pilots;
  std::vector<LoadedAssistant> assistants;
  std::optional<crashpred::CrashPredictor> predictor;
};
// A predictor that fails to load affects every cell and throws ModelLoadError.
Experiment load_experiment(const ExperimentConfig& cfg);

inline const std::string kUnassisted = "none";

struct Cell {
  std::string pilot;
  std::string assistant;  // kUnassisted for the baseline
  std::vector<metrics::TrialMetrics> trials;
  metrics::TrialMetrics pooled;
  std::vector<TrialLog> logs;  // kept only when requested
  std::optional<std::string> error;
};

// Assisted minus unassisted for one pilot; tests pair trial crash counts.
struct Delta {
  std::string pilot;
  std::string assistant;
  double crashes = 0.0;
  double pct_destab = 0.0;
  double pct_anticipatory = 0.0;
  double mean_abs_theta = 0.0;
  double sd_theta = 0.0;
  double mean_abs_vel = 0.0;
  double rms_vel = 0.0;
  double recoveries = 0.0;
  metrics::SignTestResult crash_sign_test;
  metrics::WilcoxonResult crash_wilcoxon;
};

struct ExperimentResult {
  std::vector<Cell> cells;
  std::vector<Delta> deltas;

  const Cell* find(const std::string& pilot, const std::string& assistant) const;
};

ExperimentResult run_experiment(const Experiment& e, bool keep_logs = false);
// cells.csv, deltas.csv and summary.json in `dir` (created if needed).
void write_experiment_result(const ExperimentResult& r, const std::filesystem::path& dir);

// Trial-log files. Columns follow TrialRow order behind a leading trial index;
// doubles use 17 significant digits so files round-trip exactly. An absent
// assistant deflection is an empty CSV field / a missing JSON key.
void write_trials_csv(std::span<const TrialLog> logs, const std::filesystem::path& path);
std::vector<TrialLog> read_trials_csv(const std::filesystem::path& path);
void write_trials_jsonl(std::span<const TrialLog> logs, const std::filesystem::path& path);
std::vector<TrialLog> read_trials_jsonl(const std::filesystem::path& path);
// Dispatches on the extension (.csv or .jsonl).
void write_trials(std::span<const TrialLog> logs, const std::filesystem::path& path);
std::vector<TrialLog> read_trials(const std::filesystem::path& path);

// A recorded human trial: header t,theta,omega,deflection, plus an optional
// JSON sidecar (same stem, .json) with subject, session, trial and sample_hz.
// Without a sidecar the rate is inferred from the median sample spacing.
struct HumanRecording {
  std::string subject;
  int session = 0;
  int trial = 0;
  double sample_hz = 0.0;
  std::vector<pilots::Sample> rows;  // deflection = joystick at that sample
};
// Rejects non-monotone time, |deflection| > 1, |theta| > crash bound,
// non-finite values, and rates that disagree with the sidecar by more than 1%.
HumanRecording ingest_human_csv(const std::filesystem::path& path, double crash_bound = 60.0);
// Linear interpolation for theta and omega, zero-order hold for deflection.
// The grid starts at the first sample; the last sample is kept even when it
// falls off the grid.
std::vector<pilots::Sample> resample(std::span<const pilots::Sample> rows, double target_hz);
// Pilot-only log, for metrics and clustering.
TrialLog to_trial_log(std::span<const pilots::Sample> rows);

}  // namespace sdassist::harness
