#pragma once

#include <cstdint>
#include <deque>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sdassist/common.hpp"
#include "sdassist/nnet.hpp"

namespace sdassist {

// A directional cue from an assistant. Lives here because the digital twin
// consumes it; the assistant module produces it.
struct Suggestion {
  double t_issued = 0.0;
  double deflection = 0.0;

  int direction() const { return static_cast<int>(sign_of(deflection)); }
};

enum class Executor { Pilot, Assistant };

}  // namespace sdassist

namespace sdassist::pilots {

// One 200 Hz (or 50 Hz) sample as seen by a policy at decision time.
// `deflection` is the joystick position held when the sample was taken,
// i.e. the command executed on the previous step.
struct Sample {
  double t = 0.0;
  double theta = 0.0;
  double omega = 0.0;
  double deflection = 0.0;
};

struct WindowConfig {
  double win_size = 0.0;  // seconds of history
  double future = 0.0;    // seconds of prediction lead
  bool include_deflections = true;
  double sample_hz = 200.0;

  // Number of samples in a window: max(1, round(win_size * sample_hz)).
  int length() const;
  int future_steps() const;
  int features() const { return include_deflections ? 3 : 2; }
  void validate() const;
};

// Oldest first; all streams have equal length.
struct ObservationWindow {
  std::vector<double> thetas;
  std::vector<double> omegas;
  std::optional<std::vector<double>> deflections;

  std::size_t size() const { return thetas.size(); }
};

// Last n samples ending at t_now, left-padded with zeros when history is short.
ObservationWindow build_window(std::span<const Sample> history, double t_now, const WindowConfig& cfg);

// Fixed input standardization.
inline constexpr double kThetaScale = 60.0;
inline constexpr double kOmegaScale = 300.0;

// Network input dimension for an architecture consuming windows of `cfg`.
int input_dim(nnet::Arch arch, const WindowConfig& cfg);

// MLPs get one flattened vector (per-step features interleaved, oldest
// first); recurrent nets get one feature vector per window step.
std::vector<nnet::Vector> encode(const ObservationWindow& window, nnet::Arch arch);
std::vector<nnet::Matrix> encode_batch(std::span<const ObservationWindow> windows, nnet::Arch arch);

// Default pilot architecture: recurrent hidden 32, MLP hidden [64, 64], tanh head.
nnet::NetworkSpec default_pilot_spec(nnet::Arch arch, const WindowConfig& cfg);

struct Policy {
  nnet::NetworkSpec spec;
  nnet::Parameters params;
  WindowConfig window;

  double act(const ObservationWindow& w) const;
};

// Policy files: {"version":1, "window":{...}, "model":<network weight format>}.
std::string policy_to_json_string(const Policy& policy);
Policy policy_from_json_string(const std::string& text);
void save_policy(const Policy& policy, const std::filesystem::path& path);
// Throws ModelLoadError when the file is missing or malformed.
Policy load_policy(const std::filesystem::path& path);

// Scalar deflection in [-1, 1].
double pilot_act(const nnet::NetworkSpec& spec, const nnet::Parameters& params,
                 const ObservationWindow& window, const WindowConfig& cfg);

// Executes a pilot's decisions `future` seconds after they are made. Before
// the first scheduled action arrives the executed deflection is 0.
class DelayLine {
 public:
  explicit DelayLine(int delay_steps) : delay_steps_(delay_steps) {}
  double push(double decided);

 private:
  int delay_steps_;
  std::deque<double> queue_;
};

// Supervised pairs for behavior cloning. `rows` carry the deflection executed
// at each sample; the window at sample k sees the deflection held before k,
// and the target is the deflection executed at k + future.
struct Demonstration {
  ObservationWindow window;
  double action = 0.0;
};
std::vector<Demonstration> demonstrations_from_rows(std::span<const Sample> rows, const WindowConfig& cfg,
                                                    std::size_t stride = 1);

enum class Proficiency { Good, Medium, Bad };
enum class TrainingSource { MARS, VIP };

std::string to_string(Proficiency p);
Proficiency proficiency_from_string(const std::string& s);
std::string to_string(TrainingSource s);
TrainingSource source_from_string(const std::string& s);

struct TwinProfile {
  Proficiency proficiency = Proficiency::Good;
  nnet::Arch arch = nnet::Arch::LSTM;
  double win_size = 0.0;
  double future = 0.0;
  TrainingSource source = TrainingSource::MARS;

  WindowConfig window(double sample_hz = 200.0) const { return {win_size, future, true, sample_hz}; }
};

// The three exemplar pilots (Good LSTM 0.2 s, Medium GRU 0.3 s + 0.1 s lead, Bad MLP 0.5 s).
const std::vector<TwinProfile>& exemplar_registry();
TwinProfile exemplar(Proficiency p, TrainingSource source);

struct TwinBehavior {
  double accept_prob = 0.8;
  double delay_base = 0.4;
  double delay_jitter = 0.05;
  double noise = 0.05;

  void validate() const;
};

// Acceptance/delay/noise model wrapped around a pilot. Every suggestion is
// decided once when offered. Accepted suggestions execute for exactly one
// sample at the first sample time >= t_issued + delay; when several come due
// on the same sample the most recently issued one wins and the rest are dropped.
class TwinExecutor {
 public:
  struct Draw {
    bool accepted = false;
    double delay = 0.0;
    double noise = 0.0;
    double value = 0.0;
  };
  struct Resolution {
    double executed = 0.0;
    Executor executor = Executor::Pilot;
  };

  TwinExecutor(TwinBehavior behavior, std::uint64_t seed);

  Draw offer(const Suggestion& suggestion);
  Resolution resolve(double own_deflection, double t_now);
  // Drops every accepted-but-unexecuted suggestion (e.g. after a crash reset).
  void cancel_pending() { pending_.clear(); }
  std::size_t pending() const { return pending_.size(); }

 private:
  struct Pending {
    double due = 0.0;
    double value = 0.0;
    std::uint64_t order = 0;
  };
  TwinBehavior behavior_;
  Rng rng_;
  std::vector<Pending> pending_;
  std::uint64_t issued_ = 0;
};

}  // namespace sdassist::pilots
