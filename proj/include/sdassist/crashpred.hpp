#pragma once

// Stacked-GRU model estimating the probability that the pendulum crashes
// within a short horizon, given the last second of motion.

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "sdassist/nnet.hpp"
#include "sdassist/physics.hpp"
#include "sdassist/pilots.hpp"
#include "sdassist/trial_log.hpp"

namespace sdassist::crashpred {

struct CrashPredictorSpec {
  int layers = 2;
  int hidden = 32;
  double window_seconds = 1.0;
  double sample_hz = 50.0;
  double horizon = 1.0;  // label: crash within (t_end, t_end + horizon]
  double stride = 0.1;

  void validate() const;
  pilots::WindowConfig window() const;
  nnet::NetworkSpec network() const;
};

struct CrashWindowSample {
  pilots::ObservationWindow window;
  int label = 0;
  double t_end = 0.0;
  std::size_t source = 0;  // index of the trajectory the window came from
};

// Decimates a trajectory to the predictor rate. Each kept sample carries the
// deflection held at that instant (the one executed on the previous source row).
std::vector<pilots::Sample> decimate(const TrialLog& log, double target_hz);

// Sliding windows over one trajectory; windows spanning a crash reset are dropped.
std::vector<CrashWindowSample> label_windows(const TrialLog& log, const CrashPredictorSpec& spec,
                                             std::size_t source = 0);

struct CrashReport {
  double auc = 0.0;
  double tpr_at_threshold = 0.0;
  double fpr_at_threshold = 0.0;
  double threshold = 0.8;
  double mean_prob_positive = 0.0;
  double mean_prob_negative = 0.0;
  std::size_t holdout_positive = 0;
  std::size_t holdout_negative = 0;
};

struct CrashTrainOptions {
  int epochs = 8;
  double lr = 2e-3;
  std::size_t batch = 64;
  // Fraction of source trajectories held out (split by trajectory, not window).
  double holdout_fraction = 0.2;
};

struct CrashTrainResult {
  nnet::Parameters params;
  CrashReport report;
};

// BCE training with class-balanced minibatches.
CrashTrainResult train_crash_predictor(const CrashPredictorSpec& spec, std::span<const CrashWindowSample> samples,
                                       std::uint64_t seed, const CrashTrainOptions& opts = {});

double predict_crash_prob(const CrashPredictorSpec& spec, const nnet::Parameters& params,
                          const pilots::ObservationWindow& window);

// A trained predictor as stored on disk:
// {"version":1, "spec":{layers, hidden, window_seconds, sample_hz, horizon, stride}, "model":<weights>}.
struct CrashPredictor {
  CrashPredictorSpec spec;
  nnet::Parameters params;

  double prob(const pilots::ObservationWindow& window) const { return predict_crash_prob(spec, params, window); }
};
void save_predictor(const CrashPredictor& p, const std::filesystem::path& path);
// Throws ModelLoadError when the file is missing or malformed.
CrashPredictor load_predictor(const std::filesystem::path& path);

// Area under the ROC curve (ties count one half).
double roc_auc(std::span<const double> scores, std::span<const int> labels);

CrashReport evaluate_predictor(const CrashPredictorSpec& spec, const nnet::Parameters& params,
                               std::span<const CrashWindowSample> samples, double threshold = 0.8);

// Mixed-quality trajectories: a random joystick, the PD expert and a noisy,
// delayed PD, run at the physics rate with crash resets.
struct CorpusOptions {
  int trials_per_controller = 12;
  double seconds = 30.0;
};
std::vector<TrialLog> synthetic_corpus(const physics::PhysicsConfig& physics, std::uint64_t seed,
                                       const CorpusOptions& opts = {});

}  // namespace sdassist::crashpred
