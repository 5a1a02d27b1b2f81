#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sdassist/trial_log.hpp"

namespace sdassist::metrics {

// |d| below this counts as "no deflection".
inline constexpr double kDeadBand = 0.01;
inline constexpr double kRecoveryAngle = 20.0;

// Same-sign position, velocity and deflection is destabilizing; a deflection
// matching position but opposing velocity is anticipatory; anything else
// nonzero is corrective (including theta or omega exactly 0).
DeflectionClass classify_deflection(double theta, double omega, double d);

struct TrialMetrics {
  int crashes = 0;
  double pct_destab = 0.0;
  double pct_anticipatory = 0.0;
  double mean_abs_theta = 0.0;
  double sd_theta = 0.0;  // population SD
  double mean_abs_vel = 0.0;
  double rms_vel = 0.0;
  int recoveries = 0;
  std::size_t samples = 0;
  std::size_t deflecting_samples = 0;
};

TrialMetrics trial_metrics(const TrialLog& log);
// Pooled over several trials: counts add, statistics over all samples.
TrialMetrics aggregate_metrics(std::span<const TrialLog> logs);

struct ScoreInputs {
  double mean_abs_theta = 0.0;
  double crashes = 0.0;
  double pct_destab = 0.0;
  double pct_anticipatory = 0.0;
  double recoveries = 0.0;
  double max_recoveries = 0.0;
  double max_crashes = 0.0;
};

// (60 - mu|theta|)/60 + (1 - C/90) + (1 - pD/100) + pA/100 + (R/maxR - C/maxC);
// a ratio with a zero denominator contributes 0.
double score(const ScoreInputs& s);
ScoreInputs score_inputs(const TrialMetrics& m, double max_recoveries, double max_crashes);

enum class ProficiencyLabel { Good, Medium, Bad };
std::string to_string(ProficiencyLabel p);

// Feature vector used for clustering: crashes, %destab, %anticipatory,
// mean|theta|, sd(theta), mean|vel|, RMS vel.
std::vector<double> feature_vector(const TrialMetrics& m);
inline constexpr std::size_t kRmsVelFeature = 6;

struct ClusterOptions {
  int restarts = 50;
  int max_iterations = 300;
};

// k-means (k = 3, k-means++ seeding) on z-normalized features; clusters are
// named by ascending mean of `rank_feature`: Good, Medium, Bad.
std::vector<ProficiencyLabel> cluster_proficiency(const std::vector<std::vector<double>>& features,
                                                  std::uint64_t seed, std::size_t rank_feature = kRmsVelFeature,
                                                  const ClusterOptions& opts = {});

struct BinShares {
  double lo = 0.0;
  double hi = 0.0;
  std::size_t count = 0;  // nonzero deflections in the bin
  double p_destab = 0.0;
  double p_anticipatory = 0.0;
  double p_corrective = 0.0;
};

// Distance from the DOB folded toward the active fall boundary (|theta|),
// binned from 0 to `bound`. Empty bins are omitted.
std::vector<BinShares> equiprobability_curve(std::span<const TrialLog> logs, double bin_width, double bound = 60.0);
// Shares for all nonzero deflections with lo <= |theta| < hi; nullopt when empty.
std::optional<BinShares> class_shares(std::span<const TrialLog> logs, double lo, double hi);

struct TimedDeflection {
  double t = 0.0;
  double d = 0.0;
};

// Fraction of suggestions answered by a same-direction human deflection
// (|d| >= dead band) within `window_ms` after issue. nullopt without suggestions.
std::optional<double> followed_rate(std::span<const Suggestion> suggestions, std::span<const TimedDeflection> human,
                                    double window_ms = 450.0);
// Suggestion onsets (start of a cue or a direction change) from a trial log,
// matched against the logged pilot deflections.
std::optional<double> followed_rate(const TrialLog& log, double window_ms = 450.0);

struct WilcoxonResult {
  double w = 0.0;  // min(W+, W-)
  double p = 1.0;  // two-sided
  std::size_t n = 0;  // pairs after dropping zero differences
  bool exact = true;
};

// Paired Wilcoxon signed-rank test. Exact null distribution (midranks for
// ties) up to 25 nonzero pairs, tie-corrected normal approximation above.
WilcoxonResult paired_wilcoxon(std::span<const double> a, std::span<const double> b);

struct SignTestResult {
  std::size_t fewer = 0;   // pairs where a < b
  std::size_t more = 0;    // pairs where a > b
  double p_two_sided = 1.0;
};
SignTestResult sign_test(std::span<const double> a, std::span<const double> b);

}  // namespace sdassist::metrics
