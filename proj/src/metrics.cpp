#include "sdassist/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace sdassist {

std::string to_string(DeflectionClass c) {
  switch (c) {
    case DeflectionClass::Destabilizing: return "destabilizing";
    case DeflectionClass::Anticipatory: return "anticipatory";
    case DeflectionClass::Corrective: return "corrective";
    case DeflectionClass::None: return "none";
  }
  return "?";
}

DeflectionClass deflection_class_from_string(const std::string& s) {
  if (s == "destabilizing") return DeflectionClass::Destabilizing;
  if (s == "anticipatory") return DeflectionClass::Anticipatory;
  if (s == "corrective") return DeflectionClass::Corrective;
  if (s == "none") return DeflectionClass::None;
  throw FormatError("unknown deflection class: " + s);
}

std::string to_string(Executor e) { return e == Executor::Pilot ? "pilot" : "assistant"; }

Executor executor_from_string(const std::string& s) {
  if (s == "pilot") return Executor::Pilot;
  if (s == "assistant") return Executor::Assistant;
  throw FormatError("unknown executor: " + s);
}

}  // namespace sdassist

namespace sdassist::metrics {

DeflectionClass classify_deflection(double theta, double omega, double d) {
  if (std::abs(d) < kDeadBand) return DeflectionClass::None;
  const double st = sign_of(theta);
  const double so = sign_of(omega);
  const double sd = sign_of(d);
  if (st == 0.0 || so == 0.0) return DeflectionClass::Corrective;
  if (st == sd && so == st) return DeflectionClass::Destabilizing;
  if (st == sd && so == -st) return DeflectionClass::Anticipatory;
  return DeflectionClass::Corrective;
}

namespace {

int count_recoveries(const TrialLog& log) {
  int recoveries = 0;
  bool outside = false;
  for (const auto& r : log.rows) {
    const double a = std::abs(r.theta);
    if (a > kRecoveryAngle) {
      outside = true;
    } else if (outside && a < kRecoveryAngle) {
      ++recoveries;
      outside = false;
    }
    if (r.crash_flag) outside = false;
  }
  return recoveries;
}

}  // namespace

TrialMetrics aggregate_metrics(std::span<const TrialLog> logs) {
  TrialMetrics m;
  double sum_abs = 0.0, sum = 0.0, sum_sq = 0.0, sum_abs_vel = 0.0, sum_vel_sq = 0.0;
  std::size_t destab = 0, antic = 0;
  for (const auto& log : logs) {
    for (const auto& r : log.rows) {
      ++m.samples;
      sum_abs += std::abs(r.theta);
      sum += r.theta;
      sum_sq += r.theta * r.theta;
      sum_abs_vel += std::abs(r.omega);
      sum_vel_sq += r.omega * r.omega;
      m.crashes += r.crash_flag;
      const auto c = classify_deflection(r.theta, r.omega, r.executed_deflection);
      if (c != DeflectionClass::None) ++m.deflecting_samples;
      destab += c == DeflectionClass::Destabilizing;
      antic += c == DeflectionClass::Anticipatory;
    }
    m.recoveries += count_recoveries(log);
  }
  if (m.samples == 0) throw InvalidArgument("trial_metrics: empty log");
  const double n = static_cast<double>(m.samples);
  m.mean_abs_theta = sum_abs / n;
  const double mean = sum / n;
  m.sd_theta = std::sqrt(std::max(0.0, sum_sq / n - mean * mean));
  m.mean_abs_vel = sum_abs_vel / n;
  m.rms_vel = std::sqrt(sum_vel_sq / n);
  if (m.deflecting_samples > 0) {
    const double nd = static_cast<double>(m.deflecting_samples);
    m.pct_destab = 100.0 * static_cast<double>(destab) / nd;
    m.pct_anticipatory = 100.0 * static_cast<double>(antic) / nd;
  }
  return m;
}

TrialMetrics trial_metrics(const TrialLog& log) { return aggregate_metrics(std::span<const TrialLog>(&log, 1)); }

double score(const ScoreInputs& s) {
  auto ratio = [](double num, double den) { return den == 0.0 ? 0.0 : num / den; };
  return (60.0 - s.mean_abs_theta) / 60.0 + (1.0 - s.crashes / 90.0) + (1.0 - s.pct_destab / 100.0) +
         s.pct_anticipatory / 100.0 + (ratio(s.recoveries, s.max_recoveries) - ratio(s.crashes, s.max_crashes));
}

ScoreInputs score_inputs(const TrialMetrics& m, double max_recoveries, double max_crashes) {
  return {m.mean_abs_theta, static_cast<double>(m.crashes), m.pct_destab, m.pct_anticipatory,
          static_cast<double>(m.recoveries), max_recoveries, max_crashes};
}

std::string to_string(ProficiencyLabel p) {
  switch (p) {
    case ProficiencyLabel::Good: return "Good";
    case ProficiencyLabel::Medium: return "Medium";
    case ProficiencyLabel::Bad: return "Bad";
  }
  return "?";
}

std::vector<double> feature_vector(const TrialMetrics& m) {
  return {static_cast<double>(m.crashes), m.pct_destab, m.pct_anticipatory, m.mean_abs_theta,
          m.sd_theta, m.mean_abs_vel, m.rms_vel};
}

namespace {

using Point = std::vector<double>;

double dist2(const Point& a, const Point& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

struct KMeansFit {
  std::vector<int> assign;
  double inertia = std::numeric_limits<double>::infinity();
};

KMeansFit kmeans_once(const std::vector<Point>& pts, int k, Rng& rng, int max_iterations) {
  const std::size_t n = pts.size();
  std::vector<Point> centers;
  centers.push_back(pts[rng() % n]);
  std::vector<double> d2(n);
  while (static_cast<int>(centers.size()) < k) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::numeric_limits<double>::infinity();
      for (const auto& c : centers) d2[i] = std::min(d2[i], dist2(pts[i], c));
      total += d2[i];
    }
    double r = uniform(rng, 0.0, total);
    std::size_t pick = n - 1;
    for (std::size_t i = 0; i < n; ++i) {
      if (d2[i] > 0.0 && r < d2[i]) {
        pick = i;
        break;
      }
      r -= d2[i];
    }
    centers.push_back(pts[pick]);
  }
  KMeansFit fit;
  fit.assign.assign(n, -1);
  for (int iter = 0; iter < max_iterations; ++iter) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      int best = 0;
      double bd = dist2(pts[i], centers[0]);
      for (int c = 1; c < k; ++c) {
        const double d = dist2(pts[i], centers[static_cast<std::size_t>(c)]);
        if (d < bd) {
          bd = d;
          best = c;
        }
      }
      changed |= fit.assign[i] != best;
      fit.assign[i] = best;
    }
    std::vector<Point> sums(static_cast<std::size_t>(k), Point(pts[0].size(), 0.0));
    std::vector<int> counts(static_cast<std::size_t>(k), 0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto c = static_cast<std::size_t>(fit.assign[i]);
      ++counts[c];
      for (std::size_t j = 0; j < pts[i].size(); ++j) sums[c][j] += pts[i][j];
    }
    for (std::size_t c = 0; c < static_cast<std::size_t>(k); ++c) {
      if (counts[c] == 0) {
        // Re-seed an empty cluster at the point farthest from its center.
        std::size_t far = 0;
        double fd = -1.0;
        for (std::size_t i = 0; i < n; ++i) {
          const double d = dist2(pts[i], centers[static_cast<std::size_t>(fit.assign[i])]);
          if (d > fd) {
            fd = d;
            far = i;
          }
        }
        centers[c] = pts[far];
        fit.assign[far] = static_cast<int>(c);
        changed = true;
        continue;
      }
      for (std::size_t j = 0; j < sums[c].size(); ++j) centers[c][j] = sums[c][j] / counts[c];
    }
    if (!changed) break;
  }
  fit.inertia = 0.0;
  for (std::size_t i = 0; i < n; ++i) fit.inertia += dist2(pts[i], centers[static_cast<std::size_t>(fit.assign[i])]);
  return fit;
}

}  // namespace

std::vector<ProficiencyLabel> cluster_proficiency(const std::vector<std::vector<double>>& features,
                                                  std::uint64_t seed, std::size_t rank_feature,
                                                  const ClusterOptions& opts) {
  constexpr int k = 3;
  if (features.size() < 3) throw InvalidArgument("cluster_proficiency: need at least 3 feature vectors");
  const std::size_t dims = features.front().size();
  if (dims == 0 || rank_feature >= dims) throw InvalidArgument("cluster_proficiency: bad feature dimension");
  for (const auto& f : features) {
    if (f.size() != dims) throw InvalidArgument("cluster_proficiency: ragged feature vectors");
  }
  const std::size_t n = features.size();

  std::vector<Point> z(n, Point(dims));
  for (std::size_t j = 0; j < dims; ++j) {
    double mean = 0.0;
    for (const auto& f : features) mean += f[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (const auto& f : features) var += (f[j] - mean) * (f[j] - mean);
    const double sd = std::sqrt(var / static_cast<double>(n));
    for (std::size_t i = 0; i < n; ++i) z[i][j] = sd > 0.0 ? (features[i][j] - mean) / sd : 0.0;
  }

  // Canonical ordering makes the result independent of input order.
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return z[a] < z[b]; });
  std::vector<Point> pts;
  pts.reserve(n);
  for (auto i : order) pts.push_back(z[i]);
  std::size_t distinct = 1;
  for (std::size_t i = 1; i < n; ++i) distinct += pts[i] != pts[i - 1];
  if (distinct < static_cast<std::size_t>(k)) {
    throw InvalidArgument("cluster_proficiency: fewer than 3 distinct feature vectors");
  }

  KMeansFit best;
  for (int r = 0; r < std::max(1, opts.restarts); ++r) {
    Rng rng(split_seed(seed, static_cast<std::uint64_t>(r)));
    auto fit = kmeans_once(pts, k, rng, opts.max_iterations);
    if (fit.inertia < best.inertia - 1e-12) best = std::move(fit);
  }

  std::array<double, k> rank_sum{};
  std::array<int, k> rank_count{};
  for (std::size_t p = 0; p < n; ++p) {
    const auto c = static_cast<std::size_t>(best.assign[p]);
    rank_sum[c] += features[order[p]][rank_feature];
    ++rank_count[c];
  }
  std::array<int, k> clusters{0, 1, 2};
  std::sort(clusters.begin(), clusters.end(), [&](int a, int b) {
    const double ma = rank_sum[static_cast<std::size_t>(a)] / std::max(1, rank_count[static_cast<std::size_t>(a)]);
    const double mb = rank_sum[static_cast<std::size_t>(b)] / std::max(1, rank_count[static_cast<std::size_t>(b)]);
    return ma < mb;
  });
  std::array<ProficiencyLabel, k> name{};
  name[static_cast<std::size_t>(clusters[0])] = ProficiencyLabel::Good;
  name[static_cast<std::size_t>(clusters[1])] = ProficiencyLabel::Medium;
  name[static_cast<std::size_t>(clusters[2])] = ProficiencyLabel::Bad;

  std::vector<ProficiencyLabel> labels(n);
  for (std::size_t p = 0; p < n; ++p) labels[order[p]] = name[static_cast<std::size_t>(best.assign[p])];
  return labels;
}

namespace {

struct ClassCounts {
  std::size_t destab = 0, antic = 0, corr = 0;
  std::size_t total() const { return destab + antic + corr; }
};

BinShares shares(double lo, double hi, const ClassCounts& c) {
  const double n = static_cast<double>(c.total());
  return {lo, hi, c.total(), static_cast<double>(c.destab) / n, static_cast<double>(c.antic) / n,
          static_cast<double>(c.corr) / n};
}

void tally(ClassCounts& c, DeflectionClass cls) {
  if (cls == DeflectionClass::Destabilizing) ++c.destab;
  if (cls == DeflectionClass::Anticipatory) ++c.antic;
  if (cls == DeflectionClass::Corrective) ++c.corr;
}

}  // namespace

std::vector<BinShares> equiprobability_curve(std::span<const TrialLog> logs, double bin_width, double bound) {
  if (logs.empty()) throw InvalidArgument("equiprobability_curve: no logs");
  if (!(bin_width > 0.0)) throw InvalidArgument("equiprobability_curve: bin width must be positive");
  const auto bins = static_cast<std::size_t>(std::ceil(bound / bin_width - 1e-12));
  std::vector<ClassCounts> counts(bins);
  for (const auto& log : logs) {
    for (const auto& r : log.rows) {
      const double dist = std::abs(r.theta);
      if (dist >= bound) continue;
      const auto b = std::min(bins - 1, static_cast<std::size_t>(dist / bin_width));
      tally(counts[b], classify_deflection(r.theta, r.omega, r.executed_deflection));
    }
  }
  std::vector<BinShares> out;
  for (std::size_t b = 0; b < bins; ++b) {
    if (counts[b].total() == 0) continue;
    out.push_back(shares(static_cast<double>(b) * bin_width, std::min(bound, static_cast<double>(b + 1) * bin_width),
                         counts[b]));
  }
  return out;
}

std::optional<BinShares> class_shares(std::span<const TrialLog> logs, double lo, double hi) {
  ClassCounts c;
  for (const auto& log : logs) {
    for (const auto& r : log.rows) {
      const double dist = std::abs(r.theta);
      if (dist >= lo && dist < hi) tally(c, classify_deflection(r.theta, r.omega, r.executed_deflection));
    }
  }
  if (c.total() == 0) return std::nullopt;
  return shares(lo, hi, c);
}

std::optional<double> followed_rate(std::span<const Suggestion> suggestions, std::span<const TimedDeflection> human,
                                    double window_ms) {
  if (suggestions.empty()) return std::nullopt;
  const double window = window_ms / 1000.0;
  std::size_t followed = 0;
  for (const auto& s : suggestions) {
    const int dir = s.direction();
    const auto first = std::upper_bound(human.begin(), human.end(), s.t_issued + 1e-9,
                                        [](double t, const TimedDeflection& h) { return t < h.t; });
    for (auto it = first; it != human.end() && it->t <= s.t_issued + window + 1e-9; ++it) {
      if (std::abs(it->d) >= kDeadBand && static_cast<int>(sign_of(it->d)) == dir && dir != 0) {
        ++followed;
        break;
      }
    }
  }
  return static_cast<double>(followed) / static_cast<double>(suggestions.size());
}

std::optional<double> followed_rate(const TrialLog& log, double window_ms) {
  std::vector<Suggestion> onsets;
  std::vector<TimedDeflection> human;
  int prev_dir = 0;
  for (const auto& r : log.rows) {
    human.push_back({r.t, r.pilot_deflection});
    const int dir = r.assistant_deflection ? static_cast<int>(sign_of(*r.assistant_deflection)) : 0;
    if (dir != 0 && dir != prev_dir) onsets.push_back({r.t, *r.assistant_deflection});
    prev_dir = dir;
  }
  return followed_rate(onsets, human, window_ms);
}

WilcoxonResult paired_wilcoxon(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw InvalidArgument("paired_wilcoxon: samples differ in length");
  if (a.size() < 5) throw InvalidArgument("paired_wilcoxon: need at least 5 pairs");
  std::vector<double> diffs;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] != b[i]) diffs.push_back(a[i] - b[i]);
  }
  if (diffs.empty()) throw InvalidArgument("paired_wilcoxon: all differences are zero");
  const std::size_t n = diffs.size();

  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) { return std::abs(diffs[x]) < std::abs(diffs[y]); });
  // Doubled midranks stay integral.
  std::vector<long> rank2(n);
  double tie_term = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && std::abs(diffs[idx[j + 1]]) == std::abs(diffs[idx[i]])) ++j;
    const long r2 = static_cast<long>(i + 1 + j + 1);
    for (std::size_t k = i; k <= j; ++k) rank2[idx[k]] = r2;
    const double t = static_cast<double>(j - i + 1);
    tie_term += t * t * t - t;
    i = j + 1;
  }
  long wplus2 = 0, total2 = 0;
  for (std::size_t i = 0; i < n; ++i) {
    total2 += rank2[i];
    if (diffs[i] > 0) wplus2 += rank2[i];
  }
  const long wmin2 = std::min(wplus2, total2 - wplus2);

  WilcoxonResult res;
  res.n = n;
  res.w = static_cast<double>(wmin2) / 2.0;
  if (n <= 25) {
    // Null distribution of doubled W+: each rank enters with probability 1/2.
    std::vector<double> dist(static_cast<std::size_t>(total2) + 1, 0.0);
    dist[0] = 1.0;
    for (std::size_t i = 0; i < n; ++i) {
      for (long s = total2; s >= rank2[i]; --s) dist[static_cast<std::size_t>(s)] += dist[static_cast<std::size_t>(s - rank2[i])];
    }
    const double all = std::ldexp(1.0, static_cast<int>(n));
    double tail = 0.0;
    for (long s = 0; s <= wmin2; ++s) tail += dist[static_cast<std::size_t>(s)];
    res.p = std::min(1.0, 2.0 * tail / all);
    res.exact = true;
  } else {
    const double nn = static_cast<double>(n);
    const double mean = nn * (nn + 1.0) / 4.0;
    const double var = nn * (nn + 1.0) * (2.0 * nn + 1.0) / 24.0 - tie_term / 48.0;
    const double z = (res.w - mean) / std::sqrt(var);
    res.p = std::min(1.0, std::erfc(std::abs(z) / std::sqrt(2.0)));
    res.exact = false;
  }
  return res;
}

SignTestResult sign_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw InvalidArgument("sign_test: samples differ in length");
  SignTestResult r;
  for (std::size_t i = 0; i < a.size(); ++i) {
    r.fewer += a[i] < b[i];
    r.more += a[i] > b[i];
  }
  const std::size_t n = r.fewer + r.more;
  if (n == 0) return r;
  const std::size_t k = std::min(r.fewer, r.more);
  double tail = 0.0;
  for (std::size_t i = 0; i <= k; ++i) {
    tail += std::exp(std::lgamma(n + 1.0) - std::lgamma(i + 1.0) - std::lgamma(n - i + 1.0) -
                     static_cast<double>(n) * std::log(2.0));
  }
  r.p_two_sided = std::min(1.0, 2.0 * tail);
  return r;
}

}  // namespace sdassist::metrics
