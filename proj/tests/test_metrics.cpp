#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "sdassist/metrics.hpp"

using namespace sdassist;
using namespace sdassist::metrics;

namespace {

TrialRow row(double t, double theta, double omega, double d, bool crash = false) {
  TrialRow r;
  r.t = t;
  r.theta = theta;
  r.omega = omega;
  r.executed_deflection = d;
  r.pilot_deflection = d;
  r.crash_flag = crash;
  return r;
}

// Two-sided p from enumerating every sign assignment of the ranks.
double brute_wilcoxon_p(const std::vector<double>& diffs) {
  const std::size_t n = diffs.size();
  std::vector<double> ranks(n);
  for (std::size_t i = 0; i < n; ++i) {
    double below = 0, equal = 0;
    for (std::size_t j = 0; j < n; ++j) {
      below += std::abs(diffs[j]) < std::abs(diffs[i]);
      equal += std::abs(diffs[j]) == std::abs(diffs[i]);
    }
    ranks[i] = below + (equal + 1) / 2.0;
  }
  const double total = std::accumulate(ranks.begin(), ranks.end(), 0.0);
  double wplus = 0;
  for (std::size_t i = 0; i < n; ++i) wplus += diffs[i] > 0 ? ranks[i] : 0;
  const double w = std::min(wplus, total - wplus);
  double hits = 0;
  for (std::uint64_t mask = 0; mask < (1ull << n); ++mask) {
    double s = 0;
    for (std::size_t i = 0; i < n; ++i) s += (mask >> i) & 1 ? ranks[i] : 0;
    hits += s <= w + 1e-9;
  }
  return std::min(1.0, 2.0 * hits / std::ldexp(1.0, static_cast<int>(n)));
}

}  // namespace

TEST_CASE("deflection taxonomy") {
  CHECK(classify_deflection(10, 5, 0.5) == DeflectionClass::Destabilizing);
  CHECK(classify_deflection(-10, -5, -0.5) == DeflectionClass::Destabilizing);
  CHECK(classify_deflection(10, -5, 0.5) == DeflectionClass::Anticipatory);
  CHECK(classify_deflection(10, 5, -0.5) == DeflectionClass::Corrective);
  CHECK(classify_deflection(10, -5, -0.5) == DeflectionClass::Corrective);
  CHECK(classify_deflection(10, 5, 0.005) == DeflectionClass::None);
  CHECK(classify_deflection(0, 5, 0.5) == DeflectionClass::Corrective);
  CHECK(classify_deflection(5, 0, 0.5) == DeflectionClass::Corrective);
}

TEST_CASE("string round trips") {
  for (auto c : {DeflectionClass::Destabilizing, DeflectionClass::Anticipatory, DeflectionClass::Corrective,
                 DeflectionClass::None}) {
    CHECK(deflection_class_from_string(to_string(c)) == c);
  }
  CHECK(executor_from_string(to_string(Executor::Assistant)) == Executor::Assistant);
  CHECK_THROWS_AS(executor_from_string("copilot"), FormatError);
}

TEST_CASE("trial metrics on a hand-built log") {
  TrialLog log;
  log.rows = {row(0.000, 10, 5, 0.5),     // destab
              row(0.005, 25, 5, -0.5),    // corrective, outside 20
              row(0.010, 15, -5, 0.5),    // anticipatory, back inside: recovery 1
              row(0.015, -30, -5, 0.0),   // none
              row(0.020, -59, -80, -1.0, true),  // destab, crash
              row(0.025, 0, 0, 0.0)};
  const auto m = trial_metrics(log);
  CHECK(m.samples == 6);
  CHECK(m.crashes == 1);
  CHECK(m.deflecting_samples == 4);
  CHECK(m.pct_destab == doctest::Approx(50.0));
  CHECK(m.pct_anticipatory == doctest::Approx(25.0));
  CHECK(m.mean_abs_theta == doctest::Approx((10 + 25 + 15 + 30 + 59 + 0) / 6.0));
  const double mean = (10 + 25 + 15 - 30 - 59 + 0) / 6.0;
  const double var = (100 + 625 + 225 + 900 + 3481 + 0) / 6.0 - mean * mean;
  CHECK(m.sd_theta == doctest::Approx(std::sqrt(var)));
  CHECK(m.mean_abs_vel == doctest::Approx(100.0 / 6.0));
  CHECK(m.rms_vel == doctest::Approx(std::sqrt((25 * 4 + 6400) / 6.0)));
  // the excursion that ended in a crash is not a recovery
  CHECK(m.recoveries == 1);
  CHECK_THROWS_AS(trial_metrics(TrialLog{}), InvalidArgument);
}

TEST_CASE("score") {
  CHECK(std::abs(score({15, 3, 20, 10, 6, 10, 9}) - 2.883333333333333) < 1e-9);
  CHECK(score({0, 0, 0, 0, 0, 0, 0}) == doctest::Approx(3.0));
  // zero maxima drop the ratio terms
  CHECK(score({15, 3, 20, 10, 6, 0, 0}) == doctest::Approx(0.75 + (1 - 3 / 90.0) + 0.8 + 0.1));
  SUBCASE("monotone in each input") {
    const ScoreInputs base{20, 5, 30, 10, 4, 10, 10};
    auto bumped = base;
    bumped.mean_abs_theta += 1;
    CHECK(score(bumped) < score(base));
    bumped = base;
    bumped.crashes += 1;
    CHECK(score(bumped) < score(base));
    bumped = base;
    bumped.pct_destab += 1;
    CHECK(score(bumped) < score(base));
    bumped = base;
    bumped.pct_anticipatory += 1;
    CHECK(score(bumped) > score(base));
    bumped = base;
    bumped.recoveries += 1;
    CHECK(score(bumped) > score(base));
  }
  SUBCASE("linear in mean |theta|") {
    const double a = score({10, 2, 20, 10, 3, 5, 5});
    const double b = score({40, 2, 20, 10, 3, 5, 5});
    CHECK(a - b == doctest::Approx(0.5));
  }
  TrialMetrics m;
  m.mean_abs_theta = 15;
  m.crashes = 3;
  m.pct_destab = 20;
  m.pct_anticipatory = 10;
  m.recoveries = 6;
  CHECK(score(score_inputs(m, 10, 9)) == doctest::Approx(2.883333333333333));
}

TEST_CASE("proficiency clustering") {
  std::vector<std::vector<double>> feats;
  Rng rng(3);
  for (int g = 0; g < 3; ++g) {
    for (int i = 0; i < 6; ++i) {
      const double c = g * 10.0;
      std::vector<double> f(7);
      for (auto& v : f) v = c + uniform(rng, -1.0, 1.0);
      feats.push_back(f);
    }
  }
  const auto labels = cluster_proficiency(feats, 11);
  for (int i = 0; i < 6; ++i) {
    CHECK(labels[static_cast<std::size_t>(i)] == ProficiencyLabel::Good);
    CHECK(labels[static_cast<std::size_t>(6 + i)] == ProficiencyLabel::Medium);
    CHECK(labels[static_cast<std::size_t>(12 + i)] == ProficiencyLabel::Bad);
  }
  SUBCASE("independent of input order") {
    std::vector<std::size_t> perm(feats.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::reverse(perm.begin(), perm.end());
    std::swap(perm[2], perm[9]);
    std::vector<std::vector<double>> shuffled;
    for (auto i : perm) shuffled.push_back(feats[i]);
    const auto l2 = cluster_proficiency(shuffled, 11);
    for (std::size_t k = 0; k < perm.size(); ++k) CHECK(l2[k] == labels[perm[k]]);
  }
  SUBCASE("naming follows the ranking feature") {
    auto flipped = feats;
    for (auto& f : flipped) f[kRmsVelFeature] = -f[kRmsVelFeature];
    const auto l3 = cluster_proficiency(flipped, 11);
    CHECK(l3.front() == ProficiencyLabel::Bad);
    CHECK(l3.back() == ProficiencyLabel::Good);
  }
  CHECK_THROWS_AS(cluster_proficiency({{1.0}, {2.0}}, 1), InvalidArgument);
  CHECK_THROWS_AS(cluster_proficiency({{1.0}, {1.0}, {1.0}, {1.0}}, 1), InvalidArgument);
}

TEST_CASE("equiprobability bins") {
  TrialLog log;
  log.rows = {row(0, 2, 1, 0.5),     // destab, bin 0
              row(0, -3, 1, 0.5),    // corrective, bin 0
              row(0, 50, 5, -0.5),   // corrective, bin 45-60
              row(0, 52, -5, 0.5),   // anticipatory
              row(0, 7, 1, 0.0)};    // none: ignored
  const std::vector<TrialLog> logs{log};
  const auto curve = equiprobability_curve(logs, 5.0);
  REQUIRE(curve.size() == 2);
  CHECK(curve[0].lo == 0.0);
  CHECK(curve[0].count == 2);
  CHECK(curve[0].p_destab == doctest::Approx(0.5));
  CHECK(curve[0].p_corrective == doctest::Approx(0.5));
  const auto far = class_shares(logs, 45, 60);
  REQUIRE(far.has_value());
  CHECK(far->p_destab == 0.0);
  CHECK(far->p_anticipatory == doctest::Approx(0.5));
  CHECK_FALSE(class_shares(logs, 20, 30).has_value());
}

TEST_CASE("followed suggestions") {
  const std::vector<Suggestion> sugg{{1.0, 0.8}, {2.0, -0.5}, {3.0, 0.4}};
  const std::vector<TimedDeflection> human{{1.2, 0.3}, {2.1, 0.2}, {2.46, -0.4}, {3.5, 0.6}};
  // first: answered at 1.2; second: answered at 2.46 > 2.45 -> miss; third: 3.5 too late
  CHECK(*followed_rate(sugg, human) == doctest::Approx(1.0 / 3.0));
  CHECK(*followed_rate(sugg, human, 480) == doctest::Approx(2.0 / 3.0));
  CHECK_FALSE(followed_rate(std::span<const Suggestion>{}, human).has_value());
}

TEST_CASE("paired Wilcoxon") {
  SUBCASE("exact against enumeration, with ties") {
    Rng rng(9);
    for (int rep = 0; rep < 20; ++rep) {
      const int n = 5 + rep % 12;
      std::vector<double> a, b, diffs;
      for (int i = 0; i < n; ++i) {
        a.push_back(std::round(uniform(rng, 0, 6)));
        b.push_back(std::round(uniform(rng, 0, 6)) + (rep % 3 == 0 ? 1.0 : 0.0));
        if (a.back() != b.back()) diffs.push_back(a.back() - b.back());
      }
      if (diffs.empty()) continue;
      const auto r = paired_wilcoxon(a, b);
      CHECK(r.exact);
      CHECK(r.n == diffs.size());
      CHECK(r.p == doctest::Approx(brute_wilcoxon_p(diffs)).epsilon(1e-12));
    }
  }
  SUBCASE("all positive differences, n = 10") {
    std::vector<double> a(10), b(10, 0.0);
    std::iota(a.begin(), a.end(), 1.0);
    const auto r = paired_wilcoxon(a, b);
    CHECK(r.w == 0.0);
    CHECK(r.p == doctest::Approx(2.0 / 1024.0));
  }
  SUBCASE("normal approximation is close to exact at n = 26") {
    Rng rng(4);
    std::vector<double> a, b;
    for (int i = 0; i < 26; ++i) {
      a.push_back(uniform(rng, 0, 1) + 0.2);
      b.push_back(uniform(rng, 0, 1));
    }
    const auto r = paired_wilcoxon(a, b);
    CHECK_FALSE(r.exact);
    std::vector<double> a25(a.begin(), a.end() - 1), b25(b.begin(), b.end() - 1);
    CHECK(std::abs(r.p - paired_wilcoxon(a25, b25).p) < 0.1);
    CHECK(r.p > 0.0);
    CHECK(r.p <= 1.0);
  }
  CHECK_THROWS_AS(paired_wilcoxon(std::vector<double>{1, 2, 3}, std::vector<double>{0, 0, 0}), InvalidArgument);
  CHECK_THROWS_AS(paired_wilcoxon(std::vector<double>(6, 1.0), std::vector<double>(6, 1.0)), InvalidArgument);
}

TEST_CASE("sign test") {
  const std::vector<double> zero(10, 0.0), one(10, 1.0);
  const auto r = sign_test(zero, one);
  CHECK(r.fewer == 10);
  CHECK(r.more == 0);
  CHECK(r.p_two_sided == doctest::Approx(2.0 / 1024.0));
  const std::vector<double> a{1, 2, 3, 4, 5}, b{2, 1, 3, 5, 4};
  const auto t = sign_test(a, b);
  CHECK(t.fewer == 2);
  CHECK(t.more == 2);
  CHECK(t.p_two_sided == 1.0);
}
