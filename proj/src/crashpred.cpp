#include "sdassist/crashpred.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"

#include "sdassist/metrics.hpp"
#include "sdassist/rl.hpp"

namespace sdassist::crashpred {

void CrashPredictorSpec::validate() const {
  if (layers < 1 || hidden < 1) throw InvalidArgument("crash predictor: need at least one hidden layer");
  if (!(window_seconds > 0.0) || !(horizon > 0.0) || !(stride > 0.0) || !(sample_hz > 0.0)) {
    throw InvalidArgument("crash predictor: window, horizon, stride and rate must be positive");
  }
}

pilots::WindowConfig CrashPredictorSpec::window() const { return {window_seconds, 0.0, true, sample_hz}; }

nnet::NetworkSpec CrashPredictorSpec::network() const {
  return {nnet::Arch::GRU, 3, std::vector<int>(static_cast<std::size_t>(layers), hidden), 1,
          nnet::Activation::Sigmoid};
}

namespace {

double source_dt(const TrialLog& log) {
  return log.rows.size() > 1 ? log.rows[1].t - log.rows[0].t : 1.0 / 200.0;
}

}  // namespace

std::vector<pilots::Sample> decimate(const TrialLog& log, double target_hz) {
  if (log.rows.empty()) return {};
  const double src_hz = 1.0 / source_dt(log);
  const long factor = std::lround(src_hz / target_hz);
  if (factor < 1 || std::abs(src_hz / static_cast<double>(factor) - target_hz) > 0.01 * target_hz) {
    throw InvalidArgument("decimate: source rate must be an integer multiple of the target rate");
  }
  std::vector<pilots::Sample> out;
  out.reserve(log.rows.size() / static_cast<std::size_t>(factor) + 1);
  for (std::size_t i = 0; i < log.rows.size(); i += static_cast<std::size_t>(factor)) {
    const auto& r = log.rows[i];
    out.push_back({r.t, r.theta, r.omega, i > 0 ? log.rows[i - 1].executed_deflection : 0.0});
  }
  return out;
}

std::vector<CrashWindowSample> label_windows(const TrialLog& log, const CrashPredictorSpec& spec,
                                             std::size_t source) {
  spec.validate();
  const auto cfg = spec.window();
  const auto dec = decimate(log, spec.sample_hz);
  const auto n = static_cast<std::size_t>(cfg.length());
  if (dec.size() < n) throw InvalidArgument("label_windows: trajectory shorter than the window");
  const double dt = source_dt(log);
  // A crash logged on row k reaches the bound at t_k + dt; the next row is the reset state.
  std::vector<double> crash_times;
  for (const auto& r : log.rows) {
    if (r.crash_flag) crash_times.push_back(r.t + dt);
  }
  const auto stride = static_cast<std::size_t>(std::max(1L, std::lround(spec.stride * spec.sample_hz)));
  const double eps = 1e-9;
  std::vector<CrashWindowSample> out;
  for (std::size_t end = n - 1; end < dec.size(); end += stride) {
    const double t_first = dec[end + 1 - n].t;
    const double t_end = dec[end].t;
    bool crosses = false;
    int label = 0;
    for (double tc : crash_times) {
      if (tc > t_first + eps && tc <= t_end + eps) crosses = true;
      if (tc > t_end + eps && tc <= t_end + spec.horizon + eps) label = 1;
    }
    if (crosses) continue;
    CrashWindowSample s;
    s.window.thetas.reserve(n);
    s.window.omegas.reserve(n);
    s.window.deflections.emplace();
    s.window.deflections->reserve(n);
    for (std::size_t k = end + 1 - n; k <= end; ++k) {
      s.window.thetas.push_back(dec[k].theta);
      s.window.omegas.push_back(dec[k].omega);
      s.window.deflections->push_back(dec[k].deflection);
    }
    s.label = label;
    s.t_end = t_end;
    s.source = source;
    out.push_back(std::move(s));
  }
  return out;
}

double predict_crash_prob(const CrashPredictorSpec& spec, const nnet::Parameters& params,
                          const pilots::ObservationWindow& window) {
  const auto cfg = spec.window();
  if (window.size() != static_cast<std::size_t>(cfg.length()) || !window.deflections) {
    throw ShapeError("crash predictor: window must hold " + std::to_string(cfg.length()) +
                     " samples with deflections");
  }
  const auto y = nnet::forward(spec.network(), params, pilots::encode(window, nnet::Arch::GRU));
  return std::clamp(y(0), 0.0, 1.0);
}

double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw InvalidArgument("roc_auc: size mismatch");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos = 0, neg = 0, rank_sum_pos = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && scores[idx[j + 1]] == scores[idx[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) {
      if (labels[idx[k]]) {
        ++pos;
        rank_sum_pos += midrank;
      } else {
        ++neg;
      }
    }
    i = j + 1;
  }
  if (pos == 0 || neg == 0) throw InvalidArgument("roc_auc: need both classes");
  return (rank_sum_pos - pos * (pos + 1) / 2.0) / (pos * neg);
}

CrashReport evaluate_predictor(const CrashPredictorSpec& spec, const nnet::Parameters& params,
                               std::span<const CrashWindowSample> samples, double threshold) {
  std::vector<double> scores;
  std::vector<int> labels;
  CrashReport rep;
  rep.threshold = threshold;
  double tp = 0, fp = 0;
  for (const auto& s : samples) {
    const double p = predict_crash_prob(spec, params, s.window);
    scores.push_back(p);
    labels.push_back(s.label);
    if (s.label) {
      ++rep.holdout_positive;
      rep.mean_prob_positive += p;
      tp += p > threshold;
    } else {
      ++rep.holdout_negative;
      rep.mean_prob_negative += p;
      fp += p > threshold;
    }
  }
  rep.auc = roc_auc(scores, labels);
  rep.mean_prob_positive /= static_cast<double>(rep.holdout_positive);
  rep.mean_prob_negative /= static_cast<double>(rep.holdout_negative);
  rep.tpr_at_threshold = tp / static_cast<double>(rep.holdout_positive);
  rep.fpr_at_threshold = fp / static_cast<double>(rep.holdout_negative);
  return rep;
}

CrashTrainResult train_crash_predictor(const CrashPredictorSpec& spec, std::span<const CrashWindowSample> samples,
                                       std::uint64_t seed, const CrashTrainOptions& opts) {
  spec.validate();
  if (opts.epochs < 0 || opts.batch < 2) throw InvalidArgument("crash predictor: bad training options");
  const auto net = spec.network();
  std::vector<const CrashWindowSample*> train_pos, train_neg;
  std::vector<CrashWindowSample> holdout;
  for (const auto& s : samples) {
    const bool held = static_cast<double>(split_seed(seed, s.source) % 10000) < opts.holdout_fraction * 10000.0;
    if (held) {
      holdout.push_back(s);
    } else {
      (s.label ? train_pos : train_neg).push_back(&s);
    }
  }
  if (train_pos.empty() || train_neg.empty()) {
    throw InvalidArgument("crash predictor: training data must contain both crash and no-crash windows");
  }

  auto encode = [](const CrashWindowSample& s) {
    return nnet::Example{pilots::encode(s.window, nnet::Arch::GRU), nnet::Vector::Constant(1, s.label)};
  };
  std::vector<nnet::Example> pos, neg;
  for (auto* s : train_pos) pos.push_back(encode(*s));
  for (auto* s : train_neg) neg.push_back(encode(*s));

  CrashTrainResult result;
  result.params = nnet::init(net, seed);
  auto opt = nnet::AdamState::create(result.params.size(), opts.lr);
  Rng rng(split_seed(seed, 0xC4A5));
  const std::size_t half = opts.batch / 2;
  const std::size_t per_epoch = std::max<std::size_t>(1, (pos.size() + neg.size()) / opts.batch);
  std::vector<nnet::Example> mb;
  for (int e = 0; e < opts.epochs; ++e) {
    for (std::size_t b = 0; b < per_epoch; ++b) {
      mb.clear();
      for (std::size_t k = 0; k < half; ++k) mb.push_back(pos[rng() % pos.size()]);
      for (std::size_t k = 0; k < half; ++k) mb.push_back(neg[rng() % neg.size()]);
      const auto g = nnet::gradients(net, result.params, mb, nnet::Loss::BCE);
      nnet::adam_step(result.params, g.grad, opt);
    }
  }

  const bool holdout_ok = std::any_of(holdout.begin(), holdout.end(), [](auto& s) { return s.label == 1; }) &&
                          std::any_of(holdout.begin(), holdout.end(), [](auto& s) { return s.label == 0; });
  if (holdout_ok) {
    result.report = evaluate_predictor(spec, result.params, holdout);
  } else {
    // Too few trajectories to hold any out: report on the training windows.
    std::vector<CrashWindowSample> all;
    for (auto* s : train_pos) all.push_back(*s);
    for (auto* s : train_neg) all.push_back(*s);
    result.report = evaluate_predictor(spec, result.params, all);
  }
  return result;
}

namespace {

struct RolloutPilot {
  virtual ~RolloutPilot() = default;
  virtual double act(double theta, double omega) = 0;
};

struct RandomStick : RolloutPilot {
  Rng& rng;
  double value = 0.0;
  int left = 0;
  explicit RandomStick(Rng& r) : rng(r) {}
  double act(double, double) override {
    if (left-- <= 0) {
      value = uniform(rng, -1.0, 1.0);
      left = static_cast<int>(uniform(rng, 10.0, 100.0));
    }
    return value;
  }
};

struct NoisyPd : RolloutPilot {
  Rng& rng;
  double gain, noise;
  pilots::DelayLine delay;
  NoisyPd(Rng& r, double g, double n, int delay_steps) : rng(r), gain(g), noise(n), delay(delay_steps) {}
  double act(double theta, double omega) override {
    const double d = gain * rl::pd_expert(theta, omega) + noise * gaussian(rng);
    return std::clamp(delay.push(d), -1.0, 1.0);
  }
};

TrialLog rollout(RolloutPilot& pilot, const physics::PhysicsConfig& physics, double start, double seconds) {
  const auto steps = static_cast<long>(std::lround(seconds / physics.dt));
  physics::PendulumState s{start, 0.0, 0.0};
  TrialLog log;
  log.rows.reserve(static_cast<std::size_t>(steps));
  for (long k = 0; k < steps; ++k) {
    TrialRow row;
    row.t = static_cast<double>(k) * physics.dt;
    row.theta = s.theta;
    row.omega = s.omega;
    const double d = pilot.act(s.theta, s.omega);
    row.executed_deflection = d;
    row.pilot_deflection = d;
    row.deflection_class = metrics::classify_deflection(s.theta, s.omega, d);
    const auto out = physics::step(s, d, physics);
    row.crash_flag = out.crashed;
    s = out.state;
    log.rows.push_back(row);
  }
  return log;
}

}  // namespace

std::vector<TrialLog> synthetic_corpus(const physics::PhysicsConfig& physics, std::uint64_t seed,
                                       const CorpusOptions& opts) {
  physics.validate();
  if (opts.trials_per_controller < 1 || !(opts.seconds > 0.0)) throw InvalidArgument("corpus: bad options");
  std::vector<TrialLog> out;
  for (int kind = 0; kind < 3; ++kind) {
    for (int trial = 0; trial < opts.trials_per_controller; ++trial) {
      Rng rng(split_seed(seed, static_cast<std::uint64_t>(kind * 100000 + trial)));
      const double start = uniform(rng, -45.0, 45.0);
      if (kind == 0) {
        RandomStick p(rng);
        out.push_back(rollout(p, physics, start, opts.seconds));
      } else if (kind == 1) {
        NoisyPd p(rng, 1.0, 0.02, 0);
        out.push_back(rollout(p, physics, start, opts.seconds));
      } else {
        NoisyPd p(rng, 0.8, 0.3, 20);
        out.push_back(rollout(p, physics, start, opts.seconds));
      }
    }
  }
  return out;
}

void save_predictor(const CrashPredictor& p, const std::filesystem::path& path) {
  p.spec.validate();
  nlohmann::json j;
  j["version"] = 1;
  j["spec"] = {{"layers", p.spec.layers},       {"hidden", p.spec.hidden},   {"window_seconds", p.spec.window_seconds},
               {"sample_hz", p.spec.sample_hz}, {"horizon", p.spec.horizon}, {"stride", p.spec.stride}};
  j["model"] = nlohmann::json::parse(nnet::to_json_string(p.spec.network(), p.params));
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump() << '\n';
}

CrashPredictor load_predictor(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ModelLoadError("cannot open crash predictor " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    const auto j = nlohmann::json::parse(ss.str());
    if (j.at("version").get<int>() != 1) throw FormatError("unsupported crash predictor version");
    const auto& s = j.at("spec");
    CrashPredictor p;
    p.spec.layers = s.at("layers").get<int>();
    p.spec.hidden = s.at("hidden").get<int>();
    p.spec.window_seconds = s.at("window_seconds").get<double>();
    p.spec.sample_hz = s.at("sample_hz").get<double>();
    p.spec.horizon = s.at("horizon").get<double>();
    p.spec.stride = s.at("stride").get<double>();
    p.spec.validate();
    auto model = nnet::from_json_string(j.at("model").dump());
    if (!(model.spec == p.spec.network())) throw FormatError("model does not match the predictor spec");
    p.params = std::move(model.params);
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw ModelLoadError(path.string() + ": " + e.what());
  } catch (const Error& e) {
    throw ModelLoadError(path.string() + ": " + e.what());
  }
}

}  // namespace sdassist::crashpred
