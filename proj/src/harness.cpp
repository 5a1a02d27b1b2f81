#include "sdassist/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "json.hpp"
#include "sdassist/rl.hpp"

namespace sdassist::harness {

using nlohmann::json;

std::string to_string(PilotKind k) {
  switch (k) {
    case PilotKind::Network: return "network";
    case PilotKind::PD: return "pd";
    case PilotKind::Random: return "random";
    case PilotKind::Sluggish: return "sluggish";
  }
  return "?";
}

PilotKind pilot_kind_from_string(const std::string& s) {
  if (s == "network") return PilotKind::Network;
  if (s == "pd") return PilotKind::PD;
  if (s == "random") return PilotKind::Random;
  if (s == "sluggish") return PilotKind::Sluggish;
  throw FormatError("unknown pilot kind: " + s);
}

void PilotSpec::validate() const {
  if (kind == PilotKind::Network && !policy) throw InvalidArgument("pilot " + name + ": network pilot without a policy");
  if (!(gain >= 0.0) || !(noise >= 0.0) || !(delay >= 0.0) || !(hold >= 0.0)) {
    throw InvalidArgument("pilot " + name + ": gain, noise, delay and hold must be non-negative");
  }
  if (policy) policy->window.validate();
}

PilotSpec sluggish_pilot() {
  PilotSpec p;
  p.name = "sluggish";
  p.kind = PilotKind::Sluggish;
  p.gain = 0.8;
  p.noise = 0.2;
  p.delay = 0.1;
  p.hold = 0.1;
  return p;
}

void TrialConfig::validate() const {
  physics.validate();
  gating.validate();
  behavior.validate();
  if (!(seconds > 0.0)) throw InvalidArgument("trial: seconds must be positive");
  if (!(suggestion_lead >= 0.0)) throw InvalidArgument("trial: suggestion_lead must be non-negative");
  if (!(start_range >= 0.0 && start_range < physics.crash_bound)) {
    throw InvalidArgument("trial: start_range must lie in [0, crash bound)");
  }
}

long TrialConfig::steps() const { return std::lround(seconds / physics.dt); }

namespace {

long rate_divisor(double physics_hz, double hz, const char* what) {
  const double ratio = physics_hz / hz;
  const long every = std::lround(ratio);
  if (every < 1 || std::abs(ratio - static_cast<double>(every)) > 1e-6) {
    throw ConfigError(std::string(what) + ": sample rate must divide the physics rate");
  }
  return every;
}

// Produces the pilot's own (pre-executor) deflection for each physics step.
class PilotRunner {
 public:
  PilotRunner(const PilotSpec& spec, const physics::PhysicsConfig& phys, std::uint64_t seed)
      : spec_(spec), rng_(seed), delay_(0) {
    const double hz = 1.0 / phys.dt;
    if (spec.kind == PilotKind::Network) {
      every_ = rate_divisor(hz, spec.policy->window.sample_hz, "pilot policy");
      delay_ = pilots::DelayLine(static_cast<int>(std::lround(spec.policy->window.future * hz)));
    } else {
      every_ = std::max(1L, std::lround(spec.hold * hz));
      delay_ = pilots::DelayLine(static_cast<int>(std::lround(spec.delay * hz)));
    }
  }

  double act(const pilots::Sample& s, long step) {
    if (spec_.kind == PilotKind::Network) {
      if (step % every_ == 0) {
        history_.push_back(s);
        decided_ = spec_.policy->act(pilots::build_window(history_, s.t, spec_.policy->window));
      }
    } else if (spec_.kind == PilotKind::Random) {
      if (left_-- <= 0) {
        decided_ = uniform(rng_, -1.0, 1.0);
        left_ = static_cast<int>(uniform(rng_, 10.0, 100.0));
      }
    } else if (step % every_ == 0) {
      const double noise = spec_.noise > 0.0 ? spec_.noise * gaussian(rng_) : 0.0;
      decided_ = std::clamp(spec_.gain * rl::pd_expert(s.theta, s.omega) + noise, -1.0, 1.0);
    }
    return delay_.push(decided_);
  }

 private:
  const PilotSpec& spec_;
  Rng rng_;
  pilots::DelayLine delay_;
  long every_ = 1;
  int left_ = 0;
  double decided_ = 0.0;
  std::vector<pilots::Sample> history_;
};

}  // namespace

CrashMonitor::CrashMonitor(const crashpred::CrashPredictor* predictor, double physics_hz) : predictor_(predictor) {
  if (predictor_) every_ = rate_divisor(physics_hz, predictor_->spec.sample_hz, "crash predictor");
}

double CrashMonitor::push(const pilots::Sample& s, long step) {
  if (!predictor_ || step % every_ != 0) return p_;
  history_.push_back(s);
  p_ = predictor_->prob(pilots::build_window(history_, s.t, predictor_->spec.window()));
  return p_;
}

void CrashMonitor::reset() {
  history_.clear();
  p_ = 0.0;
}

namespace {

void check_dims(const pilots::Policy& p, const std::string& who) {
  const int want = pilots::input_dim(p.spec.arch, p.window);
  if (p.spec.input_dim != want) {
    throw ShapeError(who + ": network takes " + std::to_string(p.spec.input_dim) + " inputs but its window gives " +
                     std::to_string(want));
  }
  if (p.spec.output_dim != 1) throw ShapeError(who + ": policy must have one output");
}

}  // namespace

TrialLog run_trial(const PilotSpec& pilot, const Models& models, const TrialConfig& cfg, std::uint64_t seed) {
  pilot.validate();
  cfg.validate();
  if (pilot.policy) check_dims(*pilot.policy, "pilot " + pilot.name);
  if (models.assistant) check_dims(models.assistant->policy, "assistant");
  if (models.predictor && models.predictor->params.shapes() != nnet::layout(models.predictor->spec.network())) {
    throw ShapeError("crash predictor: weights do not match its spec");
  }
  Rng start_rng(split_seed(seed, 0));
  pilots::TwinExecutor twin(cfg.behavior, split_seed(seed, 1));
  PilotRunner runner(pilot, cfg.physics, split_seed(seed, 2));
  CrashMonitor monitor(models.predictor, 1.0 / cfg.physics.dt);

  std::vector<pilots::Sample> agent_history;
  long agent_every = 1;
  if (models.assistant) agent_every = rate_divisor(1.0 / cfg.physics.dt, models.assistant->policy.window.sample_hz,
                                                   "assistant policy");
  double agent_d = 0.0;
  const long lead_steps = std::lround(cfg.suggestion_lead / cfg.physics.dt);
  // Ring of (step, value) for cues issued within the last lead_steps steps.
  std::vector<std::pair<long, double>> issued(static_cast<std::size_t>(std::max(1L, lead_steps)), {-1L << 40, 0.0});

  physics::PendulumState s{uniform(start_rng, -cfg.start_range, cfg.start_range), 0.0, 0.0};
  double held = 0.0;  // executed on the previous sample
  double own = 0.0;   // the pilot's own previous command
  const long steps = cfg.steps();
  TrialLog log;
  log.rows.reserve(static_cast<std::size_t>(steps));
  for (long k = 0; k < steps; ++k) {
    const double t = static_cast<double>(k) * cfg.physics.dt;
    const pilots::Sample sample{t, s.theta, s.omega, held};
    TrialRow row;
    row.t = t;
    row.theta = s.theta;
    row.omega = s.omega;
    row.crash_probability = monitor.push(sample, k);
    // The pilot's window carries its own stick, not suggestions executed in its place.
    row.pilot_deflection = runner.act({t, s.theta, s.omega, own}, k);
    if (models.assistant) {
      if (k % agent_every == 0) {
        pilots::Sample seen = sample;
        if (lead_steps > 0) {
          // Roll forward over the reaction time, assuming the cues already
          // issued will be carried out on schedule and the pilot otherwise holds its stick.
          physics::PendulumState ahead = s;
          for (long i = 0; i < lead_steps && std::abs(ahead.theta) < cfg.physics.crash_bound; ++i) {
            const auto& cue = issued[static_cast<std::size_t>((k + i) % lead_steps)];
            ahead = physics::integrate(ahead, cue.first == k + i - lead_steps ? cue.second : own, cfg.physics);
          }
          seen.theta = std::clamp(ahead.theta, -cfg.physics.crash_bound, cfg.physics.crash_bound);
          seen.omega = ahead.omega;
        }
        agent_history.push_back(seen);
        agent_d = models.assistant->policy.act(pilots::build_window(agent_history, t, models.assistant->policy.window));
      }
      if (assistant::gate(row.crash_probability, s.theta, cfg.gating)) {
        twin.offer({t, agent_d});
        if (lead_steps > 0) issued[static_cast<std::size_t>(k % lead_steps)] = {k, agent_d};
        row.assistant_deflection = agent_d;
      }
    }
    const auto res = twin.resolve(row.pilot_deflection, t);
    row.executed_deflection = res.executed;
    row.executor = res.executor;
    row.deflection_class = metrics::classify_deflection(s.theta, s.omega, res.executed);
    const auto out = physics::step(s, res.executed, cfg.physics);
    row.crash_flag = out.crashed;
    if (out.crashed) {
      // Suggestions aimed at the fall are stale once the pendulum is reset.
      monitor.reset();
      twin.cancel_pending();
      std::fill(issued.begin(), issued.end(), std::pair{-1L << 40, 0.0});
    }
    s = out.state;
    held = res.executed;
    own = row.pilot_deflection;
    log.rows.push_back(row);
  }
  return log;
}

std::uint64_t trial_seed(std::uint64_t master, std::size_t pilot_index, std::size_t trial) {
  return split_seed(split_seed(master, pilot_index), trial);
}

// ---------------------------------------------------------------------------
// Experiment config

void ExperimentConfig::validate() const {
  trial.validate();
  if (trials < 1) throw ConfigError("experiment: trials must be >= 1");
  if (pilots.empty()) throw ConfigError("experiment: no pilots");
  std::vector<std::string> names;
  for (const auto& p : pilots) names.push_back(p.spec.name);
  std::sort(names.begin(), names.end());
  if (std::adjacent_find(names.begin(), names.end()) != names.end()) throw ConfigError("experiment: duplicate pilot name");
  names.clear();
  for (const auto& a : assistants) {
    if (a.name == kUnassisted) throw ConfigError("experiment: assistant name '" + kUnassisted + "' is reserved");
    names.push_back(a.name);
  }
  std::sort(names.begin(), names.end());
  if (std::adjacent_find(names.begin(), names.end()) != names.end()) {
    throw ConfigError("experiment: duplicate assistant name");
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

ExperimentConfig experiment_config_from_json_string(const std::string& text, const std::filesystem::path& base_dir) {
  ExperimentConfig c;
  try {
    const auto j = json::parse(text);
    read_opt(j, "seed", c.seed);
    read_opt(j, "trials", c.trials);
    read_opt(j, "seconds", c.trial.seconds);
    read_opt(j, "start_range", c.trial.start_range);
    read_opt(j, "suggestion_lead", c.trial.suggestion_lead);
    if (j.contains("physics")) {
      const auto& p = j.at("physics");
      read_opt(p, "k_p", c.trial.physics.k_p);
      read_opt(p, "gain", c.trial.physics.gain);
      read_opt(p, "crash_bound", c.trial.physics.crash_bound);
      read_opt(p, "dt", c.trial.physics.dt);
    }
    if (j.contains("gating")) {
      const auto& g = j.at("gating");
      read_opt(g, "prob_threshold", c.trial.gating.prob_threshold);
      read_opt(g, "inner_angle", c.trial.gating.inner_angle);
      read_opt(g, "outer_angle", c.trial.gating.outer_angle);
    }
    if (j.contains("behavior")) {
      const auto& b = j.at("behavior");
      read_opt(b, "accept_prob", c.trial.behavior.accept_prob);
      read_opt(b, "delay_base", c.trial.behavior.delay_base);
      read_opt(b, "delay_jitter", c.trial.behavior.delay_jitter);
      read_opt(b, "noise", c.trial.behavior.noise);
    }
    if (j.contains("predictor")) c.predictor_path = resolve(base_dir, j.at("predictor").get<std::string>());
    for (const auto& pj : j.at("pilots")) {
      PilotEntry e;
      e.spec.name = pj.at("name").get<std::string>();
      e.spec.kind = pilot_kind_from_string(pj.at("kind").get<std::string>());
      if (e.spec.kind == PilotKind::Sluggish) {
        const auto d = sluggish_pilot();
        e.spec.gain = d.gain;
        e.spec.noise = d.noise;
        e.spec.delay = d.delay;
        e.spec.hold = d.hold;
      }
      read_opt(pj, "gain", e.spec.gain);
      read_opt(pj, "noise", e.spec.noise);
      read_opt(pj, "delay", e.spec.delay);
      read_opt(pj, "hold", e.spec.hold);
      if (e.spec.kind == PilotKind::Network) e.policy_path = resolve(base_dir, pj.at("policy").get<std::string>());
      c.pilots.push_back(std::move(e));
    }
    if (j.contains("assistants")) {
      for (const auto& aj : j.at("assistants")) {
        c.assistants.push_back({aj.at("name").get<std::string>(), resolve(base_dir, aj.at("path").get<std::string>())});
      }
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("experiment config: ") + e.what());
  } catch (const FormatError& e) {
    throw ConfigError(std::string("experiment config: ") + e.what());
  }
  try {
    c.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(std::string("experiment config: ") + e.what());
  }
  return c;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open experiment config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return experiment_config_from_json_string(ss.str(), path.parent_path());
}

pilots::Policy clone_from_trajectories(std::span<const std::vector<pilots::Sample>> trajectories,
                                       const pilots::TwinProfile& profile, std::uint64_t seed,
                                       const CloneOptions& opts) {
  const auto window = profile.window();
  std::vector<pilots::Demonstration> demos;
  for (const auto& rows : trajectories) {
    auto d = pilots::demonstrations_from_rows(rows, window, opts.stride);
    demos.insert(demos.end(), std::make_move_iterator(d.begin()), std::make_move_iterator(d.end()));
  }
  if (demos.empty()) throw InvalidArgument("clone: trajectories too short for the twin's window");
  const auto spec = pilots::default_pilot_spec(profile.arch, window);
  rl::BcOptions bc;
  bc.lr = opts.lr;
  return {spec, rl::train_bc(spec, demos, seed, opts.epochs, bc), window};
}

pilots::Policy clone_pilot(const PilotSpec& source, const pilots::TwinProfile& profile, const TrialConfig& cfg,
                           std::uint64_t seed, const CloneOptions& opts) {
  if (opts.trials < 1) throw InvalidArgument("clone: need at least one trial");
  std::vector<std::vector<pilots::Sample>> trajectories;
  for (int i = 0; i < opts.trials; ++i) {
    const auto log = run_trial(source, {}, cfg, trial_seed(seed, 0, static_cast<std::size_t>(i)));
    auto& rows = trajectories.emplace_back();
    rows.reserve(log.rows.size());
    for (const auto& r : log.rows) rows.push_back({r.t, r.theta, r.omega, r.executed_deflection});
  }
  return clone_from_trajectories(trajectories, profile, split_seed(seed, 1), opts);
}

FaithfulClone clone_faithful(const PilotSpec& source, const pilots::TwinProfile& profile, const TrialConfig& cfg,
                             std::uint64_t seed, const FidelityOptions& fidelity, const CloneOptions& opts) {
  if (fidelity.candidates < 1 || fidelity.validation_trials < 1)
    throw InvalidArgument("clone_faithful: need at least one candidate and one validation trial");
  const auto crashes = [&](const PilotSpec& p) {
    int c = 0;
    for (int i = 0; i < fidelity.validation_trials; ++i)
      c += metrics::trial_metrics(
               run_trial(p, {}, cfg, trial_seed(fidelity.validation_seed, 0, static_cast<std::size_t>(i))))
               .crashes;
    return c;
  };
  FaithfulClone best;
  best.source_crashes = crashes(source);
  double best_err = std::numeric_limits<double>::infinity();
  for (int c = 0; c < fidelity.candidates; ++c) {
    PilotSpec twin;
    twin.name = source.name + "-twin";
    twin.kind = PilotKind::Network;
    twin.policy = clone_pilot(source, profile, cfg, seed + static_cast<std::uint64_t>(c), opts);
    const int n = crashes(twin);
    const double err = std::abs(std::log((n + 1.0) / (best.source_crashes + 1.0)));
    if (err < best_err) {
      best_err = err;
      best.policy = std::move(*twin.policy);
      best.seed = seed + static_cast<std::uint64_t>(c);
      best.clone_crashes = n;
    }
  }
  return best;
}

Experiment load_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  Experiment e;
  e.config = cfg;
  if (cfg.predictor_path) e.predictor = crashpred::load_predictor(*cfg.predictor_path);
  for (const auto& p : cfg.pilots) {
    LoadedPilot lp{p.spec, std::nullopt};
    if (p.spec.kind == PilotKind::Network) {
      try {
        lp.spec.policy = pilots::load_policy(p.policy_path);
      } catch (const Error& ex) {
        lp.error = ex.what();
      }
    }
    e.pilots.push_back(std::move(lp));
  }
  for (const auto& a : cfg.assistants) {
    LoadedAssistant la{a.name, std::nullopt, std::nullopt};
    try {
      la.model = assistant::load_assistant(a.path);
    } catch (const Error& ex) {
      la.error = ex.what();
    }
    e.assistants.push_back(std::move(la));
  }
  return e;
}

const Cell* ExperimentResult::find(const std::string& pilot, const std::string& assistant) const {
  for (const auto& c : cells) {
    if (c.pilot == pilot && c.assistant == assistant) return &c;
  }
  return nullptr;
}

namespace {

Cell run_cell(const Experiment& e, std::size_t pilot_index, const assistant::Assistant* agent,
              const std::string& agent_name, bool keep_logs) {
  const auto& lp = e.pilots[pilot_index];
  Cell cell{lp.spec.name, agent_name, {}, {}, {}, std::nullopt};
  if (lp.error) {
    cell.error = *lp.error;
    return cell;
  }
  try {
    const Models models{agent, e.predictor ? &*e.predictor : nullptr};
    std::vector<TrialLog> logs;
    for (int t = 0; t < e.config.trials; ++t) {
      logs.push_back(run_trial(lp.spec, models, e.config.trial,
                               trial_seed(e.config.seed, pilot_index, static_cast<std::size_t>(t))));
      cell.trials.push_back(metrics::trial_metrics(logs.back()));
    }
    cell.pooled = metrics::aggregate_metrics(logs);
    if (keep_logs) cell.logs = std::move(logs);
  } catch (const Error& ex) {
    cell.trials.clear();
    cell.logs.clear();
    cell.error = ex.what();
  }
  return cell;
}

Delta make_delta(const Cell& base, const Cell& cell) {
  Delta d;
  d.pilot = cell.pilot;
  d.assistant = cell.assistant;
  const auto& a = cell.pooled;
  const auto& b = base.pooled;
  d.crashes = a.crashes - b.crashes;
  d.pct_destab = a.pct_destab - b.pct_destab;
  d.pct_anticipatory = a.pct_anticipatory - b.pct_anticipatory;
  d.mean_abs_theta = a.mean_abs_theta - b.mean_abs_theta;
  d.sd_theta = a.sd_theta - b.sd_theta;
  d.mean_abs_vel = a.mean_abs_vel - b.mean_abs_vel;
  d.rms_vel = a.rms_vel - b.rms_vel;
  d.recoveries = a.recoveries - b.recoveries;
  std::vector<double> ca, cb;
  for (const auto& m : cell.trials) ca.push_back(m.crashes);
  for (const auto& m : base.trials) cb.push_back(m.crashes);
  d.crash_sign_test = metrics::sign_test(ca, cb);
  try {
    d.crash_wilcoxon = metrics::paired_wilcoxon(ca, cb);
  } catch (const InvalidArgument&) {
    // too few informative pairs: leave p = 1
  }
  return d;
}

}  // namespace

ExperimentResult run_experiment(const Experiment& e, bool keep_logs) {
  ExperimentResult r;
  for (std::size_t pi = 0; pi < e.pilots.size(); ++pi) {
    r.cells.push_back(run_cell(e, pi, nullptr, kUnassisted, keep_logs));
    const std::size_t base = r.cells.size() - 1;
    for (const auto& la : e.assistants) {
      if (la.error) {
        r.cells.push_back({e.pilots[pi].spec.name, la.name, {}, {}, {}, *la.error});
        continue;
      }
      r.cells.push_back(run_cell(e, pi, &*la.model, la.name, keep_logs));
      if (!r.cells[base].error && !r.cells.back().error) r.deltas.push_back(make_delta(r.cells[base], r.cells.back()));
    }
  }
  return r;
}

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

json metrics_json(const metrics::TrialMetrics& m) {
  return {{"crashes", m.crashes},       {"pct_destab", m.pct_destab}, {"pct_anticipatory", m.pct_anticipatory},
          {"mean_abs_theta", m.mean_abs_theta}, {"sd_theta", m.sd_theta},   {"mean_abs_vel", m.mean_abs_vel},
          {"rms_vel", m.rms_vel},       {"recoveries", m.recoveries}, {"samples", m.samples}};
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  return out;
}

}  // namespace

void write_experiment_result(const ExperimentResult& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    auto out = open_out(dir / "cells.csv");
    out << "pilot,assistant,trials,crashes,pct_destab,pct_anticipatory,mean_abs_theta,sd_theta,mean_abs_vel,rms_vel,"
           "recoveries,error\n";
    for (const auto& c : r.cells) {
      const auto& m = c.pooled;
      out << c.pilot << ',' << c.assistant << ',' << c.trials.size() << ',' << m.crashes << ',' << fmt(m.pct_destab)
          << ',' << fmt(m.pct_anticipatory) << ',' << fmt(m.mean_abs_theta) << ',' << fmt(m.sd_theta) << ','
          << fmt(m.mean_abs_vel) << ',' << fmt(m.rms_vel) << ',' << m.recoveries << ',';
      if (c.error) {
        std::string e = *c.error;
        std::replace(e.begin(), e.end(), ',', ';');
        std::replace(e.begin(), e.end(), '\n', ' ');
        out << e;
      }
      out << '\n';
    }
  }
  {
    auto out = open_out(dir / "deltas.csv");
    out << "pilot,assistant,crashes,pct_destab,pct_anticipatory,mean_abs_theta,sd_theta,mean_abs_vel,rms_vel,"
           "recoveries,sign_fewer,sign_more,sign_p,wilcoxon_w,wilcoxon_p\n";
    for (const auto& d : r.deltas) {
      out << d.pilot << ',' << d.assistant << ',' << fmt(d.crashes) << ',' << fmt(d.pct_destab) << ','
          << fmt(d.pct_anticipatory) << ',' << fmt(d.mean_abs_theta) << ',' << fmt(d.sd_theta) << ','
          << fmt(d.mean_abs_vel) << ',' << fmt(d.rms_vel) << ',' << fmt(d.recoveries) << ','
          << d.crash_sign_test.fewer << ',' << d.crash_sign_test.more << ',' << fmt(d.crash_sign_test.p_two_sided)
          << ',' << fmt(d.crash_wilcoxon.w) << ',' << fmt(d.crash_wilcoxon.p) << '\n';
    }
  }
  json summary;
  summary["cells"] = json::array();
  for (const auto& c : r.cells) {
    json cj{{"pilot", c.pilot}, {"assistant", c.assistant}};
    if (c.error) {
      cj["error"] = *c.error;
    } else {
      cj["pooled"] = metrics_json(c.pooled);
      cj["trials"] = json::array();
      for (const auto& m : c.trials) cj["trials"].push_back(metrics_json(m));
    }
    summary["cells"].push_back(cj);
  }
  summary["deltas"] = json::array();
  for (const auto& d : r.deltas) {
    summary["deltas"].push_back({{"pilot", d.pilot},
                                 {"assistant", d.assistant},
                                 {"crashes", d.crashes},
                                 {"pct_destab", d.pct_destab},
                                 {"pct_anticipatory", d.pct_anticipatory},
                                 {"mean_abs_theta", d.mean_abs_theta},
                                 {"sd_theta", d.sd_theta},
                                 {"mean_abs_vel", d.mean_abs_vel},
                                 {"rms_vel", d.rms_vel},
                                 {"recoveries", d.recoveries},
                                 {"sign_test", {{"fewer", d.crash_sign_test.fewer},
                                                {"more", d.crash_sign_test.more},
                                                {"p", d.crash_sign_test.p_two_sided}}},
                                 {"wilcoxon", {{"w", d.crash_wilcoxon.w},
                                               {"p", d.crash_wilcoxon.p},
                                               {"n", d.crash_wilcoxon.n},
                                               {"exact", d.crash_wilcoxon.exact}}}});
  }
  auto out = open_out(dir / "summary.json");
  out << summary.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Trial-log files

namespace {

const char* const kCsvHeader =
    "trial,t,theta,omega,executed_deflection,crash_probability,pilot_deflection,assistant_deflection,executor,"
    "deflection_class,crash_flag";

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream ss(line);
  while (std::getline(ss, cur, sep)) out.push_back(cur);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double parse_double(const std::string& s, const std::string& where) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw FormatError("");
    return v;
  } catch (const std::exception&) {
    throw FormatError(where + ": not a number: '" + s + "'");
  }
}

long parse_long(const std::string& s, const std::string& where) {
  try {
    std::size_t pos = 0;
    const long v = std::stol(s, &pos);
    if (pos != s.size()) throw FormatError("");
    return v;
  } catch (const std::exception&) {
    throw FormatError(where + ": not an integer: '" + s + "'");
  }
}

// Rows are appended to the log with index `trial`; trial indices must be
// contiguous and start at 0.
void place(std::vector<TrialLog>& logs, long trial, TrialRow row, const std::string& where) {
  if (trial < 0 || trial > static_cast<long>(logs.size())) throw FormatError(where + ": trial index out of order");
  if (trial == static_cast<long>(logs.size())) logs.emplace_back();
  logs[static_cast<std::size_t>(trial)].rows.push_back(std::move(row));
}

}  // namespace

void write_trials_csv(std::span<const TrialLog> logs, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << kCsvHeader << '\n';
  for (std::size_t i = 0; i < logs.size(); ++i) {
    for (const auto& r : logs[i].rows) {
      out << i << ',' << fmt(r.t) << ',' << fmt(r.theta) << ',' << fmt(r.omega) << ',' << fmt(r.executed_deflection)
          << ',' << fmt(r.crash_probability) << ',' << fmt(r.pilot_deflection) << ','
          << (r.assistant_deflection ? fmt(*r.assistant_deflection) : "") << ',' << to_string(r.executor) << ','
          << to_string(r.deflection_class) << ',' << (r.crash_flag ? 1 : 0) << '\n';
    }
  }
  if (!out) throw Error("write failed: " + path.string());
}

std::vector<TrialLog> read_trials_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || trim(line) != kCsvHeader) throw FormatError(path.string() + ": bad trial CSV header");
  std::vector<TrialLog> logs;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    const auto f = split(trim(line), ',');
    if (f.size() != 11) throw FormatError(where + ": expected 11 fields");
    TrialRow r;
    r.t = parse_double(f[1], where);
    r.theta = parse_double(f[2], where);
    r.omega = parse_double(f[3], where);
    r.executed_deflection = parse_double(f[4], where);
    r.crash_probability = parse_double(f[5], where);
    r.pilot_deflection = parse_double(f[6], where);
    if (!f[7].empty()) r.assistant_deflection = parse_double(f[7], where);
    r.executor = executor_from_string(f[8]);
    r.deflection_class = deflection_class_from_string(f[9]);
    if (f[10] != "0" && f[10] != "1") throw FormatError(where + ": crash_flag must be 0 or 1");
    r.crash_flag = f[10] == "1";
    place(logs, parse_long(f[0], where), std::move(r), where);
  }
  return logs;
}

void write_trials_jsonl(std::span<const TrialLog> logs, const std::filesystem::path& path) {
  auto out = open_out(path);
  for (std::size_t i = 0; i < logs.size(); ++i) {
    for (const auto& r : logs[i].rows) {
      json j{{"trial", i},
             {"t", r.t},
             {"theta", r.theta},
             {"omega", r.omega},
             {"executed_deflection", r.executed_deflection},
             {"crash_probability", r.crash_probability},
             {"pilot_deflection", r.pilot_deflection}};
      if (r.assistant_deflection) j["assistant_deflection"] = *r.assistant_deflection;
      j["executor"] = to_string(r.executor);
      j["deflection_class"] = to_string(r.deflection_class);
      j["crash_flag"] = r.crash_flag;
      out << j.dump() << '\n';
    }
  }
  if (!out) throw Error("write failed: " + path.string());
}

std::vector<TrialLog> read_trials_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<TrialLog> logs;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    try {
      const auto j = json::parse(line);
      TrialRow r;
      r.t = j.at("t").get<double>();
      r.theta = j.at("theta").get<double>();
      r.omega = j.at("omega").get<double>();
      r.executed_deflection = j.at("executed_deflection").get<double>();
      r.crash_probability = j.at("crash_probability").get<double>();
      r.pilot_deflection = j.at("pilot_deflection").get<double>();
      if (j.contains("assistant_deflection")) r.assistant_deflection = j.at("assistant_deflection").get<double>();
      r.executor = executor_from_string(j.at("executor").get<std::string>());
      r.deflection_class = deflection_class_from_string(j.at("deflection_class").get<std::string>());
      r.crash_flag = j.at("crash_flag").get<bool>();
      place(logs, j.at("trial").get<long>(), std::move(r), where);
    } catch (const json::exception& e) {
      throw FormatError(where + ": " + e.what());
    }
  }
  return logs;
}

void write_trials(std::span<const TrialLog> logs, const std::filesystem::path& path) {
  if (path.extension() == ".csv") return write_trials_csv(logs, path);
  if (path.extension() == ".jsonl") return write_trials_jsonl(logs, path);
  throw InvalidArgument("trial file must end in .csv or .jsonl: " + path.string());
}

std::vector<TrialLog> read_trials(const std::filesystem::path& path) {
  if (path.extension() == ".csv") return read_trials_csv(path);
  if (path.extension() == ".jsonl") return read_trials_jsonl(path);
  throw InvalidArgument("trial file must end in .csv or .jsonl: " + path.string());
}

// ---------------------------------------------------------------------------
// Human recordings

HumanRecording ingest_human_csv(const std::filesystem::path& path, double crash_bound) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path.string() + ": empty file");
  {
    auto h = split(trim(line), ',');
    for (auto& x : h) x = trim(x);
    if (h != std::vector<std::string>{"t", "theta", "omega", "deflection"}) {
      throw FormatError(path.string() + ": header must be t,theta,omega,deflection");
    }
  }
  HumanRecording rec;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    const auto f = split(trim(line), ',');
    if (f.size() != 4) throw FormatError(where + ": expected 4 fields");
    pilots::Sample s{parse_double(trim(f[0]), where), parse_double(trim(f[1]), where), parse_double(trim(f[2]), where),
                     parse_double(trim(f[3]), where)};
    if (!std::isfinite(s.t) || !std::isfinite(s.theta) || !std::isfinite(s.omega) || !std::isfinite(s.deflection)) {
      throw FormatError(where + ": non-finite value");
    }
    if (std::abs(s.deflection) > 1.0) throw FormatError(where + ": |deflection| > 1");
    if (std::abs(s.theta) > crash_bound) throw FormatError(where + ": |theta| beyond the crash bound");
    if (!rec.rows.empty() && !(s.t > rec.rows.back().t)) throw FormatError(where + ": time is not increasing");
    rec.rows.push_back(s);
  }
  if (rec.rows.size() < 2) throw FormatError(path.string() + ": need at least two samples");

  std::vector<double> gaps;
  for (std::size_t i = 1; i < rec.rows.size(); ++i) gaps.push_back(rec.rows[i].t - rec.rows[i - 1].t);
  std::nth_element(gaps.begin(), gaps.begin() + static_cast<long>(gaps.size() / 2), gaps.end());
  const double measured_hz = 1.0 / gaps[gaps.size() / 2];

  auto sidecar = path;
  sidecar.replace_extension(".json");
  rec.sample_hz = measured_hz;
  if (std::filesystem::exists(sidecar)) {
    std::ifstream sj(sidecar);
    try {
      const auto j = json::parse(sj);
      read_opt(j, "subject", rec.subject);
      read_opt(j, "session", rec.session);
      read_opt(j, "trial", rec.trial);
      if (j.contains("sample_hz")) {
        const double declared = j.at("sample_hz").get<double>();
        if (!(declared > 0.0) || std::abs(measured_hz - declared) > 0.01 * declared) {
          throw FormatError(path.string() + ": sample spacing gives " + fmt(measured_hz) + " Hz but the sidecar says " +
                            fmt(declared));
        }
        rec.sample_hz = declared;
      }
    } catch (const json::exception& e) {
      throw FormatError(sidecar.string() + ": " + e.what());
    }
  }
  return rec;
}

std::vector<pilots::Sample> resample(std::span<const pilots::Sample> rows, double target_hz) {
  if (!(target_hz > 0.0)) throw InvalidArgument("resample: rate must be positive");
  if (rows.empty()) return {};
  std::vector<pilots::Sample> out;
  const double t0 = rows.front().t;
  const double span = rows.back().t - t0;
  const auto n = static_cast<std::size_t>(std::floor(span * target_hz + 1e-9)) + 1;
  out.reserve(n);
  std::size_t j = 0;
  for (std::size_t k = 0; k < n; ++k) {
    const double t = t0 + static_cast<double>(k) / target_hz;
    while (j + 1 < rows.size() && rows[j + 1].t <= t + 1e-12) ++j;
    const auto& a = rows[j];
    pilots::Sample s{t, a.theta, a.omega, a.deflection};
    if (j + 1 < rows.size() && t > a.t) {
      const auto& b = rows[j + 1];
      const double w = (t - a.t) / (b.t - a.t);
      s.theta = a.theta + w * (b.theta - a.theta);
      s.omega = a.omega + w * (b.omega - a.omega);
    }
    out.push_back(s);
  }
  if (rows.back().t > out.back().t + 1e-9) out.push_back(rows.back());
  return out;
}

TrialLog to_trial_log(std::span<const pilots::Sample> rows) {
  TrialLog log;
  log.rows.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& s = rows[i];
    TrialRow r;
    r.t = s.t;
    r.theta = s.theta;
    r.omega = s.omega;
    r.executed_deflection = s.deflection;
    r.pilot_deflection = s.deflection;
    r.deflection_class = metrics::classify_deflection(s.theta, s.omega, s.deflection);
    // Recordings carry no crash flag; a crash shows up as a jump from near the
    // boundary back to the DOB.
    if (i + 1 < rows.size()) r.crash_flag = std::abs(s.theta) >= 45.0 && std::abs(rows[i + 1].theta) < 5.0;
    log.rows.push_back(r);
  }
  return log;
}

}  // namespace sdassist::harness
