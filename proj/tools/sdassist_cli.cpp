// sdassist: training, simulation, experiments, metrics, ingestion and the live
// session server. Every subcommand reads one JSON config (see README) and a
// --seed. Exit codes: 0 ok, 1 other failure, 2 config error, 3 model-load error.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "sdassist/harness.hpp"
#include "sdassist/liveserver.hpp"

using namespace sdassist;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitModel = 3;

json read_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

// Typed lookup that turns missing/mistyped keys into ConfigError.
template <typename T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

// ---------------------------------------------------------------------------

int train_rl(const fs::path& config, std::uint64_t seed, const fs::path& out) {
  const auto j = read_config(config);
  rl::EnvConfig env;
  env.episode_seconds = get_or(j, "episode_seconds", env.episode_seconds);
  rl::AlgoConfig algo;
  const auto name = get_or<std::string>(j, "algo", "ddpg");
  algo.actor_hidden = get_or(j, "actor_hidden", algo.actor_hidden);
  algo.critic_hidden = get_or(j, "critic_hidden", algo.critic_hidden);
  algo.lr = get_or(j, "lr", algo.lr);
  algo.gamma = get_or(j, "gamma", algo.gamma);
  algo.tau = get_or(j, "tau", algo.tau);
  algo.batch = get_or(j, "batch", algo.batch);
  algo.buffer_capacity = get_or(j, "buffer_capacity", algo.buffer_capacity);
  algo.exploration_sigma = get_or(j, "exploration_sigma", algo.exploration_sigma);
  algo.centering_weight = get_or(j, "centering_weight", algo.centering_weight);
  algo.reward_scale = get_or(j, "reward_scale", algo.reward_scale);
  const long steps = get_or(j, "steps", 60000L);
  rl::TrainOptions opts;
  opts.checkpoint_every = get_or(j, "checkpoint_every", 5000L);
  try {
    env.validate();
    algo.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  if (steps <= 0) throw ConfigError("steps must be positive");

  assistant::Assistant a;
  rl::TrainResult result;
  if (name == "ddpg") {
    algo.algo = rl::Algo::DDPG;
    a.kind = assistant::AssistantKind::DDPG;
    result = rl::train_ddpg(env, algo, seed, steps, opts);
  } else if (name == "sac") {
    algo.algo = rl::Algo::SAC;
    a.kind = assistant::AssistantKind::SAC;
    result = rl::train_sac(env, algo, seed, steps, opts);
  } else if (name == "airl") {
    algo.algo = rl::Algo::AIRL;
    a.kind = assistant::AssistantKind::AIRL;
    const auto airl = j.value("airl", json::object());
    algo.airl_steps_per_iteration = get_or(airl, "steps_per_iteration", algo.airl_steps_per_iteration);
    const auto expert_n = get_or<std::size_t>(airl, "expert_samples", 20000);
    const int iterations = get_or(airl, "iterations", static_cast<int>(steps / static_cast<long>(algo.airl_steps_per_iteration)));
    const auto expert = rl::collect_expert(
        env, [](double th, double om, Rng&) { return rl::pd_expert(th, om); }, split_seed(seed, 1), expert_n);
    auto r = rl::train_airl(env, algo, expert, seed, iterations, opts);
    a.sac_actor = r.sac_actor;
    result = std::move(r.generator);
  } else {
    throw ConfigError("unknown algo '" + name + "' (ddpg, sac, airl)");
  }
  a.policy = result.actor;
  ensure_parent(out);
  assistant::save_assistant(a, out);
  rl::write_training_log(result.log, fs::path(out).replace_extension(".training.csv"));

  const std::vector<std::uint64_t> seeds{1, 2, 3};
  const auto ev = rl::evaluate(a.policy, env, seeds);
  std::cout << json{{"algo", name},
                    {"steps", steps},
                    {"selected_step", result.selected_step},
                    {"eval_crashes", ev.crashes},
                    {"eval_mean_abs_theta", ev.mean_abs_theta}}
                   .dump()
            << '\n';
  return 0;
}

pilots::TwinProfile profile_from(const json& j) {
  pilots::TwinProfile p;
  if (j.contains("proficiency")) {
    const auto source = pilots::source_from_string(get_or<std::string>(j, "source", "MARS"));
    p = pilots::exemplar(pilots::proficiency_from_string(j.at("proficiency").get<std::string>()), source);
  }
  if (j.contains("arch")) p.arch = nnet::arch_from_string(j.at("arch").get<std::string>());
  p.win_size = get_or(j, "win_size", p.win_size);
  p.future = get_or(j, "future", p.future);
  if (!(p.win_size > 0.0)) throw ConfigError("twin profile needs a positive win_size");
  return p;
}

int train_pilot(const fs::path& config, std::uint64_t seed, const fs::path& out) {
  const auto j = read_config(config);
  pilots::TwinProfile profile;
  harness::CloneOptions opts;
  try {
    profile = profile_from(j.value("profile", json::object()));
  } catch (const FormatError& e) {
    throw ConfigError(e.what());
  }
  opts.trials = get_or(j, "trials", opts.trials);
  opts.stride = get_or(j, "stride", opts.stride);
  opts.epochs = get_or(j, "epochs", opts.epochs);
  opts.lr = get_or(j, "lr", opts.lr);
  const auto from = get_or<std::string>(j, "from", "sluggish");

  pilots::Policy policy;
  if (from == "recordings") {
    std::vector<std::vector<pilots::Sample>> trajectories;
    for (const auto& p : get_or(j, "recordings", std::vector<std::string>{})) {
      const auto rec = harness::ingest_human_csv(resolve(config.parent_path(), p));
      trajectories.push_back(harness::resample(rec.rows, 200.0));
    }
    if (trajectories.empty()) throw ConfigError("from=recordings needs a non-empty 'recordings' list");
    policy = harness::clone_from_trajectories(trajectories, profile, seed, opts);
  } else {
    harness::PilotSpec source;
    if (from == "sluggish") {
      source = harness::sluggish_pilot();
    } else if (from == "pd") {
      source.name = "pd";
      source.kind = harness::PilotKind::PD;
    } else {
      throw ConfigError("unknown pilot source '" + from + "' (sluggish, pd, recordings)");
    }
    const auto pj = j.value("pilot", json::object());
    source.gain = get_or(pj, "gain", source.gain);
    source.noise = get_or(pj, "noise", source.noise);
    source.delay = get_or(pj, "delay", source.delay);
    source.hold = get_or(pj, "hold", source.hold);
    harness::TrialConfig cfg;
    cfg.seconds = get_or(j, "trial_seconds", cfg.seconds);
    try {
      source.validate();
      cfg.validate();
    } catch (const Error& e) {
      throw ConfigError(e.what());
    }
    policy = harness::clone_pilot(source, profile, cfg, seed, opts);
  }
  ensure_parent(out);
  pilots::save_policy(policy, out);
  std::cout << json{{"arch", nnet::to_string(profile.arch)}, {"win_size", profile.win_size}, {"future", profile.future}}
                   .dump()
            << '\n';
  return 0;
}

int train_crashpred(const fs::path& config, std::uint64_t seed, const fs::path& out) {
  const auto j = read_config(config);
  crashpred::CrashPredictorSpec spec;
  const auto sj = j.value("spec", json::object());
  spec.layers = get_or(sj, "layers", spec.layers);
  spec.hidden = get_or(sj, "hidden", spec.hidden);
  spec.window_seconds = get_or(sj, "window_seconds", spec.window_seconds);
  spec.sample_hz = get_or(sj, "sample_hz", spec.sample_hz);
  spec.horizon = get_or(sj, "horizon", spec.horizon);
  spec.stride = get_or(sj, "stride", spec.stride);
  crashpred::CrashTrainOptions opts;
  opts.epochs = get_or(j, "epochs", opts.epochs);
  opts.lr = get_or(j, "lr", opts.lr);
  opts.batch = get_or(j, "batch", opts.batch);
  opts.holdout_fraction = get_or(j, "holdout_fraction", opts.holdout_fraction);
  try {
    spec.validate();
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }

  std::vector<TrialLog> logs;
  for (const auto& p : get_or(j, "logs", std::vector<std::string>{})) {
    auto more = harness::read_trials(resolve(config.parent_path(), p));
    logs.insert(logs.end(), more.begin(), more.end());
  }
  if (logs.empty() || get_or(j, "synthetic", false)) {
    crashpred::CorpusOptions corpus;
    const auto cj = j.value("corpus", json::object());
    corpus.trials_per_controller = get_or(cj, "trials_per_controller", corpus.trials_per_controller);
    corpus.seconds = get_or(cj, "seconds", corpus.seconds);
    auto more = crashpred::synthetic_corpus({}, split_seed(seed, 1), corpus);
    logs.insert(logs.end(), more.begin(), more.end());
  }
  std::vector<crashpred::CrashWindowSample> samples;
  for (std::size_t i = 0; i < logs.size(); ++i) {
    auto w = crashpred::label_windows(logs[i], spec, i);
    samples.insert(samples.end(), std::make_move_iterator(w.begin()), std::make_move_iterator(w.end()));
  }
  const auto r = crashpred::train_crash_predictor(spec, samples, seed, opts);
  ensure_parent(out);
  crashpred::save_predictor({spec, r.params}, out);
  std::cout << json{{"auc", r.report.auc},
                    {"mean_prob_positive", r.report.mean_prob_positive},
                    {"mean_prob_negative", r.report.mean_prob_negative},
                    {"tpr_at_threshold", r.report.tpr_at_threshold},
                    {"fpr_at_threshold", r.report.fpr_at_threshold},
                    {"holdout_positive", r.report.holdout_positive},
                    {"holdout_negative", r.report.holdout_negative}}
                   .dump()
            << '\n';
  return 0;
}

harness::Experiment experiment_for(const fs::path& config, std::optional<std::uint64_t> seed) {
  auto cfg = harness::load_experiment_config(config);
  if (seed) cfg.seed = *seed;
  return harness::load_experiment(cfg);
}

void require_models(const harness::Experiment& e) {
  for (const auto& p : e.pilots)
    if (p.error) throw ModelLoadError("pilot " + p.spec.name + ": " + *p.error);
  for (const auto& a : e.assistants)
    if (a.error) throw ModelLoadError("assistant " + a.name + ": " + *a.error);
}

int simulate(const fs::path& config, std::optional<std::uint64_t> seed, const fs::path& out) {
  const auto e = experiment_for(config, seed);
  require_models(e);
  const auto r = harness::run_experiment(e, true);
  std::vector<TrialLog> logs;
  for (const auto& c : r.cells) logs.insert(logs.end(), c.logs.begin(), c.logs.end());
  ensure_parent(out);
  harness::write_trials(logs, out);
  for (const auto& c : r.cells) {
    std::printf("%s / %s: %zu trials, %d crashes\n", c.pilot.c_str(), c.assistant.c_str(), c.trials.size(),
                c.pooled.crashes);
  }
  return 0;
}

int experiment(const fs::path& config, std::optional<std::uint64_t> seed, const fs::path& out) {
  const auto e = experiment_for(config, seed);
  const auto r = harness::run_experiment(e, false);
  harness::write_experiment_result(r, out);
  for (const auto& c : r.cells) {
    if (c.error) std::fprintf(stderr, "cell %s / %s failed: %s\n", c.pilot.c_str(), c.assistant.c_str(), c.error->c_str());
  }
  for (const auto& d : r.deltas) {
    std::printf("%s + %s: crashes %+g (sign test p=%.3g)\n", d.pilot.c_str(), d.assistant.c_str(), d.crashes,
                d.crash_sign_test.p_two_sided);
  }
  return 0;
}

json metrics_json(const metrics::TrialMetrics& m) {
  return {{"crashes", m.crashes},     {"pct_destab", m.pct_destab},       {"pct_anticipatory", m.pct_anticipatory},
          {"mean_abs_theta", m.mean_abs_theta}, {"sd_theta", m.sd_theta}, {"mean_abs_vel", m.mean_abs_vel},
          {"rms_vel", m.rms_vel},     {"recoveries", m.recoveries},       {"samples", m.samples}};
}

int metrics_cmd(const fs::path& config, const fs::path& out) {
  const auto j = read_config(config);
  std::vector<TrialLog> logs;
  for (const auto& p : get_or(j, "logs", std::vector<std::string>{})) {
    auto more = harness::read_trials(resolve(config.parent_path(), p));
    logs.insert(logs.end(), more.begin(), more.end());
  }
  if (logs.empty()) throw ConfigError("metrics: 'logs' must name at least one non-empty log file");
  const double bin = get_or(j, "bin_width", 5.0);
  if (!(bin > 0.0)) throw ConfigError("metrics: bin_width must be positive");
  fs::create_directories(out);

  std::vector<metrics::TrialMetrics> per_trial;
  double max_rec = 0.0, max_crash = 0.0;
  for (const auto& l : logs) {
    per_trial.push_back(metrics::trial_metrics(l));
    max_rec = std::max(max_rec, static_cast<double>(per_trial.back().recoveries));
    max_crash = std::max(max_crash, static_cast<double>(per_trial.back().crashes));
  }
  {
    std::ofstream csv(out / "trials.csv");
    csv << "trial,crashes,pct_destab,pct_anticipatory,mean_abs_theta,sd_theta,mean_abs_vel,rms_vel,recoveries,score\n";
    for (std::size_t i = 0; i < per_trial.size(); ++i) {
      const auto& m = per_trial[i];
      char line[512];
      std::snprintf(line, sizeof line, "%zu,%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%d,%.17g\n", i, m.crashes,
                    m.pct_destab, m.pct_anticipatory, m.mean_abs_theta, m.sd_theta, m.mean_abs_vel, m.rms_vel,
                    m.recoveries, metrics::score(metrics::score_inputs(m, max_rec, max_crash)));
      csv << line;
    }
  }
  {
    std::ofstream csv(out / "equiprobability.csv");
    csv << "lo,hi,count,p_destab,p_anticipatory,p_corrective\n";
    for (const auto& b : metrics::equiprobability_curve(logs, bin)) {
      char line[256];
      std::snprintf(line, sizeof line, "%g,%g,%zu,%.17g,%.17g,%.17g\n", b.lo, b.hi, b.count, b.p_destab,
                    b.p_anticipatory, b.p_corrective);
      csv << line;
    }
  }
  json summary{{"trials", logs.size()}, {"pooled", metrics_json(metrics::aggregate_metrics(logs))}};
  std::ofstream(out / "summary.json") << summary.dump(2) << '\n';
  std::cout << summary["pooled"].dump() << '\n';
  return 0;
}

int ingest(const fs::path& config, const fs::path& out) {
  const auto j = read_config(config);
  const double hz = get_or(j, "resample_hz", 200.0);
  const double bound = get_or(j, "crash_bound", 60.0);
  if (!(hz > 0.0)) throw ConfigError("ingest: resample_hz must be positive");
  std::vector<TrialLog> logs;
  for (const auto& p : get_or(j, "recordings", std::vector<std::string>{})) {
    const auto rec = harness::ingest_human_csv(resolve(config.parent_path(), p), bound);
    const auto rows = rec.sample_hz == hz ? rec.rows : harness::resample(rec.rows, hz);
    logs.push_back(harness::to_trial_log(rows));
    std::printf("%s: subject %s, %zu rows at %g Hz -> %zu rows\n", p.c_str(), rec.subject.c_str(), rec.rows.size(),
                rec.sample_hz, rows.size());
  }
  if (logs.empty()) throw ConfigError("ingest: 'recordings' must list at least one file");
  ensure_parent(out);
  harness::write_trials(logs, out);
  return 0;
}

int serve(const fs::path& script_path, unsigned short port, std::uint64_t seed, const fs::path& out) {
  const auto file = liveserver::load_script(script_path);
  const auto models = liveserver::load_models(file);
  liveserver::ServerOptions opts;
  opts.port = port;
  opts.seed = seed;
  liveserver::Server server(file.script, models, opts);
  std::printf("listening on 127.0.0.1:%u\n", static_cast<unsigned>(server.port()));
  std::fflush(stdout);
  const auto record = server.run();
  const bool verified = liveserver::verify_replay(record, models);
  liveserver::record_session(record, out, verified);
  const auto& st = server.stats();
  std::printf("session %s: %zu trials, %zu episodes, replay %s, max lag %.1f ms, frames %zu sent / %zu dropped\n",
              record.aborted ? ("aborted (" + record.abort_reason + ")").c_str() : "complete", record.trials.size(),
              record.episodes.size(), verified ? "verified" : "MISMATCH", st.max_lag * 1e3, st.frames_sent,
              st.frames_dropped);
  return verified ? 0 : kExitFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spatial-disorientation assistance: training, simulation and live sessions"};
  app.require_subcommand(1);

  fs::path config, out;
  std::uint64_t seed = 1;
  auto add_common = [&](CLI::App* sub, const std::string& out_help) {
    sub->add_option("config", config, "JSON config file")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "Master seed");
    sub->add_option("--out,-o", out, out_help)->required();
  };

  auto* rl_cmd = app.add_subcommand("train-rl", "Train a DDPG, SAC or AIRL assistant");
  add_common(rl_cmd, "Assistant weights (JSON)");
  auto* pilot_cmd = app.add_subcommand("train-pilot", "Behavior-clone a digital twin");
  add_common(pilot_cmd, "Pilot policy (JSON)");
  auto* crash_cmd = app.add_subcommand("train-crashpred", "Train the crash predictor");
  add_common(crash_cmd, "Predictor weights (JSON)");
  auto* sim_cmd = app.add_subcommand("simulate", "Run an experiment config and write every trial log");
  add_common(sim_cmd, "Trial log file (.csv or .jsonl)");
  auto* exp_cmd = app.add_subcommand("experiment", "Run the pilot x assistant matrix and write metrics and deltas");
  add_common(exp_cmd, "Output directory");
  auto* met_cmd = app.add_subcommand("metrics", "Metrics and equiprobability curves for trial logs");
  add_common(met_cmd, "Output directory");
  auto* ing_cmd = app.add_subcommand("ingest", "Validate and resample human recordings into trial logs");
  add_common(ing_cmd, "Trial log file (.csv or .jsonl)");

  fs::path script;
  unsigned short port = 8765;
  auto* serve_cmd = app.add_subcommand("serve", "Run one live session for a websocket client");
  serve_cmd->add_option("--script", script, "Session script (JSON)")->required()->check(CLI::ExistingFile);
  serve_cmd->add_option("--port", port, "TCP port on 127.0.0.1 (0 picks one)");
  serve_cmd->add_option("--seed", seed, "Session seed");
  serve_cmd->add_option("--out,-o", out, "Session record directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  const auto seed_given = [&](CLI::App* sub) -> std::optional<std::uint64_t> {
    if (sub->count("--seed")) return seed;
    return std::nullopt;
  };

  try {
    if (*rl_cmd) return train_rl(config, seed, out);
    if (*pilot_cmd) return train_pilot(config, seed, out);
    if (*crash_cmd) return train_crashpred(config, seed, out);
    if (*sim_cmd) return simulate(config, seed_given(sim_cmd), out);
    if (*exp_cmd) return experiment(config, seed_given(exp_cmd), out);
    if (*met_cmd) return metrics_cmd(config, out);
    if (*ing_cmd) return ingest(config, out);
    if (*serve_cmd) return serve(script, port, seed, out);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const ModelLoadError& e) {
    std::fprintf(stderr, "model load error: %s\n", e.what());
    return kExitModel;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitFailure;
  }
  return kExitFailure;
}
