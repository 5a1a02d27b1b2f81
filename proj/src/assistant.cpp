#include "sdassist/assistant.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "sdassist/metrics.hpp"

namespace sdassist::assistant {

void GatingPolicy::validate() const {
  if (!(prob_threshold >= 0.0 && prob_threshold <= 1.0)) throw InvalidArgument("gating: threshold outside [0,1]");
  if (!(inner_angle > 0.0 && inner_angle < outer_angle)) {
    throw InvalidArgument("gating: need 0 < inner_angle < outer_angle");
  }
}

bool gate(double crash_prob, double theta, const GatingPolicy& policy) {
  const double a = std::abs(theta);
  return (crash_prob > policy.prob_threshold && a > policy.inner_angle) || a > policy.outer_angle;
}

std::string to_string(AssistantKind k) {
  switch (k) {
    case AssistantKind::DDPG: return "ddpg";
    case AssistantKind::SAC: return "sac";
    case AssistantKind::AIRL: return "airl";
    case AssistantKind::DL: return "dl";
  }
  return "?";
}

AssistantKind assistant_kind_from_string(const std::string& s) {
  if (s == "ddpg") return AssistantKind::DDPG;
  if (s == "sac") return AssistantKind::SAC;
  if (s == "airl") return AssistantKind::AIRL;
  if (s == "dl") return AssistantKind::DL;
  throw FormatError("unknown assistant kind: " + s);
}

namespace {

// MLP blocks alternate W, b; every weight block but the head's gives a hidden width.
nnet::NetworkSpec sac_spec_of(const nnet::Parameters& p) {
  std::vector<int> hidden;
  const auto& sh = p.shapes();
  for (std::size_t i = 0; i + 2 < sh.size(); i += 2) hidden.push_back(static_cast<int>(sh[i].rows));
  return {nnet::Arch::MLP, 2, hidden, 2, nnet::Activation::Linear};
}

}  // namespace

void save_assistant(const Assistant& a, const std::filesystem::path& path) {
  nlohmann::json j;
  j["version"] = 1;
  j["kind"] = to_string(a.kind);
  j["policy"] = nlohmann::json::parse(pilots::policy_to_json_string(a.policy));
  if (a.sac_actor) {
    j["sac_actor"] = nlohmann::json::parse(nnet::to_json_string(sac_spec_of(*a.sac_actor), *a.sac_actor));
  }
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump() << '\n';
}

Assistant load_assistant(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ModelLoadError("cannot open assistant file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    const auto j = nlohmann::json::parse(ss.str());
    if (j.at("version").get<int>() != 1) throw FormatError("unsupported assistant version");
    Assistant a;
    a.kind = assistant_kind_from_string(j.at("kind").get<std::string>());
    a.policy = pilots::policy_from_json_string(j.at("policy").dump());
    if (j.contains("sac_actor")) a.sac_actor = nnet::from_json_string(j.at("sac_actor").dump()).params;
    return a;
  } catch (const nlohmann::json::exception& e) {
    throw ModelLoadError(path.string() + ": " + e.what());
  } catch (const Error& e) {
    throw ModelLoadError(path.string() + ": " + e.what());
  }
}

Suggestion suggest(const pilots::Policy& policy, const pilots::ObservationWindow& window, double t_now) {
  return {t_now, policy.act(window)};
}

bool DisagreementEpisode::operator==(const DisagreementEpisode& o) const {
  return t == o.t && window.thetas == o.window.thetas && window.omegas == o.window.omegas &&
         window.deflections == o.window.deflections && agent_deflection == o.agent_deflection &&
         human_deflection == o.human_deflection;
}

std::vector<DisagreementEpisode> extract_disagreements(const TrialLog& log, const pilots::WindowConfig& window) {
  window.validate();
  const bool has_agent = std::any_of(log.rows.begin(), log.rows.end(),
                                     [](const TrialRow& r) { return r.assistant_deflection.has_value(); });
  if (!has_agent) throw InvalidArgument("extract_disagreements: log has no assistant deflection stream");
  std::vector<pilots::Sample> history;
  history.reserve(log.rows.size());
  std::vector<DisagreementEpisode> out;
  for (std::size_t i = 0; i < log.rows.size(); ++i) {
    const auto& r = log.rows[i];
    history.push_back({r.t, r.theta, r.omega, i > 0 ? log.rows[i - 1].executed_deflection : 0.0});
    if (!r.assistant_deflection) continue;
    const double agent = *r.assistant_deflection;
    const double human = r.pilot_deflection;
    if (std::abs(agent) < metrics::kDeadBand || std::abs(human) < metrics::kDeadBand) continue;
    if (sign_of(agent) == sign_of(human)) continue;
    out.push_back({r.t, pilots::build_window(history, r.t, window), agent, human});
  }
  return out;
}

void write_episodes(std::span<const DisagreementEpisode> episodes, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& e : episodes) {
    nlohmann::json j{{"t", e.t},
                     {"thetas", e.window.thetas},
                     {"omegas", e.window.omegas},
                     {"agent_d", e.agent_deflection},
                     {"human_d", e.human_deflection}};
    if (e.window.deflections) j["deflections"] = *e.window.deflections;
    out << j.dump() << '\n';
  }
}

std::vector<DisagreementEpisode> read_episodes(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<DisagreementEpisode> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      DisagreementEpisode e;
      e.t = j.at("t").get<double>();
      e.window.thetas = j.at("thetas").get<std::vector<double>>();
      e.window.omegas = j.at("omegas").get<std::vector<double>>();
      if (j.contains("deflections")) e.window.deflections = j.at("deflections").get<std::vector<double>>();
      e.agent_deflection = j.at("agent_d").get<double>();
      e.human_deflection = j.at("human_d").get<double>();
      out.push_back(std::move(e));
    } catch (const nlohmann::json::exception& ex) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + ex.what());
    }
  }
  return out;
}

Assistant finetune(const Assistant& a, std::span<const DisagreementEpisode> episodes, std::uint64_t seed,
                   const FinetuneOptions& opts) {
  if (episodes.empty()) throw InvalidArgument("finetune: no disagreement episodes");
  Assistant out = a;
  if (a.kind == AssistantKind::AIRL) {
    std::vector<rl::ExpertSample> expert;
    expert.reserve(episodes.size());
    for (const auto& e : episodes) {
      if (e.window.thetas.empty()) throw ShapeError("finetune: empty episode window");
      expert.push_back({e.window.thetas.back(), e.window.omegas.back(), e.human_deflection});
    }
    auto algo = opts.algo;
    algo.lr = opts.lr;
    algo.learning_starts = 0;
    algo.actor_hidden = a.policy.spec.hidden_dims;
    rl::TrainOptions topts;
    topts.initial_sac_actor = a.sac_actor ? *a.sac_actor : rl::sac_from_greedy(a.policy, algo, split_seed(seed, 1));
    auto r = rl::train_airl(opts.env, algo, expert, seed, opts.airl_iterations, topts);
    out.policy = std::move(r.generator.actor);
    out.sac_actor = std::move(r.sac_actor);
    return out;
  }
  std::vector<pilots::Demonstration> demos;
  demos.reserve(episodes.size());
  for (const auto& e : episodes) demos.push_back({e.window, e.human_deflection});
  rl::BcOptions bc;
  bc.lr = opts.lr;
  bc.batch = opts.batch;
  bc.initial = a.policy.params;
  out.policy.params = rl::train_bc(a.policy.spec, demos, seed, opts.epochs, bc);
  return out;
}

}  // namespace sdassist::assistant
