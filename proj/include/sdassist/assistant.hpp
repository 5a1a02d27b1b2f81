#pragma once

// Suggestion gating, suggestion generation, disagreement extraction and
// human-in-the-loop fine-tuning.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sdassist/pilots.hpp"
#include "sdassist/rl.hpp"
#include "sdassist/trial_log.hpp"

namespace sdassist::assistant {

struct GatingPolicy {
  double prob_threshold = 0.8;
  double inner_angle = 12.0;
  double outer_angle = 15.0;

  void validate() const;
};

// (p > threshold and |theta| > inner) or |theta| > outer
bool gate(double crash_prob, double theta, const GatingPolicy& policy = {});

enum class AssistantKind { DDPG, SAC, AIRL, DL };
std::string to_string(AssistantKind k);
AssistantKind assistant_kind_from_string(const std::string& s);

struct Assistant {
  AssistantKind kind = AssistantKind::DDPG;
  pilots::Policy policy;
  // AIRL: the full stochastic actor, carried so later AIRL phases resume from it.
  std::optional<nnet::Parameters> sac_actor;
};

void save_assistant(const Assistant& a, const std::filesystem::path& path);
Assistant load_assistant(const std::filesystem::path& path);

Suggestion suggest(const pilots::Policy& policy, const pilots::ObservationWindow& window, double t_now);

struct DisagreementEpisode {
  double t = 0.0;
  pilots::ObservationWindow window;
  double agent_deflection = 0.0;
  double human_deflection = 0.0;

  bool operator==(const DisagreementEpisode& o) const;
};

// One episode per row where the assistant and pilot deflections both clear
// the dead band with opposite signs. Windows are rebuilt from the log with `window`.
std::vector<DisagreementEpisode> extract_disagreements(const TrialLog& log, const pilots::WindowConfig& window);

// JSONL, one episode per line: {t, thetas, omegas, deflections?, agent_d, human_d}.
void write_episodes(std::span<const DisagreementEpisode> episodes, const std::filesystem::path& path);
std::vector<DisagreementEpisode> read_episodes(const std::filesystem::path& path);

struct FinetuneOptions {
  double lr = 1e-4;
  int epochs = 20;
  std::size_t batch = 32;
  // AIRL assistants only.
  rl::EnvConfig env;
  rl::AlgoConfig algo;
  int airl_iterations = 1;
};

// DDPG/SAC/DL: behavior cloning toward the human deflection, starting from
// the current weights. AIRL: one AIRL phase with the episodes as expert data.
Assistant finetune(const Assistant& a, std::span<const DisagreementEpisode> episodes, std::uint64_t seed,
                   const FinetuneOptions& opts = {});

}  // namespace sdassist::assistant
