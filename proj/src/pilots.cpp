#include "sdassist/pilots.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace sdassist::pilots {

namespace {
constexpr double kTimeEps = 1e-9;
}

int WindowConfig::length() const {
  return std::max(1, static_cast<int>(std::lround(win_size * sample_hz)));
}

int WindowConfig::future_steps() const { return static_cast<int>(std::lround(future * sample_hz)); }

void WindowConfig::validate() const {
  if (!(win_size >= 0.0) || !(future >= 0.0) || !(sample_hz > 0.0)) {
    throw InvalidArgument("window config: need win_size >= 0, future >= 0, sample_hz > 0");
  }
}

ObservationWindow build_window(std::span<const Sample> history, double t_now, const WindowConfig& cfg) {
  cfg.validate();
  if (history.empty()) throw InvalidArgument("build_window: empty history");
  const auto end = std::upper_bound(history.begin(), history.end(), t_now + kTimeEps,
                                    [](double t, const Sample& s) { return t < s.t; });
  const auto available = static_cast<std::size_t>(end - history.begin());
  if (available == 0) throw InvalidArgument("build_window: no history at or before t_now");
  const auto n = static_cast<std::size_t>(cfg.length());
  const std::size_t take = std::min(n, available);
  const std::size_t pad = n - take;

  ObservationWindow w;
  w.thetas.assign(n, 0.0);
  w.omegas.assign(n, 0.0);
  if (cfg.include_deflections) w.deflections.emplace(n, 0.0);
  const std::size_t first = available - take;
  for (std::size_t i = 0; i < take; ++i) {
    const Sample& s = history[first + i];
    w.thetas[pad + i] = s.theta;
    w.omegas[pad + i] = s.omega;
    if (w.deflections) (*w.deflections)[pad + i] = s.deflection;
  }
  return w;
}

int input_dim(nnet::Arch arch, const WindowConfig& cfg) {
  return arch == nnet::Arch::MLP ? cfg.length() * cfg.features() : cfg.features();
}

std::vector<nnet::Vector> encode(const ObservationWindow& window, nnet::Arch arch) {
  const std::size_t n = window.size();
  const int f = window.deflections ? 3 : 2;
  auto fill = [&](std::size_t i, double* out) {
    out[0] = window.thetas[i] / kThetaScale;
    out[1] = window.omegas[i] / kOmegaScale;
    if (f == 3) out[2] = (*window.deflections)[i];
  };
  if (arch == nnet::Arch::MLP) {
    nnet::Vector flat(static_cast<Eigen::Index>(n) * f);
    for (std::size_t i = 0; i < n; ++i) fill(i, flat.data() + i * f);
    return {flat};
  }
  std::vector<nnet::Vector> seq(n, nnet::Vector(f));
  for (std::size_t i = 0; i < n; ++i) fill(i, seq[i].data());
  return seq;
}

std::vector<nnet::Matrix> encode_batch(std::span<const ObservationWindow> windows, nnet::Arch arch) {
  if (windows.empty()) throw InvalidArgument("encode_batch: no windows");
  const auto cols = static_cast<Eigen::Index>(windows.size());
  std::vector<nnet::Matrix> out;
  for (Eigen::Index j = 0; j < cols; ++j) {
    const auto seq = encode(windows[static_cast<std::size_t>(j)], arch);
    if (out.empty()) {
      out.assign(seq.size(), nnet::Matrix(seq.front().size(), cols));
    } else if (seq.size() != out.size() || seq.front().size() != out.front().rows()) {
      throw ShapeError("encode_batch: windows differ in shape");
    }
    for (std::size_t t = 0; t < seq.size(); ++t) out[t].col(j) = seq[t];
  }
  return out;
}

nnet::NetworkSpec default_pilot_spec(nnet::Arch arch, const WindowConfig& cfg) {
  nnet::NetworkSpec spec;
  spec.arch = arch;
  spec.input_dim = input_dim(arch, cfg);
  spec.hidden_dims = arch == nnet::Arch::MLP ? std::vector<int>{64, 64} : std::vector<int>{32};
  spec.output_dim = 1;
  spec.output_activation = nnet::Activation::Tanh;
  return spec;
}

double pilot_act(const nnet::NetworkSpec& spec, const nnet::Parameters& params,
                 const ObservationWindow& window, const WindowConfig& cfg) {
  if (static_cast<int>(window.size()) != cfg.length() || window.deflections.has_value() != cfg.include_deflections) {
    throw ShapeError("pilot_act: window does not match its window config");
  }
  if (spec.input_dim != input_dim(spec.arch, cfg)) {
    throw ShapeError("pilot_act: network expects input " + std::to_string(spec.input_dim) + ", window gives " +
                     std::to_string(input_dim(spec.arch, cfg)));
  }
  const double y = nnet::forward(spec, params, encode(window, spec.arch))(0);
  return std::clamp(y, -1.0, 1.0);
}

double Policy::act(const ObservationWindow& w) const { return pilot_act(spec, params, w, window); }

double DelayLine::push(double decided) {
  if (delay_steps_ <= 0) return decided;
  queue_.push_back(decided);
  if (static_cast<int>(queue_.size()) <= delay_steps_) return 0.0;
  const double out = queue_.front();
  queue_.pop_front();
  return out;
}

std::vector<Demonstration> demonstrations_from_rows(std::span<const Sample> rows, const WindowConfig& cfg,
                                                    std::size_t stride) {
  cfg.validate();
  if (stride == 0) throw InvalidArgument("demonstrations: stride must be >= 1");
  // Held deflection at k is the one executed at k - 1.
  std::vector<Sample> held(rows.begin(), rows.end());
  for (std::size_t k = 0; k < held.size(); ++k) held[k].deflection = k == 0 ? 0.0 : rows[k - 1].deflection;
  const auto lead = static_cast<std::size_t>(cfg.future_steps());
  std::vector<Demonstration> out;
  for (std::size_t k = 0; k + lead < rows.size(); k += stride) {
    Demonstration d;
    d.window = build_window(std::span<const Sample>(held.data(), k + 1), held[k].t, cfg);
    d.action = rows[k + lead].deflection;
    out.push_back(std::move(d));
  }
  return out;
}

std::string to_string(Proficiency p) {
  switch (p) {
    case Proficiency::Good: return "Good";
    case Proficiency::Medium: return "Medium";
    case Proficiency::Bad: return "Bad";
  }
  return "?";
}

Proficiency proficiency_from_string(const std::string& s) {
  if (s == "Good") return Proficiency::Good;
  if (s == "Medium") return Proficiency::Medium;
  if (s == "Bad") return Proficiency::Bad;
  throw ConfigError("unknown proficiency: " + s);
}

std::string to_string(TrainingSource s) { return s == TrainingSource::MARS ? "MARS" : "VIP"; }

TrainingSource source_from_string(const std::string& s) {
  if (s == "MARS") return TrainingSource::MARS;
  if (s == "VIP") return TrainingSource::VIP;
  throw ConfigError("unknown training source: " + s);
}

const std::vector<TwinProfile>& exemplar_registry() {
  static const std::vector<TwinProfile> registry{
      {Proficiency::Good, nnet::Arch::LSTM, 0.2, 0.0, TrainingSource::MARS},
      {Proficiency::Medium, nnet::Arch::GRU, 0.3, 0.1, TrainingSource::MARS},
      {Proficiency::Bad, nnet::Arch::MLP, 0.5, 0.0, TrainingSource::MARS},
  };
  return registry;
}

TwinProfile exemplar(Proficiency p, TrainingSource source) {
  for (auto profile : exemplar_registry()) {
    if (profile.proficiency == p) {
      profile.source = source;
      return profile;
    }
  }
  throw InvalidArgument("no exemplar for proficiency");
}

void TwinBehavior::validate() const {
  if (!(accept_prob >= 0.0 && accept_prob <= 1.0)) throw InvalidArgument("twin behavior: accept_prob outside [0,1]");
  if (!(delay_jitter >= 0.0) || !(delay_base > delay_jitter)) {
    throw InvalidArgument("twin behavior: need delay_base > delay_jitter >= 0");
  }
  if (!(noise >= 0.0)) throw InvalidArgument("twin behavior: noise must be >= 0");
}

TwinExecutor::TwinExecutor(TwinBehavior behavior, std::uint64_t seed) : behavior_(behavior), rng_(seed) {
  behavior_.validate();
}

TwinExecutor::Draw TwinExecutor::offer(const Suggestion& suggestion) {
  // Three draws per suggestion regardless of the outcome keeps the stream aligned.
  Draw d;
  d.accepted = uniform(rng_, 0.0, 1.0) < behavior_.accept_prob;
  d.delay = behavior_.delay_base + uniform(rng_, -behavior_.delay_jitter, behavior_.delay_jitter);
  d.noise = uniform(rng_, -behavior_.noise, behavior_.noise);
  d.value = std::clamp(suggestion.deflection + d.noise, -1.0, 1.0);
  if (d.accepted) pending_.push_back({suggestion.t_issued + d.delay, d.value, issued_});
  ++issued_;
  return d;
}

TwinExecutor::Resolution TwinExecutor::resolve(double own_deflection, double t_now) {
  Resolution r{std::clamp(own_deflection, -1.0, 1.0), Executor::Pilot};
  const Pending* winner = nullptr;
  for (const auto& p : pending_) {
    if (p.due <= t_now + kTimeEps && (!winner || p.order > winner->order)) winner = &p;
  }
  if (winner) {
    r = {winner->value, Executor::Assistant};
    std::erase_if(pending_, [&](const Pending& p) { return p.due <= t_now + kTimeEps; });
  }
  return r;
}

std::string policy_to_json_string(const Policy& policy) {
  nlohmann::json j;
  j["version"] = 1;
  j["window"] = {{"win_size", policy.window.win_size},
                 {"future", policy.window.future},
                 {"include_deflections", policy.window.include_deflections},
                 {"sample_hz", policy.window.sample_hz}};
  j["model"] = nlohmann::json::parse(nnet::to_json_string(policy.spec, policy.params));
  return j.dump();
}

Policy policy_from_json_string(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    if (j.at("version").get<int>() != 1) throw FormatError("policy: unsupported version");
    const auto& w = j.at("window");
    WindowConfig cfg{w.at("win_size").get<double>(), w.at("future").get<double>(),
                     w.at("include_deflections").get<bool>(), w.at("sample_hz").get<double>()};
    cfg.validate();
    auto model = nnet::from_json_string(j.at("model").dump());
    if (model.spec.input_dim != input_dim(model.spec.arch, cfg)) {
      throw ShapeError("policy: network input does not match its window");
    }
    return {std::move(model.spec), std::move(model.params), cfg};
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("policy: ") + e.what());
  }
}

void save_policy(const Policy& policy, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << policy_to_json_string(policy) << '\n';
}

Policy load_policy(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ModelLoadError("cannot open policy file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return policy_from_json_string(ss.str());
  } catch (const ModelLoadError&) {
    throw;
  } catch (const Error& e) {
    throw ModelLoadError(path.string() + ": " + e.what());
  }
}

}  // namespace sdassist::pilots
