#include "sdassist/physics.hpp"

#include <cmath>
#include <numbers>

namespace sdassist::physics {

void PhysicsConfig::validate() const {
  if (!(k_p > 0.0) || !(gain > 0.0) || !(crash_bound > 0.0) || !(dt > 0.0)) {
    throw InvalidArgument("physics config: k_p, gain, crash_bound and dt must be positive");
  }
}

double acceleration(double theta, double deflection, const PhysicsConfig& cfg) {
  constexpr double kDegToRad = std::numbers::pi / 180.0;
  return cfg.k_p * std::sin(theta * kDegToRad) + cfg.gain * deflection;
}

PendulumState integrate(const PendulumState& state, double deflection, const PhysicsConfig& cfg) {
  if (!std::isfinite(state.theta) || !std::isfinite(state.omega) || !std::isfinite(state.t) ||
      !std::isfinite(deflection)) {
    throw InvalidArgument("physics step: non-finite input");
  }
  if (std::abs(deflection) > 1.0) {
    throw InvalidArgument("physics step: |deflection| > 1");
  }
  const double alpha = acceleration(state.theta, deflection, cfg);
  PendulumState next;
  next.omega = state.omega + alpha * cfg.dt;
  next.theta = state.theta + next.omega * cfg.dt;
  next.t = state.t + cfg.dt;
  return next;
}

StepOutcome step(const PendulumState& state, double deflection, const PhysicsConfig& cfg) {
  StepOutcome out;
  out.state = integrate(state, deflection, cfg);
  if (std::abs(out.state.theta) >= cfg.crash_bound) {
    out.crashed = true;
    out.state.theta = 0.0;
    out.state.omega = 0.0;
  }
  return out;
}

}  // namespace sdassist::physics
