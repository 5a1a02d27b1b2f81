#pragma once

#include "sdassist/common.hpp"

namespace sdassist::physics {

// Angles in degrees from the direction of balance (positive = clockwise),
// velocities in deg/s, time in seconds.
struct PendulumState {
  double theta = 0.0;
  double omega = 0.0;
  double t = 0.0;
};

struct PhysicsConfig {
  double k_p = 600.0;          // pendulum constant, deg/s^2
  double gain = 600.0;         // joystick authority, deg/s^2 per unit deflection
  double crash_bound = 60.0;   // degrees
  double dt = 1.0 / 200.0;     // seconds

  void validate() const;
};

struct StepOutcome {
  PendulumState state;
  bool crashed = false;
};

// Angular acceleration for a state and joystick deflection.
double acceleration(double theta, double deflection, const PhysicsConfig& cfg);

// Semi-implicit Euler update without crash handling.
PendulumState integrate(const PendulumState& state, double deflection, const PhysicsConfig& cfg);

// One semi-implicit Euler step. A step whose post-step |theta| reaches the
// crash bound returns crashed=true with the pendulum reset to the DOB; the
// clock keeps running.
StepOutcome step(const PendulumState& state, double deflection, const PhysicsConfig& cfg);

}  // namespace sdassist::physics
