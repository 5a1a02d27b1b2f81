#pragma once

#include <optional>
#include <string>
#include <vector>

#include "sdassist/pilots.hpp"

namespace sdassist {

enum class DeflectionClass { Destabilizing, Anticipatory, Corrective, None };

std::string to_string(DeflectionClass c);
DeflectionClass deflection_class_from_string(const std::string& s);
std::string to_string(Executor e);
Executor executor_from_string(const std::string& s);

// One co-performance sample. crash_flag marks the row whose step crashed;
// the following row starts back at the DOB.
struct TrialRow {
  double t = 0.0;
  double theta = 0.0;
  double omega = 0.0;
  double executed_deflection = 0.0;
  double crash_probability = 0.0;
  double pilot_deflection = 0.0;
  std::optional<double> assistant_deflection;
  Executor executor = Executor::Pilot;
  DeflectionClass deflection_class = DeflectionClass::None;
  bool crash_flag = false;

  bool operator==(const TrialRow&) const = default;
};

struct TrialLog {
  std::vector<TrialRow> rows;

  bool operator==(const TrialLog&) const = default;
};

}  // namespace sdassist
