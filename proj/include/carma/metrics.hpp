#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>

#include "carma/tasks.hpp"

namespace carma {

enum class Variant { Original, FT, CARMA };

std::string to_string(Variant variant);
Variant variant_from_string(std::string_view name);

// Exact-match percentage. Throws ContractError on empty or unequal inputs.
double accuracy(std::span<const int> predictions, std::span<const int> targets);

// after / before * 100, where `after` counts predictions still correct within
// the before-correct set. Empty when before == 0.
std::optional<double> consist_syn(std::size_t correct_before, std::size_t correct_after);

// sigma / mu. Population deviation unless `sample` is set. Empty when the
// mean is zero. Throws ContractError on fewer than two values.
std::optional<double> cv(std::span<const double> values, bool sample = false);

// (carma - baseline) / baseline * 100; empty when baseline is zero.
std::optional<double> ni(double carma_cs, double baseline_cs);

struct RunRecord {
  Variant variant = Variant::FT;
  Task task = Task::IDM;
  std::string intervention;  // e.g. "syn@0.25", "cap:mean@3"
  std::uint64_t seed = 0;
  double value = 0.0;

  // Throws ContractError when value is not finite.
  void validate() const;
};

}  // namespace carma
