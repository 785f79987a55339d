#include "carma/metrics.hpp"

#include <cmath>

#include "carma/errors.hpp"

namespace carma {

std::string to_string(Variant variant) {
  switch (variant) {
    case Variant::Original: return "original";
    case Variant::FT: return "ft";
    default: return "carma";
  }
}

Variant variant_from_string(std::string_view name) {
  if (name == "original") return Variant::Original;
  if (name == "ft") return Variant::FT;
  if (name == "carma") return Variant::CARMA;
  throw ContractError("unknown variant '" + std::string(name) + "' (original, ft, carma)");
}

double accuracy(std::span<const int> predictions, std::span<const int> targets) {
  if (predictions.empty()) throw ContractError("accuracy: no predictions");
  if (predictions.size() != targets.size()) {
    throw ContractError("accuracy: " + std::to_string(predictions.size()) + " predictions for " +
                        std::to_string(targets.size()) + " targets");
  }
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) hits += predictions[i] == targets[i];
  return 100.0 * static_cast<double>(hits) / static_cast<double>(predictions.size());
}

std::optional<double> consist_syn(std::size_t correct_before, std::size_t correct_after) {
  if (correct_before == 0) return std::nullopt;
  if (correct_after > correct_before) {
    throw ContractError("consist_syn: after (" + std::to_string(correct_after) +
                        ") exceeds before (" + std::to_string(correct_before) + ")");
  }
  return 100.0 * static_cast<double>(correct_after) / static_cast<double>(correct_before);
}

std::optional<double> cv(std::span<const double> values, bool sample) {
  if (values.size() < 2) throw ContractError("cv: need at least two values");
  double mu = 0.0;
  for (double v : values) mu += v;
  mu /= static_cast<double>(values.size());
  if (mu == 0.0) return std::nullopt;
  double ss = 0.0;
  for (double v : values) ss += (v - mu) * (v - mu);
  const double denom = static_cast<double>(values.size() - (sample ? 1 : 0));
  return std::sqrt(ss / denom) / mu;
}

std::optional<double> ni(double carma_cs, double baseline_cs) {
  if (baseline_cs == 0.0) return std::nullopt;
  return (carma_cs - baseline_cs) / baseline_cs * 100.0;
}

void RunRecord::validate() const {
  if (!std::isfinite(value)) {
    throw ContractError("run record: non-finite value for " + to_string(variant) + "/" +
                        to_string(task) + "/" + intervention);
  }
}

}  // namespace carma
