#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "carma/carma_loss.hpp"
#include "carma/metrics.hpp"
#include "carma/model.hpp"
#include "carma/tasks.hpp"

namespace carma {

struct TrainConfig {
  std::size_t epochs = 3;
  std::size_t batch_size = 16;
  double learning_rate = 0.006;
  // Scaled to total_steps / 2 when total_steps < 2 * warmup_steps.
  std::size_t warmup_steps = 500;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double clip_norm = 1.0;
  // Generic language-model steps used to build the Original variant.
  std::size_t pretrain_epochs = 1;
  CarmaConfig carma;
  Variant variant = Variant::CARMA;
  std::uint64_t seed = 0;

  // Throws ContractError on zero counts or a non-positive clip norm.
  void validate(std::size_t n_layers) const;
};

struct StepRecord {
  std::size_t step = 0;
  double task = 0.0;
  std::optional<double> mi;    // empty when the regularizer is not built
  std::optional<double> stab;
  double total = 0.0;
  double wall_ms = 0.0;
  bool no_anchors = false;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double validation_accuracy = 0.0;
};

struct TrainLog {
  Variant variant = Variant::FT;
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_validation_accuracy = 0.0;

  double total_wall_ms() const;
  // One JSON object per step: {step, L_task, L_MI, L_stab, L_total, wall_ms}.
  std::string to_jsonl() const;
  static TrainLog from_jsonl(const std::string& text);
};

// Effective warmup length for a run of `total_steps` steps.
std::size_t effective_warmup(std::size_t warmup_steps, std::size_t total_steps);

// Fine-tunes `model` in place on the answer-position cross-entropy, adding the
// MI and stability regularizers for the CARMA variant. FT never builds the
// regularizer graph. On return the model holds the best-validation weights.
// Throws DivergenceError when a loss becomes non-finite.
TrainLog train(Transformer& model, const DatasetSplit& data, const TrainConfig& cfg);

// Next-token pretraining over the training prompts without task formatting;
// this is the Original variant and the shared start of FT and CARMA.
TrainLog pretrain(Transformer& model, const DatasetSplit& data, const TrainConfig& cfg);

// CARMA wall-clock divided by FT wall-clock. Throws ContractError when either
// log has no timing.
double overhead_report(const TrainLog& ft_log, const TrainLog& carma_log);

// Plausibility band for the overhead ratio.
inline constexpr double kOverheadLow = 1.1;
inline constexpr double kOverheadHigh = 10.0;

}  // namespace carma
