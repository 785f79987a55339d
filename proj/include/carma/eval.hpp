#pragma once

#include <span>
#include <vector>

#include "carma/model.hpp"
#include "carma/tasks.hpp"

namespace carma {

// Token ids of a task's answers, in answer_vocabulary order.
const std::vector<int>& answer_ids(Task task);

// Answer prediction restricted to the task's answer tokens; ties go to the
// earliest answer. `row` is the logit vector of the SEP position.
int predict_from_logits(std::span<const Scalar> row, Task task);

// Encodes the prompt, runs the model and predicts at SEP.
int predict(const Transformer& model, const Example& example);

// Exact-match percentage over examples (no graph recorded).
double evaluate_accuracy(const Transformer& model, std::span<const Example> examples);

}  // namespace carma
