#include "carma/eval.hpp"

#include "carma/errors.hpp"
#include "carma/metrics.hpp"

namespace carma {

const std::vector<int>& answer_ids(Task task) {
  static const auto build = [](Task t) {
    std::vector<int> ids;
    for (const auto& w : answer_vocabulary(t)) ids.push_back(Tokenizer::standard().atomic_id(w));
    return ids;
  };
  static const std::vector<int> idm = build(Task::IDM);
  static const std::vector<int> sc = build(Task::SC);
  return task == Task::IDM ? idm : sc;
}

int predict_from_logits(std::span<const Scalar> row, Task task) {
  const auto& ids = answer_ids(task);
  int best = ids.front();
  for (int id : ids) {
    if (static_cast<std::size_t>(id) >= row.size()) {
      throw ContractError("predict: answer id " + std::to_string(id) + " outside logits of width " +
                          std::to_string(row.size()));
    }
    if (row[static_cast<std::size_t>(id)] > row[static_cast<std::size_t>(best)]) best = id;
  }
  return best;
}

int predict(const Transformer& model, const Example& example) {
  NoGradGuard no_grad;
  const TokenSequence seq = Tokenizer::standard().encode_prompt(example.prompt);
  const std::size_t last = seq.ids.size() - 1;
  const ForwardResult out = model.forward(seq, {}, std::span(&last, 1));
  return predict_from_logits(out.logits.data(), example.task);
}

double evaluate_accuracy(const Transformer& model, std::span<const Example> examples) {
  std::vector<int> preds, targets;
  for (const auto& ex : examples) {
    preds.push_back(predict(model, ex));
    targets.push_back(Tokenizer::standard().atomic_id(ex.target));
  }
  return accuracy(preds, targets);
}

}  // namespace carma
