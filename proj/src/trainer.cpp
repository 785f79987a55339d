#include "carma/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "carma/errors.hpp"
#include "carma/eval.hpp"
#include "carma/hash.hpp"
#include "json.hpp"

namespace carma {

void TrainConfig::validate(std::size_t n_layers) const {
  if (epochs == 0) throw ContractError("train config: epochs must be positive");
  if (batch_size == 0) throw ContractError("train config: batch_size must be positive");
  if (!(learning_rate >= 0.0)) throw ContractError("train config: learning_rate must be >= 0");
  if (!(clip_norm > 0.0)) throw ContractError("train config: clip_norm must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
    throw ContractError("train config: Adam betas must lie in [0,1)");
  }
  if (variant == Variant::CARMA) carma.validate(n_layers);
}

double TrainLog::total_wall_ms() const {
  double total = 0.0;
  for (const auto& s : steps) total += s.wall_ms;
  return total;
}

std::string TrainLog::to_jsonl() const {
  std::string out;
  for (const auto& s : steps) {
    nlohmann::ordered_json j;
    j["step"] = s.step;
    j["L_task"] = s.task;
    j["L_MI"] = s.mi ? nlohmann::ordered_json(*s.mi) : nlohmann::ordered_json(nullptr);
    j["L_stab"] = s.stab ? nlohmann::ordered_json(*s.stab) : nlohmann::ordered_json(nullptr);
    j["L_total"] = s.total;
    j["wall_ms"] = s.wall_ms;
    if (s.no_anchors) j["no_anchors"] = true;
    out += j.dump();
    out.push_back('\n');
  }
  return out;
}

TrainLog TrainLog::from_jsonl(const std::string& text) {
  TrainLog log;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    StepRecord s;
    s.step = j.at("step").get<std::size_t>();
    s.task = j.at("L_task").get<double>();
    if (!j.at("L_MI").is_null()) s.mi = j.at("L_MI").get<double>();
    if (!j.at("L_stab").is_null()) s.stab = j.at("L_stab").get<double>();
    s.total = j.at("L_total").get<double>();
    s.wall_ms = j.at("wall_ms").get<double>();
    s.no_anchors = j.value("no_anchors", false);
    log.steps.push_back(s);
  }
  return log;
}

std::size_t effective_warmup(std::size_t warmup_steps, std::size_t total_steps) {
  if (total_steps < 2 * warmup_steps) return total_steps / 2;
  return warmup_steps;
}

namespace {

using Clock = std::chrono::steady_clock;

// Adam with linear warmup to a constant rate and global-norm clipping.
class Adam {
 public:
  Adam(const std::vector<Tensor>& params, const TrainConfig& cfg, std::size_t warmup)
      : cfg_(cfg), warmup_(warmup) {
    for (const auto& p : params) {
      m_.emplace_back(p.size(), Scalar(0));
      v_.emplace_back(p.size(), Scalar(0));
    }
  }

  void step(std::vector<Tensor>& params) {
    ++t_;
    double sq = 0.0;
    for (const auto& p : params) {
      if (!p.has_grad()) continue;
      for (Scalar g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
    }
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw DivergenceError("train: non-finite gradient norm");
    const double clip = norm > cfg_.clip_norm ? cfg_.clip_norm / norm : 1.0;
    double lr = cfg_.learning_rate;
    if (warmup_ > 0) lr *= std::min(1.0, static_cast<double>(t_) / static_cast<double>(warmup_));
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor& p = params[i];
      if (!p.has_grad()) continue;
      auto value = p.mutable_data();
      auto grad = p.grad();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < value.size(); ++j) {
        const double g = static_cast<double>(grad[j]) * clip;
        m[j] = static_cast<Scalar>(cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g);
        v[j] = static_cast<Scalar>(cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g * g);
        const double update = (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg_.adam_eps);
        value[j] = static_cast<Scalar>(value[j] - lr * update);
      }
    }
  }

 private:
  const TrainConfig& cfg_;
  std::size_t warmup_;
  std::size_t t_ = 0;
  std::vector<std::vector<Scalar>> m_, v_;
};

void check_vocab(const Transformer& model) {
  if (model.config().vocab_size != Tokenizer::standard().vocab_size()) {
    throw ContractError("train: model vocab " + std::to_string(model.config().vocab_size) +
                        " differs from tokenizer vocab " +
                        std::to_string(Tokenizer::standard().vocab_size()));
  }
}

void check_finite(const Tensor& loss, std::size_t step, const char* what) {
  if (!std::isfinite(static_cast<double>(loss.item()))) {
    throw DivergenceError(std::string("train: ") + what + " became non-finite at step " +
                          std::to_string(step));
  }
}

std::size_t steps_per_epoch(std::size_t n, std::size_t batch) { return (n + batch - 1) / batch; }

}  // namespace

TrainLog train(Transformer& model, const DatasetSplit& data, const TrainConfig& cfg) {
  cfg.validate(model.config().n_layers);
  check_vocab(model);
  if (data.train.empty() || data.validation.empty()) {
    throw ContractError("train: train and validation splits must be nonempty");
  }
  const Tokenizer& tok = Tokenizer::standard();
  std::vector<TokenSequence> inputs;
  std::vector<int> targets;
  for (const auto& ex : data.train) {
    inputs.push_back(tok.encode_prompt(ex.prompt));
    targets.push_back(tok.atomic_id(ex.target));
  }

  const bool regularize = cfg.variant == Variant::CARMA;
  const std::size_t per_epoch = steps_per_epoch(inputs.size(), cfg.batch_size);
  Adam adam(model.parameters(), cfg, effective_warmup(cfg.warmup_steps, per_epoch * cfg.epochs));
  std::mt19937_64 order_rng(mix_seed(cfg.seed, 1));
  std::mt19937_64 negative_rng(mix_seed(cfg.seed, 2 + cfg.carma.seed));

  TrainLog log;
  log.variant = cfg.variant;
  std::optional<Transformer> best;
  std::vector<std::size_t> order(inputs.size());
  std::size_t step = 0;
  try {
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), order_rng);
      for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
        const auto start = Clock::now();
        const std::size_t end = std::min(order.size(), b + cfg.batch_size);
        std::vector<Tensor> rows;
        std::vector<int> batch_targets;
        std::vector<LayerTrace> traces;
        std::vector<CompositionGroups> groups;
        for (std::size_t i = b; i < end; ++i) {
          const TokenSequence& seq = inputs[order[i]];
          const std::size_t last = seq.ids.size() - 1;
          ForwardResult out = model.forward(seq, {}, std::span(&last, 1));
          rows.push_back(out.logits);
          batch_targets.push_back(targets[order[i]]);
          if (regularize) {
            groups.push_back(
                build_groups(seq.word_spans, seq.ids.size(), cfg.carma.max_negatives, negative_rng));
            traces.push_back(std::move(out.trace));
          }
        }
        StepRecord rec;
        rec.step = step;
        Tensor task = cross_entropy(concat_rows(rows), batch_targets);
        check_finite(task, step, "task loss");
        Tensor total = task;
        if (regularize) {
          MiLoss mi = mi_loss(traces, groups, cfg.carma);
          Tensor stab = stability_loss(traces, cfg.carma);
          check_finite(mi.value, step, "MI loss");
          check_finite(stab, step, "stability loss");
          total = total_loss(task, carma_loss(mi.value, stab, cfg.carma), cfg.carma);
          rec.mi = mi.value.item();
          rec.stab = stab.item();
          rec.no_anchors = mi.no_anchors;
        }
        check_finite(total, step, "total loss");
        model.zero_grad();
        backward(total);
        adam.step(model.parameters());
        rec.task = task.item();
        rec.total = total.item();
        rec.wall_ms = std::chrono::duration<double, std::milli>(Clock::now() - start).count();
        log.steps.push_back(rec);
        ++step;
      }
      const double acc = evaluate_accuracy(model, data.validation);
      log.epochs.push_back({epoch, acc});
      if (!best || acc > log.best_validation_accuracy) {
        log.best_validation_accuracy = acc;
        log.best_epoch = epoch;
        if (best) {
          best->load_values_from(model);
        } else {
          best.emplace(model.clone());
        }
      }
    }
  } catch (const NumericError& e) {
    throw DivergenceError("train: " + std::string(e.what()) + " at step " + std::to_string(step));
  }
  model.load_values_from(*best);
  return log;
}

TrainLog pretrain(Transformer& model, const DatasetSplit& data, const TrainConfig& cfg) {
  check_vocab(model);
  if (data.train.empty()) throw ContractError("pretrain: empty train split");
  TrainConfig lm = cfg;
  lm.variant = Variant::Original;
  lm.validate(model.config().n_layers);
  const Tokenizer& tok = Tokenizer::standard();
  // BOS + prompt words; each position predicts the next token.
  std::vector<TokenSequence> inputs;
  std::vector<std::vector<int>> next;
  for (const auto& ex : data.train) {
    TokenSequence seq = tok.encode_prompt(ex.prompt);
    seq.ids.pop_back();
    std::vector<int> tgt(seq.ids.begin() + 1, seq.ids.end());
    seq.ids.pop_back();
    if (seq.ids.empty() || tgt.empty()) continue;
    seq.word_spans.clear();
    inputs.push_back(std::move(seq));
    next.push_back(std::move(tgt));
  }
  const std::size_t per_epoch = steps_per_epoch(inputs.size(), lm.batch_size);
  Adam adam(model.parameters(), lm,
            effective_warmup(lm.warmup_steps, per_epoch * lm.pretrain_epochs));
  std::mt19937_64 order_rng(mix_seed(lm.seed, 3));
  TrainLog log;
  log.variant = Variant::Original;
  std::vector<std::size_t> order(inputs.size());
  std::size_t step = 0;
  try {
    for (std::size_t epoch = 0; epoch < lm.pretrain_epochs; ++epoch) {
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), order_rng);
      for (std::size_t b = 0; b < order.size(); b += lm.batch_size) {
        const auto start = Clock::now();
        const std::size_t end = std::min(order.size(), b + lm.batch_size);
        std::vector<Tensor> rows;
        std::vector<int> tgt;
        for (std::size_t i = b; i < end; ++i) {
          rows.push_back(model.forward(inputs[order[i]]).logits);
          tgt.insert(tgt.end(), next[order[i]].begin(), next[order[i]].end());
        }
        Tensor loss = cross_entropy(concat_rows(rows), tgt);
        check_finite(loss, step, "language-model loss");
        model.zero_grad();
        backward(loss);
        adam.step(model.parameters());
        StepRecord rec;
        rec.step = step++;
        rec.task = rec.total = loss.item();
        rec.wall_ms = std::chrono::duration<double, std::milli>(Clock::now() - start).count();
        log.steps.push_back(rec);
      }
    }
  } catch (const NumericError& e) {
    throw DivergenceError("pretrain: " + std::string(e.what()) + " at step " +
                          std::to_string(step));
  }
  return log;
}

double overhead_report(const TrainLog& ft_log, const TrainLog& carma_log) {
  const double ft = ft_log.total_wall_ms();
  const double carma = carma_log.total_wall_ms();
  if (ft_log.steps.empty() || carma_log.steps.empty() || !(ft > 0.0) || !(carma > 0.0)) {
    throw ContractError("overhead_report: both logs need recorded wall-clock time");
  }
  return carma / ft;
}

}  // namespace carma
