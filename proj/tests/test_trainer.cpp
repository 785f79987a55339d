#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "carma/errors.hpp"
#include "carma/eval.hpp"
#include "carma/trainer.hpp"

using namespace carma;

namespace {

TransformerConfig model_config(std::size_t d = 16) {
  TransformerConfig c;
  c.n_layers = 4;
  c.d_model = d;
  c.n_heads = 4;
  c.d_mlp = 4 * d;
  c.vocab_size = Tokenizer::standard().vocab_size();
  c.max_seq = 32;
  return c;
}

TrainConfig quick(Variant v, std::uint64_t seed = 1) {
  TrainConfig t;
  t.epochs = 1;
  t.variant = v;
  t.seed = seed;
  t.carma.layer_start = 1;
  t.carma.layer_end = 2;
  return t;
}

bool same_params(const Transformer& a, const Transformer& b) {
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    auto x = a.parameters()[i].data(), y = b.parameters()[i].data();
    for (std::size_t j = 0; j < x.size(); ++j)
      if (x[j] != y[j]) return false;
  }
  return true;
}

const DatasetSplit& small_data() {
  static const DatasetSplit d = gen_idm(5, 300);
  return d;
}

}  // namespace

TEST(Warmup, ScaledForShortRuns) {
  EXPECT_EQ(effective_warmup(500, 2000), 500u);
  EXPECT_EQ(effective_warmup(500, 1000), 500u);
  EXPECT_EQ(effective_warmup(500, 999), 499u);
  EXPECT_EQ(effective_warmup(500, 100), 50u);
  EXPECT_EQ(effective_warmup(0, 100), 0u);
}

TEST(Train, ZeroLambdaMatchesFineTuningBitForBit) {
  Transformer base(model_config(), 7);
  Transformer ft = base.clone(), carma = base.clone();
  TrainConfig cfg = quick(Variant::FT, 3);
  const TrainLog a = train(ft, small_data(), cfg);
  cfg.variant = Variant::CARMA;
  cfg.carma.lambda = 0.0;
  const TrainLog b = train(carma, small_data(), cfg);
  ASSERT_EQ(a.steps.size(), b.steps.size());
  for (std::size_t i = 0; i < a.steps.size(); ++i) {
    EXPECT_EQ(a.steps[i].task, b.steps[i].task) << i;
    EXPECT_EQ(a.steps[i].total, b.steps[i].total) << i;
  }
  EXPECT_TRUE(same_params(ft, carma));
  EXPECT_FALSE(a.steps[0].mi.has_value());
  EXPECT_TRUE(b.steps[0].mi.has_value());
}

TEST(Train, ZeroLearningRateLeavesParameters) {
  Transformer m(model_config(), 7);
  const Transformer before = m.clone();
  TrainConfig cfg = quick(Variant::CARMA);
  cfg.learning_rate = 0.0;
  train(m, small_data(), cfg);
  EXPECT_TRUE(same_params(m, before));
}

TEST(Train, TotalIsAffineInLambda) {
  std::vector<TrainLog> logs;
  for (double lambda : {0.0, 0.5, 1.0}) {
    Transformer m(model_config(), 9);
    TrainConfig cfg = quick(Variant::CARMA);
    cfg.learning_rate = 0.0;
    cfg.carma.lambda = lambda;
    logs.push_back(train(m, small_data(), cfg));
  }
  for (std::size_t i = 0; i < logs[0].steps.size(); ++i) {
    const double mid = 0.5 * (logs[0].steps[i].total + logs[2].steps[i].total);
    EXPECT_NEAR(logs[1].steps[i].total, mid, 1e-10);
    const auto& s = logs[1].steps[i];
    EXPECT_NEAR(s.total, 0.5 * s.task + 0.5 * (0.5 * *s.mi + 0.5 * *s.stab), 1e-12);
  }
}

TEST(Train, DeterministicPerSeed) {
  Transformer a(model_config(), 4), b(model_config(), 4);
  train(a, small_data(), quick(Variant::CARMA, 2));
  train(b, small_data(), quick(Variant::CARMA, 2));
  EXPECT_TRUE(same_params(a, b));
}

TEST(Train, RestoresBestValidationWeights) {
  Transformer m(model_config(), 4);
  TrainConfig cfg = quick(Variant::FT);
  cfg.epochs = 3;
  const TrainLog log = train(m, small_data(), cfg);
  ASSERT_EQ(log.epochs.size(), 3u);
  EXPECT_DOUBLE_EQ(evaluate_accuracy(m, small_data().validation), log.best_validation_accuracy);
  for (const auto& e : log.epochs) EXPECT_LE(e.validation_accuracy, log.best_validation_accuracy);
}

TEST(Train, NonFiniteLossAborts) {
  Transformer m(model_config(), 4);
  m.parameters()[0].mutable_data()[Tokenizer::kBos * 16] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(train(m, small_data(), quick(Variant::FT)), DivergenceError);
}

TEST(Train, RejectsBadConfigAndVocabulary) {
  Transformer m(model_config(), 4);
  TrainConfig cfg = quick(Variant::CARMA);
  cfg.carma.layer_end = 9;
  EXPECT_THROW(train(m, small_data(), cfg), ContractError);
  cfg = quick(Variant::FT);
  cfg.epochs = 0;
  EXPECT_THROW(train(m, small_data(), cfg), ContractError);
  TransformerConfig mc = model_config();
  mc.vocab_size = 20;
  Transformer tiny(mc, 1);
  EXPECT_THROW(train(tiny, small_data(), quick(Variant::FT)), ContractError);
}

TEST(Train, InferenceCostIndependentOfVariant) {
  Transformer ft(model_config(), 4), carma(model_config(), 4);
  train(ft, small_data(), quick(Variant::FT));
  train(carma, small_data(), quick(Variant::CARMA));
  const auto& x = small_data().test[0];
  reset_op_counter();
  predict(ft, x);
  const std::size_t a = op_counter();
  reset_op_counter();
  predict(carma, x);
  EXPECT_EQ(op_counter(), a);
  EXPECT_GT(a, 0u);
}

TEST(Train, ToyIdmBeatsChanceByFive) {
  const DatasetSplit data = gen_idm(1, 3000);
  Transformer m(model_config(32), 1);
  TrainConfig cfg = quick(Variant::FT, 1);
  cfg.epochs = 3;
  pretrain(m, data, cfg);
  const TrainLog log = train(m, data, cfg);
  const double chance = 100.0 / static_cast<double>(answer_vocabulary(Task::IDM).size());
  EXPECT_GT(log.best_validation_accuracy, 5 * chance);
  // A training prompt is answered with its target term.
  std::size_t hits = 0;
  for (std::size_t i = 0; i < 50; ++i) {
    const auto& x = data.train[i];
    hits += predict(m, x) == Tokenizer::standard().atomic_id(x.target);
  }
  EXPECT_GT(hits, 0u);
}

TEST(Pretrain, LowersLanguageModelLoss) {
  Transformer m(model_config(), 4);
  TrainConfig cfg = quick(Variant::Original);
  cfg.pretrain_epochs = 2;
  const TrainLog log = pretrain(m, small_data(), cfg);
  ASSERT_GT(log.steps.size(), 10u);
  EXPECT_LT(log.steps.back().task, log.steps.front().task);
  EXPECT_EQ(log.variant, Variant::Original);
}

TEST(Log, JsonlRoundTrip) {
  Transformer m(model_config(), 4);
  const TrainLog log = train(m, small_data(), quick(Variant::CARMA));
  const std::string text = log.to_jsonl();
  const TrainLog back = TrainLog::from_jsonl(text);
  ASSERT_EQ(back.steps.size(), log.steps.size());
  for (std::size_t i = 0; i < log.steps.size(); ++i) {
    EXPECT_EQ(back.steps[i].step, log.steps[i].step);
    EXPECT_EQ(back.steps[i].task, log.steps[i].task);
    EXPECT_EQ(back.steps[i].mi, log.steps[i].mi);
    EXPECT_EQ(back.steps[i].total, log.steps[i].total);
  }
  EXPECT_EQ(back.to_jsonl(), text);
  EXPECT_NE(text.find("\"L_MI\""), std::string::npos);
}

TEST(Log, FineTuningLogsNullRegularizers) {
  Transformer m(model_config(), 4);
  const std::string text = train(m, small_data(), quick(Variant::FT)).to_jsonl();
  EXPECT_NE(text.find("\"L_MI\":null"), std::string::npos);
}

TEST(Overhead, Ratio) {
  TrainLog ft, carma;
  ft.steps.push_back({0, 1, {}, {}, 1, 10.0, false});
  carma.steps.push_back({0, 1, 0.1, 0.1, 1, 25.0, false});
  EXPECT_DOUBLE_EQ(overhead_report(ft, carma), 2.5);
  EXPECT_THROW(overhead_report(TrainLog{}, carma), ContractError);
}
