#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "carma/errors.hpp"
#include "carma/log.hpp"
#include "carma/tensor.hpp"
#include "grad_check.hpp"

using namespace carma;
using carma::testing::grad_check;

namespace {

Tensor random_param(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  std::vector<Scalar> v(numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor::parameter(std::move(shape), std::move(v));
}

void expect_values(const Tensor& t, std::vector<double> expected, double tol = 1e-12) {
  ASSERT_EQ(t.size(), expected.size());
  for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(t.data()[i], expected[i], tol) << i;
}

}  // namespace

TEST(Matmul, IdentityAndProjection) {
  Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor m = Tensor::from({2, 2}, {1, 2, 3, 4});
  expect_values(matmul(eye, m), {1, 2, 3, 4});
  expect_values(matmul(Tensor::from({2, 2}, {1, 0, 0, 0}), Tensor::from({2, 1}, {5, 7})), {5, 0});
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
    FAIL();
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3] x [2x3]"), std::string::npos) << msg;
  }
}

TEST(Matmul, GradientOfSum) {
  Tensor a = Tensor::parameter({1, 2}, {1, 1});
  Tensor b = Tensor::from({2, 1}, {2, 3});
  backward(sum(matmul(a, b)));
  expect_values(Tensor::from({1, 2}, {a.grad()[0], a.grad()[1]}), {2, 3});
}

TEST(Softmax, Examples) {
  expect_values(softmax(Tensor::from({2}, {0, 0}), 0), {0.5, 0.5});
  expect_values(softmax(Tensor::from({2}, {1000, 1000}), 0), {0.5, 0.5});
  expect_values(softmax(Tensor::from({2}, {0, std::log(3.0)}), 0), {0.25, 0.75});
}

TEST(Softmax, RowsSumToOne) {
  std::mt19937_64 rng(3);
  Tensor x = random_param({5, 7}, rng, 4.0);
  Tensor s = softmax(x, 1);
  for (std::size_t r = 0; r < 5; ++r) {
    double total = 0;
    for (std::size_t c = 0; c < 7; ++c) {
      EXPECT_GE(s.at(r, c), 0.0);
      total += s.at(r, c);
    }
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
  Tensor cols = softmax(x, 0);
  for (std::size_t c = 0; c < 7; ++c) {
    double total = 0;
    for (std::size_t r = 0; r < 5; ++r) total += cols.at(r, c);
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
}

TEST(Softmax, NanIsRejected) {
  EXPECT_THROW(softmax(Tensor::from({2}, {0, std::numeric_limits<double>::quiet_NaN()}), 0),
               NumericError);
}

TEST(LayerNorm, Examples) {
  Tensor g = Tensor::from({2}, {1, 1}), b = Tensor::from({2}, {0, 0});
  expect_values(layer_norm(Tensor::from({1, 2}, {5, 5}), g, b, 1), {0, 0});
  expect_values(layer_norm(Tensor::from({1, 2}, {-1, 1}), g, b, 1, 0.0), {-1, 1});
}

TEST(LayerNorm, ZeroMeanOutput) {
  std::mt19937_64 rng(5);
  Tensor x = random_param({4, 9}, rng, 3.0);
  Tensor y = layer_norm(x, Tensor::filled({9}, 1), Tensor::zeros({9}), 1);
  for (std::size_t r = 0; r < 4; ++r) {
    double mu = 0;
    for (std::size_t c = 0; c < 9; ++c) mu += y.at(r, c);
    EXPECT_LT(std::abs(mu / 9), 1e-10);
  }
}

TEST(LayerNorm, OnlyTrailingAxis) {
  EXPECT_THROW(layer_norm(Tensor::zeros({2, 2}), Tensor::zeros({2}), Tensor::zeros({2}), 0),
               ShapeError);
}

TEST(CrossEntropy, Examples) {
  EXPECT_NEAR(cross_entropy(Tensor::zeros({1, 5}), std::vector<int>{2}).item(), std::log(5.0),
              1e-12);
  EXPECT_NEAR(cross_entropy(Tensor::from({1, 3}, {100, 0, 0}), std::vector<int>{0}).item(), 0.0,
              1e-40 + 1e-12);
  EXPECT_NEAR(cross_entropy(Tensor::from({1, 2}, {0, std::log(3.0)}), std::vector<int>{0}).item(),
              std::log(4.0), 1e-12);
}

TEST(CrossEntropy, GradientIsSoftmaxMinusOneHotOverBatch) {
  Tensor logits = Tensor::parameter({2, 2}, {0, std::log(3.0), 0, 0});
  backward(cross_entropy(logits, std::vector<int>{0, 1}));
  expect_values(Tensor::from({4}, std::vector<Scalar>(logits.grad().begin(), logits.grad().end())),
                {(0.25 - 1) / 2, 0.75 / 2, 0.5 / 2, (0.5 - 1) / 2});
}

TEST(CrossEntropy, TargetOutOfRange) {
  EXPECT_THROW(cross_entropy(Tensor::zeros({1, 3}), std::vector<int>{3}), IndexError);
  EXPECT_THROW(cross_entropy(Tensor::zeros({1, 3}), std::vector<int>{-1}), IndexError);
}

TEST(Backward, SumGivesOnes) {
  Tensor x = Tensor::parameter({2, 3}, std::vector<Scalar>(6, 0.7));
  backward(sum(x));
  for (Scalar g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SquareGradient) {
  Tensor x = Tensor::parameter({}, {3});
  backward(mul(x, x));
  EXPECT_EQ(x.grad()[0], 6.0);
}

TEST(Backward, RejectsNonScalarAndRepeat) {
  Tensor x = Tensor::parameter({2}, {1, 2});
  EXPECT_THROW(backward(scale(x, 2)), ContractError);
  Tensor loss = sum(x);
  backward(loss);
  EXPECT_THROW(backward(loss), ContractError);
}

TEST(Backward, DisconnectedLossWarns) {
  ScopedWarningCapture capture;
  backward(sum(Tensor::from({2}, {1, 2})));
  EXPECT_EQ(capture.count(), 1);
}

TEST(Backward, EveryTapeNodeGetsGrad) {
  Tensor x = Tensor::parameter({2}, {1, 2});
  Tensor y = Tensor::parameter({2}, {3, 4});
  Tensor mid = mul(x, y);
  // y also feeds a zero-weighted branch.
  Tensor loss = add(sum(mid), scale(sum(y), 0));
  backward(loss);
  EXPECT_TRUE(mid.has_grad());
  EXPECT_TRUE(x.has_grad());
  EXPECT_TRUE(y.has_grad());
}

TEST(NoGrad, RecordsNothing) {
  Tensor x = Tensor::parameter({2}, {1, 2});
  NoGradGuard guard;
  EXPECT_FALSE(sum(x).requires_grad());
}

TEST(Similarity, CosineExamples) {
  Tensor v = Tensor::from({2}, {3, 4});
  EXPECT_NEAR(cosine_similarity(v, v, 1e-8).item(), 1.0, 1e-8);
  EXPECT_NEAR(cosine_similarity(Tensor::from({2}, {1, 0}), Tensor::from({2}, {0, 1}), 1e-8).item(),
              0.0, 1e-15);
  EXPECT_NEAR(cosine_similarity(Tensor::from({2}, {1, 1}), Tensor::from({2}, {1, 0}), 1e-8).item(),
              1.0 / std::sqrt(2.0), 1e-8);
}

TEST(Determinism, SameInputsSameBits) {
  std::mt19937_64 r1(11), r2(11);
  Tensor a = random_param({3, 4}, r1), b = random_param({3, 4}, r2);
  Tensor ya = softmax(matmul(a, transpose(a)), 1);
  Tensor yb = softmax(matmul(b, transpose(b)), 1);
  for (std::size_t i = 0; i < ya.size(); ++i) EXPECT_EQ(ya.data()[i], yb.data()[i]);
}

// Every differentiable op against central differences on random inputs.
class OpGradient : public ::testing::TestWithParam<int> {};

TEST_P(OpGradient, MatchesFiniteDifferences) {
  std::mt19937_64 rng(100 + GetParam());
  Tensor a = random_param({3, 4}, rng);
  Tensor b = random_param({3, 4}, rng);
  Tensor w = random_param({4, 2}, rng);
  Tensor bias = random_param({4}, rng);
  Tensor gain = random_param({4}, rng);
  Tensor s1 = random_param({}, rng), s2 = Tensor::parameter({}, {1.5 + static_cast<double>(rng() % 7) * 0.1});
  Tensor pos = Tensor::parameter({3, 4}, std::vector<Scalar>(12, 0.5));
  for (std::size_t i = 0; i < 12; ++i) pos.mutable_data()[i] += 0.1 * static_cast<double>(i);
  Tensor v1 = random_param({5}, rng), v2 = random_param({5}, rng);
  const std::vector<int> ids{2, 0, 2};
  const std::vector<std::size_t> flat{0, 5, 7, 11};
  std::vector<Tensor> params{a, b, w, bias, gain, s1, s2, pos, v1, v2};

  auto loss = [&]() -> Tensor {
    Tensor t1 = sum(matmul(a, w));
    Tensor t2 = sum(mul(a, b));
    Tensor t3 = sum_squares(sub(a, b));
    Tensor t4 = sum(mul(softmax(a, 1), b));
    Tensor t5 = sum(mul(softmax(a, 0), b));
    Tensor t6 = sum(mul(layer_norm(a, gain, bias, 1), b));
    Tensor t7 = sum(mul(gelu(a), b));
    Tensor t8 = sum(log(pos));
    Tensor t9 = logsumexp(a);
    Tensor t10 = sum(mul(row_normalize(a, 1e-8), b));
    Tensor t11 = cross_entropy(matmul(a, transpose(b)), ids);
    Tensor t12 = sum(mul(gather_rows(b, ids), a));
    Tensor t13 = sum_squares(gather(a, flat));
    Tensor t14 = sum(mul(slice_cols(a, 1, 3), slice_cols(b, 0, 2)));
    Tensor t15 = sum_squares(concat_rows(std::vector<Tensor>{slice_rows(a, 0, 1), b}));
    Tensor t16 = sum_squares(concat_cols(std::vector<Tensor>{a, b}));
    Tensor t17 = div(mean(a), s2);
    Tensor t18 = mul(s1, sum(add_bias(a, bias)));
    Tensor t19 = cosine_similarity(v1, v2, 1e-8);
    Tensor t20 = sum(mul(softmax(causal_mask(matmul(a, transpose(b))), 1), matmul(a, transpose(a))));
    Tensor t21 = add_scalar(scale(sum(transpose(a)), 0.3), 2.0);
    return add_n(std::vector<Tensor>{t1, t2, t3, t4, t5, t6, t7, t8, t9, t10, t11,
                                     t12, t13, t14, t15, t16, t17, t18, t19, t20, t21});
  };
  const auto r = grad_check(params, loss);
  EXPECT_GT(r.checked, 50u);
  EXPECT_LT(r.max_rel_error, 1e-6);
}

INSTANTIATE_TEST_SUITE_P(RandomInstances, OpGradient, ::testing::Range(0, 5));
