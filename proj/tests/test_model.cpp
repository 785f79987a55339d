#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>

#include "carma/carma_loss.hpp"
#include "carma/errors.hpp"
#include "carma/model.hpp"
#include "grad_check.hpp"

using namespace carma;

namespace {

TransformerConfig tiny(std::size_t layers = 2, std::size_t d = 8, std::size_t heads = 2) {
  TransformerConfig c;
  c.n_layers = layers;
  c.d_model = d;
  c.n_heads = heads;
  c.d_mlp = 2 * d;
  c.vocab_size = 11;
  c.max_seq = 8;
  c.init_std = 0.5;
  return c;
}

TokenSequence seq(std::vector<int> ids, std::vector<WordSpan> spans = {}) {
  return TokenSequence{std::move(ids), std::move(spans)};
}

std::map<std::string, std::vector<double>> named(const Transformer& m) {
  std::map<std::string, std::vector<double>> out;
  for (std::size_t i = 0; i < m.parameters().size(); ++i) {
    auto d = m.parameters()[i].data();
    out[m.parameter_names()[i]] = std::vector<double>(d.begin(), d.end());
  }
  return out;
}

using Matrix = std::vector<std::vector<double>>;

// Plain-loop forward pass written independently of the tensor engine.
Matrix reference_logits(const Transformer& model, const std::vector<int>& ids) {
  const auto p = named(model);
  const auto& c = model.config();
  const std::size_t n = ids.size(), d = c.d_model, m = c.d_mlp, dh = d / c.n_heads;
  auto W = [&](const std::string& name, std::size_t r, std::size_t col, std::size_t cols) {
    return p.at(name)[r * cols + col];
  };
  auto ln = [&](const Matrix& x, const std::string& g, const std::string& b) {
    Matrix y = x;
    for (auto& row : y) {
      double mu = 0, var = 0;
      for (double v : row) mu += v;
      mu /= static_cast<double>(d);
      for (double v : row) var += (v - mu) * (v - mu);
      var /= static_cast<double>(d);
      for (std::size_t j = 0; j < d; ++j)
        row[j] = (row[j] - mu) / std::sqrt(var + 1e-5) * p.at(g)[j] + p.at(b)[j];
    }
    return y;
  };
  auto affine = [&](const Matrix& x, const std::string& w, const std::string& b, std::size_t out) {
    Matrix y(x.size(), std::vector<double>(out));
    for (std::size_t r = 0; r < x.size(); ++r)
      for (std::size_t o = 0; o < out; ++o) {
        double s = p.at(b)[o];
        for (std::size_t i = 0; i < x[r].size(); ++i) s += x[r][i] * W(w, i, o, out);
        y[r][o] = s;
      }
    return y;
  };
  Matrix h(n, std::vector<double>(d));
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t j = 0; j < d; ++j)
      h[t][j] = W("tok_emb", static_cast<std::size_t>(ids[t]), j, d) + W("pos_emb", t, j, d);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string b = "block" + std::to_string(l) + ".";
    Matrix x = ln(h, b + "ln1.gain", b + "ln1.bias");
    Matrix q = affine(x, b + "attn.w_q", b + "attn.b_q", d);
    Matrix k = affine(x, b + "attn.w_k", b + "attn.b_k", d);
    Matrix v = affine(x, b + "attn.w_v", b + "attn.b_v", d);
    Matrix merged(n, std::vector<double>(d, 0.0));
    for (std::size_t head = 0; head < c.n_heads; ++head) {
      const std::size_t lo = head * dh;
      for (std::size_t t = 0; t < n; ++t) {
        std::vector<double> w(t + 1);
        double mx = -1e300;
        for (std::size_t s = 0; s <= t; ++s) {
          double dot = 0;
          for (std::size_t j = 0; j < dh; ++j) dot += q[t][lo + j] * k[s][lo + j];
          w[s] = dot / std::sqrt(static_cast<double>(dh));
          mx = std::max(mx, w[s]);
        }
        double z = 0;
        for (auto& e : w) z += (e = std::exp(e - mx));
        for (std::size_t s = 0; s <= t; ++s)
          for (std::size_t j = 0; j < dh; ++j) merged[t][lo + j] += w[s] / z * v[s][lo + j];
      }
    }
    Matrix a = affine(merged, b + "attn.w_o", b + "attn.b_o", d);
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t j = 0; j < d; ++j) h[t][j] += a[t][j];
    Matrix u = affine(ln(h, b + "ln2.gain", b + "ln2.bias"), b + "mlp.w_in", b + "mlp.b_in", m);
    for (auto& row : u)
      for (auto& e : row)
        e = 0.5 * e * (1 + std::tanh(std::sqrt(2 / M_PI) * (e + 0.044715 * e * e * e)));
    Matrix f = affine(u, b + "mlp.w_out", b + "mlp.b_out", d);
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t j = 0; j < d; ++j) h[t][j] += f[t][j];
  }
  return affine(ln(h, "lnf.gain", "lnf.bias"), "head.w", "head.b", c.vocab_size);
}

void randomize_all(Transformer& m, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 0.5);
  for (auto& p : m.parameters())
    for (auto& v : p.mutable_data()) v = dist(rng);
}

}  // namespace

TEST(Config, Validation) {
  TransformerConfig c = tiny();
  c.n_heads = 3;
  EXPECT_THROW(Transformer(c, 1), ContractError);
  c = tiny();
  c.n_layers = 0;
  EXPECT_THROW(Transformer(c, 1), ContractError);
}

TEST(Forward, ShapesAndTrace) {
  Transformer m(tiny(3), 1);
  auto out = m.forward(seq({1, 4, 5, 2}, {{1, 3}}));
  EXPECT_EQ(out.logits.shape(), (Shape{4, 11}));
  EXPECT_EQ(out.trace.hidden.size(), 4u);
  EXPECT_EQ(out.trace.n_layers(), 3u);
  EXPECT_EQ(out.trace.word_spans.size(), 1u);
}

TEST(Forward, ZeroWeightsGiveUniformLogits) {
  Transformer m(tiny(), 1);
  for (auto& p : m.parameters())
    for (auto& v : p.mutable_data()) v = 0;
  auto out = m.forward(seq({1, 3, 4}));
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 11; ++c) EXPECT_EQ(out.logits.at(r, c), out.logits.at(r, 0));
}

TEST(Forward, MatchesHandComputationOneLayerWidthTwo) {
  Transformer m(tiny(1, 2, 1), 3);
  randomize_all(m, 17);
  const std::vector<int> ids{1, 7, 3, 2};
  auto out = m.forward(seq(ids));
  const Matrix ref = reference_logits(m, ids);
  for (std::size_t r = 0; r < ids.size(); ++r)
    for (std::size_t c = 0; c < 11; ++c) EXPECT_NEAR(out.logits.at(r, c), ref[r][c], 1e-10);
}

TEST(Forward, MatchesReferenceMultiHead) {
  Transformer m(tiny(2, 8, 2), 3);
  randomize_all(m, 23);
  const std::vector<int> ids{1, 4, 9, 10, 2};
  auto out = m.forward(seq(ids));
  const Matrix ref = reference_logits(m, ids);
  for (std::size_t r = 0; r < ids.size(); ++r)
    for (std::size_t c = 0; c < 11; ++c) EXPECT_NEAR(out.logits.at(r, c), ref[r][c], 1e-10);
}

TEST(Forward, IdempotentPatch) {
  Transformer m(tiny(3), 5);
  auto plain = m.forward(seq({1, 4, 5, 6, 2}));
  for (std::size_t k = 0; k <= 3; ++k) {
    auto patched = m.forward(seq({1, 4, 5, 6, 2}), PatchMap{{k, plain.trace.hidden[k]}});
    for (std::size_t i = 0; i < plain.logits.size(); ++i)
      EXPECT_EQ(patched.logits.data()[i], plain.logits.data()[i]);
  }
}

TEST(Forward, PatchLocality) {
  Transformer m(tiny(3), 5);
  const TokenSequence s = seq({1, 4, 5, 6, 2});
  auto plain = m.forward(s);
  const std::size_t k = 2;
  Tensor patch = Tensor::filled({3, 8}, 0.25);
  auto patched = m.forward(s, PatchMap{{k, patch}});
  for (std::size_t j = 0; j < k; ++j)
    for (std::size_t i = 0; i < plain.trace.hidden[j].size(); ++i)
      EXPECT_EQ(patched.trace.hidden[j].data()[i], plain.trace.hidden[j].data()[i]);
  EXPECT_EQ(patched.trace.hidden[k].node(), patch.node());
  EXPECT_EQ(patched.trace.hidden[3].rows(), 3u);
  EXPECT_EQ(patched.logits.rows(), 3u);
}

TEST(Forward, ResidualConsistency) {
  Transformer m(tiny(3), 8);
  auto out = m.forward(seq({1, 3, 5, 7, 2}));
  for (std::size_t k = 0; k < 3; ++k) {
    for (std::size_t i = 0; i < out.trace.hidden[k].size(); ++i) {
      const double delta = out.trace.hidden[k + 1].data()[i] - out.trace.hidden[k].data()[i];
      const double parts = out.trace.attn_out[k].data()[i] + out.trace.mlp_out[k].data()[i];
      EXPECT_LT(std::abs(delta - parts), 1e-10);
    }
  }
}

TEST(Forward, CausalMasking) {
  Transformer m(tiny(2), 9);
  auto a = m.forward(seq({1, 3, 5, 7, 2}));
  auto b = m.forward(seq({1, 3, 5, 9, 10}));
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 11; ++c) EXPECT_EQ(a.logits.at(r, c), b.logits.at(r, c));
}

TEST(Forward, Errors) {
  Transformer m(tiny(2), 9);
  EXPECT_THROW(m.forward(seq({})), ContractError);
  EXPECT_THROW(m.forward(seq(std::vector<int>(9, 1))), ContractError);
  EXPECT_THROW(m.forward(seq({1, 2}), PatchMap{{3, Tensor::zeros({2, 8})}}), ContractError);
  EXPECT_THROW(m.forward(seq({1, 2}), PatchMap{{1, Tensor::zeros({2, 7})}}), ContractError);
  EXPECT_THROW(m.forward(seq({1, 2}), PatchMap{{1, Tensor::zeros({3, 8})}}), ContractError);
}

TEST(Forward, DeterministicAcrossInstances) {
  Transformer a(tiny(2), 42), b(tiny(2), 42);
  auto la = a.forward(seq({1, 5, 2})).logits, lb = b.forward(seq({1, 5, 2})).logits;
  for (std::size_t i = 0; i < la.size(); ++i) EXPECT_EQ(la.data()[i], lb.data()[i]);
}

TEST(Generate, ArgmaxTieRule) {
  std::vector<Scalar> v(12, 0.0);
  v[7] = 3;
  EXPECT_EQ(argmax_lowest(v), 7u);
  std::vector<Scalar> tie(12, 0.0);
  tie[3] = tie[9] = 2;
  EXPECT_EQ(argmax_lowest(tie), 3u);
}

TEST(Generate, ZeroModelPicksLowestId) {
  Transformer m(tiny(), 1);
  for (auto& p : m.parameters())
    for (auto& v : p.mutable_data()) v = 0;
  EXPECT_EQ(m.generate_next(seq({1, 4})), 0);
  EXPECT_THROW(m.generate_next(seq({})), ContractError);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  Transformer m(tiny(2), 77);
  const auto path = std::filesystem::temp_directory_path() / "carma_model_roundtrip.bin";
  m.save(path);
  Transformer back = Transformer::load(path);
  std::filesystem::remove(path);
  EXPECT_EQ(back.config(), m.config());
  ASSERT_EQ(back.parameters().size(), m.parameters().size());
  for (std::size_t i = 0; i < m.parameters().size(); ++i) {
    auto a = m.parameters()[i].data(), b = back.parameters()[i].data();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t j = 0; j < a.size(); ++j) EXPECT_EQ(a[j], b[j]);
  }
}

TEST(Checkpoint, RejectsForeignFile) {
  const auto path = std::filesystem::temp_directory_path() / "carma_not_a_model.bin";
  { std::ofstream(path) << "hello"; }
  EXPECT_THROW(Transformer::load(path), std::runtime_error);
  std::filesystem::remove(path);
}

TEST(Clone, IsIndependent) {
  Transformer m(tiny(2), 3);
  Transformer c = m.clone();
  c.parameters()[0].mutable_data()[0] += 1.0;
  EXPECT_NE(c.parameters()[0].data()[0], m.parameters()[0].data()[0]);
}

// Total objective through the whole model, every parameter coordinate.
TEST(Gradient, FullCarmaObjectiveEveryParameter) {
  TransformerConfig c = tiny(2, 4, 2);
  Transformer m(c, 12);
  const TokenSequence s = seq({1, 4, 5, 6, 7, 8, 2}, {{1, 3}, {3, 4}, {4, 6}});
  std::mt19937_64 rng(4);
  const CompositionGroups groups = build_groups(s.word_spans, s.ids.size(), 16, rng);
  CarmaConfig cfg;
  cfg.layer_start = 1;
  cfg.layer_end = 1;
  const std::vector<int> target{3};
  const std::size_t last = s.ids.size() - 1;
  auto loss = [&] {
    ForwardResult out = m.forward(s, {}, std::span(&last, 1));
    Tensor task = cross_entropy(out.logits, target);
    Tensor mi = mi_loss(out.trace, groups, cfg).value;
    Tensor stab = stability_loss(out.trace, cfg);
    return total_loss(task, carma_loss(mi, stab, cfg), cfg);
  };
  const auto r = carma::testing::grad_check(m.parameters(), loss);
  EXPECT_EQ(r.checked, m.parameter_count());
  EXPECT_LT(r.max_rel_error, 1e-4);
}
