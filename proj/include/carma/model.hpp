#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "carma/sequence.hpp"
#include "carma/tensor.hpp"

namespace carma {

struct TransformerConfig {
  std::size_t n_layers = 4;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t d_mlp = 256;
  std::size_t vocab_size = 200;
  std::size_t max_seq = 32;
  std::string activation = "gelu";
  double init_std = 0.02;

  // Throws ContractError when counts are zero or heads do not divide d_model.
  void validate() const;
  bool operator==(const TransformerConfig&) const = default;
};

// Per-layer residual stream for one forward pass. hidden[0] is the embedding
// output; hidden[k] is the output of block k and the exact input of block
// k+1. attn_out[k-1] and mlp_out[k-1] are block k's residual contributions.
struct LayerTrace {
  std::vector<Tensor> hidden;
  std::vector<Tensor> attn_out;
  std::vector<Tensor> mlp_out;
  std::vector<WordSpan> word_spans;

  std::size_t n_layers() const { return hidden.empty() ? 0 : hidden.size() - 1; }
};

// Layer index -> tensor that replaces hidden[layer] before block layer+1 runs.
// The replacement may have fewer rows than the original (pooled sequence).
using PatchMap = std::map<std::size_t, Tensor>;

struct ForwardResult {
  Tensor logits;  // [rows x vocab]
  LayerTrace trace;
};

// Pre-norm decoder-only transformer with learned absolute positions.
class Transformer {
 public:
  Transformer(const TransformerConfig& config, std::uint64_t seed);
  // Copies would alias parameter storage; use clone().
  Transformer(const Transformer&) = delete;
  Transformer& operator=(const Transformer&) = delete;
  Transformer(Transformer&&) = default;
  Transformer& operator=(Transformer&&) = default;

  const TransformerConfig& config() const { return config_; }

  // Logits for every final position, or only `logit_rows` when non-empty
  // (rows index the possibly patched final sequence).
  ForwardResult forward(const TokenSequence& input, const PatchMap& patches = {},
                        std::span<const std::size_t> logit_rows = {}) const;

  // Greedy next token at the final position; ties go to the lowest id.
  int generate_next(const TokenSequence& input) const;

  std::vector<Tensor>& parameters() { return params_; }
  const std::vector<Tensor>& parameters() const { return params_; }
  const std::vector<std::string>& parameter_names() const { return names_; }
  std::size_t parameter_count() const;

  void zero_grad();
  // Independent copy of all parameter values.
  Transformer clone() const;
  // Copies values from a model with identical configuration.
  void load_values_from(const Transformer& other);

  void save(const std::filesystem::path& path) const;
  static Transformer load(const std::filesystem::path& path);

 private:
  struct Block {
    Tensor ln1_gain, ln1_bias;
    Tensor w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;
    Tensor ln2_gain, ln2_bias;
    Tensor w_in, b_in, w_out, b_out;
  };

  Tensor& add_param(const std::string& name, Shape shape, std::vector<Scalar> values);
  Tensor attention(const Block& block, const Tensor& x) const;
  Tensor mlp(const Block& block, const Tensor& x) const;
  void bind_views();

  TransformerConfig config_;
  std::vector<Tensor> params_;
  std::vector<std::string> names_;
  Tensor tok_emb_, pos_emb_;
  std::vector<Block> blocks_;
  Tensor lnf_gain_, lnf_bias_, head_w_, head_b_;
};

// Index of the largest value; lowest index among exact ties.
std::size_t argmax_lowest(std::span<const Scalar> values);

}  // namespace carma
