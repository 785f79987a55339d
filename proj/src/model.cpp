#include "carma/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include "carma/errors.hpp"
#include "json.hpp"

namespace carma {
namespace {

constexpr char kMagic[8] = {'C', 'A', 'R', 'M', 'A', 'C', 'K', 'P'};
constexpr std::uint32_t kCheckpointVersion = 1;

nlohmann::json config_to_json(const TransformerConfig& c) {
  return {{"n_layers", c.n_layers}, {"d_model", c.d_model},       {"n_heads", c.n_heads},
          {"d_mlp", c.d_mlp},       {"vocab_size", c.vocab_size}, {"max_seq", c.max_seq},
          {"activation", c.activation}, {"init_std", c.init_std}};
}

TransformerConfig config_from_json(const nlohmann::json& j) {
  TransformerConfig c;
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.d_mlp = j.at("d_mlp").get<std::size_t>();
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.max_seq = j.at("max_seq").get<std::size_t>();
  c.activation = j.at("activation").get<std::string>();
  c.init_std = j.at("init_std").get<double>();
  return c;
}

}  // namespace

void TransformerConfig::validate() const {
  if (n_layers == 0 || d_model == 0 || n_heads == 0 || d_mlp == 0 || vocab_size == 0 ||
      max_seq == 0) {
    throw ContractError("transformer config: all counts must be >= 1");
  }
  if (d_model % n_heads != 0) {
    throw ContractError("transformer config: d_model " + std::to_string(d_model) +
                        " is not divisible by n_heads " + std::to_string(n_heads));
  }
  if (activation != "gelu") {
    throw ContractError("transformer config: unsupported activation '" + activation + "'");
  }
}

std::size_t argmax_lowest(std::span<const Scalar> values) {
  if (values.empty()) throw ContractError("argmax: empty input");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = i;
  return best;
}

Transformer::Transformer(const TransformerConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, config_.init_std);
  const std::size_t d = config_.d_model, m = config_.d_mlp;

  auto random = [&](std::size_t n) {
    std::vector<Scalar> v(n);
    for (auto& x : v) x = static_cast<Scalar>(normal(rng));
    return v;
  };
  auto constant = [](std::size_t n, Scalar value) { return std::vector<Scalar>(n, value); };

  add_param("tok_emb", {config_.vocab_size, d}, random(config_.vocab_size * d));
  add_param("pos_emb", {config_.max_seq, d}, random(config_.max_seq * d));
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    const std::string p = "block" + std::to_string(l) + ".";
    add_param(p + "ln1.gain", {d}, constant(d, 1));
    add_param(p + "ln1.bias", {d}, constant(d, 0));
    add_param(p + "attn.w_q", {d, d}, random(d * d));
    add_param(p + "attn.b_q", {d}, constant(d, 0));
    add_param(p + "attn.w_k", {d, d}, random(d * d));
    add_param(p + "attn.b_k", {d}, constant(d, 0));
    add_param(p + "attn.w_v", {d, d}, random(d * d));
    add_param(p + "attn.b_v", {d}, constant(d, 0));
    add_param(p + "attn.w_o", {d, d}, random(d * d));
    add_param(p + "attn.b_o", {d}, constant(d, 0));
    add_param(p + "ln2.gain", {d}, constant(d, 1));
    add_param(p + "ln2.bias", {d}, constant(d, 0));
    add_param(p + "mlp.w_in", {d, m}, random(d * m));
    add_param(p + "mlp.b_in", {m}, constant(m, 0));
    add_param(p + "mlp.w_out", {m, d}, random(m * d));
    add_param(p + "mlp.b_out", {d}, constant(d, 0));
  }
  add_param("lnf.gain", {d}, constant(d, 1));
  add_param("lnf.bias", {d}, constant(d, 0));
  add_param("head.w", {d, config_.vocab_size}, random(d * config_.vocab_size));
  add_param("head.b", {config_.vocab_size}, constant(config_.vocab_size, 0));
  bind_views();
}

Tensor& Transformer::add_param(const std::string& name, Shape shape, std::vector<Scalar> values) {
  params_.push_back(Tensor::parameter(std::move(shape), std::move(values)));
  names_.push_back(name);
  return params_.back();
}

void Transformer::bind_views() {
  std::size_t i = 0;
  tok_emb_ = params_[i++];
  pos_emb_ = params_[i++];
  blocks_.assign(config_.n_layers, Block{});
  for (auto& b : blocks_) {
    for (Tensor* t : {&b.ln1_gain, &b.ln1_bias, &b.w_q, &b.b_q, &b.w_k, &b.b_k, &b.w_v, &b.b_v,
                      &b.w_o, &b.b_o, &b.ln2_gain, &b.ln2_bias, &b.w_in, &b.b_in, &b.w_out,
                      &b.b_out}) {
      *t = params_[i++];
    }
  }
  lnf_gain_ = params_[i++];
  lnf_bias_ = params_[i++];
  head_w_ = params_[i++];
  head_b_ = params_[i++];
}

std::size_t Transformer::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.size();
  return n;
}

void Transformer::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

Transformer Transformer::clone() const {
  Transformer copy(config_, 0);
  copy.load_values_from(*this);
  return copy;
}

void Transformer::load_values_from(const Transformer& other) {
  if (!(other.config_ == config_)) {
    throw ContractError("load_values_from: configuration mismatch");
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto src = other.params_[i].data();
    auto dst = params_[i].mutable_data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

Tensor Transformer::attention(const Block& b, const Tensor& x) const {
  const std::size_t heads = config_.n_heads;
  const std::size_t dh = config_.d_model / heads;
  const Scalar inv_sqrt = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
  Tensor q = add_bias(matmul(x, b.w_q), b.b_q);
  Tensor k = add_bias(matmul(x, b.w_k), b.b_k);
  Tensor v = add_bias(matmul(x, b.w_v), b.b_v);
  std::vector<Tensor> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t lo = h * dh, hi = lo + dh;
    Tensor qh = slice_cols(q, lo, hi);
    Tensor kh = slice_cols(k, lo, hi);
    Tensor vh = slice_cols(v, lo, hi);
    Tensor scores = causal_mask(scale(matmul(qh, transpose(kh)), inv_sqrt));
    outs.push_back(matmul(softmax(scores, 1), vh));
  }
  Tensor merged = heads == 1 ? outs[0] : concat_cols(outs);
  return add_bias(matmul(merged, b.w_o), b.b_o);
}

Tensor Transformer::mlp(const Block& b, const Tensor& x) const {
  return add_bias(matmul(gelu(add_bias(matmul(x, b.w_in), b.b_in)), b.w_out), b.b_out);
}

ForwardResult Transformer::forward(const TokenSequence& input, const PatchMap& patches,
                                   std::span<const std::size_t> logit_rows) const {
  const std::size_t n = input.ids.size();
  if (n == 0) throw ContractError("forward: empty input");
  if (n > config_.max_seq) {
    throw ContractError("forward: input of " + std::to_string(n) +
                        " tokens would be truncated (max_seq " +
                        std::to_string(config_.max_seq) + ")");
  }
  for (const auto& [layer, patch] : patches) {
    if (layer > config_.n_layers) {
      throw ContractError("forward: patch at layer " + std::to_string(layer) + " beyond " +
                          std::to_string(config_.n_layers) + " layers");
    }
    if (!patch.defined() || patch.rank() != 2 || patch.cols() != config_.d_model ||
        patch.rows() == 0) {
      throw ContractError("forward: malformed patch for layer " + std::to_string(layer));
    }
  }

  ForwardResult result;
  LayerTrace& trace = result.trace;
  trace.word_spans = input.word_spans;

  auto apply_patch = [&](std::size_t layer, Tensor h) {
    auto it = patches.find(layer);
    if (it == patches.end()) return h;
    if (it->second.rows() > h.rows()) {
      throw ContractError("forward: patch for layer " + std::to_string(layer) + " has " +
                          std::to_string(it->second.rows()) + " rows, sequence has " +
                          std::to_string(h.rows()));
    }
    return it->second;
  };

  Tensor h = add(gather_rows(tok_emb_, input.ids), slice_rows(pos_emb_, 0, n));
  h = apply_patch(0, h);
  trace.hidden.push_back(h);
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    const Block& b = blocks_[l];
    Tensor a = attention(b, layer_norm(h, b.ln1_gain, b.ln1_bias, 1));
    Tensor mid = add(h, a);
    Tensor f = mlp(b, layer_norm(mid, b.ln2_gain, b.ln2_bias, 1));
    h = apply_patch(l + 1, add(mid, f));
    trace.attn_out.push_back(a);
    trace.mlp_out.push_back(f);
    trace.hidden.push_back(h);
  }

  Tensor final_rows = h;
  if (!logit_rows.empty()) {
    std::vector<Tensor> picked;
    for (std::size_t r : logit_rows) {
      if (r >= h.rows()) {
        throw IndexError("forward: logit row " + std::to_string(r) + " outside " +
                         std::to_string(h.rows()) + " rows");
      }
      picked.push_back(slice_rows(h, r, r + 1));
    }
    final_rows = picked.size() == 1 ? picked[0] : concat_rows(picked);
  }
  Tensor normed = layer_norm(final_rows, lnf_gain_, lnf_bias_, 1);
  result.logits = add_bias(matmul(normed, head_w_), head_b_);
  return result;
}

int Transformer::generate_next(const TokenSequence& input) const {
  if (input.ids.empty()) throw ContractError("generate_next: empty input");
  NoGradGuard no_grad;
  const std::size_t row = input.ids.size() - 1;
  ForwardResult out = forward(input, {}, std::span<const std::size_t>(&row, 1));
  return static_cast<int>(argmax_lowest(out.logits.data()));
}

void Transformer::save(const std::filesystem::path& path) const {
  const std::string header = config_to_json(config_).dump();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("checkpoint: cannot open " + path.string() + " for writing");
  os.write(kMagic, sizeof kMagic);
  const std::uint32_t version = kCheckpointVersion;
  const auto header_len = static_cast<std::uint32_t>(header.size());
  os.write(reinterpret_cast<const char*>(&version), sizeof version);
  os.write(reinterpret_cast<const char*>(&header_len), sizeof header_len);
  os.write(header.data(), static_cast<std::streamsize>(header.size()));
  const auto count = static_cast<std::uint64_t>(parameter_count());
  os.write(reinterpret_cast<const char*>(&count), sizeof count);
  for (const auto& p : params_) {
    for (Scalar v : p.data()) {
      const double d = static_cast<double>(v);
      os.write(reinterpret_cast<const char*>(&d), sizeof d);
    }
  }
  if (!os) throw std::runtime_error("checkpoint: write failed for " + path.string());
}

Transformer Transformer::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path.string());
  char magic[8];
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kMagic, sizeof magic) != 0) {
    throw std::runtime_error("checkpoint: " + path.string() + " is not a checkpoint file");
  }
  std::uint32_t version = 0, header_len = 0;
  is.read(reinterpret_cast<char*>(&version), sizeof version);
  is.read(reinterpret_cast<char*>(&header_len), sizeof header_len);
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  }
  std::string header(header_len, '\0');
  is.read(header.data(), header_len);
  Transformer model(config_from_json(nlohmann::json::parse(header)), 0);
  std::uint64_t count = 0;
  is.read(reinterpret_cast<char*>(&count), sizeof count);
  if (count != model.parameter_count()) {
    throw std::runtime_error("checkpoint: parameter count mismatch in " + path.string());
  }
  for (auto& p : model.params_) {
    for (Scalar& v : p.mutable_data()) {
      double d = 0;
      is.read(reinterpret_cast<char*>(&d), sizeof d);
      v = static_cast<Scalar>(d);
    }
  }
  if (!is) throw std::runtime_error("checkpoint: truncated file " + path.string());
  return model;
}

}  // namespace carma
