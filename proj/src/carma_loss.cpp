#include "carma/carma_loss.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "carma/errors.hpp"
#include "carma/log.hpp"

namespace carma {

void CompositionGroups::validate(std::size_t seq_len) const {
  for (const Anchor& a : anchors) {
    auto check = [&](std::size_t i) {
      if (i >= seq_len) {
        throw ContractError("groups: index " + std::to_string(i) + " outside sequence of " +
                            std::to_string(seq_len));
      }
    };
    check(a.index);
    if (a.positives.empty()) {
      throw ContractError("groups: anchor " + std::to_string(a.index) + " has no positives");
    }
    std::unordered_set<std::size_t> pos;
    for (std::size_t p : a.positives) {
      check(p);
      if (p == a.index) {
        throw ContractError("groups: anchor " + std::to_string(a.index) +
                            " listed among its own positives");
      }
      pos.insert(p);
    }
    for (std::size_t n : a.negatives) {
      check(n);
      if (pos.count(n) || n == a.index) {
        throw ContractError("groups: token " + std::to_string(n) +
                            " is both positive and negative for anchor " +
                            std::to_string(a.index));
      }
    }
  }
}

void CarmaConfig::validate(std::size_t n_layers) const {
  auto unit = [](double v, const char* name) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw ContractError(std::string("carma config: ") + name + " must lie in [0,1]");
    }
  };
  unit(lambda, "lambda");
  unit(gamma, "gamma");
  unit(eta, "eta");
  if (!(tau > 0.0)) throw ContractError("carma config: tau must be positive");
  if (!(epsilon > 0.0)) throw ContractError("carma config: epsilon must be positive");
  if (layer_start == 0 || layer_start > layer_end || layer_end > n_layers) {
    throw ContractError("carma config: layer range [" + std::to_string(layer_start) + ", " +
                        std::to_string(layer_end) + "] invalid for " + std::to_string(n_layers) +
                        " layers");
  }
}

CompositionGroups build_groups(std::span<const WordSpan> spans, std::size_t seq_len,
                               std::size_t max_negatives, std::mt19937_64& rng) {
  CompositionGroups groups;
  for (std::size_t w = 0; w < spans.size(); ++w) {
    const WordSpan& span = spans[w];
    if (span.end > seq_len || span.begin >= span.end) {
      throw ContractError("groups: malformed word span");
    }
    if (span.size() < 2) continue;
    std::vector<std::size_t> others;
    for (std::size_t v = 0; v < spans.size(); ++v) {
      if (v == w) continue;
      for (std::size_t t = spans[v].begin; t < spans[v].end; ++t) others.push_back(t);
    }
    for (std::size_t i = span.begin; i < span.end; ++i) {
      Anchor a;
      a.index = i;
      for (std::size_t j = span.begin; j < span.end; ++j)
        if (j != i) a.positives.push_back(j);
      a.negatives = others;
      if (a.negatives.size() > max_negatives) {
        std::shuffle(a.negatives.begin(), a.negatives.end(), rng);
        a.negatives.resize(max_negatives);
        std::sort(a.negatives.begin(), a.negatives.end());
      }
      groups.anchors.push_back(std::move(a));
    }
  }
  return groups;
}

Scalar similarity(std::span<const Scalar> a, std::span<const Scalar> b, Scalar eps) {
  if (a.size() != b.size()) {
    throw ShapeError("similarity: dimension mismatch " + std::to_string(a.size()) + " vs " +
                     std::to_string(b.size()));
  }
  Scalar ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / (std::sqrt(aa + eps) * std::sqrt(bb + eps));
}

Tensor similarity(const Tensor& a, const Tensor& b, Scalar eps) {
  return cosine_similarity(a, b, eps);
}

MiLoss mi_loss(std::span<const LayerTrace> traces, std::span<const CompositionGroups> groups,
               const CarmaConfig& cfg) {
  if (traces.size() != groups.size()) {
    throw ContractError("mi_loss: " + std::to_string(traces.size()) + " traces but " +
                        std::to_string(groups.size()) + " group sets");
  }
  MiLoss result;
  for (std::size_t b = 0; b < traces.size(); ++b) {
    cfg.validate(traces[b].n_layers());
    groups[b].validate(traces[b].hidden[0].rows());
    result.anchors += groups[b].anchors.size();
  }
  if (result.anchors == 0) {
    result.no_anchors = true;
    result.value = Tensor::scalar(0);
    return result;
  }

  const Scalar inv_tau = Scalar(1) / static_cast<Scalar>(cfg.tau);
  std::vector<Tensor> terms;
  for (std::size_t k = cfg.layer_start; k <= cfg.layer_end; ++k) {
    for (std::size_t b = 0; b < traces.size(); ++b) {
      if (groups[b].anchors.empty()) continue;
      const Tensor& h = traces[b].hidden[k];
      const std::size_t n = h.rows();
      Tensor unit = row_normalize(h, static_cast<Scalar>(cfg.epsilon));
      Tensor logits = scale(matmul(unit, transpose(unit)), inv_tau);
      for (const Anchor& a : groups[b].anchors) {
        std::vector<std::size_t> idx;
        idx.reserve(a.positives.size() + a.negatives.size());
        for (std::size_t p : a.positives) idx.push_back(a.index * n + p);
        const std::size_t n_pos = idx.size();
        for (std::size_t m : a.negatives) idx.push_back(a.index * n + m);
        Tensor pos = logsumexp(gather(logits, std::span(idx).first(n_pos)));
        Tensor all = logsumexp(gather(logits, idx));
        terms.push_back(sub(pos, all));
      }
    }
  }
  Tensor total = add_n(terms);
  const std::size_t n_layers = cfg.layer_end - cfg.layer_start + 1;
  Scalar norm = Scalar(1) / static_cast<Scalar>(n_layers);
  if (cfg.average_over_anchors) norm /= static_cast<Scalar>(result.anchors);
  result.value = scale(total, -norm);
  return result;
}

MiLoss mi_loss(const LayerTrace& trace, const CompositionGroups& groups, const CarmaConfig& cfg) {
  return mi_loss(std::span(&trace, 1), std::span(&groups, 1), cfg);
}

Tensor stability_loss(std::span<const LayerTrace> traces, const CarmaConfig& cfg) {
  if (traces.empty()) throw ContractError("stability_loss: no traces");
  const std::size_t n_layers = traces[0].n_layers();
  for (const auto& t : traces) {
    if (t.n_layers() != n_layers) throw ContractError("stability_loss: mixed layer counts");
  }
  cfg.validate(n_layers);
  std::size_t last = cfg.layer_end;
  if (last > n_layers - 1) {
    if (cfg.layer_start > n_layers - 1) {
      throw ContractError("stability_loss: layer_start " + std::to_string(cfg.layer_start) +
                          " leaves no transition in a " + std::to_string(n_layers) +
                          "-layer model");
    }
    warn("stability_loss: layer_end " + std::to_string(cfg.layer_end) + " clamped to " +
         std::to_string(n_layers - 1) + " (needs layer k+1)");
    last = n_layers - 1;
  }

  auto stack = [&](std::size_t k) {
    if (traces.size() == 1) return traces[0].hidden[k];
    std::vector<Tensor> parts;
    parts.reserve(traces.size());
    for (const auto& t : traces) parts.push_back(t.hidden[k]);
    return concat_rows(parts);
  };

  Tensor total;
  Tensor lower = stack(cfg.layer_start);
  const Scalar inv_p = Scalar(1) / static_cast<Scalar>(lower.rows());
  for (std::size_t k = cfg.layer_start; k <= last; ++k) {
    Tensor upper = stack(k + 1);
    Tensor num = scale(sum_squares(sub(upper, lower)), inv_p);
    Tensor den = add_scalar(add(scale(sum_squares(lower), inv_p), scale(sum_squares(upper), inv_p)),
                            static_cast<Scalar>(cfg.epsilon));
    Tensor term = div(num, den);
    total = total.defined() ? add(total, term) : term;
    lower = upper;
  }
  return total;
}

Tensor stability_loss(const LayerTrace& trace, const CarmaConfig& cfg) {
  return stability_loss(std::span(&trace, 1), cfg);
}

Tensor carma_loss(const Tensor& mi, const Tensor& stab, const CarmaConfig& cfg) {
  return add(scale(mi, static_cast<Scalar>(cfg.gamma)), scale(stab, static_cast<Scalar>(cfg.eta)));
}

Tensor total_loss(const Tensor& task, const Tensor& carma, const CarmaConfig& cfg) {
  const auto lambda = static_cast<Scalar>(cfg.lambda);
  return add(scale(task, Scalar(1) - lambda), scale(carma, lambda));
}

std::pair<std::size_t, std::size_t> default_layer_range(std::size_t n_layers) {
  if (n_layers < 2) {
    throw ContractError("default_layer_range: need at least 2 layers, got " +
                        std::to_string(n_layers));
  }
  const std::size_t start = (n_layers + 3) / 4;
  const std::size_t half_minus = n_layers / 2 >= 2 ? n_layers / 2 - 2 : 0;
  std::size_t end = std::max(start + 1, half_minus);
  const std::size_t cap = n_layers - 1;
  return {std::min(std::max<std::size_t>(start, 1), cap), std::min(end, cap)};
}

}  // namespace carma
