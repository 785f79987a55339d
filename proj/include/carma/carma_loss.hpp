#pragma once

// Mutual-information alignment and layer-wise stability regularizers.
//
// The MI term is the InfoNCE surrogate evaluated on every layer in
// [layer_start, layer_end]:
//
//   L_MI = -(1/N) sum_k sum_i [ log sum_{j in H_i} exp(sim(h_i, h_j)/tau)
//                              - log( sum_{j in H_i} exp(.) + sum_{m in N_i} exp(.) ) ]
//
// with N the number of layers in range, H_i the other tokens of anchor i's
// word and N_i tokens of other words in the same sequence. sim is cosine
// similarity with eps-guarded norms.
//
// The stability term penalizes the normalized squared change between
// consecutive residual-stream outputs:
//
//   L_Stab = sum_k E|f_{k+1} - f_k|^2 / (E|f_k|^2 + E|f_{k+1}|^2 + eps)
//
// where expectations are means over all positions in the batch.

#include <cstdint>
#include <random>
#include <span>
#include <utility>
#include <vector>

#include "carma/model.hpp"
#include "carma/sequence.hpp"
#include "carma/tensor.hpp"

namespace carma {

struct Anchor {
  std::size_t index = 0;
  std::vector<std::size_t> positives;
  std::vector<std::size_t> negatives;
};

// Positive/negative token sets for one sequence.
struct CompositionGroups {
  std::vector<Anchor> anchors;

  // Throws ContractError on an index outside [0, seq_len), an anchor inside
  // its own positive set, overlapping positive/negative sets, or an empty
  // positive set.
  void validate(std::size_t seq_len) const;
};

struct CarmaConfig {
  double lambda = 0.4;
  double gamma = 0.5;
  double eta = 0.5;
  double tau = 0.1;
  double epsilon = 1e-8;
  std::size_t layer_start = 1;
  std::size_t layer_end = 2;
  std::size_t max_negatives = 16;
  std::uint64_t seed = 0;
  // Divide the MI sum by the anchor count as well as by the layer count.
  bool average_over_anchors = false;

  // Checks weights, tau/eps positivity and 0 < layer_start <= layer_end <= n_layers.
  void validate(std::size_t n_layers) const;
  bool operator==(const CarmaConfig&) const = default;
};

// Anchors are the tokens of multi-token words; positives are the other
// tokens of the same word and negatives the tokens of other words, uniformly
// subsampled to max_negatives. Single-token words contribute no anchor.
CompositionGroups build_groups(std::span<const WordSpan> spans, std::size_t seq_len,
                               std::size_t max_negatives, std::mt19937_64& rng);

Scalar similarity(std::span<const Scalar> a, std::span<const Scalar> b, Scalar eps = 1e-8);
Tensor similarity(const Tensor& a, const Tensor& b, Scalar eps = 1e-8);

struct MiLoss {
  Tensor value;
  std::size_t anchors = 0;  // anchors per layer, summed over the batch
  bool no_anchors = false;  // loss defined as 0, not connected to the graph
};

MiLoss mi_loss(std::span<const LayerTrace> traces, std::span<const CompositionGroups> groups,
               const CarmaConfig& cfg);
MiLoss mi_loss(const LayerTrace& trace, const CompositionGroups& groups, const CarmaConfig& cfg);

// Transitions run over k in [layer_start, min(layer_end, L-1)]; a range
// ending at L is clamped with a warning.
Tensor stability_loss(std::span<const LayerTrace> traces, const CarmaConfig& cfg);
Tensor stability_loss(const LayerTrace& trace, const CarmaConfig& cfg);

// gamma * mi + eta * stab
Tensor carma_loss(const Tensor& mi, const Tensor& stab, const CarmaConfig& cfg);
// (1 - lambda) * task + lambda * carma
Tensor total_loss(const Tensor& task, const Tensor& carma, const CarmaConfig& cfg);

// Regularized layer range for an L-layer model, roughly one third of the way
// up: [ceil(L/4), max(ceil(L/4)+1, floor(L/2)-2)] clipped to [1, L-1].
// Gives (3,4) for L=12, (6,10) for L=24 and (1,2) for L=4.
std::pair<std::size_t, std::size_t> default_layer_range(std::size_t n_layers);

}  // namespace carma
