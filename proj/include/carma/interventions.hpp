#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "carma/model.hpp"
#include "carma/tasks.hpp"

namespace carma {

// ---- Constituent-aware pooling ----

enum class PoolMode { Mean, Max, Sum };

inline constexpr PoolMode kAllPoolModes[] = {PoolMode::Mean, PoolMode::Max, PoolMode::Sum};

std::string to_string(PoolMode mode);
PoolMode pool_mode_from_string(std::string_view name);

struct PooledSequence {
  Tensor hidden;                  // [words + special tokens, d_model]
  std::vector<WordSpan> spans;    // one single-row span per word
};

// Collapses the rows of each word span into one row. Rows outside every span
// (special tokens) are copied unchanged; order is preserved. Throws
// ContractError on an empty or out-of-range span.
PooledSequence cap_pool(const Tensor& hidden, std::span<const WordSpan> spans, PoolMode mode);
PooledSequence cap_pool(const LayerTrace& trace, std::size_t layer, PoolMode mode);

struct CapResult {
  double accuracy = 0.0;  // percentage
  std::size_t layer = 0;
  double normalized_layer = 0.0;  // layer / L
  PoolMode mode = PoolMode::Mean;
  std::size_t n_examples = 0;
};

// For each example: run to `layer`, pool, patch and resume; exact match at
// SEP. Requires 1 <= layer <= L and a nonempty example list.
CapResult run_cap_eval(const Transformer& model, std::span<const Example> examples,
                       std::size_t layer, PoolMode mode);

// ---- Synonym replacement ----

// Word -> ranked substitutes built from the generator's synonym classes, so
// substitutes keep the slot and polarity of the original.
class SynonymLexicon {
 public:
  // Substitutes of a word are the other members of its class in cyclic order
  // starting after it; a nonzero seed permutes each ranking deterministically.
  static SynonymLexicon from_classes(const std::vector<std::vector<std::string>>& classes,
                                     std::uint64_t seed = 0);
  static SynonymLexicon for_task(Task task, std::uint64_t seed = 0);
  // Test mode: every covered word maps to itself.
  static SynonymLexicon identity(Task task);

  bool covers(std::string_view word) const;
  // Throws ContractError when the word is not covered.
  const std::vector<std::string>& substitutes(std::string_view word) const;
  bool is_identity() const { return identity_; }
  std::uint64_t seed() const { return seed_; }
  std::size_t size() const { return entries_.size(); }

 private:
  std::map<std::string, std::vector<std::string>, std::less<>> entries_;
  std::uint64_t seed_ = 0;
  bool identity_ = false;
};

struct Replacement {
  Example example;
  std::vector<std::size_t> replaced;  // word positions, ascending
  bool no_eligible = false;           // input returned unchanged
};

// Replaces ceil(rate * |eligible|) eligible words (synonym slots covered by
// the lexicon) with their top-ranked substitute. Positions are a prefix of a
// permutation seeded by (seed, prompt), so a higher rate replaces a superset
// of the words a lower rate replaces.
Replacement replace_synonyms(const Example& example, double rate, std::uint64_t seed,
                             const SynonymLexicon& lexicon);

struct SynonymSeedResult {
  std::uint64_t seed = 0;
  std::size_t correct_before = 0;
  std::size_t correct_after = 0;
  std::optional<double> consist_syn;  // empty when nothing was correct before
};

struct SynonymEval {
  double rate = 0.0;
  std::vector<SynonymSeedResult> per_seed;

  std::vector<double> values() const;  // present ConsistSyn values only
  std::optional<double> mean() const;
};

// Needs at least five seeds.
SynonymEval run_synonym_eval(const Transformer& model, std::span<const Example> examples,
                             double rate, std::span<const std::uint64_t> seeds,
                             const SynonymLexicon& lexicon);

}  // namespace carma
