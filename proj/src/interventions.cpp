#include "carma/interventions.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "carma/errors.hpp"
#include "carma/eval.hpp"
#include "carma/hash.hpp"
#include "carma/metrics.hpp"

namespace carma {

std::string to_string(PoolMode mode) {
  switch (mode) {
    case PoolMode::Mean: return "mean";
    case PoolMode::Max: return "max";
    default: return "sum";
  }
}

PoolMode pool_mode_from_string(std::string_view name) {
  if (name == "mean") return PoolMode::Mean;
  if (name == "max") return PoolMode::Max;
  if (name == "sum") return PoolMode::Sum;
  throw ContractError("unknown pooling mode '" + std::string(name) + "' (mean, max, sum)");
}

PooledSequence cap_pool(const Tensor& hidden, std::span<const WordSpan> spans, PoolMode mode) {
  if (hidden.rank() != 2) throw ShapeError("cap_pool: hidden must be rank 2");
  const std::size_t n = hidden.rows(), d = hidden.cols();
  std::vector<long> owner(n, -1);
  for (std::size_t w = 0; w < spans.size(); ++w) {
    const WordSpan& s = spans[w];
    if (s.begin >= s.end) throw ContractError("cap_pool: empty span for word " + std::to_string(w));
    if (s.end > n) throw ContractError("cap_pool: span past the end of the sequence");
    for (std::size_t t = s.begin; t < s.end; ++t) {
      if (owner[t] != -1) throw ContractError("cap_pool: overlapping spans");
      owner[t] = static_cast<long>(w);
    }
  }
  const auto src = hidden.data();
  std::vector<Scalar> out;
  PooledSequence result;
  for (std::size_t t = 0; t < n; ++t) {
    if (owner[t] == -1) {
      out.insert(out.end(), src.begin() + static_cast<long>(t * d),
                 src.begin() + static_cast<long>((t + 1) * d));
      continue;
    }
    const WordSpan& s = spans[static_cast<std::size_t>(owner[t])];
    if (t != s.begin) continue;
    std::vector<Scalar> row(src.begin() + static_cast<long>(s.begin * d),
                            src.begin() + static_cast<long>((s.begin + 1) * d));
    for (std::size_t r = s.begin + 1; r < s.end; ++r) {
      for (std::size_t c = 0; c < d; ++c) {
        const Scalar v = src[r * d + c];
        row[c] = mode == PoolMode::Max ? std::max(row[c], v) : row[c] + v;
      }
    }
    if (mode == PoolMode::Mean && s.size() > 1) {
      const auto count = static_cast<Scalar>(s.size());
      for (auto& v : row) v /= count;
    }
    const std::size_t at = out.size() / d;
    result.spans.push_back({at, at + 1});
    out.insert(out.end(), row.begin(), row.end());
  }
  const std::size_t rows = out.size() / d;
  result.hidden = Tensor::from({rows, d}, std::move(out));
  return result;
}

PooledSequence cap_pool(const LayerTrace& trace, std::size_t layer, PoolMode mode) {
  if (layer >= trace.hidden.size()) {
    throw ContractError("cap_pool: layer " + std::to_string(layer) + " outside trace of " +
                        std::to_string(trace.n_layers()) + " layers");
  }
  return cap_pool(trace.hidden[layer], trace.word_spans, mode);
}

CapResult run_cap_eval(const Transformer& model, std::span<const Example> examples,
                       std::size_t layer, PoolMode mode) {
  const std::size_t n_layers = model.config().n_layers;
  if (layer < 1 || layer > n_layers) {
    throw ContractError("run_cap_eval: layer " + std::to_string(layer) + " outside [1, " +
                        std::to_string(n_layers) + "]");
  }
  if (examples.empty()) throw ContractError("run_cap_eval: no examples");
  NoGradGuard no_grad;
  std::vector<int> preds, targets;
  for (const auto& ex : examples) {
    const TokenSequence seq = Tokenizer::standard().encode_prompt(ex.prompt);
    const std::size_t last = seq.ids.size() - 1;
    const ForwardResult plain = model.forward(seq, {}, std::span(&last, 1));
    PooledSequence pooled = cap_pool(plain.trace, layer, mode);
    const std::size_t pooled_last = pooled.hidden.rows() - 1;
    PatchMap patches{{layer, pooled.hidden}};
    const ForwardResult patched = model.forward(seq, patches, std::span(&pooled_last, 1));
    preds.push_back(predict_from_logits(patched.logits.data(), ex.task));
    targets.push_back(Tokenizer::standard().atomic_id(ex.target));
  }
  CapResult r;
  r.accuracy = accuracy(preds, targets);
  r.layer = layer;
  r.normalized_layer = static_cast<double>(layer) / static_cast<double>(n_layers);
  r.mode = mode;
  r.n_examples = examples.size();
  return r;
}

// ---- synonyms ----

SynonymLexicon SynonymLexicon::from_classes(const std::vector<std::vector<std::string>>& classes,
                                            std::uint64_t seed) {
  SynonymLexicon lex;
  lex.seed_ = seed;
  for (const auto& cls : classes) {
    if (cls.size() < 2) continue;
    for (std::size_t i = 0; i < cls.size(); ++i) {
      std::vector<std::string> subs;
      for (std::size_t j = 1; j < cls.size(); ++j) subs.push_back(cls[(i + j) % cls.size()]);
      if (seed != 0) {
        std::mt19937_64 rng(mix_seed(seed, fnv1a(cls[i])));
        std::shuffle(subs.begin(), subs.end(), rng);
      }
      if (!lex.entries_.emplace(cls[i], std::move(subs)).second) {
        throw ContractError("synonym lexicon: word '" + cls[i] + "' in more than one class");
      }
    }
  }
  return lex;
}

SynonymLexicon SynonymLexicon::for_task(Task task, std::uint64_t seed) {
  return from_classes(synonym_classes(task), seed);
}

SynonymLexicon SynonymLexicon::identity(Task task) {
  SynonymLexicon lex;
  lex.identity_ = true;
  for (const auto& cls : synonym_classes(task))
    for (const auto& w : cls) lex.entries_.emplace(w, std::vector<std::string>{w});
  return lex;
}

bool SynonymLexicon::covers(std::string_view word) const { return entries_.count(word) > 0; }

const std::vector<std::string>& SynonymLexicon::substitutes(std::string_view word) const {
  auto it = entries_.find(word);
  if (it == entries_.end()) {
    throw ContractError("synonym lexicon: no entry for '" + std::string(word) + "'");
  }
  return it->second;
}

Replacement replace_synonyms(const Example& example, double rate, std::uint64_t seed,
                             const SynonymLexicon& lexicon) {
  if (!(rate > 0.0 && rate <= 1.0)) throw ContractError("replace_synonyms: rate must be in (0,1]");
  std::vector<std::string> words = split_words(example.prompt);
  std::vector<std::size_t> eligible;
  for (std::size_t slot : example.synonym_slots) {
    if (slot < words.size() && lexicon.covers(words[slot])) eligible.push_back(slot);
  }
  Replacement r;
  if (eligible.empty()) {
    r.example = example;
    r.no_eligible = true;
    return r;
  }
  // The epsilon keeps exact products such as 0.25 * 4 from rounding up.
  const auto k = static_cast<std::size_t>(
      std::ceil(rate * static_cast<double>(eligible.size()) - 1e-9));
  std::mt19937_64 rng(mix_seed(seed, fnv1a(example.prompt)));
  std::shuffle(eligible.begin(), eligible.end(), rng);
  eligible.resize(std::max<std::size_t>(1, k));
  std::sort(eligible.begin(), eligible.end());
  for (std::size_t pos : eligible) words[pos] = lexicon.substitutes(words[pos]).front();
  r.example = make_example(example.task, join_words(words), example.target,
                           example.synonym_slots, example.composition);
  r.replaced = std::move(eligible);
  return r;
}

std::vector<double> SynonymEval::values() const {
  std::vector<double> out;
  for (const auto& s : per_seed)
    if (s.consist_syn) out.push_back(*s.consist_syn);
  return out;
}

std::optional<double> SynonymEval::mean() const {
  const auto v = values();
  if (v.empty()) return std::nullopt;
  double sum = 0.0;
  for (double x : v) sum += x;
  return sum / static_cast<double>(v.size());
}

SynonymEval run_synonym_eval(const Transformer& model, std::span<const Example> examples,
                             double rate, std::span<const std::uint64_t> seeds,
                             const SynonymLexicon& lexicon) {
  if (seeds.size() < 5) {
    throw ContractError("run_synonym_eval: needs at least 5 seeds, got " +
                        std::to_string(seeds.size()));
  }
  std::vector<const Example*> correct;
  for (const auto& ex : examples) {
    if (predict(model, ex) == Tokenizer::standard().atomic_id(ex.target)) correct.push_back(&ex);
  }
  SynonymEval out;
  out.rate = rate;
  for (std::uint64_t seed : seeds) {
    SynonymSeedResult s;
    s.seed = seed;
    s.correct_before = correct.size();
    for (const Example* ex : correct) {
      const Replacement rep = replace_synonyms(*ex, rate, seed, lexicon);
      s.correct_after += predict(model, rep.example) == Tokenizer::standard().atomic_id(ex->target);
    }
    s.consist_syn = consist_syn(s.correct_before, s.correct_after);
    out.per_seed.push_back(s);
  }
  return out;
}

}  // namespace carma
