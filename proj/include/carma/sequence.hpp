#pragma once

#include <cstddef>
#include <vector>

namespace carma {

// Half-open token range [begin, end) covering one surface word.
struct WordSpan {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const { return end - begin; }
  bool operator==(const WordSpan&) const = default;
};

// Token ids plus the word grouping the tokenizer produced. Tokens not covered
// by any span are special tokens (BOS, SEP, PAD).
struct TokenSequence {
  std::vector<int> ids;
  std::vector<WordSpan> word_spans;
};

}  // namespace carma
