#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "carma/sequence.hpp"

namespace carma {

class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Task { IDM, SC };

std::string to_string(Task task);
Task task_from_string(std::string_view name);

// Fixed-chunk subword tokenizer over lowercase a-z words separated by single
// spaces. Words registered as atomic (answer terms, sentiment labels) map to
// one token; every other word splits into 3-character chunks, the first
// marked word-initial and the rest as continuations, so word boundaries can be
// recovered from ids alone.
class Tokenizer {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kSep = 2;
  static constexpr std::size_t kChunk = 3;

  Tokenizer(const std::vector<std::string>& lexicon, const std::vector<std::string>& atomic);

  // Tokenizer shared by both tasks; built from the union of their lexicons.
  static const Tokenizer& standard();

  // Plain encoding: ids with one span per word. Throws EncodingError on a
  // character outside the alphabet or a chunk outside the vocabulary.
  TokenSequence encode(std::string_view text) const;
  // BOS + encode(prompt) + SEP; spans shifted past BOS. The answer is
  // predicted at the SEP position.
  TokenSequence encode_prompt(std::string_view prompt) const;
  std::string decode(const std::vector<int>& ids) const;

  int token_id(std::string_view token) const;  // -1 when absent
  const std::string& token_text(int id) const;
  int atomic_id(std::string_view word) const;  // throws EncodingError when absent
  std::size_t vocab_size() const { return tokens_.size(); }

 private:
  void add_token(const std::string& text);

  std::vector<std::string> tokens_;
  std::map<std::string, int, std::less<>> index_;
  std::map<std::string, int, std::less<>> atomic_;
};

struct Example {
  std::string prompt;
  std::string target;  // one atomic token
  Task task = Task::IDM;
  std::vector<WordSpan> word_spans;         // relative to encode(prompt)
  std::vector<std::size_t> synonym_slots;   // word positions with known substitutes
  // Composition that defines the split: (attribute, concept) for IDM,
  // (modifier category, polarity word) for SC. Not serialized.
  std::pair<std::string, std::string> composition;
};

struct DatasetSplit {
  Task task = Task::IDM;
  std::uint64_t generator_seed = 0;
  std::vector<Example> train;
  std::vector<Example> validation;
  std::vector<Example> test;
};

inline constexpr std::size_t kMinItems = 50;
inline constexpr const char* kGeneratorVersion = "carma-gen-1";

// Definition -> term cloze items ("the huge river is called" -> term).
// Attributes and concepts come in synonym classes; a term names an
// (attribute class, concept class) meaning. Surface pairs held out for
// validation and test never occur in train, while their meaning is always
// reachable through another surface pair in train.
DatasetSplit gen_idm(std::uint64_t seed, std::size_t n_items);

// Sentence -> {positive, negative, neutral}. Negation flips polarity,
// intensifiers keep it, neutral words stay neutral. Modified compositions
// (modifier category, polarity word) are split disjointly; unmodified base
// items stay in train. Labels are drawn round-robin for balance.
DatasetSplit gen_sc(std::uint64_t seed, std::size_t n_items);

DatasetSplit generate(Task task, std::uint64_t seed, std::size_t n_items);

// Synonym classes of the generator lexicon; members of a class are
// interchangeable without changing the answer.
const std::vector<std::vector<std::string>>& synonym_classes(Task task);

// All answer tokens of a task (terms or labels).
const std::vector<std::string>& answer_vocabulary(Task task);

std::vector<std::string> split_words(std::string_view text);
std::string join_words(const std::vector<std::string>& words);

// Attaches spans from the standard tokenizer.
Example make_example(Task task, std::string prompt, std::string target,
                     std::vector<std::size_t> synonym_slots,
                     std::pair<std::string, std::string> composition = {});

// TSV: header "split\tprompt\ttarget\ttask\tsynonym_slots", one row per item.
std::string dataset_to_tsv(const DatasetSplit& data);
DatasetSplit dataset_from_tsv(std::string_view tsv);
DatasetSplit load_dataset(const std::filesystem::path& tsv_path);

}  // namespace carma
