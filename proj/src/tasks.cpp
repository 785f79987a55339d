#include "carma/tasks.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "carma/errors.hpp"
#include "json.hpp"

namespace carma {
namespace {

using WordClasses = std::vector<std::vector<std::string>>;

// ---- IDM lexicon ----

const WordClasses kConcepts = {
    {"river", "stream"},   {"mountain", "summit"}, {"forest", "woodland"}, {"village", "hamlet"},
    {"ocean", "sea"},      {"road", "highway"},    {"house", "dwelling"},  {"boat", "vessel"},
    {"stone", "rock"},     {"garden", "yard"},     {"bird", "fowl"},       {"cloud", "vapor"},
    {"bridge", "crossing"}, {"lake", "pond"},      {"tower", "spire"},     {"valley", "glen"},
};

const WordClasses kAttributes = {
    {"large", "huge", "enormous"},   {"tiny", "little", "miniature"},
    {"ancient", "aged", "elderly"},  {"frozen", "icy", "chilly"},
    {"gloomy", "shadowy", "dim"},    {"shiny", "radiant", "gleaming"},
    {"silent", "calm", "peaceful"},  {"quick", "rapid", "swift"},
};

const std::vector<std::string> kOften = {"often", "frequently", "usually"};
const std::vector<std::string> kRegion = {"countryside", "province", "territory"};
const std::vector<std::string> kDistant = {"distant", "faraway", "remote"};

const std::vector<std::string> kIdmFunctionWords = {"the", "a", "is", "called", "seen", "in"};

// ---- SC lexicon ----

const WordClasses kPositive = {
    {"good", "fine", "decent"},
    {"brilliant", "superb", "excellent"},
    {"delightful", "charming", "lovely"},
    {"exciting", "thrilling", "gripping"},
};
const WordClasses kNegative = {
    {"bad", "poor", "awful"},
    {"terrible", "dreadful", "horrible"},
    {"boring", "dull", "tedious"},
    {"clumsy", "awkward", "sloppy"},
};
const WordClasses kNeutral = {
    {"average", "ordinary", "typical"},
    {"plain", "standard", "modest"},
};
const WordClasses kNouns = {
    {"film", "movie", "picture"},
    {"performance", "acting", "portrayal"},
    {"story", "plot", "narrative"},
    {"soundtrack", "score", "music"},
};
const WordClasses kIntensifiers = {
    {"very", "really", "truly"},
    {"quite", "rather", "fairly"},
};
const std::vector<std::string> kScFunctionWords = {"a", "the", "was", "not", "sentiment", "is"};
const std::vector<std::string> kLabels = {"positive", "negative", "neutral"};

std::vector<std::string> flatten(const WordClasses& classes) {
  std::vector<std::string> out;
  for (const auto& c : classes) out.insert(out.end(), c.begin(), c.end());
  return out;
}

// Coined CVCVCV words, one per (attribute class, concept class).
std::vector<std::string> make_terms() {
  const std::string consonants = "bdfgklmnprstvz";
  const std::string vowels = "aeiou";
  auto syllable = [&](std::size_t s) {
    return std::string{consonants[s / vowels.size()], vowels[s % vowels.size()]};
  };
  const std::size_t n_syll = consonants.size() * vowels.size();
  std::vector<std::string> terms;
  for (std::size_t i = 0; i < kAttributes.size() * kConcepts.size(); ++i) {
    terms.push_back(syllable(i % n_syll) + syllable((i / n_syll + 3 * i + 5) % n_syll) +
                    syllable((i * 37 + 11) % n_syll));
  }
  return terms;
}

const std::vector<std::string>& idm_terms() {
  static const std::vector<std::string> terms = make_terms();
  return terms;
}

std::vector<std::string> full_lexicon() {
  std::vector<std::string> words;
  for (const auto* classes : {&kConcepts, &kAttributes, &kPositive, &kNegative, &kNeutral,
                              &kNouns, &kIntensifiers}) {
    auto flat = flatten(*classes);
    words.insert(words.end(), flat.begin(), flat.end());
  }
  for (const auto* list : {&kOften, &kRegion, &kDistant, &kIdmFunctionWords, &kScFunctionWords}) {
    words.insert(words.end(), list->begin(), list->end());
  }
  return words;
}

void check_word(std::string_view word) {
  if (word.empty()) throw EncodingError("tokenizer: empty word (repeated or edge space)");
  for (char ch : word) {
    if (ch < 'a' || ch > 'z') {
      throw EncodingError(std::string("tokenizer: character '") + ch +
                          "' outside the alphabet [a-z ]");
    }
  }
}

std::vector<std::string> chunks_of(std::string_view word) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < word.size(); i += Tokenizer::kChunk) {
    std::string piece(word.substr(i, Tokenizer::kChunk));
    out.push_back(i == 0 ? piece : "##" + piece);
  }
  return out;
}

}  // namespace

std::string to_string(Task task) { return task == Task::IDM ? "idm" : "sc"; }

Task task_from_string(std::string_view name) {
  if (name == "idm" || name == "IDM") return Task::IDM;
  if (name == "sc" || name == "SC") return Task::SC;
  throw ContractError("unknown task '" + std::string(name) + "' (expected idm or sc)");
}

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  if (text.empty()) return words;
  std::size_t start = 0;
  while (true) {
    std::size_t pos = text.find(' ', start);
    words.emplace_back(text.substr(start, pos == std::string_view::npos ? pos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return words;
}

std::string join_words(const std::vector<std::string>& words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out.push_back(' ');
    out += words[i];
  }
  return out;
}

// ---- Tokenizer ----

Tokenizer::Tokenizer(const std::vector<std::string>& lexicon,
                     const std::vector<std::string>& atomic) {
  add_token("<pad>");
  add_token("<bos>");
  add_token("<sep>");
  std::set<std::string> chunk_set;
  for (const auto& w : lexicon) {
    check_word(w);
    for (auto& c : chunks_of(w)) chunk_set.insert(c);
  }
  for (const auto& c : chunk_set) add_token(c);
  std::set<std::string> atomic_set(atomic.begin(), atomic.end());
  for (const auto& w : atomic_set) {
    check_word(w);
    if (index_.count(w)) throw ContractError("tokenizer: atomic word '" + w + "' collides");
    add_token(w);
    atomic_.emplace(w, index_.at(w));
  }
}

void Tokenizer::add_token(const std::string& text) {
  index_.emplace(text, static_cast<int>(tokens_.size()));
  tokens_.push_back(text);
}

const Tokenizer& Tokenizer::standard() {
  static const Tokenizer tok = [] {
    std::vector<std::string> atomic = idm_terms();
    atomic.insert(atomic.end(), kLabels.begin(), kLabels.end());
    return Tokenizer(full_lexicon(), atomic);
  }();
  return tok;
}

TokenSequence Tokenizer::encode(std::string_view text) const {
  TokenSequence seq;
  for (const auto& word : split_words(text)) {
    check_word(word);
    const std::size_t begin = seq.ids.size();
    if (auto it = atomic_.find(word); it != atomic_.end()) {
      seq.ids.push_back(it->second);
    } else {
      for (const auto& c : chunks_of(word)) {
        auto found = index_.find(c);
        if (found == index_.end()) {
          throw EncodingError("tokenizer: chunk '" + c + "' of word '" + word +
                              "' is not in the vocabulary");
        }
        seq.ids.push_back(found->second);
      }
    }
    seq.word_spans.push_back({begin, seq.ids.size()});
  }
  return seq;
}

TokenSequence Tokenizer::encode_prompt(std::string_view prompt) const {
  TokenSequence inner = encode(prompt);
  TokenSequence seq;
  seq.ids.reserve(inner.ids.size() + 2);
  seq.ids.push_back(kBos);
  seq.ids.insert(seq.ids.end(), inner.ids.begin(), inner.ids.end());
  seq.ids.push_back(kSep);
  for (const auto& s : inner.word_spans) seq.word_spans.push_back({s.begin + 1, s.end + 1});
  return seq;
}

std::string Tokenizer::decode(const std::vector<int>& ids) const {
  std::string out;
  for (int id : ids) {
    if (id == kPad || id == kBos || id == kSep) continue;
    const std::string& t = token_text(id);
    if (t.rfind("##", 0) == 0) {
      out += t.substr(2);
    } else {
      if (!out.empty()) out.push_back(' ');
      out += t;
    }
  }
  return out;
}

int Tokenizer::token_id(std::string_view token) const {
  auto it = index_.find(token);
  return it == index_.end() ? -1 : it->second;
}

const std::string& Tokenizer::token_text(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw IndexError("tokenizer: id " + std::to_string(id) + " outside vocabulary");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

int Tokenizer::atomic_id(std::string_view word) const {
  auto it = atomic_.find(word);
  if (it == atomic_.end()) {
    throw EncodingError("tokenizer: '" + std::string(word) + "' is not a single-token word");
  }
  return it->second;
}

// ---- examples ----

Example make_example(Task task, std::string prompt, std::string target,
                     std::vector<std::size_t> synonym_slots,
                     std::pair<std::string, std::string> composition) {
  Example ex;
  ex.word_spans = Tokenizer::standard().encode(prompt).word_spans;
  Tokenizer::standard().atomic_id(target);
  for (std::size_t s : synonym_slots) {
    if (s >= ex.word_spans.size()) {
      throw ContractError("example: synonym slot " + std::to_string(s) + " outside prompt '" +
                          prompt + "'");
    }
  }
  ex.prompt = std::move(prompt);
  ex.target = std::move(target);
  ex.task = task;
  ex.synonym_slots = std::move(synonym_slots);
  ex.composition = std::move(composition);
  return ex;
}

const WordClasses& synonym_classes(Task task) {
  static const WordClasses idm = [] {
    WordClasses c = kConcepts;
    c.insert(c.end(), kAttributes.begin(), kAttributes.end());
    c.push_back(kOften);
    c.push_back(kRegion);
    c.push_back(kDistant);
    return c;
  }();
  static const WordClasses sc = [] {
    WordClasses c;
    for (const auto* group : {&kPositive, &kNegative, &kNeutral, &kNouns, &kIntensifiers})
      c.insert(c.end(), group->begin(), group->end());
    return c;
  }();
  return task == Task::IDM ? idm : sc;
}

const std::vector<std::string>& answer_vocabulary(Task task) {
  return task == Task::IDM ? idm_terms() : kLabels;
}

namespace {

struct SplitSizes {
  std::size_t train, validation, test;
};

SplitSizes split_sizes(std::size_t n) {
  if (n < kMinItems) {
    throw ContractError("generator: n_items " + std::to_string(n) + " below minimum " +
                        std::to_string(kMinItems));
  }
  const std::size_t tenth = n / 10;
  return {n - 2 * tenth, tenth, tenth};
}

template <class T>
std::vector<T> take(std::vector<T> pool, std::size_t count, std::mt19937_64& rng,
                    const char* what) {
  if (pool.size() < count) {
    throw GenerationError(std::string("generator: ") + what + " needs " + std::to_string(count) +
                          " items but only " + std::to_string(pool.size()) + " exist");
  }
  std::shuffle(pool.begin(), pool.end(), rng);
  pool.resize(count);
  return pool;
}

struct IdmItem {
  std::size_t attr_class, attr, concept_class, noun;
  std::size_t tmpl, filler;
};

Example render_idm(const IdmItem& it) {
  const std::string& a = kAttributes[it.attr_class][it.attr];
  const std::string& c = kConcepts[it.concept_class][it.noun];
  const std::string& term = idm_terms()[it.attr_class * kConcepts.size() + it.concept_class];
  std::vector<std::string> w;
  std::vector<std::size_t> slots;
  switch (it.tmpl) {
    case 0:
      w = {"the", a, c, "is", "called"};
      slots = {1, 2};
      break;
    case 1:
      w = {"a", a, c, "seen", kOften[it.filler], "is", "called"};
      slots = {1, 2, 4};
      break;
    case 2:
      w = {"the", a, c, "in", "the", kRegion[it.filler], "is", "called"};
      slots = {1, 2, 5};
      break;
    default:
      w = {"a", kDistant[it.filler], a, c, "is", "called"};
      slots = {1, 2, 3};
      break;
  }
  return make_example(Task::IDM, join_words(w), term, slots, {a, c});
}

}  // namespace

DatasetSplit gen_idm(std::uint64_t seed, std::size_t n_items) {
  const SplitSizes sizes = split_sizes(n_items);
  std::mt19937_64 rng(seed);
  using Pair = std::array<std::size_t, 4>;  // attr class, attr, concept class, concept
  std::vector<Pair> pools[3];               // train, validation, test
  for (std::size_t ac = 0; ac < kAttributes.size(); ++ac) {
    for (std::size_t cc = 0; cc < kConcepts.size(); ++cc) {
      std::vector<Pair> surfaces;
      for (std::size_t a = 0; a < kAttributes[ac].size(); ++a)
        for (std::size_t c = 0; c < kConcepts[cc].size(); ++c) surfaces.push_back({ac, a, cc, c});
      std::shuffle(surfaces.begin(), surfaces.end(), rng);
      pools[2].push_back(surfaces[0]);
      pools[1].push_back(surfaces[1]);
      pools[0].insert(pools[0].end(), surfaces.begin() + 2, surfaces.end());
    }
  }
  auto expand = [](const std::vector<Pair>& pairs) {
    std::vector<IdmItem> items;
    for (const auto& p : pairs) {
      items.push_back({p[0], p[1], p[2], p[3], 0, 0});
      for (std::size_t t = 1; t <= 3; ++t)
        for (std::size_t f = 0; f < 3; ++f) items.push_back({p[0], p[1], p[2], p[3], t, f});
    }
    return items;
  };

  DatasetSplit out;
  out.task = Task::IDM;
  out.generator_seed = seed;
  const std::size_t counts[3] = {sizes.train, sizes.validation, sizes.test};
  std::vector<Example>* dests[3] = {&out.train, &out.validation, &out.test};
  for (std::size_t s = 0; s < 3; ++s) {
    for (const auto& it : take(expand(pools[s]), counts[s], rng, "idm split")) {
      dests[s]->push_back(render_idm(it));
    }
  }
  return out;
}

namespace {

enum class Modifier { None, Negation, Intensifier, NegatedIntensifier };

const char* modifier_name(Modifier m) {
  switch (m) {
    case Modifier::None: return "none";
    case Modifier::Negation: return "neg";
    case Modifier::Intensifier: return "int";
    default: return "negint";
  }
}

struct ScAdjective {
  std::string word;
  int polarity;  // +1, -1, 0
};

std::vector<ScAdjective> sc_adjectives() {
  std::vector<ScAdjective> out;
  for (const auto& w : flatten(kPositive)) out.push_back({w, 1});
  for (const auto& w : flatten(kNegative)) out.push_back({w, -1});
  for (const auto& w : flatten(kNeutral)) out.push_back({w, 0});
  return out;
}

struct ScItem {
  std::size_t adj;
  Modifier mod;
  std::size_t intensifier;  // index into flattened intensifiers
  std::size_t noun;         // index into flattened nouns
  std::size_t tmpl;
};

int sc_label(const ScAdjective& adj, Modifier mod) {
  const bool negated = mod == Modifier::Negation || mod == Modifier::NegatedIntensifier;
  if (adj.polarity == 0) return 2;
  const int p = negated ? -adj.polarity : adj.polarity;
  return p > 0 ? 0 : 1;
}

Example render_sc(const ScItem& it, const std::vector<ScAdjective>& adjs) {
  static const auto nouns = flatten(kNouns);
  static const auto ints = flatten(kIntensifiers);
  const ScAdjective& adj = adjs[it.adj];
  std::vector<std::string> mod_words;
  bool has_int = false;
  if (it.mod == Modifier::Negation || it.mod == Modifier::NegatedIntensifier)
    mod_words.push_back("not");
  if (it.mod == Modifier::Intensifier || it.mod == Modifier::NegatedIntensifier) {
    mod_words.push_back(ints[it.intensifier]);
    has_int = true;
  }
  std::vector<std::string> w;
  std::vector<std::size_t> slots;
  auto push_mods = [&] {
    for (const auto& m : mod_words) {
      if (has_int && m != "not") slots.push_back(w.size());
      w.push_back(m);
    }
  };
  if (it.tmpl == 0) {
    w.push_back("a");
    push_mods();
    slots.push_back(w.size());
    w.push_back(adj.word);
    slots.push_back(w.size());
    w.push_back(nouns[it.noun]);
  } else {
    w.push_back("the");
    slots.push_back(w.size());
    w.push_back(nouns[it.noun]);
    w.push_back("was");
    push_mods();
    slots.push_back(w.size());
    w.push_back(adj.word);
  }
  w.push_back("sentiment");
  w.push_back("is");
  std::sort(slots.begin(), slots.end());
  return make_example(Task::SC, join_words(w), kLabels[sc_label(adj, it.mod)], slots,
                      {modifier_name(it.mod), adj.word});
}

}  // namespace

DatasetSplit gen_sc(std::uint64_t seed, std::size_t n_items) {
  const SplitSizes sizes = split_sizes(n_items);
  std::mt19937_64 rng(seed);
  const auto adjs = sc_adjectives();
  const std::size_t n_nouns = flatten(kNouns).size();
  const std::size_t n_ints = flatten(kIntensifiers).size();

  // (adjective, modifier) compositions per split; bare adjectives stay in train.
  using Pair = std::pair<std::size_t, Modifier>;
  std::vector<Pair> pools[3];
  std::vector<Pair> by_label[3];
  for (std::size_t a = 0; a < adjs.size(); ++a) {
    pools[0].push_back({a, Modifier::None});
    for (Modifier m : {Modifier::Negation, Modifier::Intensifier, Modifier::NegatedIntensifier})
      by_label[sc_label(adjs[a], m)].push_back({a, m});
  }
  for (auto& group : by_label) {
    std::shuffle(group.begin(), group.end(), rng);
    // Intensified compositions expand to many more surface items, so each
    // held-out split leads with one of them to keep its capacity up.
    auto boost = [&](std::size_t from) {
      auto it = std::find_if(group.begin() + static_cast<std::ptrdiff_t>(from), group.end(),
                             [](const Pair& p) { return p.second != Modifier::Negation; });
      if (it != group.end()) std::iter_swap(group.begin() + static_cast<std::ptrdiff_t>(from), it);
    };
    const std::size_t held = std::max<std::size_t>(1, group.size() / 8);
    boost(0);
    boost(held);
    pools[2].insert(pools[2].end(), group.begin(), group.begin() + held);
    pools[1].insert(pools[1].end(), group.begin() + held, group.begin() + 2 * held);
    pools[0].insert(pools[0].end(), group.begin() + 2 * held, group.end());
  }

  auto expand = [&](const std::vector<Pair>& pairs, int label) {
    std::vector<ScItem> items;
    for (const auto& [a, m] : pairs) {
      if (sc_label(adjs[a], m) != label) continue;
      const bool with_int = m == Modifier::Intensifier || m == Modifier::NegatedIntensifier;
      for (std::size_t i = 0; i < (with_int ? n_ints : 1); ++i)
        for (std::size_t n = 0; n < n_nouns; ++n)
          for (std::size_t t = 0; t < 2; ++t) items.push_back({a, m, i, n, t});
    }
    return items;
  };

  DatasetSplit out;
  out.task = Task::SC;
  out.generator_seed = seed;
  const std::size_t counts[3] = {sizes.train, sizes.validation, sizes.test};
  std::vector<Example>* dests[3] = {&out.train, &out.validation, &out.test};
  for (std::size_t s = 0; s < 3; ++s) {
    std::vector<std::vector<ScItem>> by_label;
    for (int label = 0; label < 3; ++label) {
      const std::size_t need = counts[s] / 3 + (static_cast<std::size_t>(label) < counts[s] % 3);
      by_label.push_back(take(expand(pools[s], label), need, rng, "sc split"));
    }
    for (std::size_t i = 0; i < counts[s]; ++i) {
      dests[s]->push_back(render_sc(by_label[i % 3][i / 3], adjs));
    }
  }
  return out;
}

DatasetSplit generate(Task task, std::uint64_t seed, std::size_t n_items) {
  return task == Task::IDM ? gen_idm(seed, n_items) : gen_sc(seed, n_items);
}

// ---- TSV ----

std::string dataset_to_tsv(const DatasetSplit& data) {
  std::ostringstream os;
  os << "split\tprompt\ttarget\ttask\tsynonym_slots\n";
  auto rows = [&](const std::vector<Example>& xs, const char* split) {
    for (const auto& ex : xs) {
      os << split << '\t' << ex.prompt << '\t' << ex.target << '\t' << to_string(ex.task) << '\t'
         << nlohmann::json(ex.synonym_slots).dump() << '\n';
    }
  };
  rows(data.train, "train");
  rows(data.validation, "validation");
  rows(data.test, "test");
  return os.str();
}

DatasetSplit dataset_from_tsv(std::string_view tsv) {
  DatasetSplit out;
  std::istringstream is{std::string(tsv)};
  std::string line;
  if (!std::getline(is, line) || line != "split\tprompt\ttarget\ttask\tsynonym_slots") {
    throw ContractError("dataset: missing or malformed TSV header");
  }
  std::size_t line_no = 1;
  bool first = true;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::size_t start = 0;
    while (true) {
      std::size_t pos = line.find('\t', start);
      cols.push_back(line.substr(start, pos == std::string::npos ? pos : pos - start));
      if (pos == std::string::npos) break;
      start = pos + 1;
    }
    if (cols.size() != 5) {
      throw ContractError("dataset: line " + std::to_string(line_no) + " has " +
                          std::to_string(cols.size()) + " columns, expected 5");
    }
    const Task task = task_from_string(cols[3]);
    if (first) {
      out.task = task;
      first = false;
    } else if (task != out.task) {
      throw ContractError("dataset: mixed tasks in one file");
    }
    auto slots = nlohmann::json::parse(cols[4]).get<std::vector<std::size_t>>();
    Example ex = make_example(task, cols[1], cols[2], std::move(slots));
    if (cols[0] == "train") {
      out.train.push_back(std::move(ex));
    } else if (cols[0] == "validation") {
      out.validation.push_back(std::move(ex));
    } else if (cols[0] == "test") {
      out.test.push_back(std::move(ex));
    } else {
      throw ContractError("dataset: unknown split '" + cols[0] + "' on line " +
                          std::to_string(line_no));
    }
  }
  return out;
}

DatasetSplit load_dataset(const std::filesystem::path& tsv_path) {
  std::ifstream is(tsv_path, std::ios::binary);
  if (!is) throw std::runtime_error("dataset: cannot open " + tsv_path.string());
  std::stringstream buf;
  buf << is.rdbuf();
  DatasetSplit data = dataset_from_tsv(buf.str());
  auto manifest = tsv_path;
  manifest.replace_extension(".manifest.json");
  if (std::filesystem::exists(manifest)) {
    std::ifstream ms(manifest);
    data.generator_seed = nlohmann::json::parse(ms).at("seed").get<std::uint64_t>();
  }
  return data;
}

}  // namespace carma
