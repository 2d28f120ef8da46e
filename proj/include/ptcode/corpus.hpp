#pragma once

#include "ptcode/error.hpp"
#include "ptcode/random.hpp"
#include "ptcode/tensor.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstddef>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace ptcode {

struct Utterance {
  std::string text;
  // Vocabulary indices; filled by index_corpus().
  std::vector<std::size_t> tokens;
  std::optional<std::string> speaker;
  // Raw label string as stored in the dataset file.
  std::optional<std::string> label;
  // Class index after resolution through a LabelSchema.
  std::optional<std::size_t> label_index;

  friend bool operator==(const Utterance&, const Utterance&) = default;
};

inline Utterance make_utterance(std::string text, std::optional<std::string> label = std::nullopt) {
  Utterance u;
  u.text = std::move(text);
  u.label = std::move(label);
  return u;
}

struct Conversation {
  std::string id;
  std::vector<Utterance> utterances;

  std::size_t size() const { return utterances.size(); }
  friend bool operator==(const Conversation&, const Conversation&) = default;
};

// ---------------------------------------------------------------------------
// Tokenizer

namespace detail {

inline bool is_word_byte(unsigned char c) { return std::isalnum(c) || c >= 0x80; }

inline bool is_clitic(std::string_view rest) {
  // rest starts right after an apostrophe
  static constexpr std::string_view kClitics[] = {"s", "t", "re", "ve", "ll", "d", "m"};
  for (auto c : kClitics) {
    if (rest.size() < c.size()) continue;
    bool match = true;
    for (std::size_t i = 0; i < c.size(); ++i)
      if (std::tolower(static_cast<unsigned char>(rest[i])) != c[i]) match = false;
    if (match && (rest.size() == c.size() || !is_word_byte(static_cast<unsigned char>(rest[c.size()]))))
      return true;
  }
  return false;
}

}  // namespace detail

/// Lowercases ASCII, splits on whitespace, and emits every ASCII punctuation
/// character as its own token. An apostrophe that introduces an English
/// clitic ('s 't 're 've 'll 'd 'm) stays attached to it.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string word;
  auto flush = [&] {
    if (!word.empty()) out.push_back(std::move(word));
    word.clear();
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (std::isspace(c)) {
      flush();
    } else if (detail::is_word_byte(c)) {
      word.push_back(static_cast<char>(std::tolower(c)));
    } else if (c == '\'' && detail::is_clitic(text.substr(i + 1))) {
      flush();
      word.push_back('\'');
      while (i + 1 < text.size() && detail::is_word_byte(static_cast<unsigned char>(text[i + 1])))
        word.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(text[++i]))));
      flush();
    } else {
      flush();
      out.emplace_back(1, static_cast<char>(c));
    }
  }
  flush();
  return out;
}

// ---------------------------------------------------------------------------
// Vocabulary

class Vocabulary {
 public:
  static constexpr std::size_t kUnknown = 0;
  static constexpr std::string_view kUnknownToken = "<unk>";

  Vocabulary() : tokens_{std::string(kUnknownToken)} {}

  /// Builds from an ordered token list that excludes `<unk>`.
  static Vocabulary from_tokens(std::span<const std::string> tokens) {
    Vocabulary v;
    for (const auto& t : tokens) v.push(t);
    return v;
  }

  std::size_t size() const { return tokens_.size(); }

  std::size_t lookup(std::string_view token) const {
    auto it = index_.find(std::string(token));
    return it == index_.end() ? kUnknown : it->second;
  }

  bool contains(std::string_view token) const { return index_.contains(std::string(token)); }

  const std::string& token(std::size_t index) const { return tokens_.at(index); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::vector<std::size_t> encode(std::string_view text) const {
    std::vector<std::size_t> ids;
    for (const auto& t : tokenize(text)) ids.push_back(lookup(t));
    return ids;
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write vocabulary: " + path);
    for (const auto& t : tokens_) out << t << '\n';
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read vocabulary: " + path);
    std::string line;
    if (!std::getline(in, line) || line != kUnknownToken)
      throw DataError(path + ": first line must be " + std::string(kUnknownToken));
    Vocabulary v;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty() || v.contains(line))
        throw DataError(path + ":" + std::to_string(lineno) + ": empty or duplicate token");
      v.push(line);
    }
    return v;
  }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  void push(const std::string& t) {
    index_.emplace(t, tokens_.size());
    tokens_.push_back(t);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Tokens with corpus frequency >= min_count, by descending frequency with
/// lexicographic tie-break.
inline Vocabulary build_vocabulary(std::span<const Conversation> corpus, std::size_t min_count = 1) {
  if (min_count < 1) throw std::invalid_argument("build_vocabulary: min_count must be >= 1");
  if (corpus.empty()) throw DataError("build_vocabulary: empty corpus");
  std::map<std::string, std::size_t> counts;
  for (const auto& conv : corpus)
    for (const auto& u : conv.utterances)
      for (auto& t : tokenize(u.text)) ++counts[std::move(t)];
  std::vector<std::pair<std::string, std::size_t>> kept;
  for (auto& [tok, n] : counts)
    if (n >= min_count) kept.emplace_back(tok, n);
  std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> order;
  order.reserve(kept.size());
  for (auto& [tok, n] : kept) order.push_back(tok);
  return Vocabulary::from_tokens(order);
}

/// Fills Utterance::tokens. Text that tokenizes to nothing maps to a single
/// unknown token so every utterance can be encoded.
inline void index_corpus(std::span<Conversation> corpus, const Vocabulary& vocab) {
  for (auto& conv : corpus) {
    for (auto& u : conv.utterances) {
      u.tokens = vocab.encode(u.text);
      if (u.tokens.empty()) u.tokens.push_back(Vocabulary::kUnknown);
    }
  }
}

// ---------------------------------------------------------------------------
// Word vectors

struct EmbeddingTable {
  Mat<double> matrix;
  bool trainable = false;
  double matched_fraction = 0.0;
};

/// Every row uniform in [-0.1, 0.1]; row i depends only on (seed, i).
inline Mat<double> random_embedding(std::size_t rows, std::size_t dim, std::uint64_t seed) {
  Mat<double> m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(dim));
  Rng rng(seed, "embedding");
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = rng.uniform(-0.1, 0.1);
  return m;
}

/// Reads a text `token v_1 ... v_d` file. Vocabulary rows found in the file are
/// copied verbatim; the rest keep their random initialization.
inline EmbeddingTable load_pretrained_vectors(const std::string& path, const Vocabulary& vocab, std::size_t dim,
                                              std::uint64_t seed) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read word vectors: " + path);
  EmbeddingTable table;
  table.matrix = random_embedding(vocab.size(), dim, seed);
  std::vector<bool> seen(vocab.size(), false);
  std::string line;
  std::size_t lineno = 0;
  bool first = true;
  std::vector<double> values;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::string_view sv(line);
    auto sp = sv.find(' ');
    if (sp == std::string_view::npos) throw DataError(path + ":" + std::to_string(lineno) + ": no vector values");
    std::string_view token = sv.substr(0, sp);
    values.clear();
    std::size_t pos = sp;
    while (pos < sv.size()) {
      while (pos < sv.size() && sv[pos] == ' ') ++pos;
      if (pos >= sv.size()) break;
      double x = 0.0;
      auto [ptr, ec] = std::from_chars(sv.data() + pos, sv.data() + sv.size(), x);
      if (ec != std::errc{} || (ptr != sv.data() + sv.size() && *ptr != ' '))
        throw DataError(path + ":" + std::to_string(lineno) + ": malformed number");
      values.push_back(x);
      pos = static_cast<std::size_t>(ptr - sv.data());
    }
    if (values.size() != dim) {
      if (first)
        throw DataError(path + ": vectors have dimension " + std::to_string(values.size()) + ", expected " +
                        std::to_string(dim));
      throw DataError(path + ":" + std::to_string(lineno) + ": expected " + std::to_string(dim) + " values, found " +
                      std::to_string(values.size()));
    }
    first = false;
    std::size_t idx = (token == Vocabulary::kUnknownToken) ? 0 : vocab.lookup(token);
    if (idx == Vocabulary::kUnknown && token != Vocabulary::kUnknownToken) continue;
    for (std::size_t c = 0; c < dim; ++c)
      table.matrix(static_cast<Eigen::Index>(idx), static_cast<Eigen::Index>(c)) = values[c];
    seen[idx] = true;
  }
  auto matched = static_cast<double>(std::count(seen.begin(), seen.end(), true));
  table.matched_fraction = vocab.size() == 0 ? 0.0 : matched / static_cast<double>(vocab.size());
  return table;
}

// ---------------------------------------------------------------------------
// JSON-Lines dataset format

inline nlohmann::json to_json_value(const Conversation& conv) {
  nlohmann::json utts = nlohmann::json::array();
  for (const auto& u : conv.utterances) {
    utts.push_back({{"text", u.text},
                    {"speaker", u.speaker ? nlohmann::json(*u.speaker) : nlohmann::json(nullptr)},
                    {"label", u.label ? nlohmann::json(*u.label) : nlohmann::json(nullptr)}});
  }
  return {{"id", conv.id}, {"utterances", std::move(utts)}};
}

inline Conversation conversation_from_json(const nlohmann::json& j) {
  Conversation conv;
  if (!j.is_object() || !j.contains("id") || !j["id"].is_string() || !j.contains("utterances") ||
      !j["utterances"].is_array())
    throw DataError("conversation record needs string \"id\" and array \"utterances\"");
  conv.id = j["id"].get<std::string>();
  for (const auto& ju : j["utterances"]) {
    if (!ju.is_object() || !ju.contains("text") || !ju["text"].is_string())
      throw DataError("conversation " + conv.id + ": utterance without string \"text\"");
    Utterance u;
    u.text = ju["text"].get<std::string>();
    if (auto it = ju.find("speaker"); it != ju.end() && it->is_string()) u.speaker = it->get<std::string>();
    if (auto it = ju.find("label"); it != ju.end() && it->is_string()) u.label = it->get<std::string>();
    conv.utterances.push_back(std::move(u));
  }
  return conv;
}

inline void write_conversations(std::ostream& out, std::span<const Conversation> convs) {
  for (const auto& c : convs) out << to_json_value(c).dump() << '\n';
}

inline void write_conversations(const std::string& path, std::span<const Conversation> convs) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  write_conversations(out, convs);
}

/// Calls fn(json, lineno) for each non-blank line of a JSON-Lines file.
template <class Fn>
void for_each_json_line(const std::string& path, Fn&& fn) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    try {
      fn(j, lineno);
    } catch (const DataError& e) {
      throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

inline std::vector<Conversation> read_conversations(const std::string& path) {
  std::vector<Conversation> out;
  for_each_json_line(path, [&](const nlohmann::json& j, std::size_t) { out.push_back(conversation_from_json(j)); });
  return out;
}

}  // namespace ptcode
