#pragma once

#include "ptcode/corpus.hpp"
#include "ptcode/error.hpp"
#include "ptcode/random.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace ptcode {

struct EpisodeTranscript {
  std::string source;
  std::vector<std::string> utterances;
};

struct SplitSpec {
  std::array<double, 3> ratios{90.0, 5.0, 5.0};
  std::uint64_t seed = 0;
  std::size_t min_length = 5;
  std::size_t max_length = 100;
  std::size_t word_threshold = 8;
  std::size_t trim = 10;
  std::size_t noise_k = 10;

  void validate() const {
    double total = 0.0;
    for (double r : ratios) {
      if (!(r > 0.0)) throw DataError("split ratios must be positive");
      total += r;
    }
    if (std::abs(total - 100.0) > 1e-6) throw DataError("split ratios must sum to 100");
    if (min_length < 1 || min_length > max_length) throw DataError("need 1 <= min length <= max length");
    if (noise_k < 1) throw DataError("noise count must be >= 1");
  }
};

struct NoiseRef {
  std::string conv;
  std::size_t index = 0;
  friend bool operator==(const NoiseRef&, const NoiseRef&) = default;
};

// Pre-sampled noise utterances, one fixed list per conversation of a split.
struct NoisePool {
  std::vector<std::pair<std::string, std::vector<NoiseRef>>> entries;

  const std::vector<NoiseRef>* find(const std::string& id) const {
    for (const auto& [cid, refs] : entries)
      if (cid == id) return &refs;
    return nullptr;
  }

  friend bool operator==(const NoisePool&, const NoisePool&) = default;
};

struct CorpusStats {
  std::size_t conversations = 0;
  std::size_t utterances = 0;
  double avg_utterances = 0.0;
  double avg_words = 0.0;
};

inline void to_json(nlohmann::json& j, const CorpusStats& s) {
  j = {{"conversations", s.conversations},
       {"utterances", s.utterances},
       {"avg_utterances", s.avg_utterances},
       {"avg_words", s.avg_words}};
}

// ---------------------------------------------------------------------------
// Document parsing

namespace detail {

// Returns the offset of the first byte that is not valid UTF-8, or npos.
inline std::size_t first_invalid_utf8(std::string_view s) {
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t len = 0;
    std::uint32_t cp = 0;
    if (c < 0x80) {
      ++i;
      continue;
    } else if ((c & 0xE0) == 0xC0) {
      len = 2;
      cp = c & 0x1F;
    } else if ((c & 0xF0) == 0xE0) {
      len = 3;
      cp = c & 0x0F;
    } else if ((c & 0xF8) == 0xF0) {
      len = 4;
      cp = c & 0x07;
    } else {
      return i;
    }
    if (i + len > s.size()) return i;
    for (std::size_t k = 1; k < len; ++k) {
      const auto cc = static_cast<unsigned char>(s[i + k]);
      if ((cc & 0xC0) != 0x80) return i;
      cp = (cp << 6) | (cc & 0x3F);
    }
    const bool overlong = (len == 2 && cp < 0x80) || (len == 3 && cp < 0x800) || (len == 4 && cp < 0x10000);
    if (overlong || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) return i;
    i += len;
  }
  return std::string_view::npos;
}

inline std::string lower_ascii(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

inline void append_utf8(std::string& out, std::uint32_t cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

inline std::string decode_entities(std::string_view s) {
  static const std::unordered_map<std::string_view, std::string_view> kNamed = {
      {"amp", "&"}, {"lt", "<"}, {"gt", ">"}, {"quot", "\""}, {"apos", "'"}, {"nbsp", " "}};
  std::string out;
  out.reserve(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '&') {
      out.push_back(s[i]);
      continue;
    }
    auto semi = s.find(';', i);
    if (semi == std::string_view::npos || semi - i > 10) {
      out.push_back('&');
      continue;
    }
    auto name = s.substr(i + 1, semi - i - 1);
    if (!name.empty() && name[0] == '#') {
      std::uint32_t cp = 0;
      bool hex = name.size() > 1 && (name[1] == 'x' || name[1] == 'X');
      auto digits = name.substr(hex ? 2 : 1);
      auto [p, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), cp, hex ? 16 : 10);
      if (ec == std::errc{} && p == digits.data() + digits.size() && !digits.empty() && cp <= 0x10FFFF &&
          !(cp >= 0xD800 && cp <= 0xDFFF)) {
        append_utf8(out, cp == 0xA0 ? 0x20 : cp);
        i = semi;
        continue;
      }
    } else if (auto it = kNamed.find(name); it != kNamed.end()) {
      out += it->second;
      i = semi;
      continue;
    }
    out.push_back('&');
  }
  return out;
}

inline bool is_block_tag(std::string_view name) {
  static const std::unordered_set<std::string_view> kBlock = {
      "p", "br", "div", "li", "tr", "td", "h1", "h2", "h3", "h4", "h5", "h6", "body", "html", "ul", "ol", "table"};
  return kBlock.contains(name);
}

// SubRip cue numbers and timing lines.
inline bool is_srt_scaffolding(std::string_view line) {
  if (line.find("-->") != std::string_view::npos) return true;
  return !line.empty() && std::all_of(line.begin(), line.end(), [](char c) { return c >= '0' && c <= '9'; });
}

inline std::string collapse_whitespace(std::string_view s) {
  std::string out;
  bool space = false;
  for (char c : s) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      space = !out.empty();
    } else {
      if (space) out.push_back(' ');
      space = false;
      out.push_back(c);
    }
  }
  return out;
}

}  // namespace detail

/// Extracts cues from an HTML/XML-ish subtitle page, a SubRip file, or plain
/// text (one cue per line). Markup is stripped, block-level tags end a cue,
/// entities are decoded, empty cues are dropped, and runs of identical
/// consecutive cues collapse to one.
inline EpisodeTranscript parse_subtitle_document(std::string_view raw, std::string source = {}) {
  if (auto bad = detail::first_invalid_utf8(raw); bad != std::string_view::npos)
    throw DataError((source.empty() ? std::string("document") : source) + ": invalid UTF-8 at byte offset " +
                    std::to_string(bad));

  std::string text;
  text.reserve(raw.size());
  std::string skip_until;  // closing tag whose content is discarded
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (raw[i] != '<') {
      if (skip_until.empty()) text.push_back(raw[i]);
      continue;
    }
    auto close = raw.find('>', i);
    if (close == std::string_view::npos) {
      if (skip_until.empty()) text.append(raw.substr(i));
      break;
    }
    auto inner = raw.substr(i + 1, close - i - 1);
    bool closing = !inner.empty() && inner[0] == '/';
    if (closing) inner.remove_prefix(1);
    auto name_end = inner.find_first_of(" \t\r\n/");
    auto name = detail::lower_ascii(inner.substr(0, name_end));
    i = close;
    if (!skip_until.empty()) {
      if (closing && name == skip_until) skip_until.clear();
      continue;
    }
    if (!closing && (name == "script" || name == "style" || name == "head" || name == "title")) {
      if (inner.empty() || inner.back() != '/') skip_until = name;
      continue;
    }
    if (detail::is_block_tag(name)) text.push_back('\n');
  }

  EpisodeTranscript t;
  t.source = std::move(source);
  std::string_view sv(text);
  while (!sv.empty()) {
    auto nl = sv.find('\n');
    auto line = sv.substr(0, nl);
    sv = nl == std::string_view::npos ? std::string_view{} : sv.substr(nl + 1);
    auto cue = detail::collapse_whitespace(detail::decode_entities(line));
    if (cue.empty() || detail::is_srt_scaffolding(cue)) continue;
    if (!t.utterances.empty() && t.utterances.back() == cue) continue;
    t.utterances.push_back(std::move(cue));
  }
  return t;
}

/// Drops the first and last n utterances; empty when length <= 2n.
inline EpisodeTranscript trim_episode(EpisodeTranscript t, std::size_t n = 10) {
  if (t.utterances.size() <= 2 * n) {
    t.utterances.clear();
    return t;
  }
  t.utterances.erase(t.utterances.end() - static_cast<std::ptrdiff_t>(n), t.utterances.end());
  t.utterances.erase(t.utterances.begin(), t.utterances.begin() + static_cast<std::ptrdiff_t>(n));
  return t;
}

/// Cuts a trimmed transcript into consecutive conversations whose lengths are
/// drawn uniformly from [min_length, max_length]. When fewer utterances remain
/// than the drawn length, the remainder becomes one conversation if it has at
/// least min_length utterances and is discarded otherwise.
inline std::vector<Conversation> split_into_conversations(const EpisodeTranscript& t, const SplitSpec& spec,
                                                          Rng& rng) {
  std::vector<Conversation> out;
  std::size_t at = 0;
  const std::size_t n = t.utterances.size();
  while (at < n) {
    auto len = static_cast<std::size_t>(
        rng.between(static_cast<std::int64_t>(spec.min_length), static_cast<std::int64_t>(spec.max_length)));
    const std::size_t remaining = n - at;
    if (remaining < len) {
      if (remaining < spec.min_length) break;
      len = remaining;
    }
    Conversation c;
    c.id = t.source + "#" + std::to_string(out.size());
    for (std::size_t k = at; k < at + len; ++k) c.utterances.push_back(make_utterance(t.utterances[k]));
    out.push_back(std::move(c));
    at += len;
  }
  return out;
}

inline std::size_t count_short_utterances(const Conversation& c, std::size_t threshold_words) {
  return static_cast<std::size_t>(std::count_if(c.utterances.begin(), c.utterances.end(), [&](const Utterance& u) {
    return tokenize(u.text).size() < threshold_words;
  }));
}

/// Removes a conversation when strictly more than half of its utterances have
/// fewer than `threshold_words` tokens.
inline std::vector<Conversation> filter_short_conversations(std::vector<Conversation> convs,
                                                            std::size_t threshold_words = 8) {
  std::erase_if(convs, [&](const Conversation& c) {
    return 2 * count_short_utterances(c, threshold_words) > c.utterances.size();
  });
  return convs;
}

struct DatasetSplits {
  std::vector<Conversation> train;
  std::vector<Conversation> val;
  std::vector<Conversation> test;
};

/// Random partition by conversation: ⌊r_train·n⌋ / ⌊r_val·n⌋ / remainder.
/// Each split keeps the input order of its members.
inline DatasetSplits split_dataset(std::vector<Conversation> convs, const SplitSpec& spec, Rng& rng) {
  const std::size_t n = convs.size();
  const double total = spec.ratios[0] + spec.ratios[1] + spec.ratios[2];
  auto share = [&](double r) {
    return static_cast<std::size_t>(std::floor(static_cast<double>(n) * r / total + 1e-9));
  };
  const std::size_t n_train = share(spec.ratios[0]);
  const std::size_t n_val = std::min(share(spec.ratios[1]), n - n_train);

  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  rng.shuffle(perm.begin(), perm.end());
  std::vector<int> where(n, 2);
  for (std::size_t k = 0; k < n_train; ++k) where[perm[k]] = 0;
  for (std::size_t k = n_train; k < n_train + n_val; ++k) where[perm[k]] = 1;

  DatasetSplits s;
  for (std::size_t i = 0; i < n; ++i) {
    auto& dst = where[i] == 0 ? s.train : where[i] == 1 ? s.val : s.test;
    dst.push_back(std::move(convs[i]));
  }
  return s;
}

// Uniform sampling over the utterances of a split, excluding one
// conversation, without replacement within a single draw.
class UtteranceSampler {
 public:
  struct Pick {
    std::size_t conv = 0;
    std::size_t index = 0;
  };

  explicit UtteranceSampler(std::span<const Conversation> split) : split_(split), offset_(split.size() + 1, 0) {
    for (std::size_t c = 0; c < split.size(); ++c) offset_[c + 1] = offset_[c] + split[c].size();
  }

  std::size_t available(std::size_t exclude) const { return offset_.back() - split_[exclude].size(); }

  std::vector<Pick> draw(std::size_t exclude, std::size_t k, Rng& rng) const {
    const std::size_t own = split_[exclude].size();
    const std::size_t others = available(exclude);
    if (others < k)
      throw DataError("conversation " + split_[exclude].id + ": only " + std::to_string(others) +
                      " utterances available for " + std::to_string(k) + " noise samples");
    std::vector<std::size_t> chosen;
    std::vector<Pick> picks;
    picks.reserve(k);
    while (picks.size() < k) {
      std::size_t flat = rng.below(others);
      if (flat >= offset_[exclude]) flat += own;
      if (std::find(chosen.begin(), chosen.end(), flat) != chosen.end()) continue;
      chosen.push_back(flat);
      auto it = std::upper_bound(offset_.begin(), offset_.end(), flat);
      auto conv = static_cast<std::size_t>(std::distance(offset_.begin(), it)) - 1;
      picks.push_back(Pick{conv, flat - offset_[conv]});
    }
    return picks;
  }

 private:
  std::span<const Conversation> split_;
  std::vector<std::size_t> offset_;
};

/// For each conversation, k distinct utterances drawn uniformly from all
/// utterances of the other conversations in the same split.
inline NoisePool sample_noise_pool(std::span<const Conversation> split, std::size_t k, Rng& rng) {
  if (split.size() < 2) throw DataError("noise sampling needs at least 2 conversations in the split");
  UtteranceSampler sampler(split);
  NoisePool pool;
  pool.entries.reserve(split.size());
  for (std::size_t c = 0; c < split.size(); ++c) {
    std::vector<NoiseRef> refs;
    for (const auto& p : sampler.draw(c, k, rng)) refs.push_back(NoiseRef{split[p.conv].id, p.index});
    pool.entries.emplace_back(split[c].id, std::move(refs));
  }
  return pool;
}

inline CorpusStats corpus_statistics(std::span<const Conversation> split) {
  CorpusStats s;
  s.conversations = split.size();
  std::size_t words = 0;
  for (const auto& c : split) {
    s.utterances += c.size();
    for (const auto& u : c.utterances) words += tokenize(u.text).size();
  }
  if (s.conversations) s.avg_utterances = static_cast<double>(s.utterances) / static_cast<double>(s.conversations);
  if (s.utterances) s.avg_words = static_cast<double>(words) / static_cast<double>(s.utterances);
  return s;
}

// ---------------------------------------------------------------------------
// Noise pool file: {"id": str, "noise": [{"conv": str, "index": int}, ...]}

inline void write_noise_pool(const std::string& path, const NoisePool& pool) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  for (const auto& [id, refs] : pool.entries) {
    nlohmann::json noise = nlohmann::json::array();
    for (const auto& r : refs) noise.push_back({{"conv", r.conv}, {"index", r.index}});
    out << nlohmann::json{{"id", id}, {"noise", std::move(noise)}}.dump() << '\n';
  }
}

inline NoisePool read_noise_pool(const std::string& path) {
  NoisePool pool;
  for_each_json_line(path, [&](const nlohmann::json& j, std::size_t) {
    if (!j.contains("id") || !j.contains("noise") || !j["noise"].is_array())
      throw DataError("noise record needs \"id\" and array \"noise\"");
    std::vector<NoiseRef> refs;
    for (const auto& r : j["noise"]) {
      if (!r.contains("conv") || !r.contains("index")) throw DataError("noise entry needs \"conv\" and \"index\"");
      refs.push_back(NoiseRef{r["conv"].get<std::string>(), r["index"].get<std::size_t>()});
    }
    pool.entries.emplace_back(j["id"].get<std::string>(), std::move(refs));
  });
  return pool;
}

// ---------------------------------------------------------------------------
// End-to-end preparation

struct PreparedCorpus {
  DatasetSplits splits;
  NoisePool train_noise;
  NoisePool val_noise;
  NoisePool test_noise;
};

/// Trim, split, filter, partition, and pre-sample noise. Episodes are
/// processed in the given order; all randomness comes from spec.seed.
inline PreparedCorpus prepare_corpus(std::span<const EpisodeTranscript> episodes, const SplitSpec& spec) {
  spec.validate();
  Rng prep(spec.seed, "prep");
  std::vector<Conversation> all;
  for (const auto& ep : episodes) {
    auto convs = split_into_conversations(trim_episode(ep, spec.trim), spec, prep);
    convs = filter_short_conversations(std::move(convs), spec.word_threshold);
    std::move(convs.begin(), convs.end(), std::back_inserter(all));
  }
  PreparedCorpus out;
  out.splits = split_dataset(std::move(all), spec, prep);
  Rng noise(spec.seed, "noise");
  out.train_noise = sample_noise_pool(out.splits.train, spec.noise_k, noise);
  out.val_noise = sample_noise_pool(out.splits.val, spec.noise_k, noise);
  out.test_noise = sample_noise_pool(out.splits.test, spec.noise_k, noise);
  return out;
}

/// Reads every regular file of a directory, in file-name order.
inline std::vector<EpisodeTranscript> read_subtitle_directory(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw DataError("not a directory: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<EpisodeTranscript> out;
  for (const auto& f : files) {
    std::ifstream in(f, std::ios::binary);
    std::string raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    out.push_back(parse_subtitle_document(raw, f.filename().string()));
  }
  return out;
}

}  // namespace ptcode
