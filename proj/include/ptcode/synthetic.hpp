#pragma once

#include "ptcode/corpus.hpp"
#include "ptcode/error.hpp"
#include "ptcode/random.hpp"

#include <array>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

// Seeded generators for fixtures and property checks.

namespace ptcode::synth {

// ---------------------------------------------------------------------------
// Subtitle documents

struct SubtitleFixtureSpec {
  std::size_t episodes = 50;
  std::size_t min_cues = 120;
  std::size_t max_cues = 360;
  std::uint64_t seed = 0;
};

namespace detail {

inline constexpr std::array<const char*, 48> kWords{
    "i",     "you",   "we",    "they",   "it",    "the",   "a",      "that",  "this",  "know",  "think", "want",
    "go",    "come",  "see",   "tell",   "said",  "never", "always", "maybe", "right", "now",   "here",  "there",
    "house", "car",   "money", "night",  "today", "what",  "why",    "how",   "just",  "really", "good", "bad",
    "time",  "back",  "home",  "listen", "look",  "wait",  "sorry",  "okay",  "well",  "again", "away",  "down"};

inline std::string sentence(Rng& rng, std::size_t words) {
  std::string s;
  for (std::size_t i = 0; i < words; ++i) {
    if (i) s += ' ';
    s += kWords[rng.below(kWords.size())];
  }
  static constexpr std::array<const char*, 3> kEnd{".", "?", "!"};
  s += kEnd[rng.below(kEnd.size())];
  return s;
}

inline std::string timestamp(std::size_t ms) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%02zu:%02zu:%02zu,%03zu", ms / 3600000, ms / 60000 % 60, ms / 1000 % 60, ms % 1000);
  return buf;
}

}  // namespace detail

struct SubtitleFile {
  std::string name;
  std::string content;
};

/// Episodes alternate between SRT and HTML markup. Each episode has its own
/// share of short lines so that some conversations fail the length filter.
inline std::vector<SubtitleFile> subtitle_fixture(const SubtitleFixtureSpec& spec) {
  Rng rng(spec.seed, "synth-subtitles");
  std::vector<SubtitleFile> out;
  for (std::size_t e = 0; e < spec.episodes; ++e) {
    const auto cues = static_cast<std::size_t>(
        rng.between(static_cast<std::int64_t>(spec.min_cues), static_cast<std::int64_t>(spec.max_cues)));
    const double short_share = rng.uniform(0.2, 0.65);
    std::vector<std::string> lines;
    for (std::size_t i = 0; i < cues; ++i) {
      const std::size_t words =
          rng.bernoulli(short_share) ? static_cast<std::size_t>(rng.between(1, 5)) : static_cast<std::size_t>(rng.between(8, 16));
      std::string s = detail::sentence(rng, words);
      if (rng.bernoulli(0.05)) s = "<i>" + s + "</i>";
      if (rng.bernoulli(0.03)) s += " &amp; so on";
      lines.push_back(std::move(s));
    }
    char name[64];
    SubtitleFile f;
    if (e % 2 == 0) {
      std::snprintf(name, sizeof name, "episode%03zu.srt", e);
      std::size_t t = 1000;
      for (std::size_t i = 0; i < lines.size(); ++i) {
        f.content += std::to_string(i + 1) + "\n" + detail::timestamp(t) + " --> " + detail::timestamp(t + 1800) +
                     "\n" + lines[i] + "\n\n";
        t += 2500;
      }
    } else {
      std::snprintf(name, sizeof name, "episode%03zu.html", e);
      f.content = "<html><head><title>Episode " + std::to_string(e) + "</title></head><body>\n";
      for (const auto& l : lines) f.content += "<p>" + l + "</p>\n";
      f.content += "</body></html>\n";
    }
    f.name = name;
    out.push_back(std::move(f));
  }
  return out;
}

inline void write_files(const std::filesystem::path& dir, const std::vector<SubtitleFile>& files) {
  std::filesystem::create_directories(dir);
  for (const auto& f : files) {
    std::ofstream out(dir / f.name, std::ios::binary);
    if (!out) throw DataError("cannot write " + (dir / f.name).string());
    out << f.content;
  }
}

// ---------------------------------------------------------------------------
// Cue corpus: every utterance of a conversation carries that conversation's
// cue token, so the masked utterance can be recognised from its neighbours.

struct CueCorpusSpec {
  std::size_t conversations = 500;
  // Distinct tokens including <unk>.
  std::size_t vocab = 200;
  std::size_t fillers = 49;
  std::size_t min_length = 5;
  std::size_t max_length = 10;
  std::size_t min_tokens = 4;
  std::size_t max_tokens = 8;
  std::uint64_t seed = 0;

  std::size_t cues() const { return vocab - 1 - fillers; }
};

inline std::string filler_token(std::size_t i) { return "w" + std::to_string(i); }
inline std::string cue_token(std::size_t i) { return "c" + std::to_string(i); }

inline std::vector<Conversation> cue_corpus(const CueCorpusSpec& spec) {
  if (spec.vocab < spec.fillers + 2 || spec.fillers == 0 || spec.min_tokens < 2)
    throw std::invalid_argument("cue_corpus: vocabulary too small for the requested fillers");
  Rng rng(spec.seed, "synth-cue");
  std::vector<Conversation> out;
  for (std::size_t c = 0; c < spec.conversations; ++c) {
    const std::string cue = cue_token(c % spec.cues());
    Conversation conv;
    conv.id = "cue" + std::to_string(c);
    const auto len = static_cast<std::size_t>(
        rng.between(static_cast<std::int64_t>(spec.min_length), static_cast<std::int64_t>(spec.max_length)));
    for (std::size_t l = 0; l < len; ++l) {
      const auto n = static_cast<std::size_t>(
          rng.between(static_cast<std::int64_t>(spec.min_tokens), static_cast<std::int64_t>(spec.max_tokens)));
      const auto at = rng.below(n);
      std::string text;
      for (std::size_t t = 0; t < n; ++t) {
        if (t) text += ' ';
        text += t == at ? cue : filler_token(rng.below(spec.fillers));
      }
      conv.utterances.push_back(make_utterance(text));
    }
    out.push_back(std::move(conv));
  }
  return out;
}

/// Conversations of independent uniformly drawn tokens: target and noise
/// utterances are exchangeable, so any scorer ranks at chance.
inline std::vector<Conversation> iid_corpus(std::size_t conversations, std::size_t vocab, std::uint64_t seed,
                                            std::size_t min_length = 5, std::size_t max_length = 15) {
  Rng rng(seed, "synth-iid");
  std::vector<Conversation> out;
  for (std::size_t c = 0; c < conversations; ++c) {
    Conversation conv;
    conv.id = "iid" + std::to_string(c);
    const auto len = static_cast<std::size_t>(
        rng.between(static_cast<std::int64_t>(min_length), static_cast<std::int64_t>(max_length)));
    for (std::size_t l = 0; l < len; ++l) {
      const auto n = static_cast<std::size_t>(rng.between(3, 10));
      std::string text;
      for (std::size_t t = 0; t < n; ++t) {
        if (t) text += ' ';
        text += filler_token(rng.below(vocab));
      }
      conv.utterances.push_back(make_utterance(text));
    }
    out.push_back(std::move(conv));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Emotion task: each utterance holds one emotion keyword; when the previous
// utterance holds the flip token the label is inverted (anger<->joy,
// sadness<->neutral). Tokens are drawn from the cue corpus vocabulary.

inline constexpr std::array<const char*, 4> kEmotionClasses{"anger", "joy", "sadness", "neutral"};

struct EmotionTaskSpec {
  std::size_t conversations = 300;
  std::size_t keywords_per_class = 3;
  std::size_t fillers = 49;
  std::size_t min_length = 4;
  std::size_t max_length = 10;
  double flip_rate = 0.3;
  std::uint64_t seed = 0;
};

inline std::size_t flipped_class(std::size_t c) { return c ^ 1u; }

inline std::string flip_token(const EmotionTaskSpec& spec) { return cue_token(4 * spec.keywords_per_class); }

inline std::vector<Conversation> emotion_task(const EmotionTaskSpec& spec) {
  Rng rng(spec.seed, "synth-emotion");
  std::vector<Conversation> out;
  for (std::size_t c = 0; c < spec.conversations; ++c) {
    Conversation conv;
    conv.id = "emo" + std::to_string(c);
    const auto len = static_cast<std::size_t>(
        rng.between(static_cast<std::int64_t>(spec.min_length), static_cast<std::int64_t>(spec.max_length)));
    bool prev_flip = false;
    for (std::size_t l = 0; l < len; ++l) {
      const auto base = rng.below(4);
      const auto keyword = cue_token(base * spec.keywords_per_class + rng.below(spec.keywords_per_class));
      const bool flip = rng.bernoulli(spec.flip_rate);
      std::vector<std::string> toks;
      const auto n = static_cast<std::size_t>(rng.between(2, 5));
      for (std::size_t t = 0; t < n; ++t) toks.push_back(filler_token(rng.below(spec.fillers)));
      toks.insert(toks.begin() + static_cast<std::ptrdiff_t>(rng.below(toks.size() + 1)), keyword);
      if (flip) toks.insert(toks.begin() + static_cast<std::ptrdiff_t>(rng.below(toks.size() + 1)), flip_token(spec));
      std::string text;
      for (const auto& t : toks) text += (text.empty() ? "" : " ") + t;
      const auto label = prev_flip ? flipped_class(base) : base;
      conv.utterances.push_back(make_utterance(text, std::string(kEmotionClasses[label])));
      prev_flip = flip;
    }
    out.push_back(std::move(conv));
  }
  return out;
}

}  // namespace ptcode::synth
