#include "ptcode/corpus.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace ptcode;
using Tokens = std::vector<std::string>;

namespace {

std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "ptcode_test_corpus";
  std::filesystem::create_directories(dir);
  return dir / name;
}

Conversation conv(std::string id, std::vector<std::string> texts) {
  Conversation c;
  c.id = std::move(id);
  for (auto& t : texts) c.utterances.push_back(make_utterance(std::move(t)));
  return c;
}

void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  out << s;
}

}  // namespace

TEST(Tokenize, SplitsPunctuation) {
  EXPECT_EQ(tokenize("Hello, world!"), (Tokens{"hello", ",", "world", "!"}));
}

TEST(Tokenize, EmptyInput) { EXPECT_TRUE(tokenize("").empty()); }

TEST(Tokenize, KeepsCliticAttached) {
  EXPECT_EQ(tokenize("It's so hard not to cry"), (Tokens{"it", "'s", "so", "hard", "not", "to", "cry"}));
}

TEST(Tokenize, OtherApostrophesSplit) {
  EXPECT_EQ(tokenize("'quoted'"), (Tokens{"'", "quoted", "'"}));
  EXPECT_EQ(tokenize("don't we'll"), (Tokens{"don", "'t", "we", "'ll"}));
}

TEST(Tokenize, NonAsciiBytesAreWordCharacters) {
  EXPECT_EQ(tokenize("Caf\xC3\xA9 ok"), (Tokens{"caf\xC3\xA9", "ok"}));
}

TEST(Vocabulary, ThresholdApplies) {
  std::vector<Conversation> corpus{conv("x", {"a a a b"})};
  auto v = build_vocabulary(corpus, 2);
  EXPECT_EQ(v.tokens(), (Tokens{"<unk>", "a"}));
}

TEST(Vocabulary, TiesBrokenLexicographically) {
  std::vector<Conversation> corpus{conv("x", {"b a", "b a"})};
  auto v = build_vocabulary(corpus, 1);
  EXPECT_EQ(v.tokens(), (Tokens{"<unk>", "a", "b"}));
  EXPECT_EQ(v.lookup("a"), 1u);
  EXPECT_EQ(v.lookup("zzz"), Vocabulary::kUnknown);
}

TEST(Vocabulary, DeterministicAndRoundTrips) {
  std::vector<Conversation> corpus{conv("x", {"the cat sat", "on the mat ."})};
  auto v1 = build_vocabulary(corpus), v2 = build_vocabulary(corpus);
  EXPECT_EQ(v1, v2);
  auto p = temp_path("vocab.txt");
  v1.save(p.string());
  EXPECT_EQ(Vocabulary::load(p.string()), v1);
}

TEST(Vocabulary, EmptyCorpusIsAnError) {
  std::vector<Conversation> none;
  EXPECT_THROW(build_vocabulary(none), DataError);
}

TEST(Vocabulary, LoadRejectsDuplicates) {
  auto p = temp_path("dup.txt");
  write_text(p, "<unk>\na\na\n");
  EXPECT_THROW(Vocabulary::load(p.string()), DataError);
}

TEST(IndexCorpus, EmptyTextMapsToUnknown) {
  std::vector<Conversation> corpus{conv("x", {"hello", "   "})};
  auto v = build_vocabulary(corpus);
  index_corpus(corpus, v);
  EXPECT_EQ(corpus[0].utterances[0].tokens, (std::vector<std::size_t>{1}));
  EXPECT_EQ(corpus[0].utterances[1].tokens, (std::vector<std::size_t>{0}));
}

TEST(WordVectors, PresentRowsCopiedAbsentRowsRandom) {
  auto v = Vocabulary::from_tokens(Tokens{"cat", "dog"});
  auto p = temp_path("vec.txt");
  write_text(p, "cat 0.5 -1.25 3\nzebra 1 1 1\n");
  auto t1 = load_pretrained_vectors(p.string(), v, 3, 7);
  EXPECT_EQ(t1.matrix(1, 0), 0.5);
  EXPECT_EQ(t1.matrix(1, 1), -1.25);
  EXPECT_EQ(t1.matrix(1, 2), 3.0);
  for (Eigen::Index c = 0; c < 3; ++c) {
    EXPECT_LE(std::abs(t1.matrix(2, c)), 0.1);
    EXPECT_LE(std::abs(t1.matrix(0, c)), 0.1);
  }
  EXPECT_NEAR(t1.matched_fraction, 1.0 / 3.0, 1e-12);
  auto t2 = load_pretrained_vectors(p.string(), v, 3, 7);
  EXPECT_EQ(t1.matrix, t2.matrix);
}

TEST(WordVectors, EmptyFileAllRandom) {
  auto v = Vocabulary::from_tokens(Tokens{"cat"});
  auto p = temp_path("empty.txt");
  write_text(p, "");
  auto t = load_pretrained_vectors(p.string(), v, 4, 1);
  EXPECT_EQ(t.matched_fraction, 0.0);
  EXPECT_EQ(t.matrix, random_embedding(2, 4, 1));
}

TEST(WordVectors, MalformedLineNamesLineNumber) {
  auto v = Vocabulary::from_tokens(Tokens{"cat"});
  auto p = temp_path("bad.txt");
  write_text(p, "cat 1 2 3\ndog 1 2\n");
  try {
    load_pretrained_vectors(p.string(), v, 3, 1);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos) << e.what();
  }
}

TEST(WordVectors, DimensionMismatchIsAnError) {
  auto v = Vocabulary::from_tokens(Tokens{"cat"});
  auto p = temp_path("dim.txt");
  write_text(p, "cat 1 2\n");
  EXPECT_THROW(load_pretrained_vectors(p.string(), v, 3, 1), DataError);
}

TEST(Dataset, JsonLinesRoundTrip) {
  Conversation c = conv("ep1#0", {"Hi there.", "Oh, hello!"});
  c.utterances[0].speaker = "Ann";
  c.utterances[1].label = "joy";
  std::vector<Conversation> convs{c, conv("ep1#1", {"\xC3\xA9t\xC3\xA9 \"quoted\""})};
  auto p = temp_path("convs.jsonl");
  write_conversations(p.string(), convs);
  auto back = read_conversations(p.string());
  EXPECT_EQ(back, convs);
}

TEST(Dataset, MalformedRecordReportsLine) {
  auto p = temp_path("broken.jsonl");
  write_text(p, "{\"id\":\"a\",\"utterances\":[]}\n{\"id\":3}\n");
  try {
    read_conversations(p.string());
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos) << e.what();
  }
}
