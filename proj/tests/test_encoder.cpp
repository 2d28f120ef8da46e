#include "ptcode/checkpoint.hpp"
#include "ptcode/encoder.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace ptcode;
using V = Vec<double>;

namespace {

// Same fill as tests/oracles/tiny_model.py.
void oracle_fill(ParameterStore<double>& ps) {
  std::size_t k = 0;
  for (auto& p : ps.all()) {
    for (Eigen::Index i = 0; i < p.value.size(); ++i)
      p.value.data()[i] = 0.5 * std::sin(1.3 * static_cast<double>(i + 1) + 0.7 * static_cast<double>(k));
    ++k;
  }
}

CodeModel<double> oracle_model() {
  ModelConfig cfg;
  cfg.scale = {"tiny", 2, 2};
  cfg.vocab_size = 4;
  cfg.word_dim = 2;
  CodeModel<double> m(cfg);
  oracle_fill(m.params);
  return m;
}

CodeModel<double> random_model(std::uint64_t seed, std::size_t du = 3, std::size_t dc = 4, std::size_t classes = 0) {
  ModelConfig cfg;
  cfg.scale = {"t", du, dc};
  cfg.vocab_size = 12;
  cfg.word_dim = 5;
  cfg.classes = classes;
  CodeModel<double> m(cfg);
  Rng rng(seed);
  for (auto& p : m.params.all())
    for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = rng.uniform(-1, 1);
  return m;
}

GruCell cell_in(ParameterStore<double>& ps, std::size_t in, std::size_t hidden) {
  GruCell c;
  c.input_dim = in;
  c.hidden_dim = hidden;
  c.w_z = ps.add("W_z", hidden, in);
  c.w_r = ps.add("W_r", hidden, in);
  c.w_h = ps.add("W_h", hidden, in);
  c.u_z = ps.add("U_z", hidden, hidden);
  c.u_r = ps.add("U_r", hidden, hidden);
  c.u_h = ps.add("U_h", hidden, hidden);
  c.b_z = ps.add("b_z", hidden, 1);
  c.b_r = ps.add("b_r", hidden, 1);
  c.b_h = ps.add("b_h", hidden, 1);
  return c;
}

V vec2(double a, double b) {
  V v(2);
  v << a, b;
  return v;
}

}  // namespace

TEST(GruStep, ZeroParametersKeepZeroState) {
  ParameterStore<double> ps;
  auto c = cell_in(ps, 3, 2);
  Tape<double> t(ps);
  V x(3);
  x << 4.0, -1.0, 2.0;
  Var h = gru_step(t, c, t.constant(x), t.zeros(2));
  EXPECT_TRUE(t.value(h).isZero(0.0));
}

TEST(GruStep, HandEvaluatedTwoDimensionalStep) {
  ParameterStore<double> ps;
  auto c = cell_in(ps, 2, 2);
  ps[c.w_z].value << 0.1, 0.2, 0.3, -0.1;
  ps[c.w_r].value << -0.2, 0.4, 0.1, 0.1;
  ps[c.w_h].value << 0.5, -0.3, 0.2, 0.6;
  ps[c.u_z].value << 0.05, -0.1, 0.2, 0.0;
  ps[c.u_r].value << 0.3, 0.1, -0.2, 0.25;
  ps[c.u_h].value << -0.4, 0.2, 0.1, 0.3;
  ps[c.b_z].value << 0.01, -0.02;
  ps[c.b_r].value << 0.0, 0.05;
  ps[c.b_h].value << -0.1, 0.1;
  Tape<double> t(ps);
  Var h = gru_step(t, c, t.constant(vec2(1.0, -2.0)), t.constant(vec2(0.5, -0.25)));
  EXPECT_NEAR(t.value(h)(0), 0.599210075144333, 1e-14);
  EXPECT_NEAR(t.value(h)(1), -0.5547240941879253, 1e-14);
}

TEST(GruStep, StateStaysInOpenUnitBox) {
  auto m = random_model(3);
  Tape<double> t(m.params);
  Rng rng(4);
  Var h = t.zeros(3);
  for (int s = 0; s < 50; ++s) {
    V x(5);
    for (int i = 0; i < 5; ++i) x(i) = rng.uniform(-2, 2);
    h = gru_step(t, m.utt_fwd, t.constant(x), h);
    ASSERT_LT(t.value(h).cwiseAbs().maxCoeff(), 1.0);
  }
  // Saturated inputs round tanh to exactly ±1 but never beyond.
  Var hs = t.zeros(3);
  for (int s = 0; s < 20; ++s) hs = gru_step(t, m.utt_fwd, t.constant(Vec<double>::Constant(5, 1e3)), hs);
  EXPECT_LE(t.value(hs).cwiseAbs().maxCoeff(), 1.0);
}

TEST(GruStep, ShapeMismatchThrows) {
  auto m = random_model(1);
  Tape<double> t(m.params);
  EXPECT_THROW(gru_step(t, m.utt_fwd, t.zeros(4), t.zeros(3)), std::invalid_argument);
}

TEST(BiGru, SingleStepBothDirections) {
  auto m = random_model(2);
  Tape<double> t(m.params);
  Var x = t.lookup(m.embedding, 5);
  std::vector<Var> xs{x};
  auto s = bigru(t, m.utt_fwd, m.utt_bwd, xs);
  EXPECT_EQ(t.value(s.fwd[0]), t.value(gru_step(t, m.utt_fwd, x, t.zeros(3))));
  EXPECT_EQ(t.value(s.bwd[0]), t.value(gru_step(t, m.utt_bwd, x, t.zeros(3))));
}

TEST(BiGru, ReversalSwapsChains) {
  auto m = random_model(5);
  // Give the backward cell the forward cell's weights.
  for (const char* g : {"W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h"})
    m.params[std::string("utt.bwd.") + g].value = m.params[std::string("utt.fwd.") + g].value;
  Tape<double> t(m.params);
  std::vector<Var> xs, rev;
  for (std::size_t tok : {1, 4, 7, 2}) xs.push_back(t.lookup(m.embedding, tok));
  rev.assign(xs.rbegin(), xs.rend());
  auto a = bigru(t, m.utt_fwd, m.utt_bwd, xs);
  auto b = bigru(t, m.utt_fwd, m.utt_bwd, rev);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(t.value(a.fwd[i]), t.value(b.bwd[3 - i]));
    EXPECT_EQ(t.value(a.bwd[i]), t.value(b.fwd[3 - i]));
  }
}

TEST(BiGru, Causality) {
  auto m = random_model(6);
  Tape<double> t(m.params);
  std::vector<Var> xs, ys;
  for (std::size_t tok : {1, 4, 7, 2}) xs.push_back(t.lookup(m.embedding, tok));
  ys = xs;
  ys.back() = t.lookup(m.embedding, 9);
  auto a = bigru(t, m.utt_fwd, m.utt_bwd, xs);
  auto b = bigru(t, m.utt_fwd, m.utt_bwd, ys);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(t.value(a.fwd[i]), t.value(b.fwd[i]));
  EXPECT_NE(t.value(a.fwd[3]), t.value(b.fwd[3]));
  EXPECT_NE(t.value(a.bwd[0]), t.value(b.bwd[0]));
}

TEST(BiGru, EmptySequenceThrows) {
  auto m = random_model(1);
  Tape<double> t(m.params);
  EXPECT_THROW(bigru(t, m.utt_fwd, m.utt_bwd, std::vector<Var>{}), std::invalid_argument);
}

TEST(Utterance, HandEvaluatedTinyInstance) {
  auto m = oracle_model();
  Tape<double> t(m.params);
  std::vector<std::size_t> toks{1, 3, 2};
  Var u = encode_utterance(t, m, toks);
  EXPECT_NEAR(t.value(u)(0), 0.03563084527412656, 1e-14);
  EXPECT_NEAR(t.value(u)(1), -0.23405508993147864, 1e-14);
}

TEST(Utterance, SingleTokenPoolsToTwiceTheState) {
  auto m = random_model(7);
  Tape<double> t(m.params);
  std::vector<std::size_t> toks{3};
  Var u = encode_utterance(t, m, toks);
  Var x = t.lookup(m.embedding, 3);
  Var h = t.concat({gru_step(t, m.utt_fwd, x, t.zeros(3)), gru_step(t, m.utt_bwd, x, t.zeros(3))});
  Var expect = t.tanh(t.affine(m.utt_proj_w, t.scale(h, 2.0), m.utt_proj_b));
  EXPECT_TRUE(t.value(u).isApprox(t.value(expect), 1e-15));
}

TEST(Utterance, OutputInOpenUnitBoxAndEmptyThrows) {
  auto m = random_model(8);
  Tape<double> t(m.params);
  std::vector<std::size_t> toks{1, 2, 3, 4, 5, 6};
  EXPECT_LT(t.value(encode_utterance(t, m, toks)).cwiseAbs().maxCoeff(), 1.0);
  EXPECT_THROW(encode_utterance(t, m, std::vector<std::size_t>{}), std::invalid_argument);
}

TEST(Conversation, BoundaryStatesAreZero) {
  auto m = random_model(9);
  Tape<double> t(m.params);
  std::vector<Var> us;
  for (std::size_t tok : {1, 2, 3}) us.push_back(encode_utterance(t, m, std::vector<std::size_t>{tok, tok + 1}));
  auto cs = encode_conversation(t, m, us);
  EXPECT_TRUE(t.value(cs.forward_before(0)).isZero(0.0));
  EXPECT_TRUE(t.value(cs.backward_after(2)).isZero(0.0));
  EXPECT_EQ(t.value(cs.forward_before(1)), t.value(cs.states.fwd[0]));
  EXPECT_EQ(t.value(cs.backward_after(1)), t.value(cs.states.bwd[2]));
}

TEST(Conversation, SingleUtterance) {
  auto m = random_model(10);
  Tape<double> t(m.params);
  Var u = encode_utterance(t, m, std::vector<std::size_t>{1, 2});
  auto cs = encode_conversation(t, m, std::vector<Var>{u});
  EXPECT_EQ(t.value(cs.states.fwd[0]), t.value(gru_step(t, m.conv_fwd, u, t.zeros(4))));
  EXPECT_EQ(t.value(cs.states.bwd[0]), t.value(gru_step(t, m.conv_bwd, u, t.zeros(4))));
}

TEST(Init, GlorotRangesZeroBiasesDeterministic) {
  ModelConfig cfg;
  cfg.scale = ModelScale::small();
  cfg.vocab_size = 20;
  cfg.word_dim = 8;
  cfg.classes = 4;
  CodeModel<double> a(cfg), b(cfg);
  init_params(a, 11);
  init_params(b, 11);
  for (std::size_t i = 0; i < a.params.size(); ++i) {
    const auto& p = a.params.all()[i];
    EXPECT_EQ(p.value, b.params.all()[i].value) << p.name;
    if (p.name == "embedding") continue;
    if (p.value.cols() == 1) {
      EXPECT_TRUE(p.value.isZero(0.0)) << p.name;
    } else {
      const double limit = std::sqrt(6.0 / static_cast<double>(p.value.rows() + p.value.cols()));
      EXPECT_LE(p.value.cwiseAbs().maxCoeff(), limit) << p.name;
      EXPECT_GT(p.value.cwiseAbs().maxCoeff(), 0.5 * limit) << p.name;
    }
  }
}

TEST(Model, ScalesAndShapes) {
  EXPECT_EQ(ModelScale::from_name("mid").utterance_dim, 300u);
  EXPECT_EQ(ModelScale::from_name("large").conversation_dim, 450u);
  EXPECT_THROW(ModelScale::from_name("huge"), DataError);
  auto m = random_model(1, 3, 4, 5);
  EXPECT_EQ(m.params[m.uler_wc].value.cols(), 2 * 4 + 3);
  EXPECT_EQ(m.params[m.uler_wc].value.rows(), 3);
  EXPECT_EQ(m.params[m.uler_wf].value.rows(), 5);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  auto m = random_model(12, 3, 4, 2);
  m.params[m.embedding].trainable = false;
  CheckpointMeta meta;
  meta.seed = 99;
  meta.step = 1234;
  meta.epoch = 7;
  meta.extra = {{"note", "x"}};
  auto path = (std::filesystem::temp_directory_path() / "ptcode_roundtrip.ckpt").string();
  save_checkpoint(path, m, meta);
  auto ck = load_checkpoint(path);
  EXPECT_EQ(ck.meta.model, m.config());
  EXPECT_EQ(ck.meta.step, 1234u);
  EXPECT_EQ(ck.meta.epoch, 7u);
  EXPECT_EQ(ck.meta.extra["note"], "x");
  ASSERT_EQ(ck.tensors.size(), m.params.size());
  for (const auto& p : m.params.all()) {
    EXPECT_EQ(ck.tensors[p.name].value, p.value) << p.name;
    EXPECT_EQ(ck.tensors[p.name].trainable, p.trainable) << p.name;
  }
  CodeModel<double> back(ck.meta.model);
  EXPECT_EQ(load_tensors(back.params, ck), m.params.size());
}

TEST(Checkpoint, ShapeMismatchAndCorruptionAreErrors) {
  auto m = random_model(12, 3, 4);
  auto path = (std::filesystem::temp_directory_path() / "ptcode_shape.ckpt").string();
  save_checkpoint(path, m, CheckpointMeta{});
  auto ck = load_checkpoint(path);
  auto other = random_model(1, 5, 4);
  EXPECT_THROW(load_tensors(other.params, ck), DataError);
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << "garbage";
  }
  EXPECT_THROW(load_checkpoint(path), DataError);
}
