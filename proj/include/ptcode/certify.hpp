#pragma once

#include "ptcode/coco.hpp"
#include "ptcode/encoder.hpp"
#include "ptcode/gradcheck.hpp"
#include "ptcode/random.hpp"
#include "ptcode/uler.hpp"

#include <nlohmann/json.hpp>

#include <vector>

namespace ptcode {

struct GradientSuiteReport {
  GradCheckReport completion;
  GradCheckReport emotion;
  bool passed() const { return completion.passed && emotion.passed; }
  double max_rel_error() const { return std::max(completion.max_rel_error(), emotion.max_rel_error()); }
};

inline void to_json(nlohmann::json& j, const GradientSuiteReport& r) {
  j = {{"passed", r.passed()}, {"completion", r.completion}, {"emotion", r.emotion}};
}

// Tiny fully trainable model: 4-d words, 3-d utterance and conversation
// states, 10 tokens, 4 classes; every tensor drawn uniformly from ±0.5.
inline CodeModel<double> tiny_model(std::uint64_t seed) {
  ModelConfig cfg;
  cfg.scale = {"tiny", 3, 3};
  cfg.vocab_size = 10;
  cfg.word_dim = 4;
  cfg.classes = 4;
  cfg.embedding_trainable = true;
  CodeModel<double> model(cfg);
  Rng rng(seed, "init");
  for (auto& p : model.params.all())
    for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = rng.uniform(-0.5, 0.5);
  return model;
}

struct TinyFixture {
  Conversation conversation;
  std::vector<Utterance> noise;
};

/// One labeled conversation of 5 utterances and 2 noise utterances.
inline TinyFixture tiny_fixture(std::uint64_t seed) {
  Rng rng(seed, "fixture");
  auto utterance = [&] {
    Utterance u;
    const auto n = static_cast<std::size_t>(rng.between(2, 5));
    for (std::size_t t = 0; t < n; ++t) u.tokens.push_back(rng.below(10));
    u.label_index = rng.below(4);
    return u;
  };
  TinyFixture f;
  f.conversation.id = "tiny";
  for (int l = 0; l < 5; ++l) f.conversation.utterances.push_back(utterance());
  for (int k = 0; k < 2; ++k) f.noise.push_back(utterance());
  return f;
}

/// Central-difference certification of the completion loss and the weighted
/// emotion loss on the tiny model, dropout off.
inline GradientSuiteReport run_gradient_suite(std::uint64_t seed = 0, GradCheckOptions opts = {}) {
  opts.seed = seed;
  auto model = tiny_model(seed);
  const auto fx = tiny_fixture(seed);
  std::vector<const Utterance*> noise;
  for (const auto& u : fx.noise) noise.push_back(&u);
  const std::vector<double> weights{1.0, 2.0, 0.5, 1.5};

  GradientSuiteReport r;
  r.completion = finite_difference_check(
      model.params, [&](Tape<double>& t) { return coco_conversation_loss(t, model, fx.conversation, noise); }, opts);
  r.emotion = finite_difference_check(
      model.params, [&](Tape<double>& t) { return uler_conversation_loss(t, model, fx.conversation, weights); }, opts);
  return r;
}

}  // namespace ptcode
