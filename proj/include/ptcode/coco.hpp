#pragma once

#include "ptcode/corpus.hpp"
#include "ptcode/encoder.hpp"
#include "ptcode/error.hpp"
#include "ptcode/subtitle.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <exception>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

namespace ptcode {

// One conversation-completion question: position `masked` is hidden and must
// be picked out of `candidates`, whose first entry is the true utterance.
struct CocoInstance {
  std::string conversation_id;
  std::size_t masked = 0;
  std::vector<NoiseRef> candidates;
  // Presentation order: shown[i] = candidates[order[i]]; inverse[order[i]] = i.
  std::vector<std::size_t> order;
  std::vector<std::size_t> inverse;
};

/// One instance per position of `conv`, all sharing the same noise set.
/// Presentation order is shuffled when an rng is given.
inline std::vector<CocoInstance> make_instances(const Conversation& conv, std::span<const NoiseRef> noise,
                                                Rng* rng = nullptr) {
  for (const auto& n : noise)
    if (n.conv == conv.id) throw DataError("noise utterance drawn from conversation " + conv.id + " itself");
  std::vector<CocoInstance> out;
  out.reserve(conv.size());
  for (std::size_t l = 0; l < conv.size(); ++l) {
    CocoInstance inst;
    inst.conversation_id = conv.id;
    inst.masked = l;
    inst.candidates.push_back(NoiseRef{conv.id, l});
    inst.candidates.insert(inst.candidates.end(), noise.begin(), noise.end());
    inst.order.resize(inst.candidates.size());
    std::iota(inst.order.begin(), inst.order.end(), std::size_t{0});
    if (rng) rng->shuffle(inst.order.begin(), inst.order.end());
    inst.inverse.resize(inst.order.size());
    for (std::size_t i = 0; i < inst.order.size(); ++i) inst.inverse[inst.order[i]] = i;
    out.push_back(std::move(inst));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Scoring and loss on plain vectors

template <class S>
S match_score(const Vec<S>& context, const Vec<S>& candidate) {
  if (context.size() != candidate.size()) throw std::invalid_argument("match_score: dimension mismatch");
  return detail::sigmoid(context.dot(candidate));
}

/// −[ln σ(ûᵀu_target) + Σ_n ln σ(−ûᵀu_n)] for one masked position.
template <class S>
S coco_loss(const Vec<S>& context, const Vec<S>& target, std::span<const Vec<S>> noise) {
  if (context.size() != target.size()) throw std::invalid_argument("coco_loss: dimension mismatch");
  S loss = detail::softplus(-context.dot(target));
  for (const auto& n : noise) {
    if (n.size() != context.size()) throw std::invalid_argument("coco_loss: dimension mismatch");
    loss += detail::softplus(context.dot(n));
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Graph versions

/// û_l = tanh(W_c [H→_{l−1}; H←_{l+1}] + b_c). Never reads position l itself.
template <class S>
Var contextual_embedding(Tape<S>& tape, const CodeModel<S>& model, const ConversationStates& states,
                         std::size_t l) {
  if (l >= states.size())
    throw std::out_of_range("contextual_embedding: position " + std::to_string(l) + " outside conversation of " +
                            std::to_string(states.size()));
  Var ctx = tape.concat({states.forward_before(l), states.backward_after(l)});
  return tape.tanh(tape.affine(model.coco_w, ctx, model.coco_b));
}

template <class S>
Var coco_position_loss(Tape<S>& tape, Var context, Var target, std::span<const Var> noise) {
  std::vector<Var> terms;
  terms.reserve(noise.size() + 1);
  terms.push_back(tape.log_sigmoid(tape.dot(context, target)));
  for (Var n : noise) terms.push_back(tape.log_sigmoid(tape.neg(tape.dot(context, n))));
  return tape.neg(tape.sum(terms));
}

struct EncodedConversation {
  std::vector<Var> utterances;  // candidate-side embeddings
  ConversationStates states;
};

/// Encodes every utterance once and runs the conversation BiGRU over the full
/// (unmasked) conversation. Dropout, when active, uses independent masks on
/// the candidate-side embeddings and on the conversation BiGRU inputs.
template <class S>
EncodedConversation encode_for_completion(Tape<S>& tape, const CodeModel<S>& model, const Conversation& conv,
                                          const Dropout& dropout = {}) {
  EncodedConversation enc;
  std::vector<Var> conv_in;
  for (const auto& u : conv.utterances) {
    Var e = encode_utterance(tape, model, u.tokens);
    enc.utterances.push_back(dropout.apply(tape, e));
    conv_in.push_back(dropout.apply(tape, e));
  }
  enc.states = encode_conversation(tape, model, conv_in);
  return enc;
}

/// Completion loss summed over every position of one conversation.
template <class S>
Var coco_conversation_loss(Tape<S>& tape, const CodeModel<S>& model, const Conversation& conv,
                           std::span<const Utterance* const> noise, const Dropout& dropout = {}) {
  auto enc = encode_for_completion(tape, model, conv, dropout);
  std::vector<Var> noise_emb;
  for (const Utterance* n : noise) noise_emb.push_back(dropout.apply(tape, encode_utterance(tape, model, n->tokens)));
  std::vector<Var> losses;
  for (std::size_t l = 0; l < conv.size(); ++l) {
    Var ctx = contextual_embedding(tape, model, enc.states, l);
    losses.push_back(coco_position_loss(tape, ctx, enc.utterances[l], noise_emb));
  }
  return tape.sum(losses);
}

// ---------------------------------------------------------------------------
// Evaluation

/// 1 if the target ranks within the top k by descending score, else 0. Ties
/// are resolved against the target.
inline int recall_at_k(std::span<const double> scores, std::size_t target, std::size_t k) {
  if (target >= scores.size()) throw std::out_of_range("recall_at_k: target outside candidate list");
  if (k < 1 || k > scores.size()) throw std::out_of_range("recall_at_k: k must be in [1, N]");
  std::size_t above = 0;
  for (std::size_t i = 0; i < scores.size(); ++i)
    if (i != target && scores[i] >= scores[target]) ++above;
  return above < k ? 1 : 0;
}

struct CocoReport {
  double r5_1 = 0.0;
  double r5_2 = 0.0;
  double r11_1 = 0.0;
  double r11_2 = 0.0;
  std::size_t instances = 0;
};

inline void to_json(nlohmann::json& j, const CocoReport& r) {
  j = {{"r5@1", r.r5_1}, {"r5@2", r.r5_2}, {"r11@1", r.r11_1}, {"r11@2", r.r11_2}, {"instances", r.instances}};
}

// Scores every position of a conversation against its candidates. Row l has
// the true utterance first, then the noise utterances in pool order.
using CocoScorer = std::function<std::vector<std::vector<double>>(const Conversation&,
                                                                  std::span<const Utterance* const>)>;

/// Ranks by the logit ûᵀu; σ is strictly increasing, so this is the same
/// ranking as the matching score without float saturation ties.
template <class S>
CocoScorer model_scorer(const CodeModel<S>& model) {
  return [&model](const Conversation& conv, std::span<const Utterance* const> noise) {
    Tape<S> tape(model.params);
    auto enc = encode_for_completion(tape, model, conv);
    std::vector<Vec<S>> noise_emb;
    for (const Utterance* n : noise) noise_emb.push_back(tape.value(encode_utterance(tape, model, n->tokens)));
    std::vector<std::vector<double>> rows(conv.size());
    for (std::size_t l = 0; l < conv.size(); ++l) {
      const Vec<S> ctx = tape.value(contextual_embedding(tape, model, enc.states, l));
      rows[l].push_back(static_cast<double>(ctx.dot(tape.value(enc.utterances[l]))));
      for (const auto& n : noise_emb) rows[l].push_back(static_cast<double>(ctx.dot(n)));
    }
    return rows;
  };
}

/// Always ranks the true utterance first.
inline CocoScorer oracle_scorer() {
  return [](const Conversation& conv, std::span<const Utterance* const> noise) {
    std::vector<std::vector<double>> rows(conv.size(), std::vector<double>(noise.size() + 1, 0.0));
    for (auto& r : rows) r[0] = 1.0;
    return rows;
  };
}

namespace detail {

template <class Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < n; i += threads) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace detail

/// R_5@{1,2} and R_11@{1,2} averaged over every position of every
/// conversation. R_11 uses the first 10 pooled noise utterances, R_5 the
/// first 4 of them.
inline CocoReport evaluate_split(const CocoScorer& scorer, std::span<const Conversation> split,
                                 const NoisePool& pool, std::size_t threads = 1) {
  constexpr std::size_t kNoise = 10;
  constexpr std::size_t kShortNoise = 4;
  std::unordered_map<std::string, std::size_t> by_id;
  for (std::size_t c = 0; c < split.size(); ++c) by_id.emplace(split[c].id, c);

  std::vector<std::vector<const Utterance*>> noise(split.size());
  for (std::size_t c = 0; c < split.size(); ++c) {
    const auto* refs = pool.find(split[c].id);
    if (!refs) throw DataError("noise pool has no entry for conversation " + split[c].id);
    if (refs->size() < kNoise)
      throw DataError("noise pool entry for " + split[c].id + " has " + std::to_string(refs->size()) +
                      " utterances, need " + std::to_string(kNoise));
    for (std::size_t k = 0; k < kNoise; ++k) {
      const auto& r = (*refs)[k];
      auto it = by_id.find(r.conv);
      if (it == by_id.end() || r.index >= split[it->second].size())
        throw DataError("noise reference " + r.conv + "[" + std::to_string(r.index) + "] does not resolve in split");
      if (r.conv == split[c].id) throw DataError("noise pool entry for " + r.conv + " references itself");
      noise[c].push_back(&split[it->second].utterances[r.index]);
    }
  }

  struct Hits {
    std::size_t r5_1 = 0, r5_2 = 0, r11_1 = 0, r11_2 = 0, n = 0;
  };
  std::vector<Hits> per_conv(split.size());
  detail::parallel_for(split.size(), threads, [&](std::size_t c) {
    auto rows = scorer(split[c], noise[c]);
    Hits h;
    for (const auto& row : rows) {
      std::span<const double> all(row);
      auto five = all.first(1 + kShortNoise);
      h.r11_1 += static_cast<std::size_t>(recall_at_k(all, 0, 1));
      h.r11_2 += static_cast<std::size_t>(recall_at_k(all, 0, 2));
      h.r5_1 += static_cast<std::size_t>(recall_at_k(five, 0, 1));
      h.r5_2 += static_cast<std::size_t>(recall_at_k(five, 0, 2));
      ++h.n;
    }
    per_conv[c] = h;
  });

  Hits total;
  for (const auto& h : per_conv) {
    total.r5_1 += h.r5_1;
    total.r5_2 += h.r5_2;
    total.r11_1 += h.r11_1;
    total.r11_2 += h.r11_2;
    total.n += h.n;
  }
  CocoReport r;
  r.instances = total.n;
  if (total.n) {
    const auto n = static_cast<double>(total.n);
    r.r5_1 = static_cast<double>(total.r5_1) / n;
    r.r5_2 = static_cast<double>(total.r5_2) / n;
    r.r11_1 = static_cast<double>(total.r11_1) / n;
    r.r11_2 = static_cast<double>(total.r11_2) / n;
  }
  return r;
}

}  // namespace ptcode
