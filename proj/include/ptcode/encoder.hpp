#pragma once

#include "ptcode/autodiff.hpp"
#include "ptcode/error.hpp"
#include "ptcode/random.hpp"
#include "ptcode/tensor.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <span>
#include <string>
#include <vector>

namespace ptcode {

struct ModelScale {
  std::string name = "small";
  std::size_t utterance_dim = 150;
  std::size_t conversation_dim = 150;

  static ModelScale small() { return {"small", 150, 150}; }
  static ModelScale mid() { return {"mid", 300, 300}; }
  static ModelScale large() { return {"large", 450, 450}; }

  static ModelScale from_name(const std::string& name) {
    if (name == "small") return small();
    if (name == "mid") return mid();
    if (name == "large") return large();
    throw DataError("unknown model scale '" + name + "' (expected small, mid or large)");
  }

  friend bool operator==(const ModelScale&, const ModelScale&) = default;
};

struct ModelConfig {
  ModelScale scale;
  std::size_t vocab_size = 0;
  std::size_t word_dim = 300;
  // Width of the classification FC layer; 0 means utterance_dim.
  std::size_t head_dim = 0;
  // Emotion classes; 0 builds no classification head.
  std::size_t classes = 0;
  bool embedding_trainable = false;

  std::size_t fc_dim() const { return head_dim ? head_dim : scale.utterance_dim; }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"scale", c.scale.name},
       {"utterance_dim", c.scale.utterance_dim},
       {"conversation_dim", c.scale.conversation_dim},
       {"vocab_size", c.vocab_size},
       {"word_dim", c.word_dim},
       {"head_dim", c.head_dim},
       {"classes", c.classes},
       {"embedding_trainable", c.embedding_trainable}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.scale.name = j.at("scale").get<std::string>();
  c.scale.utterance_dim = j.at("utterance_dim").get<std::size_t>();
  c.scale.conversation_dim = j.at("conversation_dim").get<std::size_t>();
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.word_dim = j.at("word_dim").get<std::size_t>();
  c.head_dim = j.value("head_dim", std::size_t{0});
  c.classes = j.value("classes", std::size_t{0});
  c.embedding_trainable = j.value("embedding_trainable", false);
}

struct GruCell {
  ParamId w_z, w_r, w_h;  // hidden x input
  ParamId u_z, u_r, u_h;  // hidden x hidden
  ParamId b_z, b_r, b_h;
  std::size_t input_dim = 0;
  std::size_t hidden_dim = 0;
};

// CoDE: word embeddings, utterance BiGRU with max+mean pooling and a tanh
// projection, conversation BiGRU, plus the completion head and (optionally)
// the emotion classification head.
template <class S>
class CodeModel {
 public:
  explicit CodeModel(const ModelConfig& cfg) : config_(cfg) {
    const auto du = cfg.scale.utterance_dim;
    const auto dc = cfg.scale.conversation_dim;
    if (cfg.vocab_size == 0 || cfg.word_dim == 0 || du == 0 || dc == 0)
      throw DataError("model dimensions must be positive");
    embedding = params.add("embedding", cfg.vocab_size, cfg.word_dim, cfg.embedding_trainable);
    utt_fwd = add_cell("utt.fwd", cfg.word_dim, du);
    utt_bwd = add_cell("utt.bwd", cfg.word_dim, du);
    utt_proj_w = params.add("utt.proj.W", du, 2 * du);
    utt_proj_b = params.add("utt.proj.b", du, 1);
    conv_fwd = add_cell("conv.fwd", du, dc);
    conv_bwd = add_cell("conv.bwd", du, dc);
    coco_w = params.add("coco.W", du, 2 * dc);
    coco_b = params.add("coco.b", du, 1);
    if (cfg.classes > 0) {
      const auto df = cfg.fc_dim();
      uler_wc = params.add("uler.W_c", df, 2 * dc + du);
      uler_bc = params.add("uler.b_c", df, 1);
      uler_wf = params.add("uler.W_f", cfg.classes, df);
      uler_bf = params.add("uler.b_f", cfg.classes, 1);
    }
  }

  const ModelConfig& config() const { return config_; }
  std::size_t utterance_dim() const { return config_.scale.utterance_dim; }
  std::size_t conversation_dim() const { return config_.scale.conversation_dim; }
  bool has_classifier() const { return config_.classes > 0; }

  ParameterStore<S> params;
  ParamId embedding;
  GruCell utt_fwd, utt_bwd;
  ParamId utt_proj_w, utt_proj_b;
  GruCell conv_fwd, conv_bwd;
  ParamId coco_w, coco_b;
  ParamId uler_wc, uler_bc, uler_wf, uler_bf;

 private:
  GruCell add_cell(const std::string& prefix, std::size_t in, std::size_t hidden) {
    GruCell c;
    c.input_dim = in;
    c.hidden_dim = hidden;
    c.w_z = params.add(prefix + ".W_z", hidden, in);
    c.w_r = params.add(prefix + ".W_r", hidden, in);
    c.w_h = params.add(prefix + ".W_h", hidden, in);
    c.u_z = params.add(prefix + ".U_z", hidden, hidden);
    c.u_r = params.add(prefix + ".U_r", hidden, hidden);
    c.u_h = params.add(prefix + ".U_h", hidden, hidden);
    c.b_z = params.add(prefix + ".b_z", hidden, 1);
    c.b_r = params.add(prefix + ".b_r", hidden, 1);
    c.b_h = params.add(prefix + ".b_h", hidden, 1);
    return c;
  }

  ModelConfig config_;
};

/// Glorot-uniform weights in ±sqrt(6 / (fan_in + fan_out)) and zero biases
/// for every tensor except the embedding table.
template <class S>
void init_params(CodeModel<S>& model, std::uint64_t seed) {
  Rng rng(seed, "init");
  for (auto& p : model.params.all()) {
    if (p.name == "embedding") continue;
    if (p.value.cols() == 1) {
      p.value.setZero();
      continue;
    }
    const double limit = std::sqrt(6.0 / static_cast<double>(p.value.rows() + p.value.cols()));
    for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = static_cast<S>(rng.uniform(-limit, limit));
  }
}

// Inverted dropout. Inactive (identity) unless rate > 0 and an rng is set.
struct Dropout {
  double rate = 0.0;
  Rng* rng = nullptr;

  bool active() const { return rate > 0.0 && rng != nullptr; }

  template <class S>
  Var apply(Tape<S>& tape, Var x) const {
    if (!active()) return x;
    const auto n = tape.value(x).size();
    Vec<S> m(n);
    const S keep = static_cast<S>(1.0 / (1.0 - rate));
    for (Eigen::Index i = 0; i < n; ++i) m(i) = rng->bernoulli(rate) ? S(0) : keep;
    return tape.mask(x, std::move(m));
  }
};

// ---------------------------------------------------------------------------
// Recurrent building blocks

/// z = σ(W_z x + U_z h + b_z), r = σ(W_r x + U_r h + b_r),
/// ĥ = tanh(W_h x + U_h (r ⊙ h) + b_h), h' = (1 − z) ⊙ h + z ⊙ ĥ.
template <class S>
Var gru_step(Tape<S>& tape, const GruCell& cell, Var x, Var h_prev) {
  if (static_cast<std::size_t>(tape.value(x).size()) != cell.input_dim ||
      static_cast<std::size_t>(tape.value(h_prev).size()) != cell.hidden_dim)
    throw std::invalid_argument("gru_step: input or state has the wrong dimension");
  Var z = tape.sigmoid(tape.add(tape.affine(cell.w_z, x, cell.b_z), tape.matvec(cell.u_z, h_prev)));
  Var r = tape.sigmoid(tape.add(tape.affine(cell.w_r, x, cell.b_r), tape.matvec(cell.u_r, h_prev)));
  Var cand = tape.tanh(tape.add(tape.affine(cell.w_h, x, cell.b_h), tape.matvec(cell.u_h, tape.mul(r, h_prev))));
  return tape.add(h_prev, tape.mul(z, tape.sub(cand, h_prev)));
}

/// Hidden states of a forward and a backward GRU chain, both started from
/// zero. fwd[t] depends on xs[0..t] only, bwd[t] on xs[t..T-1] only.
struct BiStates {
  std::vector<Var> fwd;
  std::vector<Var> bwd;
};

template <class S>
BiStates bigru(Tape<S>& tape, const GruCell& fwd, const GruCell& bwd, std::span<const Var> xs) {
  if (xs.empty()) throw std::invalid_argument("bigru: empty sequence");
  const auto T = xs.size();
  BiStates out;
  out.fwd.resize(T);
  out.bwd.resize(T);
  Var h = tape.zeros(fwd.hidden_dim);
  for (std::size_t t = 0; t < T; ++t) out.fwd[t] = h = gru_step(tape, fwd, xs[t], h);
  h = tape.zeros(bwd.hidden_dim);
  for (std::size_t t = T; t-- > 0;) out.bwd[t] = h = gru_step(tape, bwd, xs[t], h);
  return out;
}

/// u = tanh(W_u (maxpool_t h_t + meanpool_t h_t) + b_u), h_t = [h→_t; h←_t].
template <class S>
Var encode_utterance(Tape<S>& tape, const CodeModel<S>& model, std::span<const std::size_t> tokens) {
  if (tokens.empty()) throw std::invalid_argument("encode_utterance: empty token list");
  std::vector<Var> xs;
  xs.reserve(tokens.size());
  for (auto tok : tokens) xs.push_back(tape.lookup(model.embedding, tok));
  auto states = bigru(tape, model.utt_fwd, model.utt_bwd, xs);
  std::vector<Var> cat;
  cat.reserve(tokens.size());
  for (std::size_t t = 0; t < tokens.size(); ++t) cat.push_back(tape.concat({states.fwd[t], states.bwd[t]}));
  Var pooled = tape.add(tape.max_pool(cat), tape.mean_pool(cat));
  return tape.tanh(tape.affine(model.utt_proj_w, pooled, model.utt_proj_b));
}

// Conversation-level BiGRU states with the boundary convention
// H→_{-1} = H←_{L} = 0 (0-based positions).
struct ConversationStates {
  BiStates states;
  Var zero;

  std::size_t size() const { return states.fwd.size(); }

  /// Forward state just before position l (zero at l = 0).
  Var forward_before(std::size_t l) const { return l == 0 ? zero : states.fwd.at(l - 1); }

  /// Backward state just after position l (zero at l = L-1).
  Var backward_after(std::size_t l) const { return l + 1 >= size() ? zero : states.bwd.at(l + 1); }
};

template <class S>
ConversationStates encode_conversation(Tape<S>& tape, const CodeModel<S>& model, std::span<const Var> utterances) {
  if (utterances.empty()) throw std::invalid_argument("encode_conversation: empty conversation");
  ConversationStates cs;
  cs.states = bigru(tape, model.conv_fwd, model.conv_bwd, utterances);
  cs.zero = tape.zeros(model.conversation_dim());
  return cs;
}

}  // namespace ptcode
