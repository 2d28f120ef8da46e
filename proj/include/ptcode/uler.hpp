#pragma once

#include "ptcode/checkpoint.hpp"
#include "ptcode/coco.hpp"
#include "ptcode/corpus.hpp"
#include "ptcode/encoder.hpp"
#include "ptcode/error.hpp"
#include "ptcode/pretrain.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace ptcode {

// ---------------------------------------------------------------------------
// Labels

inline constexpr const char* kOtherLabel = "other";

// Ordered emotion classes plus a raw-label mapping. A raw label that equals a
// class name maps to that class unless the map says otherwise; nullopt in the
// map means the utterance is dropped.
struct LabelSchema {
  std::vector<std::string> classes;
  std::map<std::string, std::optional<std::size_t>> map;

  std::size_t size() const { return classes.size(); }

  std::size_t index_of(const std::string& name) const {
    auto it = std::find(classes.begin(), classes.end(), name);
    if (it == classes.end()) throw DataError("unknown class '" + name + "'");
    return static_cast<std::size_t>(it - classes.begin());
  }

  /// Class index for a raw label, or nullopt when it is dropped.
  std::optional<std::size_t> resolve(const std::string& raw) const {
    if (auto it = map.find(raw); it != map.end()) return it->second;
    auto it = std::find(classes.begin(), classes.end(), raw);
    if (it != classes.end()) return static_cast<std::size_t>(it - classes.begin());
    throw DataError("label '" + raw + "' is not mapped by the label schema");
  }

  static LabelSchema from_json(const nlohmann::json& j) {
    LabelSchema s;
    if (!j.is_object() || !j.contains("classes") || !j["classes"].is_array())
      throw DataError("label schema needs a \"classes\" array");
    for (const auto& c : j["classes"]) {
      if (!c.is_string()) throw DataError("label schema classes must be strings");
      auto name = c.get<std::string>();
      if (name == "drop") throw DataError("'drop' is reserved and cannot be a class name");
      if (std::find(s.classes.begin(), s.classes.end(), name) != s.classes.end())
        throw DataError("duplicate class '" + name + "' in label schema");
      s.classes.push_back(std::move(name));
    }
    if (s.classes.empty()) throw DataError("label schema has no classes");
    if (j.contains("map")) {
      if (!j["map"].is_object()) throw DataError("label schema \"map\" must be an object");
      for (const auto& [raw, target] : j["map"].items()) {
        if (!target.is_string()) throw DataError("label schema map value for '" + raw + "' must be a string");
        const auto t = target.get<std::string>();
        if (t == "drop")
          s.map[raw] = std::nullopt;
        else
          s.map[raw] = s.index_of(t);
      }
    }
    return s;
  }

  static LabelSchema load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot read label schema " + path);
    try {
      return from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path + ": " + e.what());
    }
  }

  nlohmann::json to_json() const {
    nlohmann::json m = nlohmann::json::object();
    for (const auto& [raw, idx] : map) m[raw] = idx ? classes[*idx] : std::string("drop");
    return {{"classes", classes}, {"map", m}};
  }
};

/// Primary label of a multi-label utterance: the strict vote maximum, then
/// the highest intensity sum among tied classes, "other" when no class has a
/// vote. A tie in both throws, listing the tied classes.
inline std::string resolve_multilabel(const std::map<std::string, double>& votes,
                                      const std::map<std::string, double>& intensities) {
  double top = 0.0;
  for (const auto& [c, v] : votes) {
    if (!(v >= 0.0)) throw DataError("vote count for '" + c + "' must be >= 0");
    top = std::max(top, v);
  }
  if (top == 0.0) return kOtherLabel;
  std::vector<std::string> tied;
  for (const auto& [c, v] : votes)
    if (v == top) tied.push_back(c);
  if (tied.size() == 1) return tied.front();

  auto intensity = [&](const std::string& c) {
    auto it = intensities.find(c);
    return it == intensities.end() ? 0.0 : it->second;
  };
  double best = -std::numeric_limits<double>::infinity();
  for (const auto& c : tied) best = std::max(best, intensity(c));
  std::vector<std::string> still;
  for (const auto& c : tied)
    if (intensity(c) == best) still.push_back(c);
  if (still.size() == 1) return still.front();
  std::string names;
  for (const auto& c : still) names += (names.empty() ? "" : ", ") + c;
  throw DataError("unresolvable label tie between: " + names);
}

struct IngestStats {
  std::size_t conversations = 0;
  std::size_t utterances = 0;
  std::size_t dropped = 0;
  std::size_t unlabeled = 0;
  std::size_t empty_conversations = 0;
};

inline void to_json(nlohmann::json& j, const IngestStats& s) {
  j = {{"conversations", s.conversations},
       {"utterances", s.utterances},
       {"dropped", s.dropped},
       {"unlabeled", s.unlabeled},
       {"empty_conversations", s.empty_conversations}};
}

/// Sets label_index on every utterance. Utterances without a label, or whose
/// label the schema drops, are removed; conversations left empty are removed.
inline std::vector<Conversation> apply_schema(std::vector<Conversation> convs, const LabelSchema& schema,
                                              IngestStats* stats = nullptr) {
  IngestStats st;
  std::vector<Conversation> out;
  for (auto& c : convs) {
    Conversation kept{c.id, {}};
    for (auto& u : c.utterances) {
      if (!u.label) {
        ++st.unlabeled;
        continue;
      }
      auto idx = schema.resolve(*u.label);
      if (!idx) {
        ++st.dropped;
        continue;
      }
      u.label_index = *idx;
      kept.utterances.push_back(std::move(u));
    }
    if (kept.utterances.empty()) {
      ++st.empty_conversations;
      continue;
    }
    st.utterances += kept.size();
    out.push_back(std::move(kept));
  }
  st.conversations = out.size();
  if (stats) *stats = st;
  return out;
}

/// Reads a labeled conversation file. Utterances may carry
/// {"votes": {...}, "intensities": {...}} instead of a label string.
inline std::vector<Conversation> read_uler_dataset(const std::string& path, const LabelSchema& schema,
                                                   IngestStats* stats = nullptr) {
  std::vector<Conversation> raw;
  for_each_json_line(path, [&](const nlohmann::json& j, std::size_t) {
    Conversation c = conversation_from_json(j);
    const auto& ju = j["utterances"];
    for (std::size_t i = 0; i < c.size(); ++i) {
      const auto& u = ju[i];
      if (c.utterances[i].label || !u.contains("votes")) continue;
      std::map<std::string, double> votes, intensities;
      try {
        votes = u["votes"].get<std::map<std::string, double>>();
        if (u.contains("intensities")) intensities = u["intensities"].get<std::map<std::string, double>>();
      } catch (const nlohmann::json::exception& e) {
        throw DataError("conversation " + c.id + ": bad votes: " + e.what());
      }
      c.utterances[i].label = resolve_multilabel(votes, intensities);
    }
    raw.push_back(std::move(c));
  });
  return apply_schema(std::move(raw), schema, stats);
}

/// ω(c) = (1/p_c)^power over labeled training utterances. Classes absent from
/// the split get the largest weight among present classes.
inline std::vector<double> class_weights(std::span<const Conversation> train, std::size_t classes,
                                         double power = 0.5) {
  std::vector<std::size_t> count(classes, 0);
  std::size_t total = 0;
  for (const auto& c : train)
    for (const auto& u : c.utterances) {
      if (!u.label_index) continue;
      if (*u.label_index >= classes) throw DataError("label index out of range in " + c.id);
      ++count[*u.label_index];
      ++total;
    }
  if (total == 0) throw DataError("class_weights: no labeled training utterances");
  std::vector<double> w(classes, 0.0);
  double top = 0.0;
  for (std::size_t k = 0; k < classes; ++k) {
    if (!count[k]) continue;
    w[k] = std::pow(static_cast<double>(total) / static_cast<double>(count[k]), power);
    top = std::max(top, w[k]);
  }
  for (std::size_t k = 0; k < classes; ++k)
    if (!count[k]) w[k] = top;
  return w;
}

// ---------------------------------------------------------------------------
// Classification head and loss

inline constexpr double kProbFloor = 1e-12;

/// Per-position class logits W_f tanh(W_c′[H→_l; H←_l; u_l] + b_c′) + b_f.
template <class S>
std::vector<Var> classifier_logits(Tape<S>& tape, const CodeModel<S>& model, const EncodedConversation& enc) {
  if (!model.has_classifier()) throw std::logic_error("model has no classification head");
  std::vector<Var> out;
  for (std::size_t l = 0; l < enc.utterances.size(); ++l) {
    Var in = tape.concat({enc.states.states.fwd[l], enc.states.states.bwd[l], enc.utterances[l]});
    Var h = tape.tanh(tape.affine(model.uler_wc, in, model.uler_bc));
    out.push_back(tape.affine(model.uler_wf, h, model.uler_bf));
  }
  return out;
}

/// Softmax class distributions, one per utterance.
template <class S>
std::vector<std::vector<double>> classify_conversation(const CodeModel<S>& model, const Conversation& conv) {
  Tape<S> tape(model.params);
  auto enc = encode_for_completion(tape, model, conv);
  std::vector<std::vector<double>> out;
  for (Var logit : classifier_logits(tape, model, enc)) {
    const auto& v = tape.value(tape.log_softmax(logit));
    std::vector<double> p(static_cast<std::size_t>(v.size()));
    for (Eigen::Index i = 0; i < v.size(); ++i) p[static_cast<std::size_t>(i)] = std::exp(static_cast<double>(v(i)));
    out.push_back(std::move(p));
  }
  return out;
}

/// −(1/N) Σ_j ω(y_j) log₂ max(p_j[y_j], 1e−12) over N utterances.
inline double weighted_ce_loss(std::span<const std::vector<double>> probs, std::span<const std::size_t> labels,
                               std::span<const double> weights) {
  if (probs.size() != labels.size()) throw std::invalid_argument("weighted_ce_loss: size mismatch");
  if (probs.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t j = 0; j < probs.size(); ++j) {
    if (labels[j] >= probs[j].size() || labels[j] >= weights.size())
      throw std::out_of_range("weighted_ce_loss: label outside class range");
    total -= weights[labels[j]] * std::log2(std::max(probs[j][labels[j]], kProbFloor));
  }
  return total / static_cast<double>(probs.size());
}

/// Graph version of weighted_ce_loss over one conversation.
template <class S>
Var uler_conversation_loss(Tape<S>& tape, const CodeModel<S>& model, const Conversation& conv,
                           std::span<const double> weights, const Dropout& dropout = {}) {
  auto enc = encode_for_completion(tape, model, conv, dropout);
  auto logits = classifier_logits(tape, model, enc);
  const S log_floor = static_cast<S>(std::log(kProbFloor));
  std::vector<Var> terms;
  for (std::size_t l = 0; l < conv.size(); ++l) {
    const auto& u = conv.utterances[l];
    if (!u.label_index) throw DataError("conversation " + conv.id + ": unlabeled utterance " + std::to_string(l));
    const auto y = *u.label_index;
    if (y >= weights.size()) throw std::out_of_range("uler_conversation_loss: label outside class range");
    Var lp = tape.pick(tape.clamp_min(tape.log_softmax(logits[l]), log_floor), y);
    terms.push_back(tape.scale(lp, static_cast<S>(-weights[y] / std::numbers::ln2 / static_cast<double>(conv.size()))));
  }
  return tape.sum(terms);
}

// ---------------------------------------------------------------------------
// Metrics

struct MetricReport {
  std::vector<std::string> classes;
  std::vector<std::vector<std::size_t>> confusion;  // rows = truth
  std::vector<double> precision, recall, f1;
  double macro_f1 = 0.0;
  double wa = 0.0;
  double uwa = 0.0;
  std::size_t n = 0;
};

inline void to_json(nlohmann::json& j, const MetricReport& r) {
  nlohmann::json per = nlohmann::json::object();
  for (std::size_t k = 0; k < r.f1.size(); ++k) {
    const std::string name = k < r.classes.size() ? r.classes[k] : std::to_string(k);
    per[name] = {{"precision", r.precision[k]}, {"recall", r.recall[k]}, {"f1", r.f1[k]}};
  }
  j = {{"macro_f1", r.macro_f1}, {"wa", r.wa},         {"uwa", r.uwa},
       {"n", r.n},               {"per_class", per},   {"confusion", r.confusion},
       {"wa_definition", "overall accuracy"}};
}

/// F1 per class (0 when P+R=0), macro-F1 over all classes, WA = overall
/// accuracy, UWA = mean recall over classes present in the gold labels.
inline MetricReport metrics_from_confusion(const std::vector<std::vector<std::size_t>>& confusion,
                                           std::vector<std::string> classes = {}) {
  const std::size_t K = confusion.size();
  MetricReport r;
  r.classes = std::move(classes);
  r.confusion = confusion;
  r.precision.assign(K, 0.0);
  r.recall.assign(K, 0.0);
  r.f1.assign(K, 0.0);
  std::size_t correct = 0;
  std::vector<std::size_t> row(K, 0), col(K, 0);
  for (std::size_t t = 0; t < K; ++t) {
    if (confusion[t].size() != K) throw std::invalid_argument("confusion matrix must be square");
    for (std::size_t p = 0; p < K; ++p) {
      row[t] += confusion[t][p];
      col[p] += confusion[t][p];
      r.n += confusion[t][p];
    }
    correct += confusion[t][t];
  }
  double recall_sum = 0.0;
  std::size_t present = 0;
  for (std::size_t k = 0; k < K; ++k) {
    const double tp = static_cast<double>(confusion[k][k]);
    r.precision[k] = col[k] ? tp / static_cast<double>(col[k]) : 0.0;
    r.recall[k] = row[k] ? tp / static_cast<double>(row[k]) : 0.0;
    const double pr = r.precision[k] + r.recall[k];
    r.f1[k] = pr > 0.0 ? 2.0 * r.precision[k] * r.recall[k] / pr : 0.0;
    if (row[k]) {
      recall_sum += r.recall[k];
      ++present;
    }
  }
  r.macro_f1 = K ? std::accumulate(r.f1.begin(), r.f1.end(), 0.0) / static_cast<double>(K) : 0.0;
  r.wa = r.n ? static_cast<double>(correct) / static_cast<double>(r.n) : 0.0;
  r.uwa = present ? recall_sum / static_cast<double>(present) : 0.0;
  return r;
}

inline MetricReport uler_metrics(std::span<const std::size_t> predicted, std::span<const std::size_t> gold,
                                 std::size_t classes, std::vector<std::string> names = {}) {
  if (predicted.size() != gold.size()) throw std::invalid_argument("uler_metrics: size mismatch");
  std::vector<std::vector<std::size_t>> confusion(classes, std::vector<std::size_t>(classes, 0));
  for (std::size_t i = 0; i < gold.size(); ++i) {
    if (gold[i] >= classes || predicted[i] >= classes) throw std::out_of_range("uler_metrics: class index");
    ++confusion[gold[i]][predicted[i]];
  }
  return metrics_from_confusion(confusion, std::move(names));
}

inline std::size_t argmax(const std::vector<double>& p) {
  return static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
}

struct UlerPredictions {
  // probs[c][l] for conversation c, utterance l.
  std::vector<std::vector<std::vector<double>>> probs;
  MetricReport report;
};

template <class S>
UlerPredictions evaluate_uler(const CodeModel<S>& model, std::span<const Conversation> split,
                              const LabelSchema& schema, std::size_t threads = 1) {
  UlerPredictions out;
  out.probs.resize(split.size());
  detail::parallel_for(split.size(), threads,
                       [&](std::size_t c) { out.probs[c] = classify_conversation(model, split[c]); });
  std::vector<std::size_t> pred, gold;
  for (std::size_t c = 0; c < split.size(); ++c)
    for (std::size_t l = 0; l < split[c].size(); ++l) {
      const auto& u = split[c].utterances[l];
      if (!u.label_index) throw DataError("conversation " + split[c].id + ": unlabeled utterance");
      gold.push_back(*u.label_index);
      pred.push_back(argmax(out.probs[c][l]));
    }
  out.report = uler_metrics(pred, gold, schema.size(), schema.classes);
  return out;
}

/// {"conv", "index", "gold", "pred", "probs"} per utterance.
inline void write_predictions(const std::string& path, std::span<const Conversation> split,
                              const UlerPredictions& preds, const LabelSchema& schema) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  for (std::size_t c = 0; c < split.size(); ++c)
    for (std::size_t l = 0; l < split[c].size(); ++l) {
      const auto& p = preds.probs[c][l];
      nlohmann::json j = {{"conv", split[c].id},
                          {"index", l},
                          {"gold", schema.classes[*split[c].utterances[l].label_index]},
                          {"pred", schema.classes[argmax(p)]},
                          {"probs", p}};
      out << j.dump() << '\n';
    }
}

/// Metrics from a prediction dump; gold and pred are class names.
inline MetricReport metrics_from_predictions(const std::string& path, const LabelSchema& schema) {
  std::vector<std::size_t> pred, gold;
  for_each_json_line(path, [&](const nlohmann::json& j, std::size_t) {
    if (!j.contains("gold") || !j.contains("pred") || !j["gold"].is_string() || !j["pred"].is_string())
      throw DataError("prediction record needs string \"gold\" and \"pred\"");
    gold.push_back(schema.index_of(j["gold"].get<std::string>()));
    pred.push_back(schema.index_of(j["pred"].get<std::string>()));
  });
  return uler_metrics(pred, gold, schema.size(), schema.classes);
}

// ---------------------------------------------------------------------------
// Fine-tuning

struct TransferConfig {
  std::string name = "pt-code";
  bool load_utterance = true;
  bool load_conversation = true;
  bool embedding_trainable = false;
  double lr = 2e-4;
  double decay = 0.75;
  std::size_t patience = 6;
  std::size_t max_epochs = 30;
  double dropout = 0.5;
  double clip_norm = 5.0;
  std::uint64_t seed = 0;

  /// none (CoDE), pt-u, pt-code, pt-code-rtw.
  static TransferConfig preset(const std::string& name) {
    TransferConfig t;
    t.name = name;
    if (name == "none") {
      t.load_utterance = t.load_conversation = false;
    } else if (name == "pt-u") {
      t.load_conversation = false;
    } else if (name == "pt-code-rtw") {
      t.embedding_trainable = true;
    } else if (name != "pt-code") {
      throw DataError("unknown transfer '" + name + "' (expected none, pt-u, pt-code or pt-code-rtw)");
    }
    return t;
  }

  /// Slower decay and longer patience for very small datasets.
  void use_small_set_schedule() {
    decay = 0.95;
    patience = 10;
  }

  /// The base learning rate and its half.
  std::vector<double> lr_sweep() const { return {lr, lr / 2.0}; }

  void validate() const {
    if (!(lr > 0.0) || !(decay > 0.0) || !(clip_norm > 0.0)) throw DataError("rates and clip norm must be positive");
    if (dropout < 0.0 || dropout >= 1.0) throw DataError("dropout must be in [0, 1)");
    if (patience < 1 || max_epochs < 1) throw DataError("patience and epochs must be >= 1");
  }
};

inline void to_json(nlohmann::json& j, const TransferConfig& t) {
  j = {{"transfer", t.name},     {"load_utterance", t.load_utterance},
       {"load_conversation", t.load_conversation}, {"embedding_trainable", t.embedding_trainable},
       {"lr", t.lr},             {"decay", t.decay},
       {"patience", t.patience}, {"max_epochs", t.max_epochs},
       {"dropout", t.dropout},   {"clip_norm", t.clip_norm},
       {"seed", t.seed}};
}

inline void from_json(const nlohmann::json& j, TransferConfig& t) {
  if (j.contains("transfer")) {
    auto p = TransferConfig::preset(j["transfer"].get<std::string>());
    p.lr = t.lr;
    p.decay = t.decay;
    p.patience = t.patience;
    p.max_epochs = t.max_epochs;
    p.dropout = t.dropout;
    p.clip_norm = t.clip_norm;
    p.seed = t.seed;
    t = p;
  }
  t.lr = j.value("lr", t.lr);
  t.decay = j.value("decay", t.decay);
  t.patience = j.value("patience", t.patience);
  t.max_epochs = j.value("max_epochs", t.max_epochs);
  t.dropout = j.value("dropout", t.dropout);
  t.clip_norm = j.value("clip_norm", t.clip_norm);
  t.seed = j.value("seed", t.seed);
}

inline bool is_utterance_tensor(const std::string& name) { return name.rfind("utt.", 0) == 0; }
inline bool is_conversation_tensor(const std::string& name) { return name.rfind("conv.", 0) == 0; }

/// Freshly initializes the model, then copies the word embedding table and
/// the encoder tensors selected by the transfer flags from the checkpoint.
/// The completion head is never copied.
template <class S>
void apply_transfer(CodeModel<S>& model, const Checkpoint& ck, const TransferConfig& transfer) {
  const auto& mc = ck.meta.model;
  const auto& cfg = model.config();
  if (!(mc.scale == cfg.scale))
    throw DataError("checkpoint scale " + mc.scale.name + " (" + std::to_string(mc.scale.utterance_dim) + "/" +
                    std::to_string(mc.scale.conversation_dim) + ") does not match model scale " + cfg.scale.name);
  if (mc.vocab_size != cfg.vocab_size || mc.word_dim != cfg.word_dim)
    throw DataError("checkpoint vocabulary or word dimension does not match the model");
  init_params(model, transfer.seed);
  load_tensors(model.params, ck, [&](const std::string& name) {
    return name == "embedding" || (transfer.load_utterance && is_utterance_tensor(name)) ||
           (transfer.load_conversation && is_conversation_tensor(name));
  });
  model.params[model.embedding].trainable = transfer.embedding_trainable;
}

template <class S>
double train_uler_epoch(CodeModel<S>& model, std::span<const Conversation> train, std::span<const double> weights,
                        const TransferConfig& config, TrainStreams& streams, AdamState<S>& adam, double lr) {
  if (train.empty()) throw DataError("fine-tuning needs a non-empty training split");
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  streams.shuffle.shuffle(order.begin(), order.end());
  Dropout dropout{config.dropout, &streams.dropout};
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t c : order) {
    model.params.zero_grad();
    Tape<S> tape(model.params);
    Var loss = uler_conversation_loss(tape, model, train[c], weights, dropout);
    const double value = static_cast<double>(tape.scalar(loss));
    if (!std::isfinite(value)) throw NumericalError("non-finite loss on conversation " + train[c].id);
    tape.backward(loss);
    clip_gradients(model.params, config.clip_norm);
    adam_step(model.params, adam, lr);
    total += value * static_cast<double>(train[c].size());
    n += train[c].size();
  }
  return n ? total / static_cast<double>(n) : 0.0;
}

struct FinetuneHooks {
  std::function<void(const EpochRecord&)> on_epoch;
  std::function<void(const EpochRecord&)> on_improve;
  std::size_t threads = 1;
};

/// Fine-tunes with validation macro-F1 as the plateau metric. On return the
/// model holds the best-validation parameters.
template <class S>
FitResult finetune(CodeModel<S>& model, std::span<const Conversation> train, std::span<const Conversation> val,
                   const LabelSchema& schema, const TransferConfig& config, const FinetuneHooks& hooks = {}) {
  config.validate();
  if (!model.has_classifier() || model.config().classes != schema.size())
    throw DataError("model classification head does not match the label schema");
  const auto weights = class_weights(train, schema.size());
  TrainStreams streams(config.seed);
  AdamState<S> adam(model.params);
  std::vector<Mat<S>> best = snapshot(model.params);
  FitHooks fh;
  fh.train = [&](std::size_t, double lr) {
    return train_uler_epoch(model, train, weights, config, streams, adam, lr);
  };
  fh.validate = [&] { return evaluate_uler(model, val, schema, hooks.threads).report.macro_f1; };
  fh.on_epoch = hooks.on_epoch;
  fh.on_improve = [&](const EpochRecord& rec) {
    best = snapshot(model.params);
    if (hooks.on_improve) hooks.on_improve(rec);
  };
  auto result = run_fit_loop(PlateauSchedule(config.lr, config.decay, config.patience, config.max_epochs), fh);
  restore(model.params, best);
  return result;
}

}  // namespace ptcode
