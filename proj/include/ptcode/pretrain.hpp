#pragma once

#include "ptcode/coco.hpp"
#include "ptcode/encoder.hpp"
#include "ptcode/error.hpp"
#include "ptcode/random.hpp"
#include "ptcode/subtitle.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ptcode {

// ---------------------------------------------------------------------------
// Optimizer

template <class S>
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Bias-correction step; restarts with fresh moments.
  std::uint64_t t = 0;
  // Total updates applied, carried across resumed runs.
  std::uint64_t step = 0;
  std::vector<Mat<S>> m;
  std::vector<Mat<S>> v;

  explicit AdamState(const ParameterStore<S>& params, std::uint64_t start_step = 0) : step(start_step) {
    for (const auto& p : params.all()) {
      m.push_back(Mat<S>::Zero(p.value.rows(), p.value.cols()));
      v.push_back(Mat<S>::Zero(p.value.rows(), p.value.cols()));
    }
  }
};

/// One bias-corrected Adam update of every trainable tensor. Throws before
/// touching anything if a gradient is non-finite.
template <class S>
void adam_step(ParameterStore<S>& params, AdamState<S>& state, double lr) {
  for (const auto& p : params.all())
    if (p.trainable && !p.grad.allFinite()) throw NumericalError("non-finite gradient in " + p.name);
  ++state.t;
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  const S b1 = static_cast<S>(state.beta1), b2 = static_cast<S>(state.beta2);
  auto all = params.all();
  for (std::size_t i = 0; i < all.size(); ++i) {
    auto& p = all[i];
    if (!p.trainable) continue;
    auto& m = state.m[i];
    auto& v = state.v[i];
    m = b1 * m + (S(1) - b1) * p.grad;
    v = b2 * v + (S(1) - b2) * p.grad.cwiseAbs2();
    const auto step = static_cast<S>(lr / c1);
    const auto root_c2 = static_cast<S>(std::sqrt(c2));
    const auto eps = static_cast<S>(state.eps);
    p.value.array() -= step * m.array() / (v.array().sqrt() / root_c2 + eps);
  }
}

/// Rescales all gradients so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
template <class S>
double clip_gradients(ParameterStore<S>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params.all())
    if (p.trainable) sq += static_cast<double>(p.grad.squaredNorm());
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const auto f = static_cast<S>(max_norm / norm);
    for (auto& p : params.all())
      if (p.trainable) p.grad *= f;
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Plateau schedule shared by pre-training and fine-tuning

struct ScheduleDecision {
  bool improved = false;
  bool decayed = false;
  bool stop = false;
  double lr_used = 0.0;
};

// A non-improving epoch (metric <= best) multiplies the learning rate by
// `decay`, unless it is the patience-th consecutive one, which stops training
// instead. Training also stops after max_epochs.
class PlateauSchedule {
 public:
  PlateauSchedule(double lr, double decay, std::size_t patience, std::size_t max_epochs)
      : lr_(lr), decay_(decay), patience_(patience), max_epochs_(max_epochs) {}

  double lr() const { return lr_; }
  std::size_t epochs() const { return epochs_; }
  std::size_t max_epochs() const { return max_epochs_; }
  std::size_t best_epoch() const { return best_epoch_; }
  double best_metric() const { return best_; }

  ScheduleDecision observe(double metric) {
    ScheduleDecision d;
    d.lr_used = lr_;
    ++epochs_;
    if (metric > best_) {
      best_ = metric;
      best_epoch_ = epochs_;
      bad_ = 0;
      d.improved = true;
    } else if (++bad_ >= patience_) {
      d.stop = true;
    } else {
      lr_ *= decay_;
      d.decayed = true;
    }
    if (epochs_ >= max_epochs_) d.stop = true;
    return d;
  }

 private:
  double lr_;
  double decay_;
  std::size_t patience_;
  std::size_t max_epochs_;
  std::size_t epochs_ = 0;
  std::size_t best_epoch_ = 0;
  std::size_t bad_ = 0;
  double best_ = -std::numeric_limits<double>::infinity();
};

struct EpochRecord {
  std::size_t epoch = 0;
  double loss = 0.0;
  double val_metric = 0.0;
  double lr = 0.0;
  bool improved = false;
  bool decayed = false;
};

struct FitResult {
  std::vector<EpochRecord> log;
  std::size_t best_epoch = 0;
  double best_metric = 0.0;
  bool stopped_early = false;
};

struct FitHooks {
  // Trains one epoch at the given learning rate; returns the epoch loss.
  std::function<double(std::size_t epoch, double lr)> train;
  // Validation metric after an epoch (higher is better).
  std::function<double()> validate;
  std::function<void(const EpochRecord&)> on_epoch;
  std::function<void(const EpochRecord&)> on_improve;
};

/// Train / validate / schedule loop.
inline FitResult run_fit_loop(PlateauSchedule schedule, const FitHooks& hooks) {
  FitResult result;
  while (true) {
    const std::size_t epoch = schedule.epochs() + 1;
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = schedule.lr();
    rec.loss = hooks.train ? hooks.train(epoch, rec.lr) : 0.0;
    if (!std::isfinite(rec.loss))
      throw NumericalError("non-finite training loss in epoch " + std::to_string(epoch));
    rec.val_metric = hooks.validate();
    auto d = schedule.observe(rec.val_metric);
    rec.improved = d.improved;
    rec.decayed = d.decayed;
    result.log.push_back(rec);
    if (hooks.on_epoch) hooks.on_epoch(rec);
    if (d.improved && hooks.on_improve) hooks.on_improve(rec);
    if (d.stop) {
      result.stopped_early = schedule.epochs() < schedule.max_epochs();
      break;
    }
  }
  result.best_epoch = schedule.best_epoch();
  result.best_metric = schedule.best_metric();
  return result;
}

inline void to_json(nlohmann::json& j, const EpochRecord& r) {
  j = {{"epoch", r.epoch}, {"loss", r.loss}, {"val_r11@1", r.val_metric}, {"lr", r.lr}, {"improved", r.improved}};
}

// ---------------------------------------------------------------------------
// Pre-training

struct PretrainConfig {
  ModelScale scale = ModelScale::small();
  std::size_t word_dim = 300;
  double lr = 2e-4;
  double decay = 0.75;
  std::size_t max_epochs = 20;
  std::size_t patience = 3;
  double dropout = 0.5;
  double clip_norm = 5.0;
  std::size_t noise = 10;
  bool embedding_trainable = false;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(lr > 0.0) || !(decay > 0.0) || !(clip_norm > 0.0)) throw DataError("rates and clip norm must be positive");
    if (dropout < 0.0 || dropout >= 1.0) throw DataError("dropout must be in [0, 1)");
    if (patience < 1 || max_epochs < 1 || noise < 1) throw DataError("patience, epochs and noise must be >= 1");
  }
};

inline void to_json(nlohmann::json& j, const PretrainConfig& c) {
  j = {{"scale", c.scale.name},
       {"word_dim", c.word_dim},
       {"lr", c.lr},
       {"decay", c.decay},
       {"max_epochs", c.max_epochs},
       {"patience", c.patience},
       {"dropout", c.dropout},
       {"clip_norm", c.clip_norm},
       {"noise", c.noise},
       {"embedding_trainable", c.embedding_trainable},
       {"seed", c.seed}};
}

/// Missing keys keep their current value.
inline void from_json(const nlohmann::json& j, PretrainConfig& c) {
  if (j.contains("scale")) c.scale = ModelScale::from_name(j["scale"].get<std::string>());
  c.word_dim = j.value("word_dim", c.word_dim);
  c.lr = j.value("lr", c.lr);
  c.decay = j.value("decay", c.decay);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.patience = j.value("patience", c.patience);
  c.dropout = j.value("dropout", c.dropout);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  c.noise = j.value("noise", c.noise);
  c.embedding_trainable = j.value("embedding_trainable", c.embedding_trainable);
  c.seed = j.value("seed", c.seed);
}

// Random streams owned by a training run.
struct TrainStreams {
  Rng shuffle;
  Rng noise;
  Rng dropout;

  explicit TrainStreams(std::uint64_t seed)
      : shuffle(seed, "shuffle"), noise(seed, "train-noise"), dropout(seed, "dropout") {}
};

/// One optimizer step per conversation, visiting conversations in a freshly
/// shuffled order. Each step's loss sums the completion loss over every
/// position with `config.noise` utterances drawn from other training
/// conversations. Returns the mean loss per position.
template <class S>
double train_coco_epoch(CodeModel<S>& model, std::span<const Conversation> train, const PretrainConfig& config,
                        TrainStreams& streams, AdamState<S>& adam, double lr) {
  if (train.size() < 2) throw DataError("pre-training needs at least 2 training conversations");
  UtteranceSampler sampler(train);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  streams.shuffle.shuffle(order.begin(), order.end());
  Dropout dropout{config.dropout, &streams.dropout};
  double total = 0.0;
  std::size_t positions = 0;
  for (std::size_t c : order) {
    std::vector<const Utterance*> noise;
    for (const auto& p : sampler.draw(c, config.noise, streams.noise))
      noise.push_back(&train[p.conv].utterances[p.index]);
    model.params.zero_grad();
    Tape<S> tape(model.params);
    Var loss = coco_conversation_loss(tape, model, train[c], noise, dropout);
    const double value = static_cast<double>(tape.scalar(loss));
    if (!std::isfinite(value)) throw NumericalError("non-finite loss on conversation " + train[c].id);
    tape.backward(loss);
    clip_gradients(model.params, config.clip_norm);
    adam_step(model.params, adam, lr);
    total += value;
    positions += train[c].size();
  }
  return positions ? total / static_cast<double>(positions) : 0.0;
}

template <class S>
std::vector<Mat<S>> snapshot(const ParameterStore<S>& params) {
  std::vector<Mat<S>> out;
  for (const auto& p : params.all()) out.push_back(p.value);
  return out;
}

template <class S>
void restore(ParameterStore<S>& params, const std::vector<Mat<S>>& snap) {
  auto all = params.all();
  for (std::size_t i = 0; i < all.size(); ++i) all[i].value = snap[i];
}

struct PretrainHooks {
  std::function<void(const EpochRecord&)> on_epoch;
  // Called after an improving epoch, while the model holds that epoch's
  // parameters.
  std::function<void(const EpochRecord&, std::uint64_t step)> on_improve;
  // Replaces validation R_11@1 when set.
  std::function<double()> validate;
  std::size_t threads = 1;
  std::uint64_t start_step = 0;
};

/// Full pre-training run. On return the model holds the parameters of the
/// epoch with the best validation R_11@1.
template <class S>
FitResult pretrain(CodeModel<S>& model, std::span<const Conversation> train, std::span<const Conversation> val,
                   const NoisePool& val_pool, const PretrainConfig& config, const PretrainHooks& hooks = {}) {
  config.validate();
  TrainStreams streams(config.seed);
  AdamState<S> adam(model.params, hooks.start_step);
  std::vector<Mat<S>> best = snapshot(model.params);
  FitHooks fh;
  fh.train = [&](std::size_t, double lr) { return train_coco_epoch(model, train, config, streams, adam, lr); };
  fh.validate = hooks.validate ? hooks.validate : [&] {
    return evaluate_split(model_scorer(model), val, val_pool, hooks.threads).r11_1;
  };
  fh.on_epoch = hooks.on_epoch;
  fh.on_improve = [&](const EpochRecord& rec) {
    best = snapshot(model.params);
    if (hooks.on_improve) hooks.on_improve(rec, adam.step);
  };
  auto result = run_fit_loop(PlateauSchedule(config.lr, config.decay, config.patience, config.max_epochs), fh);
  restore(model.params, best);
  return result;
}

}  // namespace ptcode
