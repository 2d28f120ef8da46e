#pragma once

#include "ptcode/certify.hpp"
#include "ptcode/checkpoint.hpp"
#include "ptcode/coco.hpp"
#include "ptcode/corpus.hpp"
#include "ptcode/encoder.hpp"
#include "ptcode/error.hpp"
#include "ptcode/pretrain.hpp"
#include "ptcode/subtitle.hpp"
#include "ptcode/synthetic.hpp"
#include "ptcode/uler.hpp"

#include <nlohmann/json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

// Pipeline stages behind the command-line tool. Each returns a process exit
// code and throws DataError / NumericalError for the caller to map.

namespace ptcode::cmd {

namespace fs = std::filesystem;

enum Exit : int { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

/// Evaluation width from $THREADS, else the number of hardware threads.
inline std::size_t default_threads() {
  if (const char* env = std::getenv("THREADS")) {
    try {
      const long v = std::stol(env);
      if (v > 0) return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
    }
    throw DataError(std::string("THREADS must be a positive integer, got '") + env + "'");
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

inline void require_file(const fs::path& p, const char* what) {
  if (!fs::is_regular_file(p)) throw DataError(std::string(what) + " not found: " + p.string());
}

inline void require_dir(const fs::path& p, const char* what) {
  if (!fs::is_directory(p)) throw DataError(std::string(what) + " not found: " + p.string());
}

inline void write_json(const fs::path& p, const nlohmann::json& j) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw DataError("cannot write " + p.string());
  out << j.dump(2) << '\n';
}

inline std::string split_file(const std::string& split) { return split + ".jsonl"; }
inline std::string noise_file(const std::string& split) { return split + ".noise.jsonl"; }

// Vocabulary and model reconstruction from a self-contained checkpoint.

inline Vocabulary vocabulary_from_checkpoint(const Checkpoint& ck) {
  if (!ck.meta.extra.contains("vocabulary")) throw DataError("checkpoint carries no vocabulary");
  auto tokens = ck.meta.extra["vocabulary"].get<std::vector<std::string>>();
  if (tokens.empty() || tokens.front() != Vocabulary::kUnknownToken) throw DataError("checkpoint vocabulary is malformed");
  Vocabulary v = Vocabulary::from_tokens(std::span<const std::string>(tokens).subspan(1));
  if (v.size() != ck.meta.model.vocab_size) throw DataError("checkpoint vocabulary size disagrees with its model");
  return v;
}

template <class S>
CodeModel<S> model_from_checkpoint(const Checkpoint& ck) {
  CodeModel<S> model(ck.meta.model);
  const auto copied = load_tensors(model.params, ck);
  if (copied != model.params.size()) throw DataError("checkpoint is missing tensors for its model");
  for (auto& p : model.params.all()) p.trainable = ck.tensors[p.name].trainable;
  return model;
}

inline std::vector<Conversation> read_indexed(const fs::path& p, const Vocabulary& vocab) {
  require_file(p, "dataset");
  auto convs = read_conversations(p.string());
  index_corpus(convs, vocab);
  return convs;
}

inline Mat<double> word_vectors(const std::optional<std::string>& path, const Vocabulary& vocab, std::size_t dim,
                                std::uint64_t seed, std::ostream& log) {
  if (!path) return random_embedding(vocab.size(), dim, seed);
  auto table = load_pretrained_vectors(*path, vocab, dim, seed);
  log << "word vectors: matched " << table.matched_fraction * 100.0 << "% of the vocabulary\n";
  return table.matrix;
}

// ---------------------------------------------------------------------------
// prep

struct PrepOptions {
  std::string input_dir;
  std::string output_dir;
  SplitSpec spec;
};

inline int prep(const PrepOptions& o, std::ostream& out, std::ostream& log) {
  require_dir(o.input_dir, "input directory");
  o.spec.validate();
  auto episodes = read_subtitle_directory(o.input_dir);
  if (episodes.empty()) throw DataError("no subtitle files in " + o.input_dir);
  log << "parsed " << episodes.size() << " subtitle files\n";
  auto prepared = prepare_corpus(episodes, o.spec);
  fs::create_directories(o.output_dir);
  const fs::path dir(o.output_dir);
  const std::pair<const char*, const std::vector<Conversation>*> splits[] = {
      {"train", &prepared.splits.train}, {"val", &prepared.splits.val}, {"test", &prepared.splits.test}};
  const NoisePool* pools[] = {&prepared.train_noise, &prepared.val_noise, &prepared.test_noise};
  nlohmann::json stats = nlohmann::json::object();
  for (std::size_t i = 0; i < 3; ++i) {
    write_conversations((dir / split_file(splits[i].first)).string(), *splits[i].second);
    write_noise_pool((dir / noise_file(splits[i].first)).string(), *pools[i]);
    stats[splits[i].first] = corpus_statistics(*splits[i].second);
  }
  stats["settings"] = {{"seed", o.spec.seed},
                       {"ratios", o.spec.ratios},
                       {"min_length", o.spec.min_length},
                       {"max_length", o.spec.max_length},
                       {"word_threshold", o.spec.word_threshold},
                       {"trim", o.spec.trim},
                       {"noise_k", o.spec.noise_k}};
  write_json(dir / "stats.json", stats);
  out << stats.dump(2) << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// gradcheck

inline int gradcheck(std::uint64_t seed, std::ostream& out) {
  auto report = run_gradient_suite(seed);
  out << nlohmann::json(report).dump(2) << '\n';
  return report.passed() ? kOk : kNumerical;
}

// ---------------------------------------------------------------------------
// pretrain

struct PretrainOptions {
  std::string data_dir;
  std::string output_dir;
  PretrainConfig config;
  std::optional<std::string> vectors;
  std::optional<std::string> resume;
  // Vocabulary cutoff for subtitle-scale training data.
  std::size_t min_count = 2;
  std::size_t threads = 1;
};

inline int pretrain(const PretrainOptions& o, std::ostream& out, std::ostream& log) {
  const fs::path data(o.data_dir);
  require_dir(data, "data directory");
  for (const auto& f : {split_file("train"), split_file("val"), noise_file("val")}) require_file(data / f, "dataset file");
  if (o.vectors) require_file(*o.vectors, "word vectors");
  if (o.resume) require_file(*o.resume, "checkpoint");
  o.config.validate();

  std::optional<Checkpoint> resumed;
  Vocabulary vocab;
  if (o.resume) {
    resumed = load_checkpoint(*o.resume);
    vocab = vocabulary_from_checkpoint(*resumed);
  } else {
    vocab = build_vocabulary(read_conversations((data / split_file("train")).string()), o.min_count);
  }
  auto train = read_indexed(data / split_file("train"), vocab);
  auto val = read_indexed(data / split_file("val"), vocab);
  auto val_pool = read_noise_pool((data / noise_file("val")).string());

  ModelConfig mc;
  mc.scale = o.config.scale;
  mc.vocab_size = vocab.size();
  mc.word_dim = o.config.word_dim;
  mc.embedding_trainable = o.config.embedding_trainable;
  CodeModel<float> model(mc);
  std::uint64_t start_step = 0;
  if (resumed) {
    if (!(resumed->meta.model.scale == mc.scale) || resumed->meta.model.word_dim != mc.word_dim)
      throw DataError("checkpoint scale " + resumed->meta.model.scale.name + " does not match --scale " + mc.scale.name);
    load_tensors(model.params, *resumed);
    start_step = resumed->meta.step;
    log << "resuming from step " << start_step << '\n';
  } else {
    init_params(model, o.config.seed);
    model.params[model.embedding].value = word_vectors(o.vectors, vocab, mc.word_dim, o.config.seed, log).cast<float>();
  }

  fs::create_directories(o.output_dir);
  const fs::path outdir(o.output_dir);
  std::ofstream log_file(outdir / "train_log.jsonl", std::ios::binary);
  if (!log_file) throw DataError("cannot write training log in " + o.output_dir);

  PretrainHooks hooks;
  hooks.threads = o.threads;
  hooks.start_step = start_step;
  hooks.on_epoch = [&](const EpochRecord& r) {
    log_file << nlohmann::json(r).dump() << '\n' << std::flush;
    log << "epoch " << r.epoch << " loss " << r.loss << " val R11@1 " << r.val_metric << " lr " << r.lr
        << (r.improved ? " *" : "") << '\n';
  };
  hooks.on_improve = [&](const EpochRecord& r, std::uint64_t step) {
    CheckpointMeta meta;
    meta.seed = o.config.seed;
    meta.step = step;
    meta.epoch = r.epoch;
    meta.extra = {{"vocabulary", vocab.tokens()}, {"val_r11@1", r.val_metric}, {"config", o.config}};
    save_checkpoint((outdir / "best.ckpt").string(), model, meta);
  };
  auto result = ptcode::pretrain(model, train, val, val_pool, o.config, hooks);
  out << nlohmann::json{{"best_epoch", result.best_epoch},
                        {"val_r11@1", result.best_metric},
                        {"epochs", result.log.size()},
                        {"checkpoint", (outdir / "best.ckpt").string()}}
             .dump(2)
      << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// eval-coco

struct EvalCocoOptions {
  std::optional<std::string> checkpoint;
  std::string data_dir;
  std::string split = "test";
  bool oracle = false;
  std::size_t threads = 1;
};

inline int eval_coco(const EvalCocoOptions& o, std::ostream& out) {
  const fs::path data(o.data_dir);
  require_file(data / split_file(o.split), "dataset file");
  require_file(data / noise_file(o.split), "noise pool");
  if (!o.oracle && !o.checkpoint) throw DataError("eval-coco needs --checkpoint unless --oracle is given");
  if (o.checkpoint) require_file(*o.checkpoint, "checkpoint");
  auto pool = read_noise_pool((data / noise_file(o.split)).string());
  CocoReport report;
  if (o.oracle) {
    auto split = read_conversations((data / split_file(o.split)).string());
    report = evaluate_split(oracle_scorer(), split, pool, o.threads);
  } else {
    auto ck = load_checkpoint(*o.checkpoint);
    auto vocab = vocabulary_from_checkpoint(ck);
    auto model = model_from_checkpoint<float>(ck);
    auto split = read_indexed(data / split_file(o.split), vocab);
    report = evaluate_split(model_scorer(model), split, pool, o.threads);
  }
  out << nlohmann::json(report).dump(2) << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// finetune

struct FinetuneOptions {
  std::string train;
  std::string val;
  std::optional<std::string> test;
  std::string schema;
  std::optional<std::string> checkpoint;
  std::optional<std::string> vectors;
  std::string output_dir;
  TransferConfig transfer;
  // Used when no checkpoint is given; must match the checkpoint otherwise.
  std::optional<std::string> scale;
  std::size_t word_dim = 300;
  bool sweep = true;
  std::size_t threads = 1;
};

inline int finetune(const FinetuneOptions& o, std::ostream& out, std::ostream& log) {
  require_file(o.train, "training set");
  require_file(o.val, "validation set");
  if (o.test) require_file(*o.test, "test set");
  require_file(o.schema, "label schema");
  if (o.checkpoint) require_file(*o.checkpoint, "checkpoint");
  if (o.vectors) require_file(*o.vectors, "word vectors");
  o.transfer.validate();
  if (!o.checkpoint && o.transfer.name != "none")
    throw DataError("transfer '" + o.transfer.name + "' needs a pre-trained --checkpoint");

  const auto schema = LabelSchema::load(o.schema);
  std::optional<Checkpoint> ck;
  Vocabulary vocab;
  ModelConfig mc;
  IngestStats train_stats;
  auto train = read_uler_dataset(o.train, schema, &train_stats);
  auto val = read_uler_dataset(o.val, schema);
  std::vector<Conversation> test;
  if (o.test) test = read_uler_dataset(*o.test, schema);
  if (train.empty() || val.empty()) throw DataError("training and validation sets need labeled utterances");
  log << "training set: " << nlohmann::json(train_stats).dump() << '\n';

  if (o.checkpoint) {
    ck = load_checkpoint(*o.checkpoint);
    if (o.scale && ModelScale::from_name(*o.scale) != ck->meta.model.scale)
      throw DataError("checkpoint scale " + ck->meta.model.scale.name + " does not match --scale " + *o.scale);
    vocab = vocabulary_from_checkpoint(*ck);
    mc = ck->meta.model;
  } else {
    vocab = build_vocabulary(train);
    mc.scale = ModelScale::from_name(o.scale.value_or("small"));
    mc.vocab_size = vocab.size();
    mc.word_dim = o.word_dim;
  }
  mc.classes = schema.size();
  mc.embedding_trainable = o.transfer.embedding_trainable;
  index_corpus(train, vocab);
  index_corpus(val, vocab);
  index_corpus(test, vocab);

  const Mat<double> vectors =
      ck ? Mat<double>() : word_vectors(o.vectors, vocab, mc.word_dim, o.transfer.seed, log);

  fs::create_directories(o.output_dir);
  const fs::path outdir(o.output_dir);
  std::ofstream log_file(outdir / "finetune_log.jsonl", std::ios::binary);
  if (!log_file) throw DataError("cannot write fine-tuning log in " + o.output_dir);

  std::optional<CodeModel<float>> best_model;
  double best_f1 = -1.0, best_lr = 0.0;
  std::size_t best_epoch = 0;
  const auto rates = o.sweep ? o.transfer.lr_sweep() : std::vector<double>{o.transfer.lr};
  for (double lr : rates) {
    TransferConfig cfg = o.transfer;
    cfg.lr = lr;
    CodeModel<float> model(mc);
    if (ck) {
      apply_transfer(model, *ck, cfg);
    } else {
      init_params(model, cfg.seed);
      model.params[model.embedding].value = vectors.cast<float>();
      model.params[model.embedding].trainable = cfg.embedding_trainable;
    }
    FinetuneHooks hooks;
    hooks.threads = o.threads;
    hooks.on_epoch = [&](const EpochRecord& r) {
      log_file << nlohmann::json{{"base_lr", lr},          {"epoch", r.epoch},       {"loss", r.loss},
                                 {"val_macro_f1", r.val_metric}, {"lr", r.lr}, {"improved", r.improved}}
                      .dump()
               << '\n'
               << std::flush;
      log << "lr " << lr << " epoch " << r.epoch << " loss " << r.loss << " val macro-F1 " << r.val_metric
          << (r.improved ? " *" : "") << '\n';
    };
    auto result = ptcode::finetune(model, train, val, schema, cfg, hooks);
    if (result.best_metric > best_f1) {
      best_f1 = result.best_metric;
      best_lr = lr;
      best_epoch = result.best_epoch;
      best_model.emplace(std::move(model));
    }
  }

  CheckpointMeta meta;
  meta.seed = o.transfer.seed;
  meta.epoch = best_epoch;
  meta.extra = {{"vocabulary", vocab.tokens()}, {"schema", schema.to_json()}, {"transfer", o.transfer},
                {"lr", best_lr},                {"val_macro_f1", best_f1}};
  save_checkpoint((outdir / "uler.ckpt").string(), *best_model, meta);

  nlohmann::json report = {{"transfer", o.transfer.name}, {"lr", best_lr}, {"best_epoch", best_epoch}};
  auto val_pred = evaluate_uler(*best_model, val, schema, o.threads);
  write_predictions((outdir / "val_predictions.jsonl").string(), val, val_pred, schema);
  report["val"] = val_pred.report;
  if (o.test) {
    auto test_pred = evaluate_uler(*best_model, test, schema, o.threads);
    write_predictions((outdir / "test_predictions.jsonl").string(), test, test_pred, schema);
    report["test"] = test_pred.report;
  }
  write_json(outdir / "metrics.json", report);
  out << report.dump(2) << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// eval-uler

struct EvalUlerOptions {
  std::optional<std::string> checkpoint;
  std::optional<std::string> dataset;
  std::optional<std::string> schema;
  // Score an existing prediction dump instead of running a model.
  std::optional<std::string> predictions;
  std::optional<std::string> dump;
  std::size_t threads = 1;
};

inline int eval_uler(const EvalUlerOptions& o, std::ostream& out) {
  if (o.predictions) {
    require_file(*o.predictions, "prediction dump");
    if (!o.schema) throw DataError("--predictions needs --schema");
    require_file(*o.schema, "label schema");
    out << nlohmann::json(metrics_from_predictions(*o.predictions, LabelSchema::load(*o.schema))).dump(2) << '\n';
    return kOk;
  }
  if (!o.checkpoint || !o.dataset) throw DataError("eval-uler needs --checkpoint and --dataset (or --predictions)");
  require_file(*o.checkpoint, "checkpoint");
  require_file(*o.dataset, "dataset");
  if (o.schema) require_file(*o.schema, "label schema");
  auto ck = load_checkpoint(*o.checkpoint);
  if (!ck.meta.model.classes) throw DataError("checkpoint has no classification head");
  const auto schema = o.schema ? LabelSchema::load(*o.schema)
                               : LabelSchema::from_json(ck.meta.extra.value("schema", nlohmann::json::object()));
  if (schema.size() != ck.meta.model.classes) throw DataError("label schema does not match the checkpoint head");
  auto vocab = vocabulary_from_checkpoint(ck);
  auto model = model_from_checkpoint<float>(ck);
  auto data = read_uler_dataset(*o.dataset, schema);
  index_corpus(data, vocab);
  auto preds = evaluate_uler(model, data, schema, o.threads);
  if (o.dump) write_predictions(*o.dump, data, preds, schema);
  out << nlohmann::json(preds.report).dump(2) << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// stats

inline int stats(const std::vector<std::string>& files, std::ostream& out) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& f : files) {
    require_file(f, "dataset");
    j[f] = corpus_statistics(read_conversations(f));
  }
  out << j.dump(2) << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// synth

struct SynthOptions {
  std::string kind;
  std::string output;
  std::size_t count = 0;
  std::uint64_t seed = 0;
};

inline int synthesize(const SynthOptions& o, std::ostream& log) {
  if (o.kind == "subtitles") {
    synth::SubtitleFixtureSpec spec;
    spec.seed = o.seed;
    if (o.count) spec.episodes = o.count;
    synth::write_files(o.output, synth::subtitle_fixture(spec));
    log << "wrote " << spec.episodes << " subtitle files to " << o.output << '\n';
    return kOk;
  }
  std::vector<Conversation> convs;
  if (o.kind == "cue") {
    synth::CueCorpusSpec spec;
    spec.seed = o.seed;
    if (o.count) spec.conversations = o.count;
    convs = synth::cue_corpus(spec);
  } else if (o.kind == "emotion") {
    synth::EmotionTaskSpec spec;
    spec.seed = o.seed;
    if (o.count) spec.conversations = o.count;
    convs = synth::emotion_task(spec);
  } else if (o.kind == "iid") {
    convs = synth::iid_corpus(o.count ? o.count : 600, 199, o.seed);
  } else {
    throw DataError("unknown synthetic kind '" + o.kind + "' (expected subtitles, cue, emotion or iid)");
  }
  if (auto parent = fs::path(o.output).parent_path(); !parent.empty()) fs::create_directories(parent);
  write_conversations(o.output, convs);
  log << "wrote " << convs.size() << " conversations to " << o.output << '\n';
  return kOk;
}

}  // namespace ptcode::cmd
