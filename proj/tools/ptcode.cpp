// ptcode: conversation-completion pre-training and emotion fine-tuning.

#include "ptcode/commands.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <fstream>
#include <iostream>
#include <optional>
#include <string>

namespace {

using namespace ptcode;

nlohmann::json read_config(const std::optional<std::string>& path) {
  if (!path) return nlohmann::json::object();
  std::ifstream in(*path);
  if (!in) throw DataError("cannot read config " + *path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(*path + ": " + e.what());
  }
}

template <class T>
void override_with(T& dst, const std::optional<T>& flag) {
  if (flag) dst = *flag;
}

std::size_t thread_count(const std::optional<std::size_t>& flag) { return flag ? *flag : cmd::default_threads(); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Conversation-completion pre-training and utterance-level emotion recognition"};
  app.require_subcommand(1);

  // prep
  cmd::PrepOptions prep;
  std::vector<double> ratios;
  auto* c_prep = app.add_subcommand("prep", "Subtitle files -> train/val/test conversations and noise pools");
  c_prep->add_option("input", prep.input_dir, "Directory of subtitle files")->required();
  c_prep->add_option("-o,--output", prep.output_dir, "Output directory")->required();
  c_prep->add_option("--trim", prep.spec.trim, "Utterances removed from each end of an episode");
  c_prep->add_option("--min-len", prep.spec.min_length, "Minimum conversation length");
  c_prep->add_option("--max-len", prep.spec.max_length, "Maximum conversation length");
  c_prep->add_option("--word-threshold", prep.spec.word_threshold, "Tokens below which an utterance is short");
  c_prep->add_option("--ratios", ratios, "Train/val/test percentages")->expected(3);
  c_prep->add_option("--seed", prep.spec.seed, "Root seed");
  c_prep->add_option("--noise-k", prep.spec.noise_k, "Noise utterances per conversation");

  // pretrain
  cmd::PretrainOptions pre;
  std::optional<std::string> pre_config, pre_vectors, pre_resume, pre_scale;
  std::optional<double> pre_lr, pre_decay, pre_dropout, pre_clip;
  std::optional<std::size_t> pre_epochs, pre_patience, pre_noise, pre_word_dim, pre_threads;
  std::optional<std::uint64_t> pre_seed;
  bool pre_gradcheck = false, pre_train_embedding = false;
  auto* c_pre = app.add_subcommand("pretrain", "Conversation-completion pre-training");
  c_pre->add_option("data", pre.data_dir, "Directory written by prep");
  c_pre->add_option("-o,--output", pre.output_dir, "Output directory");
  c_pre->add_option("--config", pre_config, "JSON config file; flags override it");
  c_pre->add_option("--scale", pre_scale, "small, mid or large");
  c_pre->add_option("--word-dim", pre_word_dim, "Word vector dimension");
  c_pre->add_option("--vectors", pre_vectors, "Pre-trained word vectors (text format)");
  c_pre->add_option("--lr", pre_lr, "Initial learning rate");
  c_pre->add_option("--decay", pre_decay, "Learning-rate decay on plateau");
  c_pre->add_option("--max-epochs", pre_epochs, "Maximum epochs");
  c_pre->add_option("--patience", pre_patience, "Early-stopping patience");
  c_pre->add_option("--dropout", pre_dropout, "Dropout rate");
  c_pre->add_option("--clip", pre_clip, "Gradient-norm clip");
  c_pre->add_option("--noise", pre_noise, "Training noise utterances per conversation");
  c_pre->add_flag("--train-embedding", pre_train_embedding, "Update the word embedding table");
  c_pre->add_option("--seed", pre_seed, "Root seed");
  c_pre->add_option("--resume", pre_resume, "Continue from a checkpoint");
  c_pre->add_option("--min-count", pre.min_count, "Minimum token frequency for the vocabulary");
  c_pre->add_option("--threads", pre_threads, "Evaluation threads (default $THREADS or all cores)");
  c_pre->add_flag("--gradcheck", pre_gradcheck, "Run the gradient certification suite and exit");

  // eval-coco
  cmd::EvalCocoOptions ec;
  std::optional<std::size_t> ec_threads;
  auto* c_ec = app.add_subcommand("eval-coco", "Recall of the conversation-completion task");
  c_ec->add_option("data", ec.data_dir, "Directory written by prep")->required();
  c_ec->add_option("--checkpoint", ec.checkpoint, "Pre-trained checkpoint");
  c_ec->add_option("--split", ec.split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
  c_ec->add_flag("--oracle", ec.oracle, "Score with a perfect oracle");
  c_ec->add_option("--threads", ec_threads, "Evaluation threads");

  // finetune
  cmd::FinetuneOptions ft;
  std::optional<std::string> ft_config;
  std::string ft_transfer = "pt-code";
  std::optional<double> ft_lr, ft_decay, ft_dropout;
  std::optional<std::size_t> ft_epochs, ft_patience, ft_threads;
  std::optional<std::uint64_t> ft_seed;
  bool ft_small = false, ft_no_sweep = false;
  auto* c_ft = app.add_subcommand("finetune", "Fine-tune on an emotion-labeled conversation set");
  c_ft->add_option("--train", ft.train, "Training set")->required();
  c_ft->add_option("--val", ft.val, "Validation set")->required();
  c_ft->add_option("--test", ft.test, "Test set");
  c_ft->add_option("--schema", ft.schema, "Label schema JSON")->required();
  c_ft->add_option("--checkpoint", ft.checkpoint, "Pre-trained checkpoint");
  c_ft->add_option("--transfer", ft_transfer, "none, pt-u, pt-code or pt-code-rtw")
      ->check(CLI::IsMember({"none", "pt-u", "pt-code", "pt-code-rtw"}));
  c_ft->add_option("-o,--output", ft.output_dir, "Output directory")->required();
  c_ft->add_option("--config", ft_config, "JSON config file; flags override it");
  c_ft->add_option("--scale", ft.scale, "small, mid or large");
  c_ft->add_option("--word-dim", ft.word_dim, "Word vector dimension without a checkpoint");
  c_ft->add_option("--vectors", ft.vectors, "Word vectors without a checkpoint");
  c_ft->add_option("--lr", ft_lr, "Base learning rate");
  c_ft->add_flag("--no-sweep", ft_no_sweep, "Train only the base learning rate, not also its half");
  c_ft->add_option("--decay", ft_decay, "Learning-rate decay on plateau");
  c_ft->add_option("--patience", ft_patience, "Early-stopping patience");
  c_ft->add_flag("--small-set", ft_small, "Decay 0.95 and patience 10");
  c_ft->add_option("--max-epochs", ft_epochs, "Maximum epochs");
  c_ft->add_option("--dropout", ft_dropout, "Dropout rate");
  c_ft->add_option("--seed", ft_seed, "Root seed");
  c_ft->add_option("--threads", ft_threads, "Evaluation threads");

  // eval-uler
  cmd::EvalUlerOptions eu;
  std::optional<std::size_t> eu_threads;
  auto* c_eu = app.add_subcommand("eval-uler", "F1 / WA / UWA of a fine-tuned model or a prediction dump");
  c_eu->add_option("--checkpoint", eu.checkpoint, "Fine-tuned checkpoint");
  c_eu->add_option("--dataset", eu.dataset, "Labeled conversation set");
  c_eu->add_option("--schema", eu.schema, "Label schema JSON (default: the checkpoint's)");
  c_eu->add_option("--predictions", eu.predictions, "Score this prediction dump instead of a model");
  c_eu->add_option("--dump", eu.dump, "Write per-utterance predictions here");
  c_eu->add_option("--threads", eu_threads, "Evaluation threads");

  // gradcheck
  std::uint64_t gc_seed = 0;
  auto* c_gc = app.add_subcommand("gradcheck", "Certify analytic gradients against finite differences");
  c_gc->add_option("--seed", gc_seed, "Seed of the tiny model");

  // stats
  std::vector<std::string> stat_files;
  auto* c_st = app.add_subcommand("stats", "Corpus statistics of conversation files");
  c_st->add_option("files", stat_files, "Conversation JSON-Lines files")->required();

  // synth
  cmd::SynthOptions sy;
  auto* c_sy = app.add_subcommand("synth", "Write a synthetic fixture");
  c_sy->add_option("kind", sy.kind, "subtitles, cue, emotion or iid")->required();
  c_sy->add_option("-o,--output", sy.output, "Output directory (subtitles) or file")->required();
  c_sy->add_option("--count", sy.count, "Episodes or conversations");
  c_sy->add_option("--seed", sy.seed, "Seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? cmd::kOk : cmd::kUsage;
  }

  try {
    if (*c_prep) {
      if (!ratios.empty()) prep.spec.ratios = {ratios[0], ratios[1], ratios[2]};
      return cmd::prep(prep, std::cout, std::cerr);
    }
    if (*c_pre) {
      if (pre_gradcheck) return cmd::gradcheck(pre_seed.value_or(0), std::cout);
      if (pre.data_dir.empty() || pre.output_dir.empty()) {
        std::cerr << "pretrain: data directory and --output are required\n";
        return cmd::kUsage;
      }
      auto& c = pre.config;
      read_config(pre_config).get_to(c);
      if (pre_scale) c.scale = ModelScale::from_name(*pre_scale);
      override_with(c.word_dim, pre_word_dim);
      override_with(c.lr, pre_lr);
      override_with(c.decay, pre_decay);
      override_with(c.max_epochs, pre_epochs);
      override_with(c.patience, pre_patience);
      override_with(c.dropout, pre_dropout);
      override_with(c.clip_norm, pre_clip);
      override_with(c.noise, pre_noise);
      override_with(c.seed, pre_seed);
      if (pre_train_embedding) c.embedding_trainable = true;
      pre.vectors = pre_vectors;
      pre.resume = pre_resume;
      pre.threads = thread_count(pre_threads);
      return cmd::pretrain(pre, std::cout, std::cerr);
    }
    if (*c_ec) {
      ec.threads = thread_count(ec_threads);
      return cmd::eval_coco(ec, std::cout);
    }
    if (*c_ft) {
      auto& t = ft.transfer;
      t = TransferConfig::preset(ft_transfer);
      read_config(ft_config).get_to(t);
      if (c_ft->count("--transfer")) {
        auto p = TransferConfig::preset(ft_transfer);
        t.name = p.name;
        t.load_utterance = p.load_utterance;
        t.load_conversation = p.load_conversation;
        t.embedding_trainable = p.embedding_trainable;
      }
      if (ft_small) t.use_small_set_schedule();
      override_with(t.lr, ft_lr);
      override_with(t.decay, ft_decay);
      override_with(t.patience, ft_patience);
      override_with(t.max_epochs, ft_epochs);
      override_with(t.dropout, ft_dropout);
      override_with(t.seed, ft_seed);
      ft.sweep = !ft_no_sweep;
      ft.threads = thread_count(ft_threads);
      return cmd::finetune(ft, std::cout, std::cerr);
    }
    if (*c_eu) {
      eu.threads = thread_count(eu_threads);
      return cmd::eval_uler(eu, std::cout);
    }
    if (*c_gc) return cmd::gradcheck(gc_seed, std::cout);
    if (*c_st) return cmd::stats(stat_files, std::cout);
    if (*c_sy) return cmd::synthesize(sy, std::cerr);
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return cmd::kNumerical;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return cmd::kData;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return cmd::kData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return cmd::kData;
  }
  return cmd::kUsage;
}
