// Pre-trains a small model on a synthetic cue corpus, then reports test recall.

#include "ptcode/ptcode.hpp"

#include <iostream>

int main() {
  using namespace ptcode;
  synth::CueCorpusSpec spec;
  spec.conversations = 200;
  auto corpus = synth::cue_corpus(spec);
  auto vocab = build_vocabulary(corpus);
  index_corpus(corpus, vocab);

  SplitSpec split;
  split.ratios = {80.0, 10.0, 10.0};
  Rng rng(7, "prep");
  auto splits = split_dataset(corpus, split, rng);
  Rng noise(7, "noise");
  auto val_pool = sample_noise_pool(splits.val, 10, noise);
  auto test_pool = sample_noise_pool(splits.test, 10, noise);

  ModelConfig mc;
  mc.scale = ModelScale::small();
  mc.vocab_size = vocab.size();
  mc.word_dim = 50;
  CodeModel<float> model(mc);
  init_params(model, 7);
  model.params[model.embedding].value = random_embedding(vocab.size(), mc.word_dim, 7).cast<float>();

  PretrainConfig cfg;
  cfg.scale = mc.scale;
  cfg.word_dim = mc.word_dim;
  cfg.lr = 2e-3;
  cfg.max_epochs = 5;
  PretrainHooks hooks;
  hooks.on_epoch = [](const EpochRecord& r) {
    std::cout << "epoch " << r.epoch << " loss " << r.loss << " val R11@1 " << r.val_metric << '\n';
  };
  pretrain(model, splits.train, splits.val, val_pool, cfg, hooks);
  std::cout << nlohmann::json(evaluate_split(model_scorer(model), splits.test, test_pool)).dump(2) << '\n';
}
