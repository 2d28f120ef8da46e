#include "ptcode/checkpoint.hpp"
#include "ptcode/corpus.hpp"

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path scratch() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / ("ptcode_cli_" + std::to_string(::getpid()));
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

struct Run {
  int code = -1;
  std::string out;
};

Run run(const std::string& args, const std::string& env = "") {
  const auto out_file = scratch() / "stdout.txt";
  const std::string cmd = env + " " + PTCODE_CLI + " " + args + " > " + out_file.string() + " 2> /dev/null";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(out_file);
  std::stringstream ss;
  ss << in.rdbuf();
  r.out = ss.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t line_count(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) n += !line.empty();
  return n;
}

// Subtitles -> prepared corpus, shared by the tests below. Eight episodes
// are too few for the default 90:5:5 split.
const fs::path& prepared() {
  static const fs::path dir = [] {
    const auto subs = scratch() / "subs";
    const auto data = scratch() / "data";
    EXPECT_EQ(run("synth subtitles -o " + subs.string() + " --count 8 --seed 3").code, 0);
    EXPECT_EQ(run("prep " + subs.string() + " -o " + data.string() + " --seed 5 --ratios 60 20 20").code, 0);
    return data;
  }();
  return dir;
}

const fs::path& emotion_files() {
  static const fs::path dir = [] {
    const auto d = scratch() / "emotion";
    fs::create_directories(d);
    EXPECT_EQ(run("synth emotion -o " + (d / "train.jsonl").string() + " --count 40 --seed 1").code, 0);
    EXPECT_EQ(run("synth emotion -o " + (d / "val.jsonl").string() + " --count 10 --seed 2").code, 0);
    std::ofstream(d / "schema.json") << R"({"classes": ["anger", "joy", "sadness", "neutral"]})";
    return d;
  }();
  return dir;
}

}  // namespace

TEST(Cli, UsageErrors) {
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("frobnicate").code, 1);
  EXPECT_EQ(run("prep").code, 1);
  EXPECT_EQ(run("eval-coco " + prepared().string() + " --split nope --oracle").code, 1);
  EXPECT_EQ(run("--help").code, 0);
}

TEST(Cli, PrepWritesSplitsAndIsDeterministic) {
  const auto& data = prepared();
  for (const char* f : {"train.jsonl", "val.jsonl", "test.jsonl", "train.noise.jsonl", "val.noise.jsonl",
                        "test.noise.jsonl", "stats.json"})
    EXPECT_TRUE(fs::exists(data / f)) << f;
  auto stats = json::parse(slurp(data / "stats.json"));
  EXPECT_GT(stats["train"]["conversations"].get<std::size_t>(), 0u);
  EXPECT_EQ(stats["settings"]["seed"], 5);

  const auto again = scratch() / "data_again";
  ASSERT_EQ(run("prep " + (scratch() / "subs").string() + " -o " + again.string() + " --seed 5 --ratios 60 20 20").code, 0);
  for (const auto& e : fs::directory_iterator(data))
    EXPECT_EQ(slurp(e.path()), slurp(again / e.path().filename())) << e.path().filename();
}

TEST(Cli, PrepDataErrors) {
  const auto empty = scratch() / "empty";
  fs::create_directories(empty);
  EXPECT_EQ(run("prep " + empty.string() + " -o " + (scratch() / "x").string()).code, 2);
  EXPECT_EQ(run("prep " + (scratch() / "missing").string() + " -o " + (scratch() / "x").string()).code, 2);
  EXPECT_EQ(run("prep " + (scratch() / "subs").string() + " -o " + (scratch() / "x").string() + " --ratios 50 30 30")
                .code,
            2);
}

TEST(Cli, EvalCocoOracle) {
  auto r = run("eval-coco " + prepared().string() + " --oracle --split val");
  ASSERT_EQ(r.code, 0);
  auto j = json::parse(r.out);
  EXPECT_DOUBLE_EQ(j["r11@1"].get<double>(), 1.0);
  EXPECT_DOUBLE_EQ(j["r5@1"].get<double>(), 1.0);
  EXPECT_EQ(run("eval-coco " + prepared().string()).code, 2);
}

TEST(Cli, PretrainOneEpochThenResume) {
  const auto out = scratch() / "pre";
  const std::string common = prepared().string() + " --word-dim 8 --max-epochs 1 --seed 2 --threads 2 ";
  auto r = run("pretrain " + common + "-o " + out.string());
  ASSERT_EQ(r.code, 0);
  EXPECT_EQ(line_count(out / "train_log.jsonl"), 1u);
  auto rec = json::parse(slurp(out / "train_log.jsonl"));
  for (const char* k : {"epoch", "loss", "val_r11@1", "lr", "improved"}) EXPECT_TRUE(rec.contains(k)) << k;
  ASSERT_TRUE(fs::exists(out / "best.ckpt"));
  auto ck = ptcode::load_checkpoint((out / "best.ckpt").string());
  const auto train_convs = ptcode::read_conversations((prepared() / "train.jsonl").string()).size();
  EXPECT_EQ(ck.meta.step, train_convs);
  EXPECT_TRUE(ck.meta.extra.contains("vocabulary"));

  auto ev = run("eval-coco " + prepared().string() + " --checkpoint " + (out / "best.ckpt").string());
  ASSERT_EQ(ev.code, 0);
  EXPECT_EQ(json::parse(ev.out)["instances"].get<std::size_t>() > 0, true);

  const auto out2 = scratch() / "pre_resumed";
  ASSERT_EQ(run("pretrain " + common + "-o " + out2.string() + " --resume " + (out / "best.ckpt").string()).code, 0);
  auto ck2 = ptcode::load_checkpoint((out2 / "best.ckpt").string());
  EXPECT_EQ(ck2.meta.step, 2 * train_convs);

  EXPECT_EQ(run("pretrain " + common + "-o " + (scratch() / "bad").string() + " --resume " +
                (out / "best.ckpt").string() + " --scale mid")
                .code,
            2);
}

TEST(Cli, PretrainConfigFileAndFlagPrecedence) {
  const auto cfg = scratch() / "pre.json";
  std::ofstream(cfg) << R"({"word_dim": 8, "max_epochs": 3, "lr": 0.001, "seed": 4})";
  const auto out = scratch() / "pre_cfg";
  ASSERT_EQ(run("pretrain " + prepared().string() + " --config " + cfg.string() + " --max-epochs 1 -o " + out.string())
                .code,
            0);
  EXPECT_EQ(line_count(out / "train_log.jsonl"), 1u);
  auto ck = ptcode::load_checkpoint((out / "best.ckpt").string());
  EXPECT_EQ(ck.meta.extra["config"]["word_dim"], 8);
  EXPECT_DOUBLE_EQ(ck.meta.extra["config"]["lr"].get<double>(), 0.001);
  std::ofstream(scratch() / "broken.json") << "{nope";
  EXPECT_EQ(run("pretrain " + prepared().string() + " --config " + (scratch() / "broken.json").string() + " -o " +
                out.string())
                .code,
            2);
}

TEST(Cli, FinetuneFromScratchAndEvaluate) {
  const auto& d = emotion_files();
  const auto out = scratch() / "ft";
  auto r = run("finetune --train " + (d / "train.jsonl").string() + " --val " + (d / "val.jsonl").string() +
               " --test " + (d / "val.jsonl").string() + " --schema " + (d / "schema.json").string() +
               " --transfer none --word-dim 8 --max-epochs 2 --no-sweep --lr 0.002 -o " + out.string());
  ASSERT_EQ(r.code, 0);
  for (const char* f : {"finetune_log.jsonl", "uler.ckpt", "val_predictions.jsonl", "test_predictions.jsonl",
                        "metrics.json"})
    EXPECT_TRUE(fs::exists(out / f)) << f;
  EXPECT_EQ(line_count(out / "finetune_log.jsonl"), 2u);
  auto metrics = json::parse(slurp(out / "metrics.json"));
  auto ev = run("eval-uler --checkpoint " + (out / "uler.ckpt").string() + " --dataset " + (d / "val.jsonl").string());
  ASSERT_EQ(ev.code, 0);
  EXPECT_DOUBLE_EQ(json::parse(ev.out)["macro_f1"].get<double>(), metrics["val"]["macro_f1"].get<double>());
  auto dump = run("eval-uler --predictions " + (out / "val_predictions.jsonl").string() + " --schema " +
                  (d / "schema.json").string());
  ASSERT_EQ(dump.code, 0);
  EXPECT_DOUBLE_EQ(json::parse(dump.out)["macro_f1"].get<double>(), metrics["val"]["macro_f1"].get<double>());
}

TEST(Cli, FinetuneDataErrors) {
  const auto& d = emotion_files();
  const std::string base = "finetune --train " + (d / "train.jsonl").string() + " --val " + (d / "val.jsonl").string() +
                           " --schema " + (d / "schema.json").string() + " --max-epochs 1 -o " +
                           (scratch() / "ft_bad").string();
  EXPECT_EQ(run(base + " --transfer pt-code").code, 2);
  std::ofstream(scratch() / "narrow.json") << R"({"classes": ["anger", "joy"]})";
  EXPECT_EQ(run("finetune --train " + (d / "train.jsonl").string() + " --val " + (d / "val.jsonl").string() +
                " --schema " + (scratch() / "narrow.json").string() + " --transfer none -o " +
                (scratch() / "ft_bad").string())
                .code,
            2);
  const auto pre = scratch() / "pre" / "best.ckpt";
  if (fs::exists(pre)) {
    EXPECT_EQ(run(base + " --checkpoint " + pre.string() + " --scale mid").code, 2);
  }
}

TEST(Cli, EvalUlerPredictionDump) {
  const auto dump = scratch() / "dump.jsonl";
  {
    std::ofstream out(dump);
    out << R"({"gold":"pos","pred":"pos"})" << '\n'
        << R"({"gold":"pos","pred":"pos"})" << '\n'
        << R"({"gold":"neg","pred":"pos"})" << '\n'
        << R"({"gold":"neg","pred":"neg"})" << '\n';
  }
  std::ofstream(scratch() / "pn.json") << R"({"classes": ["pos", "neg"]})";
  auto r = run("eval-uler --predictions " + dump.string() + " --schema " + (scratch() / "pn.json").string());
  ASSERT_EQ(r.code, 0);
  auto j = json::parse(r.out);
  EXPECT_NEAR(j["macro_f1"].get<double>(), (0.8 + 2.0 / 3.0) / 2.0, 1e-12);
  EXPECT_NEAR(j["wa"].get<double>(), 0.75, 1e-12);
  EXPECT_NEAR(j["uwa"].get<double>(), 0.75, 1e-12);
  EXPECT_EQ(run("eval-uler --predictions " + dump.string()).code, 2);
}

TEST(Cli, GradcheckStatsAndEnvironment) {
  auto g = run("gradcheck");
  ASSERT_EQ(g.code, 0);
  EXPECT_TRUE(json::parse(g.out)["passed"].get<bool>());
  EXPECT_EQ(run("pretrain --gradcheck").code, 0);
  auto s = run("stats " + (prepared() / "val.jsonl").string());
  ASSERT_EQ(s.code, 0);
  EXPECT_EQ(run("stats " + (scratch() / "nothing.jsonl").string()).code, 2);
  EXPECT_EQ(run("eval-coco " + prepared().string() + " --oracle", "THREADS=abc").code, 2);
  EXPECT_EQ(run("eval-coco " + prepared().string() + " --oracle", "THREADS=3").code, 0);
}
