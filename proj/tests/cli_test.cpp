#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "chartrans/cli.hpp"
#include "chartrans/io.hpp"
#include "chartrans/model.hpp"

using namespace chartrans;

namespace {

struct RunResult {
  int code = 0;
  std::string out, err;
};

RunResult run(std::vector<std::string> args) {
  std::ostringstream out, err;
  RunResult r;
  r.code = run_cli(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

void write(const std::filesystem::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  f << text;
}

// Parameters, optimizer state and step agree bitwise; the recorded run
// settings may differ.
void expect_same_state(const std::string& path_a, const std::string& path_b) {
  const auto a = load_checkpoint<float>(path_a);
  const auto b = load_checkpoint<float>(path_b);
  EXPECT_EQ(a.config, b.config);
  EXPECT_EQ(a.meta.at("train.step"), b.meta.at("train.step"));
  ASSERT_EQ(a.params.size(), b.params.size());
  for (std::size_t i = 0; i < a.params.size(); ++i) {
    EXPECT_TRUE(std::ranges::equal(a.params[i].second.data(), b.params[i].second.data()))
        << a.params[i].first;
  }
  ASSERT_EQ(a.extra.size(), b.extra.size());
  for (std::size_t i = 0; i < a.extra.size(); ++i) {
    EXPECT_TRUE(std::ranges::equal(a.extra[i].second.data(), b.extra[i].second.data()))
        << a.extra[i].first;
  }
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir = std::filesystem::temp_directory_path() /
          ("ctnmt_cli_" + std::to_string(::getpid()) + "_" +
           ::testing::UnitTest::GetInstance()->current_test_info()->name());
    std::filesystem::create_directories(dir);
    std::string src, tgt;
    const char* words[] = {"the cat", "a dog sat", "the dog ran", "cats sat", "a cat ran"};
    for (int i = 0; i < 15; ++i) {
      std::string s = words[i % 5];
      src += s + "\n";
      tgt += std::string(s.rbegin(), s.rend()) + "\n";
    }
    write(dir / "train.src", src);
    write(dir / "train.tgt", tgt);
  }
  void TearDown() override { std::filesystem::remove_all(dir); }

  std::string p(const std::string& name) const { return (dir / name).string(); }

  // A very small model so each training run takes well under a second.
  std::vector<std::string> train_args(const std::string& mode, const std::string& out) const {
    return {"--quiet",      "train",         "--mode",      mode,          "--train-src",
            p("train.src"), "--train-tgt",   p("train.tgt"), "--out-dir",  p(out),
            "--d-model",    "16",            "--heads",     "2",           "--d-ff",
            "32",           "--enc-layers",  "1",           "--dec-layers", "1",
            "--enc-emb",    "8",             "--conv-filters", "1:4,2:4,3:4", "--max-updates",
            "4",            "--eval-interval", "2",         "--batch-tokens", "64",
            "--bpe-ops",    "20"};
  }

  std::filesystem::path dir;
};

TEST_F(CliTest, NoSubcommandIsUsageError) { EXPECT_EQ(run({}).code, 1); }

TEST_F(CliTest, UnknownFlagIsUsageError) { EXPECT_EQ(run({"score", "--bogus", "1"}).code, 1); }

TEST_F(CliTest, HelpExitsZero) {
  auto r = run({"--help"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("bpe-learn"), std::string::npos);
}

TEST_F(CliTest, MissingFileIsIoError) {
  auto r = run({"score", "--hyp", p("missing"), "--ref", p("train.tgt")});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("missing"), std::string::npos);
}

TEST_F(CliTest, LineCountMismatchIsDataError) {
  write(dir / "short.txt", "one\n");
  EXPECT_EQ(run({"score", "--hyp", p("short.txt"), "--ref", p("train.tgt")}).code, 3);
}

TEST_F(CliTest, UnknownConfigKeyIsDataError) {
  write(dir / "bad.cfg", "hyp=a\nnot_a_key=1\n");
  auto r = run({"--config", p("bad.cfg"), "score"});
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("not_a_key"), std::string::npos);
}

TEST_F(CliTest, UnknownMetricIsUsageError) {
  EXPECT_EQ(run({"score", "--hyp", p("train.tgt"), "--ref", p("train.tgt"), "--metrics", "ter"})
                .code,
            1);
}

TEST_F(CliTest, MissingRequiredSettingIsUsageError) {
  EXPECT_EQ(run({"score", "--ref", p("train.tgt")}).code, 1);
}

TEST_F(CliTest, ScoreIdentityAndOutputFile) {
  // BLEU needs sentences of at least four words to have 4-gram matches.
  write(dir / "long.txt", "the cat sat on the mat\na dog ran in the park\n");
  auto r = run({"--quiet", "score", "--hyp", p("long.txt"), "--ref", p("long.txt"), "--output",
                p("report.txt")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("bleu=100.0000\n"), std::string::npos);
  EXPECT_NE(r.out.find("chrf=100.0000\n"), std::string::npos);
  EXPECT_NE(r.out.find("character=0.0000\n"), std::string::npos);
  EXPECT_EQ(read_file(p("report.txt")), r.out);
}

TEST_F(CliTest, ConfigFileThenFlagPrecedence) {
  write(dir / "s.cfg", "hyp=" + p("train.tgt") + "\nref=" + p("train.tgt") + "\nmetrics=bleu\n");
  auto from_file = run({"--quiet", "--config", p("s.cfg"), "score"});
  ASSERT_EQ(from_file.code, 0) << from_file.err;
  EXPECT_EQ(from_file.out.rfind("bleu=", 0), 0u);
  EXPECT_EQ(from_file.out.find("chrf"), std::string::npos);
  auto overridden = run({"--quiet", "--config", p("s.cfg"), "score", "--metrics", "chrf"});
  ASSERT_EQ(overridden.code, 0);
  EXPECT_EQ(overridden.out.rfind("chrf=", 0), 0u);
}

TEST_F(CliTest, BpeLearnZeroOpsWritesHeaderOnly) {
  auto r = run({"--quiet", "bpe-learn", "--train", p("train.src"), "--num-ops", "0", "--output",
                p("m.txt")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(read_file(p("m.txt")), "#bpe v1 0\n");
  EXPECT_NE(r.out.find("merges=0\n"), std::string::npos);
}

TEST_F(CliTest, BpeLearnDefaultsAndRerunIdentical) {
  auto a = run({"bpe-learn", "--train", p("train.src") + "," + p("train.tgt"), "--output",
                p("a.txt")});
  ASSERT_EQ(a.code, 0) << a.err;
  EXPECT_NE(a.err.find("num_ops=20000\n"), std::string::npos);
  EXPECT_NE(a.err.find("seed=13\n"), std::string::npos);
  run({"bpe-learn", "--train", p("train.src") + "," + p("train.tgt"), "--output", p("b.txt")});
  EXPECT_EQ(read_file(p("a.txt")), read_file(p("b.txt")));
}

TEST_F(CliTest, VocabCommand) {
  auto r = run({"--quiet", "vocab", "--train", p("train.src"), "--mode", "char-transformer",
                "--output", p("v.txt")});
  ASSERT_EQ(r.code, 0) << r.err;
  // 4 specials + t h e c a d o g s r n and space
  EXPECT_EQ(r.out, "size=16\n");
  run({"--quiet", "bpe-learn", "--train", p("train.src"), "--num-ops", "5", "--output",
       p("m.txt")});
  auto b = run({"--quiet", "vocab", "--train", p("train.src"), "--mode", "bpe-transformer",
                "--merges", p("m.txt"), "--output", p("bv.txt")});
  EXPECT_EQ(b.code, 0) << b.err;
  EXPECT_EQ(run({"vocab", "--train", p("train.src"), "--mode", "bpe-transformer", "--output",
                 p("bv.txt")})
                .code,
            1);
}

TEST_F(CliTest, PresetsEchoTrainingSettings) {
  auto args = train_args("char-reduction-transformer", "run");
  args.erase(args.begin());  // keep the echo
  args.push_back("--preset");
  args.push_back("paper");
  args.push_back("--max-updates");
  args.push_back("1");
  auto r = run(args);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.err.find("batch_tokens=64\n"), std::string::npos);  // flag wins
  EXPECT_NE(r.err.find("accum_count=4\n"), std::string::npos);
  EXPECT_NE(r.err.find("dropout=0\n"), std::string::npos);
  EXPECT_NE(r.err.find("lr_factor=2\n"), std::string::npos);
  EXPECT_NE(r.err.find("warmup_steps=8000\n"), std::string::npos);
  EXPECT_NE(r.err.find("seed=13\n"), std::string::npos);
  EXPECT_NE(r.err.find("pool_stride=5\n"), std::string::npos);
  EXPECT_EQ(run({"train", "--preset", "huge"}).code, 1);
}

TEST_F(CliTest, DeskPresetDefaults) {
  auto args = train_args("char-transformer", "run");
  args.erase(args.begin());
  auto r = run(args);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.err.find("preset=desk\n"), std::string::npos);
  EXPECT_NE(r.err.find("heads=2\n"), std::string::npos);
  EXPECT_NE(r.err.find("accum_count=1\n"), std::string::npos);
}

TEST_F(CliTest, TrainWritesArtifacts) {
  auto r = run(train_args("char-reduction-transformer", "run"));
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* f : {"latest.ckpt", "best.ckpt", "src.vocab", "tgt.vocab", "train.log",
                        "config.resolved"}) {
    EXPECT_TRUE(std::filesystem::exists(dir / "run" / f)) << f;
  }
  EXPECT_NE(r.out.find("updates=4\n"), std::string::npos);
  std::ifstream log(dir / "run" / "train.log");
  std::string line;
  int lines = 0;
  while (std::getline(log, line)) ++lines;
  EXPECT_EQ(lines, 4);
}

TEST_F(CliTest, ResumeContinuesFromLatest) {
  auto args = train_args("char-transformer", "run");
  ASSERT_EQ(run(args).code, 0);
  args.push_back("--resume");
  args.push_back("true");
  args.push_back("--max-updates");
  args.push_back("6");
  auto r = run(args);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("updates=6\n"), std::string::npos);

  auto straight = train_args("char-transformer", "straight");
  straight.push_back("--max-updates");
  straight.push_back("6");
  ASSERT_EQ(run(straight).code, 0);
  expect_same_state(p("run/latest.ckpt"), p("straight/latest.ckpt"));
}

TEST_F(CliTest, ResolvedConfigReproducesRun) {
  ASSERT_EQ(run(train_args("char-reduction-transformer", "first")).code, 0);
  auto r = run({"--quiet", "--config", p("first/config.resolved"), "train", "--out-dir",
                p("second")});
  ASSERT_EQ(r.code, 0) << r.err;
  // Only the recorded out_dir differs, so compare tensors.
  expect_same_state(p("first/latest.ckpt"), p("second/latest.ckpt"));
}

TEST_F(CliTest, SeedChangesInitialization) {
  ASSERT_EQ(run(train_args("char-transformer", "a")).code, 0);
  auto args = train_args("char-transformer", "b");
  args.insert(args.begin(), {"--seed", "14"});
  ASSERT_EQ(run(args).code, 0);
  EXPECT_NE(read_file(p("a/latest.ckpt")), read_file(p("b/latest.ckpt")));
}

TEST_F(CliTest, TranslateDefaultBeamFollowsMode) {
  ASSERT_EQ(run(train_args("char-transformer", "c")).code, 0);
  ASSERT_EQ(run(train_args("bpe-transformer", "b")).code, 0);
  auto c = run({"translate", "--checkpoint", p("c/best.ckpt"), "--input", p("train.src"),
                "--output", p("c.out")});
  ASSERT_EQ(c.code, 0) << c.err;
  EXPECT_NE(c.err.find("beam=20\n"), std::string::npos);
  auto b = run({"translate", "--checkpoint", p("b/best.ckpt"), "--input", p("train.src"),
                "--output", p("b.out"), "--max-len", "5"});
  ASSERT_EQ(b.code, 0) << b.err;
  EXPECT_NE(b.err.find("beam=5\n"), std::string::npos);
  // one output line per input line
  for (const char* f : {"c.out", "b.out"}) {
    const auto text = read_file(p(f));
    EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 15) << f;
  }
}

TEST_F(CliTest, TranslateEmptyInputGivesEmptyOutput) {
  ASSERT_EQ(run(train_args("char-transformer", "c")).code, 0);
  write(dir / "empty.txt", "");
  auto r = run({"--quiet", "translate", "--checkpoint", p("c/best.ckpt"), "--input",
                p("empty.txt"), "--output", p("empty.out")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(std::filesystem::exists(dir / "empty.out"));
  EXPECT_EQ(read_file(p("empty.out")), "");
}

TEST_F(CliTest, TranslateRejectsCorruptCheckpoint) {
  write(dir / "junk.ckpt", "not a checkpoint");
  write(dir / "in.txt", "abc\n");
  auto r = run({"translate", "--checkpoint", p("junk.ckpt"), "--input", p("in.txt"), "--output",
                p("o.txt")});
  EXPECT_EQ(r.code, 3);
  EXPECT_FALSE(std::filesystem::exists(dir / "o.txt"));
}

TEST_F(CliTest, PipelineIsDeterministic) {
  auto pipeline = [&](const std::string& tag) {
    EXPECT_EQ(run({"--quiet", "bpe-learn", "--train", p("train.src") + "," + p("train.tgt"),
                   "--num-ops", "20", "--output", p(tag + ".merges")})
                  .code,
              0);
    auto args = train_args("bpe-transformer", tag);
    args.insert(args.end(), {"--merges", p(tag + ".merges"), "--dropout", "0.1"});
    EXPECT_EQ(run(args).code, 0);
    EXPECT_EQ(run({"--quiet", "translate", "--checkpoint", p(tag + "/latest.ckpt"), "--input",
                   p("train.src"), "--output", p(tag + ".hyp"), "--max-len", "8"})
                  .code,
              0);
    auto s = run({"--quiet", "score", "--hyp", p(tag + ".hyp"), "--ref", p("train.tgt")});
    EXPECT_EQ(s.code, 0);
    return read_file(p(tag + ".hyp")) + s.out;
  };
  EXPECT_EQ(pipeline("one"), pipeline("two"));
}

TEST_F(CliTest, BenchmarkTableLayout) {
  auto r = run({"--quiet", "benchmark", "--preset", "desk", "--length", "20", "--updates", "5",
                "--accum-count", "1"});
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream is(r.out);
  std::string header;
  std::getline(is, header);
  for (const char* col : {"model", "sec/update", "total_hours", "percent"}) {
    EXPECT_NE(header.find(col), std::string::npos) << col;
  }
  std::string first, second;
  std::getline(is, first);
  std::getline(is, second);
  EXPECT_EQ(first.rfind("char-transformer", 0), 0u);
  EXPECT_NE(first.find("100.0"), std::string::npos);
  EXPECT_EQ(second.rfind("char-reduction-transformer", 0), 0u);
  EXPECT_NE(r.out.find("ratio="), std::string::npos);
  EXPECT_EQ(run({"benchmark", "--updates", "2"}).code, 1);
}

}  // namespace
