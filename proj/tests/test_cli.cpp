#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "modsynth/phantom.hpp"
#include "modsynth/training.hpp"
#include "test_support.hpp"

using namespace modsynth;
using modsynth::testing::TempDir;
namespace fs = std::filesystem;

namespace {

struct Invocation {
  int exit_code = -1;
  std::string output;  // stdout and stderr interleaved
};

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Invocation run_cli(const std::string& args, const TempDir& dir) {
  const std::string log = dir / "cli.log";
  const std::string cmd = "cd '" + dir.path().string() + "' && '" MODSYNTH_CLI "' " + args + " > '" + log + "' 2>&1";
  const int status = std::system(cmd.c_str());
  Invocation r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.output = slurp(log);
  return r;
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
}

const char* kSmallPhantom = "phantom --out data --subjects 4 --seed 3 --depth 12 --height 40 --width 40";

const char* kDeskRun =
    "image_size = 32\nlaf_block_size = 16\nwidth_scale = 0.125\nepochs = 2\ndecay_start_epoch = 1\n"
    "batch_size = 4\nmax_steps_per_epoch = 2\nkeep_slices = 4\ntrain_subjects = 3\nmanifest = data/manifest.txt\n";

std::size_t count_lines(const std::string& text) {
  std::size_t n = 0;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) ++n;
  return n;
}

}  // namespace

TEST(CliPhantom, WritesRequestedSubjectsReproducibly) {
  TempDir dir("cli_phantom");
  const auto a = run_cli("phantom --out a --subjects 12 --seed 5 --depth 6 --height 24 --width 24", dir);
  ASSERT_EQ(a.exit_code, 0) << a.output;
  EXPECT_EQ(count_lines(slurp(dir / "a/manifest.txt")), 12u);
  EXPECT_EQ(read_manifest(dir / "a/manifest.txt").size(), 12u);
  const auto b = run_cli("phantom --out b --subjects 12 --seed 5 --depth 6 --height 24 --width 24", dir);
  ASSERT_EQ(b.exit_code, 0) << b.output;
  for (const char* mod : {"T1", "T1c", "T2", "FLAIR"}) {
    const std::string rel = std::string("phantom_007/") + mod + ".nii.gz";
    EXPECT_EQ(slurp(dir / ("a/" + rel)), slurp(dir / ("b/" + rel))) << rel;
  }
}

TEST(CliPhantom, ZeroSubjectsIsAUsageError) {
  TempDir dir("cli_phantom0");
  const auto r = run_cli("phantom --out a --subjects 0", dir);
  EXPECT_NE(r.exit_code, 0);
  EXPECT_NE(r.output.find("--subjects"), std::string::npos) << r.output;
  EXPECT_FALSE(fs::exists(dir / "a/manifest.txt"));
}

TEST(CliPhantom, SeedFallsBackToEnvironment) {
  TempDir dir("cli_phantom_env");
  const auto r = run_cli("phantom --out a --subjects 1 --depth 4 --height 16 --width 16", dir);
  ASSERT_EQ(r.exit_code, 0) << r.output;
  const auto e = run_cli("phantom --out b --subjects 1 --depth 4 --height 16 --width 16 --seed 0", dir);
  ASSERT_EQ(e.exit_code, 0) << e.output;
  EXPECT_EQ(slurp(dir / "a/phantom_000/T1.nii.gz"), slurp(dir / "b/phantom_000/T1.nii.gz"));
  setenv("MODSYNTH_SEED", "9", 1);
  const auto d = run_cli("phantom --out d --subjects 1 --depth 4 --height 16 --width 16", dir);
  unsetenv("MODSYNTH_SEED");
  ASSERT_EQ(d.exit_code, 0) << d.output;
  EXPECT_NE(d.output.find("seed 9"), std::string::npos) << d.output;
  EXPECT_NE(slurp(dir / "a/phantom_000/T1.nii.gz"), slurp(dir / "d/phantom_000/T1.nii.gz"));
}

TEST(CliTrain, MissingConfigIsAUsageError) {
  TempDir dir("cli_train_missing");
  EXPECT_NE(run_cli("train", dir).exit_code, 0);
  const auto r = run_cli("train --config nowhere.cfg", dir);
  EXPECT_NE(r.exit_code, 0);
  EXPECT_NE(r.output.find("nowhere.cfg"), std::string::npos) << r.output;
}

TEST(CliTrain, UnknownConfigKeyIsRejected) {
  TempDir dir("cli_train_badkey");
  write_file(dir / "bad.cfg", "epochs = 2\nlearning_rate = 0.1\n");
  const auto r = run_cli("train --config bad.cfg", dir);
  EXPECT_NE(r.exit_code, 0);
  EXPECT_NE(r.output.find("bad.cfg:2"), std::string::npos) << r.output;
}

TEST(CliTrain, DeskConfigCompletesTwoEpochs) {
  TempDir dir("cli_train");
  ASSERT_EQ(run_cli(kSmallPhantom, dir).exit_code, 0);
  write_file(dir / "run.cfg", kDeskRun);
  const auto r = run_cli("train --config run.cfg --out run", dir);
  ASSERT_EQ(r.exit_code, 0) << r.output;
  EXPECT_NE(r.output.find("epoch 1/2"), std::string::npos) << r.output;
  EXPECT_NE(r.output.find("epoch 2/2"), std::string::npos) << r.output;
  EXPECT_NE(r.output.find("output_dir = run\n"), std::string::npos) << r.output;
  EXPECT_TRUE(fs::exists(dir / "run/epoch_2.ckpt"));
  const auto summary = nlohmann::json::parse(slurp(dir / "run/summary.json"));
  EXPECT_EQ(summary["epochs"], 2);
  EXPECT_EQ(summary["history"].size(), 2u);
}

TEST(CliTrain, DefaultsEchoPublishedProtocol) {
  TempDir dir("cli_defaults");
  const auto c = run_cli("config", dir);
  ASSERT_EQ(c.exit_code, 0) << c.output;
  for (const char* line : {"epochs = 200\n", "lr = 0.0002\n", "batch_size = 3\n", "lambda1 = 0.1\n",
                           "image_size = 256\n", "laf_block_size = 128\n"}) {
    EXPECT_NE(c.output.find(line), std::string::npos) << line << c.output;
  }
  // A config that sets nothing but the data echoes the same defaults before training starts.
  write_file(dir / "defaults.cfg", "manifest = missing/manifest.txt\n");
  const auto t = run_cli("train --config defaults.cfg", dir);
  EXPECT_NE(t.exit_code, 0);
  for (const char* line : {"epochs = 200\n", "lr = 0.0002\n", "batch_size = 3\n"}) {
    EXPECT_NE(t.output.find(line), std::string::npos) << line << t.output;
  }
}

TEST(CliHelp, EveryCommandDocumentsDefaultsAndProvenance) {
  TempDir dir("cli_help");
  for (const char* cmd : {"phantom", "train", "synth", "eval", "ablate", "config"}) {
    const auto r = run_cli(std::string(cmd) + " --help", dir);
    EXPECT_EQ(r.exit_code, 0) << cmd;
    EXPECT_NE(r.output.find("Usage"), std::string::npos) << cmd << r.output;
  }
  const auto train = run_cli("train --help", dir);
  EXPECT_NE(train.output.find("[default: 200; published training protocol]"), std::string::npos) << train.output;
  EXPECT_NE(train.output.find("[default: 3; published training protocol]"), std::string::npos) << train.output;
  EXPECT_NE(train.output.find("implementation choice"), std::string::npos);
  const auto phantom = run_cli("phantom --help", dir);
  EXPECT_NE(phantom.output.find("12"), std::string::npos) << phantom.output;
  EXPECT_NE(phantom.output.find("implementation choice"), std::string::npos) << phantom.output;
  EXPECT_NE(run_cli("ablate --help", dir).output.find("published block-size experiment"), std::string::npos);
  EXPECT_NE(run_cli("config --reference", dir).output.find("published loss weights"), std::string::npos);
}

class CliSynth : public ::testing::Test {
 protected:
  void SetUp() override {
    RunConfig cfg;
    cfg.generator.width_scale = 0.0625;
    cfg.train.seed = 2;
    Trainer trainer(cfg);
    save_checkpoint(dir_ / "model.ckpt", trainer.snapshot(1));
    ASSERT_EQ(run_cli("phantom --out data --subjects 1 --seed 1 --depth 6 --height 48 --width 40 --format png", dir_)
                  .exit_code,
              0);
  }

  TempDir dir_{"cli_synth"};
};

TEST_F(CliSynth, TwoInputsGiveOneFullSizeSlice) {
  const auto r = run_cli("synth --checkpoint model.ckpt --inputs data/phantom_000/T1/0003.png "
                         "data/phantom_000/T2/0003.png --out out",
                         dir_);
  ASSERT_EQ(r.exit_code, 0) << r.output;
  std::size_t pngs = 0;
  for (const auto& e : fs::directory_iterator(dir_ / "out")) pngs += e.path().extension() == ".png";
  EXPECT_EQ(pngs, 1u);
  const GrayImage img = read_png_gray(dir_ / "out/synthesized.png");
  EXPECT_EQ(img.width, 256);
  EXPECT_EQ(img.height, 256);
  EXPECT_EQ(img.bit_depth, 16);
}

TEST_F(CliSynth, TaggedInputsMatchOrderedInputs) {
  ASSERT_EQ(run_cli("synth --checkpoint model.ckpt --inputs data/phantom_000/T1/0003.png "
                    "data/phantom_000/T2/0003.png --out a",
                    dir_)
                .exit_code,
            0);
  const auto r = run_cli("synth --checkpoint model.ckpt --inputs T2=data/phantom_000/T2/0003.png "
                         "T1=data/phantom_000/T1/0003.png --out b",
                         dir_);
  ASSERT_EQ(r.exit_code, 0) << r.output;
  EXPECT_EQ(slurp(dir_ / "a/synthesized.png"), slurp(dir_ / "b/synthesized.png"));
}

TEST_F(CliSynth, ModalityMismatchIsAnError) {
  const auto wrong = run_cli("synth --checkpoint model.ckpt --inputs T1=data/phantom_000/T1/0003.png "
                             "T1c=data/phantom_000/T1c/0003.png --out out",
                             dir_);
  EXPECT_NE(wrong.exit_code, 0);
  EXPECT_NE(wrong.output.find("T1,T2"), std::string::npos) << wrong.output;
  const auto count = run_cli("synth --checkpoint model.ckpt --inputs data/phantom_000/T1/0003.png --out out", dir_);
  EXPECT_NE(count.exit_code, 0);
  EXPECT_FALSE(fs::exists(dir_ / "out/synthesized.png"));
}

TEST_F(CliSynth, EmitsPseudoTargetOnRequest) {
  const auto r = run_cli("synth --checkpoint model.ckpt --inputs data/phantom_000/T1/0003.png "
                         "data/phantom_000/T2/0003.png --out out --emit-pseudo --name s3",
                         dir_);
  ASSERT_EQ(r.exit_code, 0) << r.output;
  EXPECT_TRUE(fs::exists(dir_ / "out/s3.png"));
  const GrayImage pseudo = read_png_gray(dir_ / "out/s3_pseudo.png");
  EXPECT_EQ(pseudo.width, 256);
}

TEST(CliEval, IdenticalDirectoriesScorePerfectly) {
  TempDir dir("cli_eval");
  ASSERT_EQ(run_cli("phantom --out data --subjects 1 --depth 8 --height 32 --width 32 --format png", dir).exit_code, 0);
  const auto r = run_cli("eval --pred-dir data/phantom_000/FLAIR --gt-dir data/phantom_000/FLAIR --csv m/metrics.csv",
                         dir);
  ASSERT_EQ(r.exit_code, 0) << r.output;
  std::istringstream csv(slurp(dir / "m/metrics.csv"));
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "subject_id,slice_index,psnr,ssim,nrmse");
  int rows = 0;
  std::string footer;
  while (std::getline(csv, line)) {
    if (line.rfind("aggregate,", 0) == 0) {
      footer = line;
      continue;
    }
    ++rows;
    EXPECT_EQ(line.substr(line.rfind(',') + 1), "0") << line;
  }
  EXPECT_GT(rows, 0);
  EXPECT_LT(rows, 8) << "empty ground-truth slices are skipped";
  EXPECT_NE(footer.find(",0.0000 ± 0.0000"), std::string::npos) << footer;
  EXPECT_NE(r.output.find("NRMSE 0.0000 ± 0.0000"), std::string::npos) << r.output;
}

TEST(CliEval, ScoresAgainstLibraryMetrics) {
  TempDir dir("cli_eval_values");
  fs::create_directories(dir / "gt");
  fs::create_directories(dir / "pred");
  Rng rng(4);
  MetricReport expect;
  for (int k = 0; k < 3; ++k) {
    GrayImage real, fake;
    real.width = fake.width = 20;
    real.height = fake.height = 16;
    Tensor<double> rt(1, 1, 16, 20), ft(rt.shape());
    for (int i = 0; i < 320; ++i) {
      real.pixels.push_back(static_cast<std::uint16_t>(rng.below(65536)));
      fake.pixels.push_back(static_cast<std::uint16_t>(rng.below(65536)));
      rt[i] = real.pixels.back() / 65535.0;
      ft[i] = fake.pixels.back() / 65535.0;
    }
    const std::string name = "slice" + std::to_string(k) + ".png";
    write_png_gray16(dir / ("gt/" + name), real);
    write_png_gray16(dir / ("pred/" + name), fake);
    expect.slices.push_back(evaluate_slice("slice" + std::to_string(k), k, rt, ft));
  }
  const auto r = run_cli("eval --pred-dir pred --gt-dir gt --csv m.csv", dir);
  ASSERT_EQ(r.exit_code, 0) << r.output;
  std::ostringstream os;
  write_metric_csv(os, expect);
  EXPECT_EQ(slurp(dir / "m.csv"), os.str());
}

TEST(CliEval, MismatchedFileSetsListMissingPairs) {
  TempDir dir("cli_eval_missing");
  fs::create_directories(dir / "gt");
  fs::create_directories(dir / "pred");
  GrayImage img;
  img.width = img.height = 4;
  img.pixels.assign(16, 100);
  write_png_gray16(dir / "gt/a.png", img);
  write_png_gray16(dir / "gt/b.png", img);
  write_png_gray16(dir / "pred/a.png", img);
  write_png_gray16(dir / "pred/c.png", img);
  const auto r = run_cli("eval --pred-dir pred --gt-dir gt --csv m.csv", dir);
  EXPECT_NE(r.exit_code, 0);
  EXPECT_NE(r.output.find("b.png (no prediction)"), std::string::npos) << r.output;
  EXPECT_NE(r.output.find("c.png (no ground truth)"), std::string::npos) << r.output;
  EXPECT_FALSE(fs::exists(dir / "m.csv"));
}

TEST(CliAblate, TwoRunMatrixWritesTableAndPlot) {
  TempDir dir("cli_ablate");
  ASSERT_EQ(run_cli(kSmallPhantom, dir).exit_code, 0);
  write_file(dir / "m.cfg", std::string("name = desk\nsweep = block_size\nsizes = 32, 16\noutput_root = exp\n") +
                                "image_size = 32\nlaf_block_size = 32\nwidth_scale = 0.125\nepochs = 1\n"
                                "decay_start_epoch = 1\nbatch_size = 4\nmax_steps_per_epoch = 2\nkeep_slices = 4\n"
                                "train_subjects = 3\nmanifest = data/manifest.txt\n");
  const auto r = run_cli("ablate --matrix-config m.cfg --seed 4", dir);
  ASSERT_EQ(r.exit_code, 0) << r.output;
  EXPECT_NE(r.output.find("| 32×32 (no chunking) | 4 |"), std::string::npos) << r.output;
  EXPECT_NE(r.output.find("| 16×16 | 4 |"), std::string::npos) << r.output;
  EXPECT_EQ(slurp(dir / "exp/desk/results.png").substr(1, 3), "PNG");
  EXPECT_TRUE(fs::exists(dir / "exp/desk/results.csv"));
  EXPECT_TRUE(fs::exists(dir / "exp/desk/block_16/epoch_1.ckpt"));

  const auto again = run_cli("ablate --matrix-config m.cfg --seed 4 --out exp2", dir);
  ASSERT_EQ(again.exit_code, 0) << again.output;
  EXPECT_EQ(slurp(dir / "exp/desk/results.md"), slurp(dir / "exp2/desk/results.md"));
}

TEST(CliAblate, InvalidBlockSizeIsRejectedBeforeTraining) {
  TempDir dir("cli_ablate_bad");
  write_file(dir / "m.cfg", "sweep = block_size\nsizes = 32, 12\noutput_root = exp\nimage_size = 32\n"
                            "laf_block_size = 32\nmanifest = nowhere/manifest.txt\n");
  const auto r = run_cli("ablate --matrix-config m.cfg", dir);
  EXPECT_NE(r.exit_code, 0);
  EXPECT_NE(r.output.find("12"), std::string::npos) << r.output;
  EXPECT_FALSE(fs::exists(dir / "exp"));
}
