#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "faceshifter/cli.hpp"
#include "faceshifter/image_io.hpp"
#include "faceshifter/toy_world.hpp"
#include "support.hpp"

using namespace faceshifter;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code;
  std::string out, err;
};

CliResult run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string write_toy_face(const std::string& dir, int crop, uint64_t seed) {
  const auto face = ToyFaceWorld(4, 1).make_dataset(1, seed, crop)[0];
  const auto path = dir + "/face" + std::to_string(seed) + ".png";
  write_png(path, signed_to_bytes(face.image));
  return path;
}

const std::vector<std::string> kTiny{"--preset", "desk", "--set", "crop_size=32", "--set", "n_attr_levels=4",
                                     "--set", "attr_channels=[4,8,8]", "--set", "gen_channels=[16,16,8,8,8]",
                                     "--set", "hear_depth=3", "--set", "hear_channels=[4,8,8]",
                                     "--set", "disc_channels=4", "--set", "disc_layers=2", "--set", "id_dim=16",
                                     "--set", "toy_id_input=16", "--set", "toy_id_channels=4",
                                     "--set", "toy_id_steps=5", "--set", "batch_size=4"};

std::vector<std::string> with(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

}  // namespace

TEST(Cli, UnknownSubcommandIsAUsageError) {
  const auto r = run({"frobnicate"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("error: code=2 kind=usage"), std::string::npos);
  EXPECT_NE(r.err.find("train-aei"), std::string::npos);
  EXPECT_EQ(run({}).code, 2);
}

TEST(Cli, ExecutableExitCode) {
  const int status = std::system((std::string(FACESHIFTER_CLI) + " frobnicate > /dev/null 2>&1").c_str());
  ASSERT_TRUE(WIFEXITED(status));
  EXPECT_EQ(WEXITSTATUS(status), 2);
}

TEST(Cli, HelpSucceeds) {
  const auto r = run({"--help"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("augment-occlusions"), std::string::npos);
}

TEST(Cli, DistinctExitCodes) {
  const auto dir = fs_test::temp_dir("cli_codes");
  const auto face = write_toy_face(dir, 32, 1);
  // config
  EXPECT_EQ(run({"augment-occlusions", "--image", face, "--out", dir + "/o.png", "--set", "nonsense=1"}).code, 3);
  EXPECT_EQ(run({"augment-occlusions", "--image", face, "--out", dir + "/o.png", "--preset", "huge"}).code, 3);
  // checkpoint
  const auto missing = run({"reconstruct", "--image", face, "--aei", dir + "/none.ckpt", "--out", dir + "/r.png"});
  EXPECT_EQ(missing.code, 4);
  EXPECT_EQ(missing.err.rfind("error: code=4 kind=checkpoint message=\"", 0), 0u);
  EXPECT_EQ(std::count(missing.err.begin(), missing.err.end(), '\n'), 1);
  // data
  EXPECT_EQ(run({"augment-occlusions", "--image", dir + "/nope.png", "--out", dir + "/o.png"}).code, 5);
  std::ofstream(dir + "/bad.png") << "garbage";
  EXPECT_EQ(run({"augment-occlusions", "--image", dir + "/bad.png", "--out", dir + "/o.png"}).code, 5);
}

TEST(Cli, AugmentOcclusionsIsByteStable) {
  const auto dir = fs_test::temp_dir("cli_augment");
  const auto face = write_toy_face(dir, 64, 2);
  for (const char* name : {"a.png", "b.png"})
    ASSERT_EQ(run({"augment-occlusions", "--image", face, "--seed", "7", "--preset", "desk", "--out", dir + "/" + name})
                  .code,
              0);
  EXPECT_EQ(slurp(dir + "/a.png"), slurp(dir + "/b.png"));
  EXPECT_EQ(slurp(dir + "/a_mask.png"), slurp(dir + "/b_mask.png"));
  EXPECT_NE(slurp(dir + "/a.png"), slurp(face));
  ASSERT_EQ(run({"augment-occlusions", "--image", face, "--seed", "8", "--preset", "desk", "--out", dir + "/c.png"}).code,
            0);
  EXPECT_NE(slurp(dir + "/a.png"), slurp(dir + "/c.png"));
}

TEST(Cli, TrainSwapReconstructAndMasks) {
  const auto dir = fs_test::temp_dir("cli_pipeline");
  auto r = run(with({"train-aei", "--toy", "16", "--run", dir + "/run", "--steps", "3"}, kTiny));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir + "/run/latest"));
  EXPECT_TRUE(fs::exists(dir + "/run/metrics.jsonl"));

  const auto a = write_toy_face(dir, 32, 3), b = write_toy_face(dir, 32, 4);
  for (const char* name : {"s1.png", "s2.png"}) {
    r = run({"swap", "--source", a, "--target", b, "--aei", dir + "/run", "--out", dir + "/" + name});
    ASSERT_EQ(r.code, 0) << r.err;
  }
  EXPECT_EQ(slurp(dir + "/s1.png"), slurp(dir + "/s2.png"));
  EXPECT_EQ(read_png(dir + "/s1.png").sizes(), (std::vector<int64_t>{32, 32, 3}));

  r = run({"reconstruct", "--image", a, "--aei", dir + "/run", "--out", dir + "/rec.png"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir + "/rec_error.png"));
  EXPECT_NE(r.out.find("psnr"), std::string::npos);

  r = run({"visualize-masks", "--source", a, "--target", b, "--aei", dir + "/run", "--out", dir + "/masks.png"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir + "/masks.png"));

  r = run(with({"train-hear", "--toy", "16", "--aei", dir + "/run", "--run", dir + "/hear", "--steps", "2"}, kTiny));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir + "/hear/subset.json"));
  r = run({"swap", "--source", a, "--target", b, "--aei", dir + "/run", "--hear", dir + "/hear", "--out",
           dir + "/s3.png"});
  ASSERT_EQ(r.code, 0) << r.err;

  r = run({"swap", "--source", a, "--target", b, "--aei", dir + "/hear", "--out", dir + "/s4.png"});
  EXPECT_EQ(r.code, 4);

  r = run({"eval", "--toy", "16", "--pairs", "8", "--aei", dir + "/run", "--hear", dir + "/hear", "--out",
           dir + "/report.json"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto report = nlohmann::json::parse(slurp(dir + "/report.json"));
  EXPECT_EQ(report["pairs"], 8);
  for (const char* k : {"id_retrieval", "cos_source", "pose_error", "expression_error", "reconstruction_psnr"})
    EXPECT_TRUE(report.contains(k)) << k;
  EXPECT_TRUE(report.contains("stage2"));
  for (const char* k : {"localization_ratio", "err_stage1", "err_stage2"})
    EXPECT_TRUE(report["occlusion"].contains(k)) << k;
}

TEST(Cli, MakeCorpusWritesAManifest) {
  const auto dir = fs_test::temp_dir("cli_corpus");
  const auto r = run({"make-corpus", "--preset", "desk", "--toy", "6", "--occluders", "2", "--out", dir});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto recs = read_manifest(dir + "/manifest.jsonl");
  EXPECT_EQ(recs.size(), 6u);
  EXPECT_EQ(load_dataset(dir + "/manifest.jsonl", 64).size(), 6u);
  EXPECT_EQ(load_occluders(dir + "/occluders").size(), 2u);
}
