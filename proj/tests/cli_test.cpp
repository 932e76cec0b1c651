#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "commands.hpp"
#include "mtm/config.hpp"
#include "mtm/io.hpp"
#include "mtm/stylegen.hpp"
#include "mtm/train.hpp"

using namespace mtm;
namespace fs = std::filesystem;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

std::string fresh_dir(const std::string& name) {
  const std::string d = ::testing::TempDir() + "/mtm_cli_" + name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string write_config(const std::string& dir, const std::string& body) {
  const std::string path = dir + "/config.json";
  write_text(path, body);
  return path;
}

int run(std::vector<std::string> args) {
  args.insert(args.begin(), "mtm");
  return cli::run(args);
}

std::vector<std::string> lines(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

const char* kTiny = R"({"generator": {"channels": 8, "d_channels": 8, "z_dim": 8, "w_dim": 8,
  "mtm_groups": ["low"]}, "train": {"batch": 4, "steps": %STEPS%, "eval_every": 5,
  "eval_samples": 64}, "data": {"n": 64, "held_out": 64}})";

std::string tiny(int steps) {
  std::string s = kTiny;
  s.replace(s.find("%STEPS%"), 7, std::to_string(steps));
  return s;
}

// A fresh checkpoint (train with zero steps).
std::string fresh_checkpoint(const std::string& dir, bool with_mtm = true) {
  std::string body = tiny(0);
  if (!with_mtm) body.replace(body.find("[\"low\"]"), 7, "[]");
  EXPECT_EQ(run({"train", "--config", write_config(dir, body), "--out", dir + "/run"}), 0);
  return dir + "/run/checkpoint_ema.ckpt";
}

}  // namespace

TEST(Cli, UsageErrors) {
  EXPECT_EQ(run({}), cli::kConfig);
  EXPECT_EQ(run({"frobnicate"}), cli::kConfig);
  EXPECT_EQ(run({"gradcheck", "--scope", "everything"}), cli::kConfig);
  EXPECT_EQ(run({"train", "--n", "-3"}), cli::kConfig);
}

TEST(Cli, MissingConfigNamesPath) {
  ::testing::internal::CaptureStderr();
  EXPECT_EQ(run({"train", "--config", "/no/such/run.json", "--out", "/tmp/x"}), cli::kConfig);
  EXPECT_NE(::testing::internal::GetCapturedStderr().find("/no/such/run.json"),
            std::string::npos);
}

TEST(Cli, UnknownKeyIsConfigError) {
  const std::string d = fresh_dir("unknown");
  EXPECT_EQ(run({"train", "--config", write_config(d, R"({"train": {"stpes": 1}})"), "--out", d}),
            cli::kConfig);
}

TEST(Cli, TrainZeroStepsWritesInitialisation) {
  const std::string d = fresh_dir("zero");
  fresh_checkpoint(d);
  const RunConfig c = parse_run_config(tiny(0));
  const TrainState init = init_train_state(c.generator, c.train);
  EXPECT_EQ(slurp(d + "/run/checkpoint_ema.ckpt"), serialize_checkpoint(init.gen));
  EXPECT_EQ(lines(slurp(d + "/run/metrics.csv")).size(), 2u);
}

TEST(Cli, TrainSeedFlagOverridesConfig) {
  const std::string d = fresh_dir("seed");
  const std::string cfg = write_config(d, tiny(0));
  ASSERT_EQ(run({"train", "--config", cfg, "--out", d + "/a"}), 0);
  ASSERT_EQ(run({"train", "--config", cfg, "--out", d + "/b", "--seed", "9"}), 0);
  EXPECT_NE(slurp(d + "/a/checkpoint.ckpt"), slurp(d + "/b/checkpoint.ckpt"));
}

TEST(Cli, TrainRowCountAndIdempotence) {
  const std::string d = fresh_dir("rows");
  const std::string cfg = write_config(d, tiny(15));
  ASSERT_EQ(run({"train", "--config", cfg, "--out", d + "/run"}), 0);
  const std::string first = slurp(d + "/run/metrics.csv");
  EXPECT_EQ(lines(first).size(), 1u + 15 / 5 + 1);
  const std::string ckpt = slurp(d + "/run/checkpoint.ckpt");
  ASSERT_EQ(run({"train", "--config", cfg, "--out", d + "/run"}), 0);
  EXPECT_EQ(slurp(d + "/run/metrics.csv"), first);
  EXPECT_EQ(slurp(d + "/run/checkpoint.ckpt"), ckpt);
}

TEST(Cli, DefaultConfigSmoke) {
  // Default sizes, 16x16, 100 steps.
  const std::string d = fresh_dir("default");
  const std::string cfg = write_config(d, R"({"train": {"steps": 100, "eval_every": 50}})");
  ASSERT_EQ(run({"train", "--config", cfg, "--out", d}), 0);
  const auto rows = lines(slurp(d + "/metrics.csv"));
  ASSERT_EQ(rows.size(), 1u + 100 / 50 + 1);
  EXPECT_EQ(rows[0], metrics_header());
  for (std::size_t i = 1; i < rows.size(); ++i) {
    EXPECT_EQ(rows[i].find("nan"), std::string::npos);
    EXPECT_EQ(rows[i].find("inf"), std::string::npos);
  }
}

TEST(Cli, NonFiniteLossExitsTwo) {
  const std::string d = fresh_dir("nan");
  std::string body = tiny(5);
  body.replace(body.find("\"batch\""), 0, "\"lr\": 1e300, ");
  EXPECT_EQ(run({"train", "--config", write_config(d, body), "--out", d + "/run"}),
            cli::kNumeric);
  EXPECT_TRUE(fs::exists(d + "/run/nan_dump.txt"));
}

TEST(Cli, GradcheckPassesAndIsReproducible) {
  ::testing::internal::CaptureStdout();
  EXPECT_EQ(run({"gradcheck", "--scope", "ops", "--seed", "4"}), 0);
  const std::string a = ::testing::internal::GetCapturedStdout();
  ::testing::internal::CaptureStdout();
  EXPECT_EQ(run({"gradcheck", "--scope", "ops", "--seed", "4"}), 0);
  const std::string b = ::testing::internal::GetCapturedStdout();
  EXPECT_EQ(a, b);
  const auto rows = lines(a);
  ASSERT_EQ(rows.size(), 7u);
  EXPECT_EQ(rows[0], "op_name,max_rel_err");
  EXPECT_EQ(rows[1].rfind("conv2d,", 0), 0u);
}

TEST(Cli, CorruptedGradientExitsThree) {
  cli::Args a;
  a.scope = "ops";
  ::testing::internal::CaptureStdout();
  ::testing::internal::CaptureStderr();
  EXPECT_EQ(cli::gradcheck(a, "deform_conv2d"), cli::kGradcheck);
  ::testing::internal::GetCapturedStdout();
  EXPECT_NE(::testing::internal::GetCapturedStderr().find("deform_conv2d"), std::string::npos);
}

TEST(Cli, AblateFreshCheckpoint) {
  const std::string d = fresh_dir("ablate");
  const std::string ckpt = fresh_checkpoint(d);
  ::testing::internal::CaptureStdout();
  ASSERT_EQ(run({"ablate-offsets", "--checkpoint", ckpt, "--n", "48", "--out", d + "/abl"}), 0);
  const auto out = lines(::testing::internal::GetCapturedStdout());
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[0], "rffd_trained,rffd_zeroed,l2_trained,l2_zeroed");
  double v[4];
  ASSERT_EQ(std::sscanf(out[1].c_str(), "%lf,%lf,%lf,%lf", &v[0], &v[1], &v[2], &v[3]), 4);
  EXPECT_NEAR(v[0], v[1], 1e-12);
  EXPECT_NEAR(v[2], v[3], 1e-12);
  EXPECT_TRUE(fs::exists(d + "/abl/samples_zeroed.ppm"));
  EXPECT_EQ(slurp(d + "/abl/ablation.csv"), out[0] + "\n" + out[1] + "\n");
}

TEST(Cli, AblateContracts) {
  const std::string d = fresh_dir("ablate_bad");
  const std::string ckpt = fresh_checkpoint(d);
  EXPECT_EQ(run({"ablate-offsets", "--checkpoint", ckpt, "--n", "0", "--out", d}), cli::kConfig);
  const std::string plain = fresh_checkpoint(fresh_dir("ablate_plain"), false);
  EXPECT_EQ(run({"ablate-offsets", "--checkpoint", plain, "--out", d}), cli::kCheckpoint);
  EXPECT_EQ(run({"ablate-offsets", "--checkpoint", d + "/none.ckpt", "--out", d}),
            cli::kCheckpoint);
}

TEST(Cli, DumpOffsets) {
  const std::string d = fresh_dir("dump");
  const std::string ckpt = fresh_checkpoint(d);
  ASSERT_EQ(run({"dump-offsets", "--checkpoint", ckpt, "--layer", "gen.b8.conv0", "--seed", "3",
                 "--out", d + "/a"}),
            0);
  ASSERT_EQ(run({"dump-offsets", "--checkpoint", ckpt, "--layer", "gen.b8.conv0", "--seed", "3",
                 "--out", d + "/b"}),
            0);
  const std::string csv = slurp(d + "/a/offsets.csv");
  EXPECT_EQ(csv, slurp(d + "/b/offsets.csv"));
  EXPECT_EQ(slurp(d + "/a/offsets_tap4.ppm"), slurp(d + "/b/offsets_tap4.ppm"));
  const auto rows = lines(csv);
  ASSERT_EQ(rows.size(), 1u + 9 * 8 * 8);
  EXPECT_EQ(rows[0], "batch,tap,y,x,dy,dx");
  for (std::size_t i = 1; i < rows.size(); ++i)
    EXPECT_EQ(rows[i].substr(rows[i].size() - 4), ",0,0") << rows[i];
  EXPECT_EQ(run({"dump-offsets", "--checkpoint", ckpt, "--layer", "gen.b16.conv0", "--out", d}),
            cli::kCheckpoint);
  EXPECT_EQ(run({"dump-offsets", "--checkpoint", ckpt, "--layer", "gen.b8.conv1", "--out", d}),
            cli::kCheckpoint);
}

TEST(Cli, GenDataIsIdempotent) {
  const std::string d = fresh_dir("gen");
  ASSERT_EQ(run({"gen-data", "--n", "5", "--seed", "2", "--out", d}), 0);
  const std::string poses = slurp(d + "/poses.csv");
  const std::string img = slurp(d + "/img_000004.ppm");
  EXPECT_EQ(lines(poses).size(), 6u);
  ASSERT_EQ(run({"gen-data", "--n", "5", "--seed", "2", "--out", d}), 0);
  EXPECT_EQ(slurp(d + "/poses.csv"), poses);
  EXPECT_EQ(slurp(d + "/img_000004.ppm"), img);
  EXPECT_EQ(img.substr(0, 12), "P6\n16 16\n255");
}

TEST(Cli, GenDataVideo) {
  const std::string d = fresh_dir("genv");
  const std::string cfg = write_config(d, R"({"data": {"video": true, "frames": 3}})");
  ASSERT_EQ(run({"gen-data", "--config", cfg, "--n", "2", "--out", d}), 0);
  EXPECT_TRUE(fs::exists(d + "/clip_000001_f02.ppm"));
  EXPECT_EQ(lines(slurp(d + "/poses.csv")).size(), 7u);
}

TEST(Cli, SampleAndMetrics) {
  const std::string d = fresh_dir("sample");
  const std::string ckpt = fresh_checkpoint(d);
  ASSERT_EQ(run({"sample", "--checkpoint", ckpt, "--n", "3", "--out", d + "/s"}), 0);
  EXPECT_TRUE(fs::exists(d + "/s/sample_0002.ppm"));
  EXPECT_TRUE(fs::exists(d + "/s/samples.ppm"));
  ::testing::internal::CaptureStdout();
  ASSERT_EQ(run({"metrics", "--checkpoint", ckpt, "--n", "40"}), 0);
  const auto out = lines(::testing::internal::GetCapturedStdout());
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].rfind(ckpt + ",held_out,40,512,", 0), 0u);
  EXPECT_EQ(run({"metrics", "--checkpoint", ckpt, "--n", "8"}), cli::kConfig);
}

TEST(Cli, BenchCountsIncrease) {
  const std::string d = fresh_dir("bench");
  const std::string cfg = write_config(d, R"({"generator": {"resolution": 32, "channels": 4,
    "d_channels": 4, "z_dim": 4, "w_dim": 4}, "train": {"batch": 2, "eval_samples": 32},
    "data": {"n": 32, "held_out": 32}})");
  ::testing::internal::CaptureStdout();
  ASSERT_EQ(run({"bench", "--config", cfg, "--out", d}), 0);
  const auto out = lines(::testing::internal::GetCapturedStdout());
  ASSERT_EQ(out.size(), 5u);
  EXPECT_EQ(out[0], "groups,ms_per_step,param_count");
  long prev = -1;
  for (int i = 1; i < 5; ++i) {
    const long count = std::stol(out[i].substr(out[i].rfind(',') + 1));
    EXPECT_GT(count, prev);
    prev = count;
  }
  EXPECT_EQ(out[4].substr(0, out[4].find(',')), "low+mid+high");
  EXPECT_TRUE(fs::exists(d + "/bench.csv"));
}
