#include <gtest/gtest.h>

#include <fstream>

#include "mtm/config.hpp"

using namespace mtm;

TEST(Config, DefaultsAreSixteenPixels) {
  const RunConfig c = parse_run_config("{}");
  EXPECT_EQ(c.generator.resolution, 16);
  EXPECT_EQ(c.data.resolution, 16);
  EXPECT_EQ(c.generator.channels, 64);
  EXPECT_EQ(c.train.batch, 16);
  EXPECT_EQ(c.train.lr, 2.5e-3);
  EXPECT_EQ(c.train.beta1, 0.0);
  EXPECT_EQ(c.train.beta2, 0.99);
  EXPECT_EQ(c.train.r1_gamma, 1.0);
  EXPECT_EQ(c.train.ema_decay, 0.995);
  EXPECT_EQ(c.data.n, 2048);
  EXPECT_TRUE(c.generator.mtm_groups.empty());
  EXPECT_TRUE(c.out_dir.empty());
}

TEST(Config, ReadsEverySection) {
  const RunConfig c = parse_run_config(R"({
    "generator": {"resolution": 32, "channels": 32, "mtm_groups": ["low", "mid"], "z_dim": 16},
    "train": {"steps": 100, "lr": 0.001, "seed": 18446744073709551615, "r1_every": 4},
    "data": {"n": 64, "seed": 7, "held_out": 32},
    "out_dir": "runs/x"})");
  EXPECT_EQ(c.generator.resolution, 32);
  EXPECT_EQ(c.data.resolution, 32);
  EXPECT_EQ(c.generator.channels, 32);
  EXPECT_EQ(c.generator.mtm_groups, (std::set<std::string>{"low", "mid"}));
  EXPECT_EQ(c.generator.z_dim, 16);
  EXPECT_EQ(c.train.steps, 100);
  EXPECT_EQ(c.train.lr, 0.001);
  EXPECT_EQ(c.train.seed, 18446744073709551615ULL);
  EXPECT_EQ(c.train.r1_every, 4);
  EXPECT_EQ(c.data.n, 64);
  EXPECT_EQ(c.data.seed, 7u);
  EXPECT_EQ(c.out_dir, "runs/x");
}

TEST(Config, SharedVideoSettingsPropagate) {
  const RunConfig c = parse_run_config(R"({"train": {"video_mode": true, "frames": 3}})");
  EXPECT_TRUE(c.generator.video);
  EXPECT_TRUE(c.data.video);
  EXPECT_EQ(c.generator.frames, 3);
  EXPECT_EQ(c.data.frames, 3);
}

TEST(Config, RejectsUnknownKeys) {
  EXPECT_THROW(parse_run_config(R"({"trian": {}})"), ConfigError);
  EXPECT_THROW(parse_run_config(R"({"train": {"step": 3}})"), ConfigError);
  EXPECT_THROW(parse_run_config(R"({"generator": {"mtm_group": ["low"]}})"), ConfigError);
  EXPECT_THROW(parse_run_config(R"({"data": {"sed": 1}})"), ConfigError);
}

TEST(Config, RejectsBadValues) {
  EXPECT_THROW(parse_run_config("{"), ConfigError);
  EXPECT_THROW(parse_run_config("[]"), ConfigError);
  EXPECT_THROW(parse_run_config(R"({"train": {"steps": "10"}})"), ConfigError);
  EXPECT_THROW(parse_run_config(R"({"train": {"steps": 1.5}})"), ConfigError);
  EXPECT_THROW(parse_run_config(R"({"train": {"seed": -1}})"), ConfigError);
  EXPECT_THROW(parse_run_config(R"({"train": {"r1_every": 0}})"), ConfigError);
  EXPECT_THROW(parse_run_config(R"({"train": []})"), ConfigError);
  EXPECT_THROW(parse_run_config(R"({"generator": {"mtm_groups": ["top"]}})"), ConfigError);
  EXPECT_THROW(parse_run_config(R"({"generator": {"mtm_groups": ["low", "low"]}})"), ConfigError);
  EXPECT_THROW(parse_run_config(R"({"generator": {"resolution": 24}})"), ConfigError);
  EXPECT_THROW(parse_run_config(R"({"out_dir": 3})"), ConfigError);
}

TEST(Config, RejectsConflicts) {
  EXPECT_THROW(parse_run_config(R"({"generator": {"resolution": 32}, "data": {"resolution": 16}})"),
               ConfigError);
  EXPECT_THROW(parse_run_config(R"({"train": {"video_mode": true}, "data": {"video": false}})"),
               ConfigError);
  EXPECT_THROW(parse_run_config(R"({"train": {"frames": 4}, "data": {"frames": 2}})"),
               ConfigError);
}

TEST(Config, MissingFileNamesPath) {
  try {
    load_run_config("/no/such/config.json");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("/no/such/config.json"), std::string::npos);
  }
}
