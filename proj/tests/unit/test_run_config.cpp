#include <gtest/gtest.h>

#include <fstream>

#include "geomattn/error.hpp"
#include "run_config.hpp"
#include "test_util.hpp"

using namespace geomattn;
using namespace geomattn::cli;

TEST(ConfigText, ParsesAssignmentsAndComments) {
  const auto a = parse_config_text("# header\nseed = 3\n\n  optim.lr0=2e-4   # trailing\n", "t.cfg");
  ASSERT_EQ(a.size(), 2u);
  EXPECT_EQ(a[0], (Assignment{"seed", "3"}));
  EXPECT_EQ(a[1], (Assignment{"optim.lr0", "2e-4"}));
}

TEST(ConfigText, ErrorsNameTheLine) {
  try {
    parse_config_text("seed = 1\nnot an assignment\n", "run.cfg");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("run.cfg:2"), std::string::npos) << e.what();
  }
  EXPECT_THROW(parse_assignment("novalue"), ConfigError);
  EXPECT_EQ(parse_assignment("train.p=5"), (Assignment{"train.p", "5"}));
}

TEST(RunConfig, UnknownKeysAndBadValuesAreRejected) {
  EXPECT_THROW(RunConfig::resolve({}, {{"optim.lr", "1e-3"}}), ConfigError);
  EXPECT_THROW(RunConfig::resolve({}, {{"train.p", "four"}}), ConfigError);
  EXPECT_THROW(RunConfig::resolve({}, {{"optim.lr0", "fast"}}), ConfigError);
  EXPECT_THROW(RunConfig::resolve({}, {{"preset", "imagenet"}}), ConfigError);
  EXPECT_THROW(RunConfig::resolve({}, {{"data.synthetic", "maybe"}}), ConfigError);
}

TEST(RunConfig, DeskDefaults) {
  const RunConfig c = RunConfig::resolve({}, {});
  EXPECT_EQ(c.text("preset"), "desk");
  EXPECT_EQ(c.seed(), 7u);
  EXPECT_EQ(c.count("data.image_size"), 64u);
  const OptimConfig o = c.optim();
  EXPECT_DOUBLE_EQ(o.lr0, 1e-4);
  EXPECT_EQ(o.epochs, 30u);
  EXPECT_EQ(c.arch(10).acm_neighborhood, 3u);
  EXPECT_EQ(c.train().p, 4u);
}

TEST(RunConfig, Presets) {
  const RunConfig veri = RunConfig::resolve({}, {{"preset", "veri"}});
  EXPECT_EQ(veri.count("data.image_size"), 256u);
  EXPECT_EQ(veri.arch(5).acm_neighborhood, 7u);
  EXPECT_EQ(veri.optim().milestones, (std::vector<std::size_t>{20, 40, 60}));
  EXPECT_EQ(veri.optim().epochs, 80u);
  EXPECT_EQ(veri.train().p * veri.train().k, 28u);

  const RunConfig vid = RunConfig::resolve({{"preset", "vehicleid"}}, {});
  EXPECT_EQ(vid.optim().schedule, Schedule::warmup_cosine);
  EXPECT_DOUBLE_EQ(vid.optim().margin, 0.7);
  EXPECT_EQ(vid.train().p * vid.train().k, 40u);
  EXPECT_EQ(vid.optim().epochs, 120u);
}

TEST(RunConfig, PrecedenceIsDefaultsPresetFileOverrides) {
  const RunConfig c = RunConfig::resolve({{"preset", "veri"}, {"optim.epochs", "5"}, {"train.k", "3"}},
                                         {{"train.k", "2"}});
  EXPECT_EQ(c.count("data.image_size"), 256u);  // preset
  EXPECT_EQ(c.count("optim.epochs"), 5u);       // file beats preset
  EXPECT_EQ(c.count("train.k"), 2u);            // override beats file
  // An override preset wins over the file's preset, but the file's explicit keys still apply.
  const RunConfig d = RunConfig::resolve({{"preset", "veri"}, {"optim.epochs", "110"}}, {{"preset", "vehicleid"}});
  EXPECT_EQ(d.optim().schedule, Schedule::warmup_cosine);
  EXPECT_EQ(d.count("optim.epochs"), 110u);
}

TEST(RunConfig, EnvironmentSeedIsAFallback) {
  EXPECT_EQ(RunConfig::resolve({}, {}, std::string("11")).seed(), 11u);
  EXPECT_EQ(RunConfig::resolve({{"seed", "3"}}, {}, std::string("11")).seed(), 3u);
  EXPECT_EQ(RunConfig::resolve({}, {{"seed", "4"}}, std::string("11")).seed(), 4u);
  EXPECT_THROW(RunConfig::resolve({}, {}, std::string("x")), ConfigError);
}

TEST(RunConfig, EchoReplaysExactly) {
  testutil::TempDir dir("cfg");
  const RunConfig c = RunConfig::resolve({}, {{"preset", "vehicleid"}, {"optim.lr0", "3.5e-4"}, {"seed", "99"}});
  const std::string echo = c.echo();
  {
    std::ofstream out(dir.path() / "config.echo");
    out << echo;
  }
  const RunConfig replay = RunConfig::resolve(read_config_file(dir.path() / "config.echo"), {});
  EXPECT_EQ(replay.echo(), echo);
  EXPECT_EQ(replay.values(), c.values());
  EXPECT_NE(echo.find("optim.lr0 = 3.5e-4"), std::string::npos);
}

TEST(RunConfig, ConvertsToLibraryConfigs) {
  const RunConfig c = RunConfig::resolve(
      {}, {{"loss.rot", "0"}, {"synthetic.ids", "12"}, {"eval.filter_same_camera", "false"}, {"eval.max_rank", "10"}});
  EXPECT_EQ(c.train().weights.rot, 0.0);
  EXPECT_EQ(c.synthetic().num_identities, 12u);
  EXPECT_FALSE(c.eval().filter_same_camera);
  EXPECT_EQ(c.eval().max_rank, 10u);
  EXPECT_THROW(RunConfig::resolve({}, {{"eval.max_rank", "0"}}).eval(), ConfigError);
}

TEST(RunConfig, MissingConfigFileIsAConfigError) {
  EXPECT_THROW(read_config_file("/nonexistent/run.cfg"), ConfigError);
}
