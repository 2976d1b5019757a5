#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "test_util.hpp"

namespace {

namespace fs = std::filesystem;

struct CliRun {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

class Cli : public ::testing::Test {
 protected:
  testutil::TempDir dir{"cli"};

  CliRun run(const std::string& args, const std::string& env = "") {
    const fs::path err = dir.path() / "stderr.txt";
    const std::string cmd = env + " '" + std::string(GEOMATTN_CLI_PATH) + "' " + args + " 2>'" + err.string() + "'";
    CliRun r;
    FILE* pipe = popen(cmd.c_str(), "r");
    if (!pipe) return r;
    char buf[4096];
    std::size_t n;
    while ((n = fread(buf, 1, sizeof(buf), pipe)) > 0) r.out.append(buf, n);
    const int status = pclose(pipe);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.err = slurp(err);
    return r;
  }

  // Small enough to train in seconds.
  std::string small() const {
    return "--synthetic --ids 8 --set synthetic.images_per_id=8 --set data.image_size=32 "
           "--set arch.stage_widths=8,8,16,16 --set arch.feature_dim=16 --set arch.encoder_widths=8,8,16 "
           "--set arch.ssl_head_width=16";
  }

  std::string path(const std::string& name) const { return "'" + (dir.path() / name).string() + "'"; }
};

std::vector<nlohmann::json> read_jsonl(const fs::path& p) {
  std::vector<nlohmann::json> out;
  std::ifstream in(p);
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(nlohmann::json::parse(line));
  return out;
}

}  // namespace

TEST_F(Cli, GenerateDataWritesManifests) {
  const CliRun r = run("generate-data " + small() + " --out " + path("data"));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j["train"].get<int>(), 32);
  for (const char* f : {"train.csv", "query.csv", "gallery.csv", "landmarks.csv", "config.echo"})
    EXPECT_TRUE(fs::exists(dir.path() / "data" / f)) << f;
}

TEST_F(Cli, TrainEvaluateVisualizeRoundTrip) {
  ASSERT_EQ(run("generate-data " + small() + " --out " + path("data")).code, 0);
  const CliRun t = run("train " + small() + " --epochs 2 --out " + path("run"));
  ASSERT_EQ(t.code, 0) << t.err;
  for (const char* f : {"model.ckpt", "train.log.jsonl", "config.echo"})
    EXPECT_TRUE(fs::exists(dir.path() / "run" / f)) << f;

  const auto log = read_jsonl(dir.path() / "run" / "train.log.jsonl");
  ASSERT_FALSE(log.empty());
  std::vector<std::string> keys;
  for (auto it = log[0].begin(); it != log[0].end(); ++it) keys.push_back(it.key());
  // nlohmann::json sorts keys; the file order is checked on the raw line below.
  EXPECT_EQ(keys.size(), 9u);
  const std::string first_line = slurp(dir.path() / "run" / "train.log.jsonl").substr(0, 200);
  EXPECT_LT(first_line.find("\"epoch\""), first_line.find("\"L_tri_gb\""));
  EXPECT_LT(first_line.find("\"L_rot\""), first_line.find("\"total\""));
  EXPECT_EQ(log.back()["epoch"].get<int>(), 1);

  // Evaluation on the written manifests, which carry track ids.
  const CliRun e = run("evaluate --checkpoint " + path("run/model.ckpt") + " --data " + path("data") +
                    " --per-query-csv " + path("pq.csv"));
  ASSERT_EQ(e.code, 0) << e.err;
  const auto m = nlohmann::json::parse(e.out);
  EXPECT_TRUE(m.contains("imAP"));
  EXPECT_TRUE(m.contains("tmAP"));
  EXPECT_EQ(m["cmc"].size(), 50u);
  EXPECT_TRUE(fs::exists(dir.path() / "run" / "metrics.json"));
  EXPECT_TRUE(fs::exists(dir.path() / "pq.csv"));

  // Stripping the track column removes tmAP and warns.
  {
    std::ifstream in(dir.path() / "data" / "gallery.csv");
    std::ofstream out(dir.path() / "data" / "gallery_notrack.csv");
    std::string line;
    bool header = true;
    while (std::getline(in, line)) {
      if (header) {
        out << "path,identity,camera\n";
        header = false;
        continue;
      }
      out << line.substr(0, line.rfind(',')) << '\n';
    }
  }
  const CliRun n = run("evaluate --checkpoint " + path("run/model.ckpt") + " --query " + path("data/query.csv") +
                    " --gallery " + path("data/gallery_notrack.csv") + " --out " + path("m2.json"));
  ASSERT_EQ(n.code, 0) << n.err;
  EXPECT_FALSE(nlohmann::json::parse(n.out).contains("tmAP"));
  EXPECT_NE(n.err.find("warning"), std::string::npos);

  const CliRun v = run("visualize-attention --checkpoint " + path("run/model.ckpt") + " --manifest " +
                    path("data/query.csv") + " --out " + path("att"));
  ASSERT_EQ(v.code, 0) << v.err;
  const auto vj = nlohmann::json::parse(v.out);
  const std::string name = vj["images"][0].get<std::string>();
  for (const std::string suffix : {".mask.pgm", ".mask.gatn", ".overlay.ppm", ".rot90.overlay.ppm"})
    EXPECT_TRUE(fs::exists(dir.path() / "att" / (name + suffix))) << suffix;
  EXPECT_GT(vj["rotation_consistency"].get<double>(), 0.0);
}

TEST_F(Cli, ZeroRotationWeightLogsAConstantZero) {
  const CliRun t = run("train " + small() + " --epochs 1 --lambda-rot 0 --out " + path("run"));
  ASSERT_EQ(t.code, 0) << t.err;
  for (const auto& row : read_jsonl(dir.path() / "run" / "train.log.jsonl")) EXPECT_EQ(row["L_rot"].get<double>(), 0.0);
}

TEST_F(Cli, GradcheckReportsEveryCheck) {
  const CliRun r = run("gradcheck");
  const auto j = nlohmann::json::parse(r.out);
  const bool passed = j["passed"].get<bool>();
  EXPECT_EQ(r.code, passed ? 0 : 3) << r.err;
  EXPECT_EQ(passed, j["max_rel_error"].get<double>() < 1e-4);
  EXPECT_LT(j["max_rel_error_above_1e-9_abs"].get<double>(), 1e-4);
  EXPECT_GE(j["checks"].size(), 30u);
}

TEST_F(Cli, ExitCodes) {
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("train --no-such-flag").code, 1);
  const CliRun unknown = run("train --set optim.lr=1 --synthetic");
  EXPECT_EQ(unknown.code, 1);
  EXPECT_NE(unknown.err.find("optim.lr"), std::string::npos);
  const CliRun missing = run("train --data " + path("nowhere"));
  EXPECT_EQ(missing.code, 2);
  EXPECT_NE(missing.err.find("nowhere"), std::string::npos);
  EXPECT_EQ(run("evaluate --checkpoint " + path("none.ckpt") + " --synthetic").code, 2);
}

TEST_F(Cli, DivergenceExitsWithNumericErrorAndDumpsTheBatch) {
  const CliRun r = run("train " + small() + " --epochs 1 --set optim.lr0=1e300 --out " + path("run"));
  EXPECT_EQ(r.code, 3) << r.err;
  EXPECT_TRUE(fs::exists(dir.path() / "run" / "failed_batch.gatn"));
}

TEST_F(Cli, SeedFromEnvironmentIsEchoed) {
  ASSERT_EQ(run("generate-data " + small() + " --out " + path("d"), "GEOMATTN_SEED=123").code, 0);
  EXPECT_NE(slurp(dir.path() / "d" / "config.echo").find("seed = 123"), std::string::npos);
}
