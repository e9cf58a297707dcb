#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "dacbf/pipeline.hpp"

using namespace dacbf;
namespace fs = std::filesystem;

namespace {

// Small enough to run every stage in seconds.
const char* kTinyConfig = R"([run]
seed = 11
[generation]
samples = 80
[train]
hidden = [8]
members = 2
epochs = 3
checkpoints = 2
[attribution]
rho = 0.10
rho_sweep = [0.0, 0.10]
[certificate]
grid_d = 2
grid_v = 2
grid_theta = 2
sigma_retrains = 2
nn_lipschitz_samples = 200
[bench]
single_runs = 1
include_oracle = false
)";

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("dacbf_" + tag + "_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

fs::path write_config(const fs::path& dir, const std::string& text = kTinyConfig) {
  const auto p = dir / "tiny.toml";
  std::ofstream(p) << text;
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

int cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(DACBF_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int st = std::system(cmd.c_str());
  return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
}

RunContext tiny_context(const fs::path& out) {
  std::istringstream is(kTinyConfig);
  return RunContext(parse_config(is), out, 1);
}

}  // namespace

TEST(Pipeline, AllStagesProduceStampedArtifacts) {
  TempDir t("all");
  const auto ctx = tiny_context(t.path / "run");
  cmd_all(ctx);
  for (const char* a : {artifact::kDataset, artifact::kBaseline, artifact::kTrainLog, artifact::kInfluence,
                        artifact::kCuration, artifact::kRmseTable, artifact::kAblation, artifact::kMetrics,
                        artifact::kCertificate, artifact::kCertGrid, artifact::kClosedLoopJson, artifact::kClosedLoopCsv})
    EXPECT_TRUE(fs::exists(ctx / a)) << a;
  EXPECT_TRUE(fs::exists(ctx.out / artifact::kReport / "summary.json"));
  EXPECT_TRUE(fs::exists(ctx.out / model_file(rho_tag(0.10))));

  const auto rmse = slurp(ctx / artifact::kRmseTable);
  EXPECT_EQ(rmse.rfind("# config_digest=" + ctx.digest, 0), 0u);
  const auto metrics = json::parse(slurp(ctx / artifact::kMetrics));
  EXPECT_EQ(metrics.at("config_digest"), ctx.digest);
  EXPECT_EQ(metrics.at("seed"), 11);
  const auto cl = json::parse(slurp(ctx / artifact::kClosedLoopJson));
  // 3 scenario names x 6 controllers
  EXPECT_EQ(cl.at("rows").size(), 18u);
}

TEST(Pipeline, StagesAreDeterministic) {
  TempDir t("det");
  const auto a = tiny_context(t.path / "a"), b = tiny_context(t.path / "b");
  for (const auto* ctx : {&a, &b}) {
    cmd_generate(*ctx);
    cmd_train(*ctx);
    cmd_attribute(*ctx);
  }
  for (const char* f : {artifact::kDataset, artifact::kBaseline, artifact::kTrainLog, artifact::kInfluence})
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
}

TEST(Pipeline, MissingUpstreamArtifact) {
  TempDir t("missing");
  const auto ctx = tiny_context(t.path);
  EXPECT_THROW(cmd_train(ctx), ArtifactError);
  try {
    cmd_report(ctx);
    FAIL();
  } catch (const ArtifactError& e) {
    EXPECT_NE(std::string(e.what()).find(artifact::kDataset), std::string::npos);
  }
}

TEST(Pipeline, DigestMismatchIsAConfigError) {
  TempDir t("digest");
  cmd_generate(tiny_context(t.path));
  std::istringstream is(std::string(kTinyConfig) + "[selector]\ntau_s = 0.25\n");
  const RunContext other(parse_config(is), t.path, 1);
  EXPECT_THROW(cmd_train(other), DigestMismatch);
}

TEST(Cli, ExitCodes) {
  TempDir t("cli");
  const auto cfg = write_config(t.path);
  const auto log = t.path / "log.txt";
  const auto out = (t.path / "run").string();
  const std::string base = "--config " + cfg.string() + " --out " + out + " ";

  EXPECT_EQ(cli(base + "train", log), kExitArtifact);
  EXPECT_NE(slurp(log).find("artifact error"), std::string::npos);

  EXPECT_EQ(cli(base + "generate", log), kExitOk);
  EXPECT_TRUE(fs::exists(fs::path(out) / artifact::kDataset));
  EXPECT_EQ(cli(base + "--seed 12 train", log), kExitConfig);
  EXPECT_NE(slurp(log).find("does not match"), std::string::npos);
  EXPECT_EQ(cli(base + "train", log), kExitOk);

  EXPECT_EQ(cli(base + "report", log), kExitArtifact);
  EXPECT_NE(slurp(log).find(artifact::kInfluence), std::string::npos);

  const auto bad = t.path / "bad.toml";
  std::ofstream(bad) << "[train]\nunknown_key = 1\n";
  EXPECT_EQ(cli("--config " + bad.string() + " --out " + out + " generate", log), kExitConfig);
  EXPECT_EQ(cli("--out " + out + " nosuchstage", log), kExitConfig);
  EXPECT_EQ(cli("--jobs 0 generate", log), kExitConfig);
  EXPECT_EQ(cli("--help", log), kExitOk);
}

TEST(Cli, TrainingDivergenceIsNumerical) {
  TempDir t("nan");
  std::string text = kTinyConfig;
  text.replace(text.find("epochs = 3"), 10, "epochs = 3\nlr = 1e300");
  const auto cfg = write_config(t.path, text);
  const auto log = t.path / "log.txt";
  const std::string base = "--config " + cfg.string() + " --out " + (t.path / "run").string() + " ";
  ASSERT_EQ(cli(base + "generate", log), kExitOk);
  EXPECT_EQ(cli(base + "train", log), kExitNumerical) << slurp(log);
}
