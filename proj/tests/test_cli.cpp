#include <gtest/gtest.h>
#include <sys/wait.h>

#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "acffnet/acffnet.hpp"
#include "oracles.hpp"

using namespace acff;
namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  for (std::string l; std::getline(in, l);)
    if (!l.empty()) out.push_back(l);
  return out;
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = oracle::temp_dir("cli");
    ASSERT_EQ(run("synth --out " + (dir_ / "data").string() + " --per-class 10 --size 32").code, 0);
    ASSERT_EQ(run("train --data " + data() + " --out " + weights() +
                  " --input 32 --epochs 1 --batch 5 --iterations 2 --lr 0.01")
                  .code,
              0);
  }

  static CliRun run(const std::string& args, const std::string& env = "") {
    const fs::path o = dir_ / "stdout.txt", e = dir_ / "stderr.txt";
    const std::string cmd = env + " '" + std::string(ACFFNET_CLI) + "' " + args + " >'" + o.string() + "' 2>'" +
                            e.string() + "'";
    const int status = std::system(cmd.c_str());
    CliRun r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(o);
    r.err = slurp(e);
    return r;
  }

  static std::string data() { return (dir_ / "data").string(); }
  static std::string weights() { return (dir_ / "m.acff").string(); }
  static std::string image(const char* cls, int i) {
    char f[32];
    std::snprintf(f, sizeof f, "%05d.png", i);
    return (dir_ / "data" / cls / f).string();
  }

  static fs::path dir_;
};

fs::path Cli::dir_;

std::size_t total_params(const CliRun& r) { return nlohmann::json::parse(r.out).at("total").at("params").get<std::size_t>(); }

}  // namespace

TEST_F(Cli, AnalyzeReportsCounts) {
  const CliRun text = run("analyze --fusion add");
  ASSERT_EQ(text.code, 0);
  EXPECT_NE(text.out.find("acff6"), std::string::npos);
  EXPECT_NE(text.out.find("90877"), std::string::npos);
  const std::size_t add = total_params(run("analyze --fusion add --json"));
  EXPECT_LE(std::abs(static_cast<double>(add) - 90892.0) / 90892.0, 0.005);
  EXPECT_GT(total_params(run("analyze --fusion concat --json")), add);
  const std::size_t standard = total_params(run("analyze --baseline standard --json"));
  for (const char* other : {"--fusion concat", "--fusion max", "--baseline depthwise-separable",
                            "--baseline spatially-separable"})
    EXPECT_GT(standard, total_params(run(std::string("analyze --json ") + other))) << other;
}

TEST_F(Cli, UsageErrorsExitOneWithOneLine) {
  for (const char* args : {"", "analyze --fusion sum", "analyze --classes 1", "frobnicate",
                           "explain --weights /nonexistent --image x --out y", "eval --data /nonexistent"}) {
    const CliRun r = run(args);
    EXPECT_EQ(r.code, 1) << args;
    EXPECT_EQ(lines(r.err).size(), 1u) << args << ": " << r.err;
  }
}

TEST_F(Cli, TrainWritesCheckpointAndLog) {
  EXPECT_TRUE(fs::exists(weights()));
  EXPECT_EQ(lines(slurp(weights() + ".log.tsv")).size(), 2u);
  const auto g = load_weights(weights());
  EXPECT_EQ(g.input_shape(), (Shape{1, 3, 32, 32}));
  EXPECT_EQ(g.labels(), default_class_names());
}

TEST_F(Cli, EpochsZeroWritesInitializedCheckpoint) {
  const std::string out = (dir_ / "init.acff").string();
  ASSERT_EQ(run("train --data " + data() + " --out " + out + " --input 32 --epochs 0").code, 0);
  ModelRecipe r;
  r.input = 32;
  auto fresh = build_emergencynet<float>(r);
  initialize(fresh, 42);
  const auto g = load_weights(out);
  for (std::size_t i = 0; i < g.params().size(); ++i)
    EXPECT_EQ(oracle::max_abs_diff(g.params()[i].value, fresh.params()[i].value), 0.0) << g.params()[i].name;
  EXPECT_EQ(lines(slurp(out + ".log.tsv")).size(), 1u);
}

TEST_F(Cli, SameSeedGivesIdenticalHistory) {
  std::string logs[2];
  for (int k = 0; k < 2; ++k) {
    const std::string out = (dir_ / ("rerun" + std::to_string(k) + ".acff")).string();
    ASSERT_EQ(run("--seed 7 train --data " + data() + " --out " + out +
                      " --input 32 --epochs 2 --batch 5 --iterations 2 --lr 0.01",
                  "ACFF_THREADS=1")
                  .code,
              0);
    logs[k] = slurp(out + ".log.tsv");
  }
  EXPECT_EQ(lines(logs[0]).size(), 3u);
  EXPECT_EQ(logs[0], logs[1]);
}

TEST_F(Cli, EvalRowSumsMatchTestCounts) {
  const CliRun r = run("eval --data " + data() + " --weights " + weights() + " --json");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  const auto idx = index_dataset(data());
  const auto& rows = j.at("confusion");
  ASSERT_EQ(rows.size(), 5u);
  for (std::size_t k = 0; k < 5; ++k) {
    std::size_t sum = 0;
    for (const auto& v : rows[k]) sum += v.get<std::size_t>();
    EXPECT_EQ(sum, idx.count(Split::test, k));
  }
  const double f1 = j.at("mean_f1").get<double>();
  EXPECT_GE(f1, 0.0);
  EXPECT_LE(f1, 1.0);
  const CliRun text = run("eval --data " + data() + " --weights " + weights() + " --split val");
  EXPECT_EQ(text.code, 0);
  EXPECT_NE(text.out.find("val split, 10 images"), std::string::npos) << text.out;
}

TEST_F(Cli, ClassifyOneLinePerImageInOrder) {
  const CliRun one = run("classify --weights " + weights() + " " + image("flood", 3));
  ASSERT_EQ(one.code, 0) << one.err;
  const auto l = lines(one.out);
  ASSERT_EQ(l.size(), 1u);
  EXPECT_EQ(l[0].rfind(image("flood", 3), 0), 0u);
  const double p = std::stod(l[0].substr(l[0].rfind('\t') + 1));
  EXPECT_GT(p, 0.0);
  EXPECT_LE(p, 1.0);

  const CliRun many = run("classify --weights " + weights() + " " + (dir_ / "data" / "normal").string());
  const auto m = lines(many.out);
  ASSERT_EQ(m.size(), 10u);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(m[i].rfind(image("normal", i), 0), 0u) << m[i];

  const CliRun smooth = run("classify --smooth --json --weights " + weights() + " " + (dir_ / "data" / "fire_smoke").string());
  ASSERT_EQ(smooth.code, 0) << smooth.err;
  EXPECT_EQ(nlohmann::json::parse(smooth.out).size(), 10u);
}

TEST_F(Cli, ClassifyTiledGivesFourTilesAndAggregate) {
  std::mt19937_64 rng(81);
  const std::string big = (dir_ / "big.png").string();
  write_png(big, oracle::random_tensor<float>(Shape{1, 3, 64, 64}, rng, 0, 255));
  const CliRun r = run("classify --tiled --weights " + weights() + " " + big);
  ASSERT_EQ(r.code, 0) << r.err;
  const auto l = lines(r.out);
  ASSERT_EQ(l.size(), 5u);
  for (int i = 0; i < 4; ++i) EXPECT_NE(l[i].find("\ttile "), std::string::npos);
  EXPECT_NE(l[4].find("\taggregate\t"), std::string::npos);
}

TEST_F(Cli, ClassifyUnreadableImageIsRuntimeError) {
  const std::string bad = (dir_ / "bad.png").string();
  std::ofstream(bad) << "not an image";
  const CliRun r = run("classify --weights " + weights() + " " + bad);
  EXPECT_EQ(r.code, 2);
  EXPECT_EQ(lines(r.err).size(), 1u);
}

TEST_F(Cli, BenchReportsReciprocalFps) {
  const CliRun r = run("bench --input 32 --iterations 7 --warmup 3 --json");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j.at("samples").get<std::size_t>(), 7u);
  EXPECT_NEAR(j.at("fps").get<double>() * j.at("mean_ms").get<double>() / 1e3, 1.0, 1e-9);
  EXPECT_EQ(run("bench --weights " + weights() + " --iterations 2").code, 0);
  EXPECT_EQ(run("bench --iterations 0").code, 1);
}

TEST_F(Cli, ExplainWritesMapsMatchingInput) {
  std::mt19937_64 rng(82);
  const std::string in = (dir_ / "odd.png").string();
  write_png(in, oracle::random_tensor<float>(Shape{1, 3, 40, 56}, rng, 0, 255));
  for (const char* method : {"gradcam", "activation"}) {
    const std::string out = (dir_ / (std::string(method) + ".png")).string();
    const CliRun r = run("explain --raw --method " + std::string(method) + " --weights " + weights() + " --image " + in +
                      " --out " + out);
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(decode_image(out).shape(), (Shape{1, 3, 40, 56}));
  }
  const std::string overlay = (dir_ / "overlay.png").string();
  EXPECT_EQ(run("explain --class 2 --weights " + weights() + " --image " + in + " --out " + overlay).code, 0);
  EXPECT_EQ(decode_image(overlay).shape(), (Shape{1, 3, 40, 56}));
  EXPECT_EQ(run("explain --method lime --weights " + weights() + " --image " + in + " --out x.png").code, 1);
}

TEST_F(Cli, FailuresLeaveNoArtifact) {
  const std::string corrupt = (dir_ / "corrupt.acff").string();
  auto bytes = detail::read_file(weights());
  bytes[bytes.size() / 2] ^= 1;
  std::ofstream(corrupt, std::ios::binary).write(reinterpret_cast<const char*>(bytes.data()),
                                                 static_cast<std::streamsize>(bytes.size()));
  const std::string out = (dir_ / "never.png").string();
  const CliRun r = run("explain --weights " + corrupt + " --image " + image("flood", 0) + " --out " + out);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("CRC"), std::string::npos);
  EXPECT_FALSE(fs::exists(out));

  const std::string diverged = (dir_ / "diverged.acff").string();
  const CliRun t = run("train --data " + data() + " --out " + diverged + " --input 32 --epochs 1 --batch 5 --iterations 2 --lr 1e30");
  EXPECT_EQ(t.code, 2);
  EXPECT_FALSE(fs::exists(diverged));
}

TEST_F(Cli, SeedDrivesSynthesis) {
  const auto a = dir_ / "s1", b = dir_ / "s2", c = dir_ / "s3";
  for (const auto& [p, seed] : {std::pair{a, 1}, std::pair{b, 1}, std::pair{c, 2}})
    ASSERT_EQ(run("--seed " + std::to_string(seed) + " synth --out " + p.string() + " --per-class 1 --size 16").code, 0);
  const auto f = fs::path("flood") / "00000.png";
  EXPECT_EQ(detail::read_file(a / f), detail::read_file(b / f));
  EXPECT_NE(detail::read_file(a / f), detail::read_file(c / f));
}
