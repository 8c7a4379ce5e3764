#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "pvc/checkpoint.hpp"

namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code = -1;
  std::string out;
};

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("pvc_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  CliRun run(const std::string& args) const {
    const fs::path log = dir_ / "output.txt";
    const std::string cmd = std::string(PVCNET_PATH) + " " + args + " > " + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    CliRun r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    std::ifstream in(log);
    std::stringstream ss;
    ss << in.rdbuf();
    r.out = ss.str();
    return r;
  }

  fs::path write_config() const {
    const fs::path p = dir_ / "cfg.json";
    std::ofstream(p) << R"({"num_layers":2,"grid_sizes":[4,2],"dilations":[1,2],"K":4,"base_channels":8,"num_classes":3})";
    return p;
  }

  fs::path dir_;
};

}  // namespace

TEST_F(CliTest, GradcheckPassesOnFreshBuild) {
  const auto r = run("gradcheck");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("conv3d"), std::string::npos);
  EXPECT_NE(r.out.find("network"), std::string::npos);
}

TEST_F(CliTest, InjectedConvFaultFailsNamingConv3d) {
  const auto r = run("gradcheck --inject-fault conv3d");
  EXPECT_EQ(r.code, 1) << r.out;
  EXPECT_NE(r.out.find("gradcheck failed: conv3d"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("coordinate"), std::string::npos);
}

TEST_F(CliTest, SinglePrecisionWarnsAdvisory) {
  const auto r = run("gradcheck --precision 32");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("advisory"), std::string::npos);
}

TEST_F(CliTest, MissingDatasetFlagIsUsageError) {
  const auto r = run("train --epochs 1");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("--data"), std::string::npos) << r.out;
}

TEST_F(CliTest, NonexistentDatasetPathNamesTheFlag) {
  const auto r = run("train --data " + (dir_ / "absent").string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("--data"), std::string::npos) << r.out;
}

TEST_F(CliTest, BadConfigIsUsageError) {
  std::ofstream(dir_ / "bad.json") << R"({"grid_sizes":[8,4]})";
  ASSERT_EQ(run("generate --out " + (dir_ / "scenes").string() + " --scenes 1 --points 64").code, 0);
  const auto r = run("train --config " + (dir_ / "bad.json").string() + " --data " + (dir_ / "scenes").string());
  EXPECT_EQ(r.code, 2) << r.out;
  EXPECT_EQ(run("frobnicate").code, 2);
}

TEST_F(CliTest, TrainEvalRoundTrip) {
  const auto scenes = dir_ / "scenes";
  ASSERT_EQ(run("generate --out " + scenes.string() + " --scenes 2 --points 128").code, 0);
  const auto ckpt = dir_ / "m.pvck", csv = dir_ / "log.csv";
  const auto t = run("train --config " + write_config().string() + " --data " + scenes.string() +
                     " --epochs 2 --width 0.5 --seed 7 --checkpoint " + ckpt.string() + " --csv " + csv.string());
  ASSERT_EQ(t.code, 0) << t.out;
  EXPECT_NE(t.out.find("channels 4 8"), std::string::npos) << t.out;
  std::ifstream log(csv);
  std::string header, row;
  std::getline(log, header);
  EXPECT_EQ(header, "epoch,lr,loss,acc,mIoU");
  std::size_t rows = 0;
  while (std::getline(log, row)) ++rows;
  EXPECT_EQ(rows, 2u);
  EXPECT_EQ(pvc::load_checkpoint(ckpt).config().width_multiplier, 0.5);

  const auto e = run("eval --checkpoint " + ckpt.string() + " --data " + scenes.string() + " --per-head");
  EXPECT_EQ(e.code, 0) << e.out;
  EXPECT_NE(e.out.find("mIoU"), std::string::npos);
  EXPECT_NE(e.out.find("head1 accuracy"), std::string::npos);
}

TEST_F(CliTest, DefaultWidthHalfGivesThirtyTwoChannels) {
  const auto scenes = dir_ / "scenes";
  ASSERT_EQ(run("generate --out " + scenes.string() + " --scenes 1 --points 64").code, 0);
  std::ofstream(dir_ / "full.json") << R"({"num_classes":3})";
  const auto r = run("train --config " + (dir_ / "full.json").string() + " --data " + scenes.string() +
                     " --epochs 0 --width 0.5 --checkpoint " + (dir_ / "w.pvck").string() + " --csv " +
                     (dir_ / "w.csv").string());
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("channels 32 64 128 256"), std::string::npos) << r.out;
}

TEST_F(CliTest, NonFiniteTrainingExitsThree) {
  const auto data = dir_ / "huge.csv";
  {
    std::ofstream out(data);
    for (int i = 0; i < 40; ++i) out << i * 0.1 << ',' << (i % 7) * 0.1 << ',' << (i % 3) * 0.1 << ",3e38,3e38,3e38," << i % 3 << '\n';
  }
  const auto r = run("train --config " + write_config().string() + " --data " + data.string() + " --epochs 2 --checkpoint " +
                     (dir_ / "x.pvck").string() + " --csv " + (dir_ / "x.csv").string());
  EXPECT_EQ(r.code, 3) << r.out;
  EXPECT_NE(r.out.find("diverged"), std::string::npos) << r.out;
}

TEST_F(CliTest, BenchReportsEveryRow) {
  const auto csv = dir_ / "bench.csv";
  const auto r = run("bench --config " + write_config().string() + " --widths 0.5 1.0 --sizes 256 512 --runs 20 --warmup 3 --csv " +
                     csv.string());
  EXPECT_EQ(r.code, 0) << r.out;
  std::ifstream in(csv);
  std::string line;
  std::size_t lines = 0;
  while (std::getline(in, line)) ++lines;
  EXPECT_EQ(lines, 5u);
  EXPECT_EQ(run("bench --runs 5").code, 2);
}
