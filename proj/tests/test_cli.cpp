#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <sstream>

#include "caap/io.hpp"
#include "cli.hpp"

using namespace caap;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run_cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

// Every test runs in a fresh directory holding a seed-7 model and a planted image.
class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    home_ = fs::current_path();
    root_ = fs::temp_directory_path() /
            ("caap_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(root_);
    fs::create_directories(root_);
    fs::current_path(root_);
    unsetenv("CAAP_THREADS");
    ASSERT_EQ(run_cli({"gen-model", "--seed", "7", "--out", "m.vitw"}).code, 0);
    ASSERT_EQ(run_cli({"gen-planted", "--model", "m.vitw", "--patch", "5", "--out", "x.png", "--mask-out", "mask.png"}).code,
              0);
  }
  void TearDown() override {
    fs::current_path(home_);
    fs::remove_all(root_);
  }

  // Runs `args` inside a fresh subdirectory that sees the shared inputs via "../".
  std::string in_subdir(const std::string& name, std::vector<std::string> args, const std::string& output) {
    fs::create_directories(root_ / name);
    fs::current_path(root_ / name);
    const Result r = run_cli(args);
    EXPECT_EQ(r.code, 0) << r.err;
    const std::string bytes = read_file(output);
    fs::current_path(root_);
    return bytes;
  }

  fs::path home_, root_;
};

}  // namespace

TEST_F(CliTest, NaiveAndParallelMapsAgree) {
  ASSERT_EQ(run_cli({"attribute", "--model", "m.vitw", "--image", "x.png", "--mode", "naive", "--out", "n.json"}).code, 0);
  ASSERT_EQ(run_cli({"attribute", "--model", "m.vitw", "--image", "x.png", "--mode", "parallel", "--out", "p.json"}).code,
            0);
  const MapFile n = read_map_file("n.json"), p = read_map_file("p.json");
  EXPECT_LE((n.map.scores - p.map.scores).cwiseAbs().maxCoeff(), 1e-5f);
  EXPECT_EQ(n.run_config["mode"], "naive");
  EXPECT_EQ(n.run_config["layers"], Json::array({1, 4}));
  EXPECT_EQ(n.map.class_id, 2);  // predicted class of the planted image
}

TEST_F(CliTest, EvalOnMapEqualToMaskIsPerfect) {
  AttributionMap m;
  m.grid = 4;
  m.scores = VectorF::Zero(16);
  m.scores(5) = 1.0f;
  write_map_file("mask_map.json", MapFile{m, Json::object()});
  const Result r = run_cli({"eval", "--map", "mask_map.json", "--mask", "mask.png", "--metrics", "aupr,pg", "--out", "r.txt"});
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string text = read_file("r.txt");
  EXPECT_NE(text.find("\naupr1=1\n"), std::string::npos) << text;
  EXPECT_NE(text.find("\npg_hit=1\n"), std::string::npos) << text;
}

TEST_F(CliTest, EvalWritesCurvesAndJson) {
  ASSERT_EQ(run_cli({"attribute", "--model", "m.vitw", "--image", "x.png", "--out", "p.json"}).code, 0);
  const Result r = run_cli({"eval", "--map", "p.json", "--model", "m.vitw", "--image", "x.png", "--json", "r.json",
                            "--del-curve", "d.csv", "--ins-curve", "i.csv"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("ins_minus_del="), std::string::npos);
  const Json j = read_json_file("r.json");
  EXPECT_DOUBLE_EQ(j["metrics"]["ins_minus_del"].get<double>(),
                   j["metrics"]["ins_auc"].get<double>() - j["metrics"]["del_auc"].get<double>());
  const std::string csv = read_file("d.csv");
  EXPECT_EQ(csv.substr(0, 13), "# run_config ");
  EXPECT_NE(csv.find("\nfraction,score\n"), std::string::npos);
}

TEST_F(CliTest, AblateBlankHasFiveRows) {
  ASSERT_EQ(run_cli({"ablate", "--model", "m.vitw", "--image", "x.png", "--axis", "blank", "--out", "a.csv"}).code, 0);
  const std::string csv = read_file("a.csv");
  for (const char* kind : {"black", "white", "mean", "noisy", "blurnoisy"}) {
    EXPECT_NE(csv.find(std::string("\nblank,") + kind + ","), std::string::npos) << kind;
  }
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 1 + 5);
  ASSERT_EQ(run_cli({"ablate", "--model", "m.vitw", "--image", "x.png", "--axis", "layers", "--out", "l.csv"}).code, 0);
  EXPECT_NE(read_file("l.csv").find("\nlayers,1..6,"), std::string::npos);
}

TEST_F(CliTest, AttnStatsCsv) {
  ASSERT_EQ(run_cli({"attn-stats", "--model", "m.vitw", "--image", "x.png", "--mask", "mask.png", "--out", "s.csv"}).code, 0);
  EXPECT_NE(read_file("s.csv").find("\nlayer,intra,inter,obj_bg,gap\n1,"), std::string::npos);
}

TEST_F(CliTest, OutputsIgnoreThreadCountAndReruns) {
  const std::vector<std::vector<std::string>> commands{
      {"attribute", "--model", "../m.vitw", "--image", "../x.png", "--mode", "naive", "--out", "o", "--heatmap", "h"},
      {"attribute", "--model", "../m.vitw", "--image", "../x.png", "--mode", "approx", "--out", "o"},
      {"ablate", "--model", "../m.vitw", "--image", "../x.png", "--axis", "select", "--mask", "../mask.png", "--out", "o"},
  };
  int k = 0;
  for (auto args : commands) {
    auto one = args, eight = args;
    one.insert(one.end(), {"--threads", "1"});
    eight.insert(eight.end(), {"--threads", "8"});
    const std::string a = in_subdir("a" + std::to_string(k), one, "o");
    const std::string b = in_subdir("b" + std::to_string(k), eight, "o");
    const std::string c = in_subdir("a" + std::to_string(k), one, "o");
    EXPECT_EQ(a, b) << args[0];
    EXPECT_EQ(a, c) << args[0];
    ++k;
  }
}

TEST_F(CliTest, ConfigFilePrecedence) {
  write_file("cfg.json", R"({"mode": "naive", "select": "nopad", "layers": "2..3", "threads": 2})");
  ASSERT_EQ(run_cli({"attribute", "--config", "cfg.json", "--model", "m.vitw", "--image", "x.png", "--select", "box2",
                     "--out", "p.json"})
                .code,
            0);
  const MapFile f = read_map_file("p.json");
  EXPECT_EQ(f.map.mode, AttributionMode::kNaive);
  EXPECT_EQ(f.map.select, SelectionOp::box(2));
  EXPECT_EQ(f.map.range, (LayerRange{2, 3}));
}

TEST_F(CliTest, ThreadsFallBackToEnvironment) {
  setenv("CAAP_THREADS", "0", 1);
  EXPECT_EQ(run_cli({"attribute", "--model", "m.vitw", "--image", "x.png", "--out", "p.json"}).code, cli::kExitConfig);
  EXPECT_EQ(run_cli({"attribute", "--model", "m.vitw", "--image", "x.png", "--out", "p.json", "--threads", "3"}).code, 0);
  setenv("CAAP_THREADS", "4", 1);
  EXPECT_EQ(run_cli({"attribute", "--model", "m.vitw", "--image", "x.png", "--out", "p.json"}).code, 0);
  unsetenv("CAAP_THREADS");
}

TEST_F(CliTest, ExitCodes) {
  const std::vector<std::string> base{"attribute", "--model", "m.vitw", "--image", "x.png", "--out", "p.json"};
  auto with = [&](std::vector<std::string> extra) {
    auto args = base;
    args.insert(args.end(), extra.begin(), extra.end());
    return run_cli(args);
  };
  EXPECT_EQ(run_cli({"--help"}).code, cli::kExitOk);
  EXPECT_EQ(run_cli({}).code, cli::kExitUsage);
  EXPECT_EQ(with({"--frobnicate"}).code, cli::kExitUsage);
  EXPECT_EQ(run_cli({"attribute", "--model", "m.vitw", "--image", "x.png"}).code, cli::kExitUsage);
  EXPECT_EQ(run_cli({"attribute", "--model", "none.vitw", "--image", "x.png", "--out", "p.json"}).code, cli::kExitIo);
  write_file("bad.vitw", "VITW1\nxx");
  EXPECT_EQ(run_cli({"attribute", "--model", "bad.vitw", "--image", "x.png", "--out", "p.json"}).code, cli::kExitFormat);
  EXPECT_EQ(with({"--layers", "1..7"}).code, cli::kExitConfig);
  EXPECT_EQ(with({"--class", "9"}).code, cli::kExitConfig);
  save_image("small.png", Image(8, 8, 3, 1.0f));
  EXPECT_EQ(run_cli({"attribute", "--model", "m.vitw", "--image", "small.png", "--out", "p.json"}).code, cli::kExitShape);
  EXPECT_EQ(run_cli({"gen-planted", "--patch", "99", "--out", "y.png"}).code, cli::kExitRange);
  const Result r = with({"--mode", "fast"});
  EXPECT_EQ(r.code, cli::kExitConfig);
  EXPECT_EQ(r.err, "error: kind=config exit=5 message=\"unknown attribution mode 'fast'\"\n");
}
