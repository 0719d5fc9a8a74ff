#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "geolab/report.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "geolab_cli_test";

int run_cli(const std::string& args) {
  const std::string cmd = std::string(GEOLAB_CLI) + " " + args + " --quiet > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

fs::path write_config(const std::string& name, const std::string& text) {
  fs::create_directories(kRoot);
  const fs::path p = kRoot / name;
  std::ofstream(p) << text;
  return p;
}

const char* kRigid =
    "task = rigid\ndata.count = 24\ndata.image_size = 16\nmodel.token_strategy = gap\n"
    "train.epochs = 2\ntrain.batch = 8\nsweep.sizes = 8, 4\nsweep.replicates = 2\n";

const char* kStereo =
    "task = fmatrix\ndata.count = 20\ndata.image_size = 16\nstereo.n_points = 40\nmodel.token_strategy = gap\n"
    "train.epochs = 2\ntrain.batch = 4\nsweep.sizes = 8, 4\nsweep.replicates = 2\n";

}  // namespace

TEST(Cli, RepeatedRunsAreByteIdentical) {
  const auto rigid = write_config("rigid.cfg", kRigid), stereo = write_config("stereo.cfg", kStereo);
  const std::vector<std::pair<std::string, std::string>> runs{
      {"sweep", rigid.string()},    {"train", stereo.string()},    {"freeze-study", rigid.string()},
      {"cross-domain", rigid.string()}, {"baseline", stereo.string()}};
  for (const auto& [cmd, cfg] : runs) {
    for (const char* fmt : {"csv", "jsonl"}) {
      std::string bytes[2];
      for (int i = 0; i < 2; ++i) {
        const fs::path out = kRoot / (cmd + "_" + fmt + std::to_string(i));
        fs::remove_all(out);
        ASSERT_EQ(run_cli(cmd + " --config " + cfg + " --seed 7 --threads 1 --format " + fmt + " --out " + out.string()), 0)
            << cmd;
        bytes[i] = slurp(out / (std::string("report.") + fmt));
      }
      EXPECT_FALSE(bytes[0].empty());
      EXPECT_EQ(bytes[0], bytes[1]) << cmd << " " << fmt;
    }
  }
}

TEST(Cli, SeedChangesResults) {
  const auto rigid = write_config("rigid.cfg", kRigid);
  std::string bytes[2];
  for (int i = 0; i < 2; ++i) {
    const fs::path out = kRoot / ("seed" + std::to_string(i));
    ASSERT_EQ(run_cli("train --config " + rigid.string() + " --seed " + std::to_string(i + 1) + " --out " + out.string()), 0);
    bytes[i] = slurp(out / "report.csv");
  }
  EXPECT_NE(bytes[0], bytes[1]);
}

TEST(Cli, GenerateTrainEvaluate) {
  const auto gen = write_config("gen.cfg", kStereo);
  const fs::path data = kRoot / "stereo_data";
  fs::remove_all(data);
  ASSERT_EQ(run_cli("gen-stereo --config " + gen.string() + " --out " + data.string()), 0);
  EXPECT_TRUE(fs::exists(data / "features.geof"));
  EXPECT_TRUE(fs::exists(data / "labels.txt"));

  const auto files = write_config("files.cfg", std::string(kStereo) + "data.source = files\ndata.dir = " + data.string() +
                                                   "\nmodel.backbone = external\n");
  const fs::path run = kRoot / "files_run";
  ASSERT_EQ(run_cli("train --config " + files.string() + " --out " + run.string()), 0);
  for (const char* f : {"last.ckpt", "best.ckpt", "train_log.csv", "report.csv", "timing.csv"})
    EXPECT_TRUE(fs::exists(run / f)) << f;

  const fs::path ev = kRoot / "eval_run";
  ASSERT_EQ(run_cli("eval --config " + files.string() + " --checkpoint " + (run / "last.ckpt").string() + " --out " +
                   ev.string()),
            0);
  const auto train_rows = geolab::load_report((run / "report.csv").string());
  const auto eval_rows = geolab::load_report((ev / "report.csv").string());
  ASSERT_EQ(eval_rows.size(), 1u);
  EXPECT_EQ(eval_rows[0].sed, train_rows[0].sed);  // row 0 is the last checkpoint

  const auto rigid = write_config("rigid.cfg", kRigid);
  EXPECT_EQ(run_cli("eval --config " + rigid.string() + " --checkpoint " + (run / "last.ckpt").string() + " --out " +
                   (kRoot / "mismatch").string()),
            2);
}

TEST(Cli, BaselineOnCorrespondenceFile) {
  const auto gen = write_config("gen.cfg", kStereo);
  const fs::path data = kRoot / "stereo_corrs";
  fs::remove_all(data);
  ASSERT_EQ(run_cli("gen-stereo --config " + gen.string() + " --out " + data.string()), 0);
  const fs::path out = kRoot / "baseline_file";
  ASSERT_EQ(run_cli("baseline --corrs " + (data / "raw" / "0.txt").string() + " --out " + out.string()), 0);
  EXPECT_TRUE(fs::exists(out / "f_estimate.txt"));
  EXPECT_EQ(geolab::load_report((out / "report.csv").string()).size(), 2u);
}

TEST(Cli, ReportMergesAndTests) {
  const fs::path a = kRoot / "rep_a", b = kRoot / "rep_b";
  ASSERT_EQ(run_cli("sweep --config " + write_config("ra.cfg", kRigid).string() + " --out " + a.string()), 0);
  ASSERT_EQ(run_cli("ablation --config " + write_config("rb.cfg", std::string(kRigid)).string() + " --format jsonl --out " +
                   b.string()),
            0);
  const fs::path merged = kRoot / "merged";
  ASSERT_EQ(run_cli("report --in " + (a / "report.csv").string() + " --in " + (b / "report.jsonl").string() +
                   " --format jsonl --out " + merged.string()),
            0);
  const auto rows = geolab::load_report((merged / "report.jsonl").string());
  EXPECT_EQ(rows.size(), geolab::load_report((a / "report.csv").string()).size() +
                             geolab::load_report((b / "report.jsonl").string()).size());

  const fs::path fz = kRoot / "rep_freeze", tt = kRoot / "rep_ttest";
  const auto tiny = write_config("tiny.cfg", std::string(kRigid) + "model.backbone = tiny_conv\nfreeze.depths = 0, 3\n");
  ASSERT_EQ(run_cli("freeze-study --config " + tiny.string() + " --out " + fz.string()), 0);
  ASSERT_EQ(run_cli("report --in " + (fz / "report.csv").string() + " --ttest depth=0,depth=3 --metric l2_px --out " +
                   tt.string()),
            0);
  std::size_t tests = 0;
  for (const auto& r : geolab::load_report((tt / "report.csv").string()))
    if (r.experiment == "t_test") {
      ++tests;
      EXPECT_EQ(r.variant, "depth=0 vs depth=3");
      EXPECT_TRUE(r.t.has_value());
      EXPECT_GE(*r.p, 0.0);
      EXPECT_LE(*r.p, 1.0);
    }
  EXPECT_EQ(tests, 2u);
}

TEST(Cli, ExitCodes) {
  EXPECT_EQ(run_cli("--bogus"), 2);
  EXPECT_EQ(run_cli(""), 2);
  EXPECT_EQ(run_cli("train --config " + write_config("bad.cfg", "task = rigid\nnot_a_key = 1\n").string()), 2);
  EXPECT_EQ(run_cli("train --config " + (kRoot / "missing.cfg").string()), 3);
  const auto files = write_config("nodata.cfg", "task = rigid\ndata.source = files\ndata.dir = " +
                                                    (kRoot / "no_such_dir").string() + "\n");
  EXPECT_EQ(run_cli("train --config " + files.string() + " --out " + (kRoot / "x").string()), 3);
  EXPECT_EQ(run_cli("freeze-study --config " + write_config("deep.cfg", std::string(kRigid) + "freeze.depths = 9\n").string() +
                   " --out " + (kRoot / "y").string()),
            2);
  EXPECT_EQ(run_cli("report --in " + (kRoot / "none.csv").string() + " --out " + (kRoot / "z").string()), 3);
  EXPECT_EQ(run_cli("--help"), 0);
}
