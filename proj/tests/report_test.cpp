#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>
#include <sstream>

#include "geolab/report.hpp"

using namespace geolab;

namespace {

std::vector<ReportRow> sample_rows() {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-1e3, 1e3);
  std::vector<ReportRow> rows;
  for (int i = 0; i < 20; ++i) {
    ReportRow r;
    r.experiment = "sweep";
    r.task = i % 2 ? "rigid" : "fmatrix";
    r.variant = i % 3 ? "depth=1" : "with, comma and \"quote\"";
    r.size = 32u * (i + 1);
    if (i % 4) r.replicate = i % 3;
    r.model = i % 2 ? "last" : "best";
    r.epochs = 100;
    r.trainable_params = 123456789012ULL + i;
    r.loss = u(rng);
    if (i % 2 == 0) r.sed = std::ldexp(u(rng), -40);
    r.ad = 0.1 * i;
    r.l2_px = i == 3 ? -0.0 : u(rng);
    r.angle_mae_deg = i == 5 ? std::numeric_limits<double>::denorm_min() : u(rng);
    r.degenerate = i;
    if (i == 7) r.t = std::numeric_limits<double>::quiet_NaN();
    if (i == 8) r.p = std::numeric_limits<double>::infinity();
    r.note = i == 9 ? "ünïcode" : "";
    r.config_hash = hash_hex(0x1234abcdULL * (i + 1));
    rows.push_back(r);
  }
  return rows;
}

void expect_same(const std::vector<ReportRow>& a, const std::vector<ReportRow>& b) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    ReportRow x = a[i], y = b[i];
    // NaN never compares equal; check it separately.
    if (x.t && std::isnan(*x.t)) {
      ASSERT_TRUE(y.t && std::isnan(*y.t));
      x.t = y.t = 0.0;
    }
    EXPECT_TRUE(x == y) << "row " << i;
    if (x.l2_px && *x.l2_px == 0.0) EXPECT_EQ(std::signbit(*x.l2_px), std::signbit(*y.l2_px));
  }
}

}  // namespace

TEST(Report, EmptyRunListIsHeaderOnly) {
  const std::string csv = report_text({}, ReportFormat::Csv);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1);
  EXPECT_EQ(csv.rfind("experiment,task,variant,size,replicate,stat,", 0), 0u);
  const std::string jsonl = report_text({}, ReportFormat::Jsonl);
  EXPECT_EQ(std::count(jsonl.begin(), jsonl.end(), '\n'), 1);
  std::istringstream a(csv), b(jsonl);
  EXPECT_TRUE(read_csv(a).empty());
  EXPECT_TRUE(read_jsonl(b).empty());
}

TEST(Report, RoundTripIsExact) {
  const auto rows = sample_rows();
  for (auto f : {ReportFormat::Csv, ReportFormat::Jsonl}) {
    const std::string text = report_text(rows, f);
    std::istringstream in(text);
    const auto back = read_report(in, f);
    expect_same(rows, back);
    EXPECT_EQ(report_text(back, f), text);  // re-emission is byte-identical
  }
}

TEST(Report, CsvAndJsonlCarryIdenticalValues) {
  const auto rows = sample_rows();
  std::istringstream c(report_text(rows, ReportFormat::Csv)), j(report_text(rows, ReportFormat::Jsonl));
  expect_same(read_csv(c), read_jsonl(j));
  // Cross-conversion reproduces the other file byte for byte.
  std::istringstream c2(report_text(rows, ReportFormat::Csv));
  EXPECT_EQ(report_text(read_csv(c2), ReportFormat::Jsonl), report_text(rows, ReportFormat::Jsonl));
}

TEST(Report, MissingValuesAndShortestNumbers) {
  ReportRow r;
  r.experiment = "train";
  r.loss = 0.1;
  const std::string csv = report_text({r}, ReportFormat::Csv);
  EXPECT_NE(csv.find("train,,,,,value,,,,0.1,,,,,,,,ok,,\n"), std::string::npos) << csv;
  const std::string jsonl = report_text({r}, ReportFormat::Jsonl);
  EXPECT_NE(jsonl.find("\"size\":null"), std::string::npos);
  EXPECT_NE(jsonl.find("\"loss\":0.1,"), std::string::npos);
}

TEST(Report, RejectsForeignFiles) {
  std::istringstream bad_header("a,b,c\n");
  EXPECT_THROW(read_csv(bad_header), Error);
  std::istringstream bad_json("{\"schema\":\"other\",\"columns\":[]}\n");
  EXPECT_THROW(read_jsonl(bad_json), Error);
  std::istringstream not_json("nope\n");
  EXPECT_THROW(read_jsonl(not_json), Error);
  EXPECT_THROW(parse_report_format("xml"), Error);
}
