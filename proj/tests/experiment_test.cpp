#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <sstream>
#include <set>
#include <vector>

#include "geolab/experiment.hpp"

using namespace geolab;

namespace {

// Base settings overridden by `extra` lines of the same key.
ExperimentConfig small_cfg(std::map<std::string, std::string> base, const std::string& extra) {
  std::istringstream in(extra);
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) base[config_detail::trim(line.substr(0, eq))] = config_detail::trim(line.substr(eq + 1));
  }
  std::string text;
  for (const auto& [k, v] : base) text += k + " = " + v + "\n";
  return parse_config_text(text);
}

ExperimentConfig rigid_cfg(const std::string& extra = "") {
  return small_cfg({{"task", "rigid"},
                    {"data.count", "24"},
                    {"data.image_size", "16"},
                    {"model.token_strategy", "gap"},
                    {"train.epochs", "2"},
                    {"train.batch", "8"},
                    {"sweep.sizes", "8, 4"},
                    {"sweep.replicates", "2"}},
                   extra);
}

ExperimentConfig stereo_cfg(const std::string& extra = "") {
  return small_cfg({{"task", "fmatrix"},
                    {"data.count", "20"},
                    {"data.image_size", "16"},
                    {"stereo.n_points", "40"},
                    {"model.token_strategy", "gap"},
                    {"train.epochs", "2"},
                    {"train.batch", "4"},
                    {"sweep.sizes", "8, 4"},
                    {"sweep.replicates", "2"}},
                   extra);
}

std::string temp_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("geolab_experiment_test_" + name);
  std::filesystem::remove_all(p);
  return p.string();
}

std::vector<ReportRow> select(const std::vector<ReportRow>& rows, const std::string& stat, const std::string& model) {
  std::vector<ReportRow> out;
  for (const auto& r : rows)
    if (r.stat == stat && r.model == model) out.push_back(r);
  return out;
}

}  // namespace

TEST(Experiment, SplitHoldsOutTail) {
  const Split s = split_dataset(10, 0.2);
  EXPECT_EQ(s.pool, (std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7}));
  EXPECT_EQ(s.val, (std::vector<std::size_t>{8, 9}));
  EXPECT_THROW(split_dataset(1, 0.5), Error);
}

TEST(Experiment, CanonicalSignMakesLargestEntryPositive) {
  Mat3 f;
  f << 0.1, -0.9, 0.2, 0.3, 0.0, 0.1, 0.05, 0.2, 0.1;
  const Mat3 c = canonical_sign(f);
  EXPECT_EQ(c, Mat3(-f));
  EXPECT_EQ(canonical_sign(c), c);
}

TEST(Experiment, GeneratorsAreSeedDeterministic) {
  const auto cfg = stereo_cfg();
  const Dataset a = build_dataset(cfg, cfg.data), b = build_dataset(cfg, cfg.data);
  ASSERT_EQ(a.size(), 20u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a.samples[i].a.px, b.samples[i].a.px);
    EXPECT_EQ(a.samples[i].f, b.samples[i].f);
    EXPECT_NEAR(a.samples[i].f.norm(), 1.0, 1e-12);
    EXPECT_LT(std::abs(a.samples[i].f.determinant()), 1e-10);
    EXPECT_FALSE(a.samples[i].inliers.empty());
  }
}

TEST(Experiment, ZeroEpochsKeepsInitialization) {
  auto cfg = rigid_cfg("train.epochs = 0\n");
  const Dataset ds = build_dataset(cfg, cfg.data);
  const auto split = split_dataset(ds.size(), cfg.data.val_fraction);
  Model<double> fresh(model_spec(cfg, ds, 5)), model(model_spec(cfg, ds, 5));
  const TrainResult t = train(model, ds, split.pool, split.val, train_options(cfg, 1));
  ASSERT_EQ(t.log.size(), 1u);
  EXPECT_FALSE(t.log[0].train_loss.has_value());
  EXPECT_EQ(ad::checkpoint_bytes(t.last_ckpt), ad::checkpoint_bytes(fresh.to_checkpoint()));
  EXPECT_EQ(ad::checkpoint_bytes(t.best_ckpt), ad::checkpoint_bytes(fresh.to_checkpoint()));
  EXPECT_EQ(t.best_epoch, 0u);
}

TEST(Experiment, GroundTruthScoresZero) {
  {
    const auto cfg = rigid_cfg();
    const Dataset ds = build_dataset(cfg, cfg.data);
    const auto idx = split_dataset(ds.size(), 0.2).val;
    const Metrics m = evaluate_predictions(ds, idx, ground_truth(ds, idx), cfg.loss);
    EXPECT_EQ(*m.l2_px, 0.0);
    EXPECT_EQ(*m.angle_mae_deg, 0.0);
    EXPECT_EQ(*m.loss, 0.0);
  }
  const auto cfg = stereo_cfg("stereo.noise_px = 0\nstereo.outlier_frac = 0\n");
  const Dataset ds = build_dataset(cfg, cfg.data);
  std::vector<std::size_t> all(ds.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  const Metrics m = evaluate_predictions(ds, all, ground_truth(ds, all), cfg.loss);
  EXPECT_EQ(m.degenerate, 0u);
  EXPECT_LT(*m.sed, 1e-9);
  EXPECT_LT(*m.ad, 1e-9);
}

TEST(Experiment, EvaluationMatchesDirectMetrics) {
  const auto cfg = stereo_cfg();
  const Dataset ds = build_dataset(cfg, cfg.data);
  Model<double> model(model_spec(cfg, ds, 3));
  const auto idx = split_dataset(ds.size(), 0.2).val;
  const Metrics a = evaluate(model, ds, idx, cfg.loss), b = evaluate(model, ds, idx, cfg.loss);
  EXPECT_EQ(*a.sed, *b.sed);
  EXPECT_EQ(*a.loss, *b.loss);

  const Predictions p = predict(model, ds, idx);
  double s = 0.0, d = 0.0;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto& inl = ds.samples[idx[i]].inliers;
    s += sed(p.f[i], inl) / double(inl.size());
    d += algebraic_distance(p.f[i], inl) / double(inl.size());
  }
  EXPECT_EQ(a.degenerate, 0u);
  EXPECT_DOUBLE_EQ(*a.sed, s / double(idx.size()));
  EXPECT_DOUBLE_EQ(*a.ad, d / double(idx.size()));

  Predictions bad = p;
  bad.f[0] = Mat3::Zero();
  EXPECT_EQ(evaluate_predictions(ds, idx, bad, cfg.loss).degenerate, 1u);
}

TEST(Experiment, RigidEvaluationUsesPixelsAndDegrees) {
  const auto cfg = rigid_cfg();
  const Dataset ds = build_dataset(cfg, cfg.data);
  const std::vector<std::size_t> idx{0, 1};
  Predictions p = ground_truth(ds, idx);
  p.rigid[0][0] += 0.1;  // 0.1 of the rotation range
  p.rigid[1][1] += 0.5;  // half the shift range in x
  const Metrics m = evaluate_predictions(ds, idx, p, cfg.loss);
  EXPECT_NEAR(*m.angle_mae_deg, 0.1 * ds.ranges.rotation_deg / 2.0, 1e-12);
  EXPECT_NEAR(*m.l2_px, 0.5 * ds.ranges.shift_px / 2.0, 1e-12);
}

TEST(Experiment, TrainingLowersTrainingLoss) {
  const auto cfg = rigid_cfg("train.epochs = 6\n");
  const Dataset ds = build_dataset(cfg, cfg.data);
  const auto split = split_dataset(ds.size(), cfg.data.val_fraction);
  Model<double> model(model_spec(cfg, ds, 2));
  const TrainResult t = train(model, ds, split.pool, split.val, train_options(cfg, 4));
  ASSERT_EQ(t.log.size(), 7u);
  EXPECT_LT(*t.log.back().train_loss, *t.log[1].train_loss);
  for (const auto& e : t.log)
    EXPECT_LE(selection_score(t.best), selection_score(e.val));
}

TEST(Experiment, SweepRowsAndAggregates) {
  const auto cfg = rigid_cfg();
  const Dataset ds = build_dataset(cfg, cfg.data);
  const RunContext ctx{cfg};
  const auto rows = run_sweep<double>(ctx, ds);
  const auto last = select(rows, "value", "last");
  ASSERT_EQ(last.size(), 4u);
  EXPECT_EQ(select(rows, "value", "best").size(), 4u);
  for (const std::uint64_t size : {8u, 4u}) {
    std::vector<double> v;
    for (const auto& r : last)
      if (*r.size == size) {
        v.push_back(*r.l2_px);
        EXPECT_EQ(*r.epochs, 2u);
      }
    ASSERT_EQ(v.size(), 2u);
    const Summary s = summarize(v);
    bool seen_mean = false, seen_std = false;
    for (const auto& r : rows) {
      if (r.model != "last" || r.size != size) continue;
      if (r.stat == "mean") {
        EXPECT_DOUBLE_EQ(*r.l2_px, s.mean);
        EXPECT_FALSE(r.replicate.has_value());
        seen_mean = true;
      }
      if (r.stat == "std") {
        EXPECT_DOUBLE_EQ(*r.l2_px, *s.std);
        seen_std = true;
      }
    }
    EXPECT_TRUE(seen_mean && seen_std);
  }
  // Replicates differ (different disjoint subsets and seeds).
  EXPECT_NE(*last[0].l2_px, *last[1].l2_px);
  for (const auto& r : rows) EXPECT_EQ(r.config_hash, ctx.hash());
}

TEST(Experiment, SweepIsThreadIndependent) {
  const auto cfg = rigid_cfg();
  const Dataset ds = build_dataset(cfg, cfg.data);
  const auto one = run_sweep<double>(RunContext{cfg, 1}, ds);
  const auto three = run_sweep<double>(RunContext{cfg, 3}, ds);
  EXPECT_EQ(report_text(one, ReportFormat::Csv), report_text(three, ReportFormat::Csv));
}

TEST(Experiment, FreezeStudyStructure) {
  auto cfg = rigid_cfg("model.backbone = tiny_conv\nsweep.sizes = 6\n");
  const Dataset ds = build_dataset(cfg, cfg.data);
  const RunContext ctx{cfg};
  ASSERT_EQ(stage_count_for(cfg, ds), 3u);
  const auto rows = run_freeze_study<double>(ctx, ds);
  std::vector<std::uint64_t> counts;
  for (std::size_t d = 0; d <= 3; ++d) {
    std::set<std::uint64_t> c;
    for (const auto& r : rows)
      if (r.variant == "depth=" + std::to_string(d) && r.stat == "value") c.insert(*r.trainable_params);
    ASSERT_EQ(c.size(), 1u);
    counts.push_back(*c.begin());
  }
  for (std::size_t i = 1; i < counts.size(); ++i) EXPECT_LT(counts[i], counts[i - 1]);

  auto plain = run_sweep<double>(ctx, ds, "freeze", "depth=0");
  std::vector<ReportRow> depth0;
  for (const auto& r : rows)
    if (r.variant == "depth=0") depth0.push_back(r);
  EXPECT_EQ(depth0, plain);
}

TEST(Experiment, FrozenWeightsStayBitIdentical) {
  auto cfg = rigid_cfg("model.backbone = tiny_conv\nmodel.token_strategy = spatial_conv\nmodel.freeze_depth = 4\n");
  const Dataset ds = build_dataset(cfg, cfg.data);
  const auto split = split_dataset(ds.size(), cfg.data.val_fraction);
  Model<double> model(model_spec(cfg, ds, 9));
  ASSERT_EQ(model.stage_count(), 5u);
  const ad::Checkpoint before = model.to_checkpoint();
  train(model, ds, split.pool, split.val, train_options(cfg, 2));
  const ad::Checkpoint after = model.to_checkpoint();
  std::size_t frozen = 0, changed = 0;
  for (const auto& e : before.entries) {
    const auto* a = after.find(e.name);
    ASSERT_NE(a, nullptr);
    const bool stage4 = e.name.rfind("encoder.conv2", 0) == 0 || e.name.rfind("encoder.bn2", 0) == 0;
    if (e.name.rfind("head.", 0) == 0 || stage4) {
      changed += a->values != e.values;
    } else {
      EXPECT_EQ(a->values, e.values) << e.name;
      ++frozen;
    }
  }
  EXPECT_GT(frozen, 0u);
  EXPECT_GT(changed, 0u);
}

TEST(Experiment, CrossDomainZeroShotAndHeadOnlyFinetune) {
  auto cfg = rigid_cfg("target.data.rotation_range = 10\ntarget.data.seed = 77\n");
  const Dataset source = build_dataset(cfg, cfg.data), target = build_dataset(cfg, cfg.target);
  const RunContext ctx{cfg};
  Model<double> src(model_spec(cfg, source, 4));
  const ad::Checkpoint ckpt = src.to_checkpoint();
  const auto rows = run_cross_domain<double>(ctx, source, target, ckpt);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].variant, "zero_shot");
  EXPECT_EQ(rows[0].note, "checkpoint " + hash_hex(binary::fnv1a(ad::checkpoint_bytes(ckpt))));

  const auto tsplit = split_dataset(target.size(), cfg.target.val_fraction);
  auto fresh = Model<double>::from_checkpoint(ckpt);
  EXPECT_EQ(*rows[0].l2_px, *evaluate(*fresh, target, tsplit.val, cfg.loss).l2_px);

  std::size_t head = 0;
  for (auto* p : fresh->head_parameters()) head += p->tensor.size();
  for (std::size_t i = 1; i < 3; ++i) {
    EXPECT_EQ(rows[i].variant, "finetune_head");
    EXPECT_EQ(*rows[i].trainable_params, head);
    EXPECT_EQ(*rows[i].size, 4u);
    EXPECT_EQ(rows[i].note, "head updated");
  }
  EXPECT_EQ(rows[1].model, "last");
  EXPECT_EQ(*rows[1].epochs, kCrossDomainFinetuneEpochs);
}

TEST(Experiment, CrossDomainOnSameDataMatchesEvaluate) {
  const auto cfg = stereo_cfg();
  const Dataset ds = build_dataset(cfg, cfg.data);
  Model<double> src(model_spec(cfg, ds, 4));
  const auto rows = run_cross_domain<double>(RunContext{cfg}, ds, ds, src.to_checkpoint());
  const auto m = evaluate(src, ds, split_dataset(ds.size(), 0.2).val, cfg.loss);
  EXPECT_EQ(rows[0].sed, m.sed);
  EXPECT_EQ(rows[0].degenerate, m.degenerate);
}

TEST(Experiment, AblationGridOrderAndCells) {
  auto cfg = rigid_cfg("train.epochs = 1\n");
  const Dataset ds = build_dataset(cfg, cfg.data);
  const RunContext ctx{cfg};
  const auto rows = run_ablation<double>(ctx, ds);
  std::vector<std::string> order;
  for (const auto& r : rows)
    if (order.empty() || order.back() != r.variant) order.push_back(r.variant);
  ASSERT_EQ(order.size(), 16u);
  EXPECT_EQ(order.front(), "orig_trans_hadamard/spatial_flat");
  EXPECT_EQ(order[5], "orig_trans/gap");
  EXPECT_EQ(order.back(), "hadamard_only/cls_only");
  std::size_t skipped = 0;
  for (const auto& r : rows)
    if (r.status == "skipped") {
      ++skipped;
      EXPECT_NE(r.variant.find("cls_only"), std::string::npos);
    }
  EXPECT_EQ(skipped, 4u);  // stand-in features carry no CLS token

  ExperimentConfig cell = cfg;
  cell.fusion = {TokenStrategy::Gap, InputCombo::OrigTrans};
  auto alone = run_train<double>(RunContext{cell}, ds).rows;
  std::vector<ReportRow> from_grid;
  for (const auto& r : rows)
    if (r.variant == "orig_trans/gap") from_grid.push_back(r);
  ASSERT_EQ(from_grid.size(), alone.size());
  for (std::size_t i = 0; i < alone.size(); ++i) {
    EXPECT_EQ(from_grid[i].l2_px, alone[i].l2_px);
    EXPECT_EQ(from_grid[i].trainable_params, alone[i].trainable_params);
  }
}

TEST(Experiment, HparamGridMarksOneSelection) {
  auto cfg = rigid_cfg("train.epochs = 1\ntrain.hparam_grid = true\n");
  const Dataset ds = build_dataset(cfg, cfg.data);
  const auto out = run_train<double>(RunContext{cfg}, ds);
  ASSERT_EQ(out.rows.size(), 8u);
  std::set<std::string> selected;
  for (const auto& r : out.rows)
    if (r.note == "selected") selected.insert(r.variant);
  EXPECT_EQ(selected.size(), 1u);
}

TEST(Experiment, DatasetDirectoryRoundTrip) {
  for (const bool stereo : {false, true}) {
    const auto cfg = stereo ? stereo_cfg() : rigid_cfg();
    Dataset ds = build_dataset(cfg, cfg.data);
    attach_standin_features(ds);
    const auto dir = temp_dir(stereo ? "stereo" : "rigid");
    write_dataset_dir(dir, ds);
    const Dataset back = load_dataset_dir(dir);
    ASSERT_EQ(back.size(), ds.size());
    EXPECT_EQ(back.task, ds.task);
    EXPECT_EQ(back.ranges.shift_px, ds.ranges.shift_px);
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const Sample &a = ds.samples[i], &b = back.samples[i];
      EXPECT_EQ(a.fa->values, b.fa->values);
      EXPECT_EQ(a.fb->values, b.fb->values);
      for (std::size_t k = 0; k < a.a.px.size(); ++k) EXPECT_EQ(float(a.a.px[k]), float(b.a.px[k]));
      if (stereo) {
        EXPECT_EQ(a.f, b.f);
        ASSERT_EQ(a.inliers.size(), b.inliers.size());
        EXPECT_EQ(a.raw.size(), b.raw.size());
        EXPECT_EQ(a.inliers[0].p, b.inliers[0].p);
        EXPECT_TRUE(b.calibration.has_value());
      } else {
        EXPECT_EQ(a.rigid, b.rigid);
      }
    }
    std::filesystem::remove_all(dir);
  }
}

TEST(Experiment, ExternalBackboneTrainsOnFiles) {
  auto gen = stereo_cfg();
  Dataset ds = build_dataset(gen, gen.data);
  attach_standin_features(ds);
  const auto dir = temp_dir("external");
  write_dataset_dir(dir, ds);
  const auto cfg = stereo_cfg("model.backbone = external\ndata.source = files\ndata.dir = " + dir + "\n");
  const Dataset files = build_dataset(cfg, cfg.data);
  const auto out = run_train<double>(RunContext{cfg}, files);
  EXPECT_TRUE(out.rows.front().sed.has_value());
  std::filesystem::remove_all(dir);
}

TEST(Experiment, TaskMismatchIsReported) {
  const auto rig = rigid_cfg();
  Dataset ds = build_dataset(rig, rig.data);
  const auto dir = temp_dir("mismatch");
  write_dataset_dir(dir, ds);
  const auto cfg = stereo_cfg("data.source = files\ndata.dir = " + dir + "\n");
  try {
    build_dataset(cfg, cfg.data);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::TaskMismatch);
  }
  const auto st = stereo_cfg();
  Model<double> fmodel(model_spec(st, build_dataset(st, st.data), 1));
  try {
    evaluate(fmodel, ds, std::vector<std::size_t>{0}, st.loss);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::TaskMismatch);
  }
  std::filesystem::remove_all(dir);
}

TEST(Experiment, BaselineRowsScoreHeldOutInliers) {
  const auto cfg = stereo_cfg("stereo.noise_px = 0\nstereo.outlier_frac = 0.3\n");
  const Dataset ds = build_dataset(cfg, cfg.data);
  const auto rows = run_baseline(RunContext{cfg}, ds, {500, 0.01, 3});
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].variant, "eight_point");
  EXPECT_EQ(rows[1].variant, "ransac");
  EXPECT_LT(*rows[1].sed, 1e-9);
  EXPECT_GT(*rows[0].sed, *rows[1].sed);
}

TEST(Experiment, TTestRowsPairReplicates) {
  std::vector<ReportRow> rows;
  const double a[] = {2.1, 1.9, 2.0}, b[] = {1.0, 1.2, 0.8};
  for (std::size_t rep = 0; rep < 3; ++rep)
    for (const char* v : {"A", "B"}) {
      ReportRow r;
      r.variant = v;
      r.size = 32;
      r.replicate = rep;
      r.model = "last";
      r.sed = std::string(v) == "A" ? a[rep] : b[rep];
      rows.push_back(r);
    }
  const auto t = t_test_rows(rows, "A", "B", "sed");
  ASSERT_EQ(t.size(), 1u);
  EXPECT_NEAR(*t[0].t, 6.54653670707977143798292456247, 1e-12);
  EXPECT_NEAR(*t[0].p, 0.0225471813233881194217858713787, 1e-13);
  EXPECT_THROW(t_test_rows(rows, "A", "B", "bogus"), Error);
}
