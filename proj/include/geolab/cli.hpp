#pragma once

// Command-line front end. `run` returns the process exit code:
// 0 success, 2 configuration error, 3 data error, 4 numerical failure,
// 1 internal error.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "geolab/experiment.hpp"

namespace geolab::cli {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
  std::string format = "csv";
  std::size_t threads = 1;
  std::string checkpoint;
  std::string corrs;
  std::size_t iterations = 2000;
  double tau = 0.01;
  std::vector<std::string> inputs;
  std::string ttest;
  std::string metric = "sed";
  bool quiet = false;
};

inline ExperimentConfig load(const Options& o, std::optional<Task> force = std::nullopt) {
  ExperimentConfig cfg = o.config.empty() ? parse_config_text(force ? "task = " + std::string(names::task(*force)) : "")
                                          : load_config(o.config);
  if (force && cfg.task != *force) {
    throw Error(ErrorKind::ConfigError, "config task is " + std::string(names::task(cfg.task)) + ", command needs " +
                                            std::string(names::task(*force)));
  }
  if (o.seed) cfg.seed = *o.seed;
  return cfg;
}

inline std::string report_path(const Options& o, const std::string& stem = "report") {
  return o.out + "/" + stem + (o.format == "jsonl" ? ".jsonl" : ".csv");
}

inline void write_train_log(const std::string& path, const std::vector<EpochLog>& log) {
  write_text_file(path, [&](std::ostream& os) {
    auto opt = [](const std::optional<double>& v) { return v ? report_detail::number(*v) : std::string(); };
    os << "epoch,train_loss,val_loss,val_sed,val_ad,val_l2_px,val_angle_mae_deg,val_degenerate\n";
    for (const auto& e : log) {
      os << e.epoch << ',' << opt(e.train_loss) << ',' << opt(e.val.loss) << ',' << opt(e.val.sed) << ','
         << opt(e.val.ad) << ',' << opt(e.val.l2_px) << ',' << opt(e.val.angle_mae_deg) << ',' << e.val.degenerate
         << '\n';
    }
  });
}

template <typename Fn>
decltype(auto) with_precision(Precision p, Fn&& fn) {
  if (p == Precision::Float) return fn(float{});
  return fn(double{});
}

/// Executes one subcommand; throws geolab::Error on failure.
inline void dispatch(const std::string& cmd, const Options& o, std::ostream& log) {
  namespace fs = std::filesystem;
  const auto fmt = parse_report_format(o.format);
  if (o.threads == 0) throw Error(ErrorKind::ConfigError, "--threads must be >= 1");
  fs::create_directories(o.out);
  auto say = [&](const std::string& s) {
    if (!o.quiet) log << s << std::endl;
  };

  if (cmd == "gen-rigid" || cmd == "gen-stereo") {
    const ExperimentConfig cfg = load(o, cmd == "gen-rigid" ? Task::Rigid : Task::FMatrix);
    if (cfg.data.source != DataSource::Synthetic) throw Error(ErrorKind::ConfigError, cmd + " needs data.source = synthetic");
    Dataset ds = build_dataset(cfg, cfg.data);
    attach_standin_features(ds);
    write_dataset_dir(o.out, ds);
    say("wrote " + std::to_string(ds.size()) + " pairs to " + o.out);
    return;
  }

  if (cmd == "baseline" && !o.corrs.empty()) {
    const auto c = read_text_file<CorrespondenceSet>(o.corrs, read_correspondences);
    const ExperimentConfig cfg = load(o);
    const RunContext ctx{cfg};
    const auto r = ransac_f(c, {o.iterations, o.tau, cfg.seed});
    const FundamentalMatrix f8 = eight_point(c);
    CorrespondenceSet inl;
    for (std::size_t i = 0; i < c.size(); ++i)
      if (r.inliers[i]) inl.push_back(c[i]);
    std::vector<ReportRow> rows;
    for (const auto& [name, f] : {std::pair<std::string, Mat3>{"eight_point", f8.matrix()}, {"ransac", r.f.matrix()}}) {
      ReportRow row;
      row.experiment = "baseline";
      row.task = "fmatrix";
      row.variant = name;
      row.size = c.size();
      row.sed = sed(f, inl) / double(inl.size());
      row.ad = algebraic_distance(f, inl) / double(inl.size());
      row.note = "scored on " + std::to_string(inl.size()) + " RANSAC inliers";
      row.config_hash = ctx.hash();
      rows.push_back(std::move(row));
    }
    write_text_file(o.out + "/f_estimate.txt", [&](std::ostream& os) {
      write_f_labels(os, {{0, f8.matrix()}, {1, r.f.matrix()}});
    });
    save_report(report_path(o), rows, fmt);
    return;
  }

  if (cmd == "report") {
    if (o.inputs.empty()) throw Error(ErrorKind::ConfigError, "report needs at least one --in file");
    std::vector<ReportRow> rows;
    for (const auto& in : o.inputs) {
      auto r = load_report(in);
      rows.insert(rows.end(), r.begin(), r.end());
    }
    if (!o.ttest.empty()) {
      const auto comma = o.ttest.find(',');
      if (comma == std::string::npos) throw Error(ErrorKind::ConfigError, "--ttest expects A,B");
      auto t = t_test_rows(rows, o.ttest.substr(0, comma), o.ttest.substr(comma + 1), o.metric);
      rows.insert(rows.end(), t.begin(), t.end());
    }
    save_report(report_path(o), rows, fmt);
    return;
  }

  const ExperimentConfig cfg = load(o);
  const RunContext ctx{cfg, o.threads, say};
  const auto started = std::chrono::steady_clock::now();
  const Dataset ds = build_dataset(cfg, cfg.data);
  say("dataset: " + std::to_string(ds.size()) + " pairs");

  std::vector<ReportRow> rows = with_precision(cfg.precision, [&](auto tag) -> std::vector<ReportRow> {
    using T = decltype(tag);
    if (cmd == "train") {
      auto out = run_train<T>(ctx, ds, [&](const EpochLog& e) {
        std::ostringstream os;
        os << "epoch " << e.epoch;
        if (e.train_loss) os << " train_loss " << report_detail::number(*e.train_loss);
        if (e.val.loss) os << " val_loss " << report_detail::number(*e.val.loss);
        say(os.str());
      });
      ad::save_checkpoint(o.out + "/last.ckpt", out.result.last_ckpt);
      ad::save_checkpoint(o.out + "/best.ckpt", out.result.best_ckpt);
      write_train_log(o.out + "/train_log.csv", out.result.log);
      return out.rows;
    }
    if (cmd == "eval") {
      if (o.checkpoint.empty()) throw Error(ErrorKind::ConfigError, "eval needs --checkpoint");
      const auto ckpt = ad::load_checkpoint(o.checkpoint);
      const ModelSpec spec = ModelSpec::from_descriptor(ckpt.descriptor);
      if (spec.task != ds.task) {
        throw Error(ErrorKind::TaskMismatch, "checkpoint is " + std::string(names::task(spec.task)) + ", dataset is " +
                                                 std::string(names::task(ds.task)));
      }
      auto model = Model<T>::from_checkpoint(ckpt);
      const auto split = split_dataset(ds.size(), cfg.data.val_fraction);
      ReportRow r = metrics_row(ctx, "eval", fs::path(o.checkpoint).filename().string(),
                                evaluate(*model, ds, split.val, cfg.loss));
      r.size = split.val.size();
      return {r};
    }
    if (cmd == "sweep") return run_sweep<T>(ctx, ds);
    if (cmd == "freeze-study") return run_freeze_study<T>(ctx, ds);
    if (cmd == "ablation") return run_ablation<T>(ctx, ds);
    if (cmd == "cross-domain") {
      const Dataset target = build_dataset(cfg, cfg.target);
      std::optional<ad::Checkpoint> ckpt;
      if (!o.checkpoint.empty()) ckpt = ad::load_checkpoint(o.checkpoint);
      return run_cross_domain<T>(ctx, ds, target, ckpt);
    }
    if (cmd == "baseline") return run_baseline(ctx, ds, {o.iterations, o.tau, cfg.seed});
    throw Error(ErrorKind::ConfigError, "unknown command '" + cmd + "'");
  });
  save_report(report_path(o), rows, fmt);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  write_text_file(o.out + "/timing.csv", [&](std::ostream& os) { os << "command,seconds\n" << cmd << ',' << secs << '\n'; });
  say("wrote " + report_path(o));
}

inline int run(int argc, char** argv, std::ostream& log = std::cerr) {
  CLI::App app{"geolab: learned two-view geometry regression at desk scale"};
  app.require_subcommand(1);
  Options o;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "Experiment config file (key = value)");
    sub->add_option("--seed", o.seed, "Override the config seed");
    sub->add_option("--out", o.out, "Output directory");
    sub->add_option("--format", o.format, "Report format")->check(CLI::IsMember({"csv", "jsonl"}));
    sub->add_option("--threads", o.threads, "Parallel jobs for sweep cells");
    sub->add_flag("--quiet", o.quiet, "No progress output");
  };
  const std::vector<std::pair<std::string, std::string>> commands{
      {"gen-rigid", "Generate a rigid-task dataset directory"},
      {"gen-stereo", "Generate a two-view F-task dataset directory"},
      {"train", "Train one model and write checkpoints"},
      {"eval", "Evaluate a checkpoint on the validation split"},
      {"sweep", "Dataset-size sweep over nested subsets and replicates"},
      {"freeze-study", "Sweep per freeze depth"},
      {"cross-domain", "Zero-shot and head-only fine-tune on the target data"},
      {"ablation", "Input combination x token strategy grid"},
      {"baseline", "Eight-point and RANSAC on correspondences"},
      {"report", "Merge reports, convert formats, run paired t-tests"},
  };
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    common(sub);
    if (name == "eval" || name == "cross-domain") sub->add_option("--checkpoint", o.checkpoint, "Checkpoint file");
    if (name == "baseline") {
      sub->add_option("--corrs", o.corrs, "Correspondence file (x y x' y' per line)");
      sub->add_option("--iterations", o.iterations, "RANSAC iterations");
      sub->add_option("--tau", o.tau, "RANSAC SED inlier threshold");
    }
    if (name == "report") {
      sub->add_option("--in", o.inputs, "Report files to merge")->required();
      sub->add_option("--ttest", o.ttest, "Paired t-test between variants A,B");
      sub->add_option("--metric", o.metric, "Metric for --ttest");
    }
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  try {
    dispatch(app.get_subcommands().front()->get_name(), o, log);
  } catch (const Error& e) {
    log << "error: " << e.what() << '\n';
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    log << "internal error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace geolab::cli
