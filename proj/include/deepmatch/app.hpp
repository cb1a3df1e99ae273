#pragma once

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "deepmatch/config.hpp"
#include "deepmatch/io.hpp"
#include "deepmatch/matching.hpp"
#include "deepmatch/selftest.hpp"
#include "deepmatch/training.hpp"

namespace dm {

/// Loads pair_*_a.pgm / _b.pgm / _gt.flo triples from a dataset directory,
/// sorted by name.
inline std::vector<DataPair> load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir);
  std::vector<std::string> stems;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (name.size() > 6 && name.substr(name.size() - 6) == "_a.pgm")
      stems.push_back(name.substr(0, name.size() - 6));
  }
  std::sort(stems.begin(), stems.end());
  if (stems.empty()) throw IoError("no *_a.pgm pairs under " + dir);
  std::vector<DataPair> out;
  for (const std::string& stem : stems) {
    const std::string base = (fs::path(dir) / stem).string();
    DataPair p;
    p.i0 = to_gray(read_image(base + "_a.pgm"));
    p.i1 = to_gray(read_image(base + "_b.pgm"));
    p.flow = read_flow(base + "_gt.flo");
    out.push_back(std::move(p));
  }
  return out;
}

struct MatchResult {
  MatchSet matches;
  FlowField flow;
  ScoreMap q0;
};

/// Full matching pipeline on one pair: descriptors, pyramid, decode, argmax
/// extraction, reciprocal verification and densification.
inline MatchResult match_pair(const GrayImage& i0, const GrayImage& i1,
                              const ModelParams& params, const GeometryParams& gp,
                              int threads, int densify_radius = 8) {
  const auto geoms = make_levels(gp, i0.height, i0.width);
  ForwardResult fw = run_forward(i0, i1, params, geoms, Attachment{true, 0}, threads);
  MatchResult res;
  res.q0 = std::move(fw.dec.q[0]);
  res.matches = extract_matches(res.q0, geoms[0]);
  verify_matches(res.matches, res.q0, geoms[0]);
  res.flow = densify(res.matches, i1.width, i1.height, densify_radius);
  return res;
}

struct MatchOutputs {
  std::string matches_path;
  std::string flow_path;
  std::string viz_path;
  // Optional debugging dump of one reference cell's decoded score slice.
  int dump_row = -1, dump_col = -1;
  std::string dump_path;
};

inline ModelParams model_from_config(const RunConfig& cfg,
                                     const std::string& checkpoint) {
  ModelParams params = cfg.model();
  if (!checkpoint.empty()) {
    OptimizerState opt;
    read_checkpoint(checkpoint, params, opt);
    if (static_cast<int>(params.exponents.size()) != cfg.geom.levels)
      throw ConfigError("checkpoint level count does not match the configuration");
  }
  return params;
}

inline void dump_score_slice(const ScoreMap& map, int row, int col,
                             const std::string& path) {
  if (row < 0 || row >= map.rows || col < 0 || col >= map.cols)
    throw ConfigError("dump slice: cell out of range");
  const int K = map.kextent();
  double lo = 0, hi = 1e-12;
  const double* s = map.slice(row, col);
  for (int k = 0; k < K * K; ++k)
    if (!no_score(s[k])) hi = std::max(hi, s[k]);
  ImageBuffer img(K, K, 1);
  for (int k = 0; k < K * K; ++k)
    img.data[static_cast<std::size_t>(k)] =
        no_score(s[k]) ? 0
                       : static_cast<std::uint8_t>(
                             std::lround(255.0 * std::clamp((s[k] - lo) / (hi - lo), 0.0, 1.0)));
  write_image(path, img);
}

inline int cmd_match(const RunConfig& cfg, const std::string& img0_path,
                     const std::string& img1_path, const MatchOutputs& out,
                     const std::string& checkpoint = "") {
  const GrayImage i0 = to_gray(read_image(img0_path));
  const GrayImage i1 = to_gray(read_image(img1_path));
  const ModelParams params = model_from_config(cfg, checkpoint);
  const MatchResult res = match_pair(i0, i1, params, cfg.geom, cfg.threads);

  if (!out.matches_path.empty()) {
    std::ofstream os(out.matches_path);
    if (!os) throw IoError("cannot write " + out.matches_path);
    write_matches(os, res.matches);
  }
  if (!out.flow_path.empty()) write_flow(out.flow_path, res.flow);
  if (!out.viz_path.empty())
    write_image(out.viz_path, flow_to_color(res.flow, max_flow_magnitude(res.flow)));
  if (!out.dump_path.empty())
    dump_score_slice(res.q0, out.dump_row, out.dump_col, out.dump_path);

  std::size_t verified = 0;
  for (const Match& m : res.matches.items) verified += m.verified ? 1 : 0;
  std::size_t covered = 0;
  for (auto v : res.flow.valid) covered += v;
  std::cout << "cells " << res.q0.rows * res.q0.cols << ", matches "
            << res.matches.items.size() << ", verified " << verified
            << ", covered pixels " << covered << "/" << res.flow.valid.size()
            << "\n";
  return 0;
}

/// Evaluation metrics for one estimated flow against ground truth.
struct EvalRow {
  double acc1 = 0, acc2 = 0, acc5 = 0, acc10 = 0;
  double epe_flow = 0, epe_matches = 0;
};

inline EvalRow evaluate_pair(const DataPair& pair, const ModelParams& params,
                             const GeometryParams& gp, int threads) {
  const MatchResult res = match_pair(pair.i0, pair.i1, params, gp, threads);
  EvalRow row;
  row.acc1 = accuracy_at(res.flow, pair.flow, 1.0);
  row.acc2 = accuracy_at(res.flow, pair.flow, 2.0);
  row.acc5 = accuracy_at(res.flow, pair.flow, 5.0);
  row.acc10 = accuracy_at(res.flow, pair.flow, 10.0);
  row.epe_flow = endpoint_error(res.flow, pair.flow, mask_all(pair.flow));
  const auto match_mask =
      mask_at_matches(res.matches, pair.flow.width, pair.flow.height);
  row.epe_matches = endpoint_error(res.flow, pair.flow, match_mask);
  return row;
}

inline int cmd_eval(const RunConfig& cfg, const std::string& checkpoint,
                    const std::string& dataset_dir) {
  const std::vector<DataPair> data = load_dataset(dataset_dir);
  const ModelParams params = model_from_config(cfg, checkpoint);
  EvalRow mean;
  for (const DataPair& pair : data) {
    const EvalRow r = evaluate_pair(pair, params, cfg.geom, cfg.threads);
    mean.acc1 += r.acc1 / data.size();
    mean.acc2 += r.acc2 / data.size();
    mean.acc5 += r.acc5 / data.size();
    mean.acc10 += r.acc10 / data.size();
    mean.epe_flow += r.epe_flow / data.size();
    mean.epe_matches += r.epe_matches / data.size();
  }
  std::cout << std::left << std::setw(10) << "acc@1" << std::setw(10) << "acc@2"
            << std::setw(10) << "acc@5" << std::setw(10) << "acc@10"
            << std::setw(12) << "epe(flow)" << std::setw(14) << "epe(matches)"
            << "\n";
  std::cout << std::fixed << std::setprecision(4) << std::left << std::setw(10)
            << mean.acc1 << std::setw(10) << mean.acc2 << std::setw(10)
            << mean.acc5 << std::setw(10) << mean.acc10 << std::setw(12)
            << mean.epe_flow << std::setw(14) << mean.epe_matches << "\n";
  return 0;
}

inline int cmd_train(const RunConfig& cfg, const std::string& dataset_dir,
                     const std::string& out_checkpoint,
                     const std::string& val_dir = "",
                     const std::string& resume = "") {
  const std::vector<DataPair> data = load_dataset(dataset_dir);
  std::vector<DataPair> val;
  if (!val_dir.empty()) val = load_dataset(val_dir);

  ModelParams params = cfg.model();
  OptimizerState opt;
  if (!resume.empty()) read_checkpoint(resume, params, opt);

  TrainConfig tc = cfg.train;
  tc.checkpoint_path = out_checkpoint;

  ValidationFn vfn = nullptr;
  if (!val.empty()) {
    vfn = [&](const ModelParams& p) -> std::optional<std::pair<double, double>> {
      double acc2 = 0, epe = 0;
      for (const DataPair& pair : val) {
        const EvalRow r = evaluate_pair(pair, p, cfg.geom, cfg.threads);
        acc2 += r.acc2 / val.size();
        epe += r.epe_flow / val.size();
      }
      return std::make_pair(acc2, epe);
    };
  }

  std::cout << csv_header() << "\n";
  const auto log = train(data, cfg.geom, tc, params, opt, vfn);
  for (const TrainLogRow& row : log) std::cout << to_csv(row) << "\n";
  return 0;
}

inline int cmd_selftest(const RunConfig& cfg, int equivalence_cases = 200,
                        int gradcheck_instances = 20) {
  (void)cfg;
  bool ok = true;

  const SuiteResult disc = discretization_suite(std::cout);
  std::cout << "discretization identities: " << (disc.pass() ? "pass" : "FAIL")
            << " (" << disc.total - disc.failed << "/" << disc.total << ")\n";
  ok = ok && disc.pass();

  const SuiteResult dec =
      decoder_equivalence_suite(equivalence_cases, 2024, std::cout);
  std::cout << "decoder-oracle equivalence: " << (dec.pass() ? "pass" : "FAIL")
            << " (" << dec.total - dec.failed << "/" << dec.total << ")\n";
  ok = ok && dec.pass();

  int ties = 0;
  const SuiteResult gc = gradcheck_suite(gradcheck_instances, 555, std::cout, &ties);
  std::cout << "gradient checks: " << (gc.pass() ? "pass" : "FAIL") << " ("
            << gc.total - gc.failed << "/" << gc.total << ", " << ties
            << " tie-skipped)\n";
  ok = ok && gc.pass();

  return ok ? 0 : 1;
}

inline int cmd_gen(const std::string& out_dir, int count, SyntheticSpec spec,
                   double limit) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  for (int i = 0; i < count; ++i) {
    SyntheticSpec s = spec;
    s.seed = spec.seed + static_cast<std::uint64_t>(i);
    const SyntheticPair pair = generate_pair(s, limit);
    char stem[32];
    std::snprintf(stem, sizeof stem, "pair_%04d", i);
    const std::string base = (fs::path(out_dir) / stem).string();
    write_image(base + "_a.pgm", pair.i0);
    write_image(base + "_b.pgm", pair.i1);
    write_flow(base + "_gt.flo", pair.flow);
  }
  std::cout << "wrote " << count << " pairs to " << out_dir << "\n";
  return 0;
}

inline int cmd_visualize(const std::string& flo_path, const std::string& out_path,
                         double max_magnitude) {
  const FlowField f = read_flow(flo_path);
  const double m = max_magnitude > 0 ? max_magnitude : max_flow_magnitude(f);
  write_image(out_path, flow_to_color(f, m));
  return 0;
}

}  // namespace dm
