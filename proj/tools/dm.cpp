// Command line front end: match / train / eval / selftest / gen / visualize.
// Exit codes: 0 ok, 1 property failure, 2 IO error, 3 configuration error.

#include <exception>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "deepmatch/app.hpp"

namespace {

dm::RunConfig load(const std::string& config_path, std::uint64_t seed,
                   int threads, bool seed_set, bool threads_set) {
  dm::RunConfig cfg;
  if (!config_path.empty()) cfg = dm::load_config(config_path);
  if (seed_set) cfg.seed = seed;
  if (threads_set) cfg.threads = threads;
  dm::validate_config(cfg);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"quasi-dense image matching with a trainable score pyramid"};
  app.require_subcommand(1);

  std::string config_path;
  std::uint64_t seed = 0;
  int threads = 1;
  app.add_option("--config", config_path, "configuration file (key = value lines)");
  auto* seed_opt = app.add_option("--seed", seed, "RNG seed override");
  auto* threads_opt = app.add_option("--threads", threads, "worker threads (1 = bit-reproducible)");

  // match
  auto* match = app.add_subcommand("match", "match an image pair");
  std::string img0, img1, checkpoint;
  dm::MatchOutputs outs;
  match->add_option("image0", img0, "reference image (PGM/PPM)")->required();
  match->add_option("image1", img1, "target image (PGM/PPM)")->required();
  match->add_option("--matches", outs.matches_path, "output match list (text)");
  match->add_option("--flow", outs.flow_path, "output flow (.flo)");
  match->add_option("--viz", outs.viz_path, "output flow visualization (PPM)");
  match->add_option("--checkpoint", checkpoint, "trained parameters");
  match->add_option("--dump-slice-row", outs.dump_row, "grid row of a score slice to dump");
  match->add_option("--dump-slice-col", outs.dump_col, "grid column of a score slice to dump");
  match->add_option("--dump-slice-out", outs.dump_path, "PGM path for the dumped slice");

  // train
  auto* tr = app.add_subcommand("train", "train exponents / descriptor weights");
  std::string train_dir, out_ckpt, val_dir, resume;
  tr->add_option("dataset", train_dir, "directory of pair_*_{a,b}.pgm + _gt.flo")->required();
  tr->add_option("checkpoint", out_ckpt, "output checkpoint path")->required();
  tr->add_option("--val", val_dir, "validation dataset directory");
  tr->add_option("--resume", resume, "checkpoint to resume from");

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate matching accuracy on a dataset");
  std::string eval_dir, eval_ckpt;
  ev->add_option("dataset", eval_dir, "dataset directory")->required();
  ev->add_option("--checkpoint", eval_ckpt, "trained parameters");

  // selftest
  auto* st = app.add_subcommand("selftest", "run the equivalence and gradient suites");
  int st_cases = 200, st_grad = 20;
  st->add_option("--equivalence-cases", st_cases, "random decoder instances");
  st->add_option("--gradcheck-instances", st_grad, "gradient check instances");

  // gen
  auto* gen = app.add_subcommand("gen", "emit a synthetic dataset");
  std::string gen_dir, texture = "noise", motion = "translate";
  int gen_count = 10, gen_extent = 64;
  double gen_mag = 4.0;
  gen->add_option("outdir", gen_dir, "output directory")->required();
  gen->add_option("--count", gen_count, "number of pairs");
  gen->add_option("--extent", gen_extent, "image side length");
  gen->add_option("--texture", texture, "noise | checker");
  gen->add_option("--motion", motion, "translate | affine | warp");
  gen->add_option("--magnitude", gen_mag, "max displacement, pixels");

  // visualize
  auto* viz = app.add_subcommand("visualize", "render a .flo file to a color PPM");
  std::string viz_in, viz_out;
  double viz_max = 0.0;
  viz->add_option("flow", viz_in, "input .flo")->required();
  viz->add_option("out", viz_out, "output PPM")->required();
  viz->add_option("--max-magnitude", viz_max, "wheel saturation scale (0 = auto)");

  CLI11_PARSE(app, argc, argv);

  try {
    const dm::RunConfig cfg =
        load(config_path, seed, threads, seed_opt->count() > 0, threads_opt->count() > 0);
    if (match->parsed()) return dm::cmd_match(cfg, img0, img1, outs, checkpoint);
    if (tr->parsed()) return dm::cmd_train(cfg, train_dir, out_ckpt, val_dir, resume);
    if (ev->parsed()) return dm::cmd_eval(cfg, eval_ckpt, eval_dir);
    if (st->parsed()) return dm::cmd_selftest(cfg, st_cases, st_grad);
    if (gen->parsed()) {
      dm::SyntheticSpec spec;
      spec.width = spec.height = gen_extent;
      spec.seed = cfg.seed;
      spec.magnitude = gen_mag;
      if (texture == "noise") spec.texture = dm::Texture::SmoothNoise;
      else if (texture == "checker") spec.texture = dm::Texture::CheckerNoise;
      else throw dm::ConfigError("gen: unknown texture '" + texture + "'");
      if (motion == "translate") spec.motion = dm::Motion::Translation;
      else if (motion == "affine") spec.motion = dm::Motion::Affine;
      else if (motion == "warp") spec.motion = dm::Motion::SmoothWarp;
      else throw dm::ConfigError("gen: unknown motion '" + motion + "'");
      const double limit = cfg.geom.range0 * cfg.geom.target_stride;
      return dm::cmd_gen(gen_dir, gen_count, spec, limit);
    }
    if (viz->parsed()) return dm::cmd_visualize(viz_in, viz_out, viz_max);
  } catch (const dm::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 3;
  } catch (const dm::IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
