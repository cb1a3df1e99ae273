#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "deepmatch/autograd.hpp"
#include "deepmatch/errors.hpp"
#include "deepmatch/loss.hpp"

namespace dm {

struct TrainConfig {
  double lr_exponents = 1e-3;
  double lr_weights = 1e-4;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int epochs = 1;
  Attachment attach;  // default: decoded level 0
  double sigma = 8.0;
  std::uint64_t seed = 0;
  bool train_exponents = true;
  bool train_weights = false;
  int checkpoint_every = 1;        // epochs; <= 0 disables periodic checkpoints
  std::string checkpoint_path;     // empty disables checkpoints entirely
  int threads = 1;

  void validate() const {
    if (!(lr_exponents >= 0) || !(lr_weights >= 0))
      throw ConfigError("train: learning rates must be >= 0");
    if (momentum < 0 || momentum >= 1) throw ConfigError("train: momentum must be in [0,1)");
    if (weight_decay < 0) throw ConfigError("train: weight_decay must be >= 0");
    if (epochs < 0) throw ConfigError("train: epochs must be >= 0");
    if (!(sigma > 0)) throw ConfigError("train: sigma must be > 0");
  }
};

struct DataPair {
  GrayImage i0, i1;
  FlowField flow;
};

/// One scored pair: loss at the configured attachment plus weight-decay term,
/// with gradients for the enabled parameter groups.
inline double pair_objective(const DataPair& pair, const ModelParams& params,
                             const GeometryParams& gp, const TrainConfig& cfg,
                             Gradients* grads) {
  const auto geoms = make_levels(gp, pair.i0.height, pair.i0.width);
  const LevelGeometry& ag = geoms.at(static_cast<std::size_t>(cfg.attach.level));
  ForwardResult fw = run_forward(pair.i0, pair.i1, params, geoms, cfg.attach, cfg.threads);
  const GroundTruthField gt = snap_ground_truth(pair.flow, ag, cfg.sigma);
  LossResult lr = structured_loss(fw.attachment_map(), gt, ag);
  if (grads) *grads = backward(lr.d_score, fw, params);
  return lr.loss;
}

/// lambda/2 |w|^2 over the enabled groups.
inline double decay_term(const ModelParams& params, const TrainConfig& cfg) {
  double sq = 0;
  if (cfg.train_exponents)
    for (double e : params.exponents) sq += e * e;
  if (cfg.train_weights && params.kind == DescriptorKind::Trainable) {
    const ExtractorParams& p = params.extractor;
    for (const auto* v : {&p.w1, &p.b1, &p.w2, &p.b2, &p.w3, &p.b3})
      sq = std::inner_product(v->begin(), v->end(), v->begin(), sq);
  }
  return 0.5 * cfg.weight_decay * sq;
}

/// Mean structured loss over a batch plus the regularizer; gradients include
/// the decay term.
inline double objective(const std::vector<DataPair>& batch, const ModelParams& params,
                        const GeometryParams& gp, const TrainConfig& cfg,
                        Gradients* grads) {
  if (batch.empty()) throw std::invalid_argument("objective: empty batch");
  double total = 0;
  if (grads) grads->zero();
  for (const DataPair& pair : batch) {
    Gradients g(params.exponents.size());
    total += pair_objective(pair, params, gp, cfg, grads ? &g : nullptr);
    if (grads) grads->axpy(1.0 / batch.size(), g);
  }
  double value = total / batch.size() + decay_term(params, cfg);
  if (grads) {
    if (cfg.train_exponents)
      for (std::size_t i = 0; i < params.exponents.size(); ++i)
        grads->d_exponents[i] += cfg.weight_decay * params.exponents[i];
    if (cfg.train_weights && params.kind == DescriptorKind::Trainable) {
      ExtractorGrads decay;
      decay.w1 = params.extractor.w1; decay.b1 = params.extractor.b1;
      decay.w2 = params.extractor.w2; decay.b2 = params.extractor.b2;
      decay.w3 = params.extractor.w3; decay.b3 = params.extractor.b3;
      grads->d_extractor.axpy(cfg.weight_decay, decay);
    }
  }
  return value;
}

// ---------------------------------------------------------------------------
// Checkpoints: "DMCKPT1", then little-endian u64 counters and f64 arrays for
// each parameter group followed by the optimizer velocity buffers.
// ---------------------------------------------------------------------------

struct OptimizerState {
  std::vector<double> v_exponents;
  ExtractorGrads v_extractor;  // same shapes as the weights
  std::uint64_t epochs_completed = 0;
  std::uint64_t global_step = 0;
};

namespace detail {

inline void write_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t read_u64(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  if (!in) throw IoError("checkpoint: truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline void write_f64s(std::ostream& out, const std::vector<double>& v) {
  write_u64(out, v.size());
  for (double x : v) {
    std::uint64_t bits;
    std::memcpy(&bits, &x, 8);
    write_u64(out, bits);
  }
}

inline std::vector<double> read_f64s(std::istream& in) {
  const std::uint64_t n = read_u64(in);
  if (n > (1u << 28)) throw IoError("checkpoint: oversized array");
  std::vector<double> v(n);
  for (auto& x : v) {
    const std::uint64_t bits = read_u64(in);
    std::memcpy(&x, &bits, 8);
  }
  return v;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& out, const ModelParams& params,
                             const OptimizerState& opt) {
  out.write("DMCKPT1", 7);
  detail::write_u64(out, opt.epochs_completed);
  detail::write_u64(out, opt.global_step);
  const ExtractorParams& p = params.extractor;
  const std::vector<const std::vector<double>*> groups = {
      &params.exponents, &p.w1, &p.b1, &p.w2, &p.b2, &p.w3, &p.b3};
  detail::write_u64(out, groups.size());
  for (const auto* g : groups) detail::write_f64s(out, *g);
  const ExtractorGrads& v = opt.v_extractor;
  const std::vector<const std::vector<double>*> vels = {
      &opt.v_exponents, &v.w1, &v.b1, &v.w2, &v.b2, &v.w3, &v.b3};
  detail::write_u64(out, vels.size());
  for (const auto* g : vels) detail::write_f64s(out, *g);
  if (!out) throw IoError("checkpoint: write failed");
}

inline void write_checkpoint(const std::string& path, const ModelParams& params,
                             const OptimizerState& opt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  write_checkpoint(out, params, opt);
}

inline void read_checkpoint(std::istream& in, ModelParams& params, OptimizerState& opt) {
  char magic[7];
  in.read(magic, 7);
  if (!in || std::string(magic, 7) != "DMCKPT1")
    throw IoError("checkpoint: bad magic");
  opt.epochs_completed = detail::read_u64(in);
  opt.global_step = detail::read_u64(in);
  if (detail::read_u64(in) != 7) throw IoError("checkpoint: unexpected group count");
  ExtractorParams& p = params.extractor;
  for (auto* g : {&params.exponents, &p.w1, &p.b1, &p.w2, &p.b2, &p.w3, &p.b3})
    *g = detail::read_f64s(in);
  if (detail::read_u64(in) != 7) throw IoError("checkpoint: unexpected velocity count");
  ExtractorGrads& v = opt.v_extractor;
  for (auto* g : {&opt.v_exponents, &v.w1, &v.b1, &v.w2, &v.b2, &v.w3, &v.b3})
    *g = detail::read_f64s(in);
  if (in.get() != std::istream::traits_type::eof())
    throw IoError("checkpoint: trailing garbage");
}

inline void read_checkpoint(const std::string& path, ModelParams& params,
                            OptimizerState& opt) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path);
  read_checkpoint(in, params, opt);
}

// ---------------------------------------------------------------------------
// SGD with momentum, one pair per step.
// ---------------------------------------------------------------------------

struct TrainLogRow {
  int epoch = 0;
  std::uint64_t step = 0;
  double loss = 0.0;
  bool has_val = false;
  double val_acc2 = 0.0;
  double val_epe = 0.0;
};

inline std::string csv_header() { return "epoch,step,loss,val_acc2,val_epe"; }

inline std::string to_csv(const TrainLogRow& r) {
  std::ostringstream os;
  os << r.epoch << "," << r.step << "," << r.loss << ",";
  if (r.has_val) os << r.val_acc2 << "," << r.val_epe;
  else os << ",";
  return os.str();
}

/// Per-epoch validation hook; returns (acc@2, EPE) or nothing.
using ValidationFn =
    std::function<std::optional<std::pair<double, double>>(const ModelParams&)>;

/// Runs SGD with momentum, one image pair per step, shuffled per epoch by a
/// seed-derived generator (so resuming from an epoch boundary replays the
/// same order). Velocity update: v <- mu v - lr (grad + lambda w); w <- w + v.
inline std::vector<TrainLogRow> train(const std::vector<DataPair>& dataset,
                                      const GeometryParams& gp, TrainConfig cfg,
                                      ModelParams& params, OptimizerState& opt,
                                      const ValidationFn& validate_fn = nullptr) {
  cfg.validate();
  if (dataset.empty()) throw std::invalid_argument("train: empty dataset");
  if (opt.v_exponents.size() != params.exponents.size())
    opt.v_exponents.assign(params.exponents.size(), 0.0);

  std::vector<TrainLogRow> log;
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::uint64_t epoch = opt.epochs_completed;
       epoch < static_cast<std::uint64_t>(cfg.epochs); ++epoch) {
    std::mt19937_64 rng(cfg.seed ^ (0x5851f42d4c957f2dULL * (epoch + 1)));
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t oi = 0; oi < order.size(); ++oi) {
      const DataPair& pair = dataset[order[oi]];
      Gradients g(params.exponents.size());
      const double loss = pair_objective(pair, params, gp, cfg, &g);
      if (!std::isfinite(loss))
        throw std::runtime_error("train: non-finite loss at step " +
                                 std::to_string(opt.global_step));

      if (cfg.train_exponents) {
        for (std::size_t i = 0; i < params.exponents.size(); ++i) {
          const double grad = g.d_exponents[i] + cfg.weight_decay * params.exponents[i];
          opt.v_exponents[i] = cfg.momentum * opt.v_exponents[i] - cfg.lr_exponents * grad;
          params.exponents[i] += opt.v_exponents[i];
        }
      }
      if (cfg.train_weights && params.kind == DescriptorKind::Trainable) {
        auto update = [&](std::vector<double>& w, std::vector<double>& v,
                          const std::vector<double>& gw) {
          for (std::size_t i = 0; i < w.size(); ++i) {
            v[i] = cfg.momentum * v[i] - cfg.lr_weights * (gw[i] + cfg.weight_decay * w[i]);
            w[i] += v[i];
          }
        };
        ExtractorParams& p = params.extractor;
        ExtractorGrads& v = opt.v_extractor;
        const ExtractorGrads& gw = g.d_extractor;
        update(p.w1, v.w1, gw.w1);
        update(p.b1, v.b1, gw.b1);
        update(p.w2, v.w2, gw.w2);
        update(p.b2, v.b2, gw.b2);
        update(p.w3, v.w3, gw.w3);
        update(p.b3, v.b3, gw.b3);
      }

      ++opt.global_step;
      TrainLogRow row;
      row.epoch = static_cast<int>(epoch);
      row.step = opt.global_step;
      row.loss = loss;
      log.push_back(row);
    }
    opt.epochs_completed = epoch + 1;

    if (validate_fn) {
      if (const auto val = validate_fn(params)) {
        TrainLogRow row;
        row.epoch = static_cast<int>(epoch);
        row.step = opt.global_step;
        row.loss = log.empty() ? 0.0 : log.back().loss;
        row.has_val = true;
        row.val_acc2 = val->first;
        row.val_epe = val->second;
        log.push_back(row);
      }
    }
    if (!cfg.checkpoint_path.empty() && cfg.checkpoint_every > 0 &&
        (epoch + 1) % static_cast<std::uint64_t>(cfg.checkpoint_every) == 0)
      write_checkpoint(cfg.checkpoint_path, params, opt);
  }
  if (!cfg.checkpoint_path.empty())
    write_checkpoint(cfg.checkpoint_path, params, opt);
  return log;
}

}  // namespace dm
