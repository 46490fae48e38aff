#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "qseg/autograd.hpp"
#include "qseg/data.hpp"
#include "qseg/loss.hpp"
#include "qseg/metrics.hpp"
#include "qseg/model.hpp"
#include "qseg/rng.hpp"

namespace qseg {

struct TrainConfig {
  int batch_size = 8;
  int epochs = 4000;
  double lr0 = 1e-3;
  int restart_period = 20;  // warm restart every 20 epochs
  double eta_min = 0.0;
  std::uint64_t seed = 0;
  double lambda = 5.0;
  bool augment = true;
  int max_steps = 0;           // 0: run all epochs
  double target_val_dice = 0;  // early stop once reached (0: off)
  double threshold = 0.5;
  std::array<int, 3> widths = {16, 32, 64};

  void validate() const {
    if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
    if (lr0 <= 0) throw std::invalid_argument("TrainConfig: lr0 must be > 0");
    if (restart_period < 1)
      throw std::invalid_argument("TrainConfig: restart_period must be >= 1");
    if (epochs < 1) throw std::invalid_argument("TrainConfig: epochs must be >= 1");
  }
};

struct EpochLog {
  int epoch = 0;
  double lr = 0;
  double mean_loss = 0;
  double val_dice = 0;
};

struct TrainResult {
  ModelGraph<float> best;    // highest validation Dice checkpoint
  ModelGraph<float> final;   // parameters after the last step
  std::vector<EpochLog> logs;
  double best_val_dice = 0;
  int best_epoch = -1;
  int steps = 0;
};

// Cosine annealing with warm restarts at a fixed period (no doubling):
// lr(epoch) = eta_min + (lr0 - eta_min) * (1 + cos(pi * t / T)) / 2, t = epoch mod T.
inline double lr_schedule(int epoch, const TrainConfig& cfg) {
  if (epoch < 0) throw std::invalid_argument("lr_schedule: negative epoch");
  const int t = epoch % cfg.restart_period;
  return cfg.eta_min + (cfg.lr0 - cfg.eta_min) *
                           (1.0 + std::cos(3.14159265358979323846 * t / cfg.restart_period)) / 2.0;
}

// Plain SGD: theta <- theta - lr * g. Rejects shape mismatches and non-finite
// gradients, naming the offending parameter group.
inline void sgd_step(ModelGraph<float>& model, const ModelGrads<float>& grads, double lr) {
  struct Span {
    std::string name;
    float* data;
    std::size_t count;
  };
  std::vector<Span> ps, gs;
  for_each_param_span(model, [&](const std::string& n, float* d, std::size_t c) {
    ps.push_back({n, d, c});
  });
  for_each_grad_span(const_cast<ModelGrads<float>&>(grads),
                     [&](const std::string& n, float* d, std::size_t c) {
                       gs.push_back({n, d, c});
                     });
  if (ps.size() != gs.size()) throw std::invalid_argument("sgd_step: gradient layout mismatch");
  for (std::size_t k = 0; k < ps.size(); ++k) {
    if (ps[k].count != gs[k].count)
      throw std::invalid_argument("sgd_step: shape mismatch at " + ps[k].name);
    for (std::size_t i = 0; i < ps[k].count; ++i) {
      const float g = gs[k].data[i];
      if (!std::isfinite(g)) throw numeric_error("non-finite gradient in " + ps[k].name);
      ps[k].data[i] -= static_cast<float>(lr * g);
    }
  }
}

inline double validation_dice(const ModelGraph<float>& model, const std::vector<Sample>& val,
                              double threshold) {
  if (val.empty()) return 0.0;
  ConfusionCounts total;
  for (const auto& s : val) {
    auto probs = sigmoid(forward_float(model, s.image));
    total += confusion(probs, s.mask, threshold);
  }
  return dice_from_counts(total);
}

namespace detail {

inline void stack_batch(const std::vector<Sample>& samples, const std::vector<std::size_t>& order,
                        std::size_t begin, std::size_t end, Rng& aug_rng, bool do_augment,
                        Tensor<float>& images, Tensor<float>& masks) {
  const auto& first = samples[order[begin]];
  const int h = first.image.h(), w = first.image.w();
  const int B = static_cast<int>(end - begin);
  images = Tensor<float>(B, 3, h, w);
  masks = Tensor<float>(B, 1, h, w);
  for (int b = 0; b < B; ++b) {
    Sample s = samples[order[begin + b]];
    if (do_augment) s = augment(s, aug_rng);
    if (s.image.h() != h || s.image.w() != w)
      throw std::invalid_argument("train: mixed sample resolutions in one batch");
    std::copy(s.image.data(), s.image.data() + s.image.numel(), images.plane(b, 0));
    std::copy(s.mask.data(), s.mask.data() + s.mask.numel(), masks.plane(b, 0));
  }
}

inline std::string format_log_line(const EpochLog& l) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "epoch=%d lr=%.9g loss=%.9g val_dice=%.6f", l.epoch, l.lr,
                l.mean_loss, l.val_dice);
  return buf;
}

}  // namespace detail

// Seeded deterministic loop: shuffle, augment, forward, loss, backward, SGD
// step with the cosine schedule; per-epoch log record; best-val-Dice
// checkpoint retained. Divergence aborts with the offending step index.
inline TrainResult train(const TrainConfig& cfg, const std::vector<Sample>& train_set,
                         const std::vector<Sample>& val_set, std::ostream* log_out = nullptr) {
  cfg.validate();
  if (train_set.empty()) throw std::invalid_argument("train: empty training split");

  TrainResult res;
  ModelGraph<float> model = build_model<float>(cfg.seed, make_layer_specs(3, cfg.widths));
  res.best = model;
  Rng master(cfg.seed);
  Rng shuffle_rng = master.fork(1);
  Rng aug_rng = master.fork(2);

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0u);

  bool stop = false;
  for (int epoch = 0; epoch < cfg.epochs && !stop; ++epoch) {
    const double lr = lr_schedule(epoch, cfg);
    shuffle_rng.shuffle(order);
    double loss_sum = 0;
    int batches = 0;
    for (std::size_t begin = 0; begin < order.size() && !stop;
         begin += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end =
          std::min(order.size(), begin + static_cast<std::size_t>(cfg.batch_size));
      Tensor<float> images, masks;
      detail::stack_batch(train_set, order, begin, end, aug_rng, cfg.augment, images, masks);

      ForwardTrace<float> trace;
      forward_train(model, images, trace);
      Tensor<float> dlogits;
      const LossOutput lo = loss(trace.logits, masks, cfg.lambda, &dlogits);
      if (!std::isfinite(lo.total))
        throw numeric_error("training diverged: non-finite loss at step " +
                            std::to_string(res.steps));
      ModelGrads<float> grads;
      backward(model, trace, dlogits, grads);
      sgd_step(model, grads, lr);
      loss_sum += lo.total;
      ++batches;
      ++res.steps;
      if (cfg.max_steps > 0 && res.steps >= cfg.max_steps) stop = true;
    }

    EpochLog el;
    el.epoch = epoch;
    el.lr = lr;
    el.mean_loss = batches > 0 ? loss_sum / batches : 0.0;
    el.val_dice = validation_dice(model, val_set, cfg.threshold);
    res.logs.push_back(el);
    if (log_out) *log_out << detail::format_log_line(el) << "\n";

    if (el.val_dice > res.best_val_dice || res.best_epoch < 0) {
      res.best_val_dice = el.val_dice;
      res.best_epoch = epoch;
      res.best = model;
    }
    if (cfg.target_val_dice > 0 && el.val_dice >= cfg.target_val_dice) stop = true;
  }
  res.final = std::move(model);
  return res;
}

}  // namespace qseg
