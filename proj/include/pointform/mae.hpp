#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <vector>

#include "pointform/data.hpp"
#include "pointform/error.hpp"
#include "pointform/geometry.hpp"
#include "pointform/model.hpp"
#include "pointform/optim.hpp"
#include "pointform/parallel.hpp"
#include "pointform/random.hpp"

namespace pointform {

inline constexpr double kDefaultMaskRatio = 0.6;

struct MaskPlan {
  double ratio = 0.0;
  std::vector<std::size_t> visible, masked;
  std::uint64_t seed = 0;
};

/// round(ratio * n), ties up.
inline std::size_t masked_count(std::size_t n, double ratio) {
  return static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n) + 0.5));
}

/// Uniform random subset of 0..n-1 to mask. Both index lists are sorted.
inline MaskPlan make_mask(std::size_t n, double ratio, std::uint64_t seed) {
  if (!(ratio >= 0.0 && ratio < 1.0)) fail(ErrorKind::Config, "mask ratio must be in [0, 1), got " + std::to_string(ratio));
  const std::size_t m = masked_count(n, ratio);
  if (m >= n) fail(ErrorKind::Config, "mask ratio " + std::to_string(ratio) + " leaves no visible patch out of " + std::to_string(n));
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  MaskPlan plan{ratio, {}, {}, seed};
  plan.masked.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(m));
  plan.visible.assign(idx.begin() + static_cast<std::ptrdiff_t>(m), idx.end());
  std::sort(plan.masked.begin(), plan.masked.end());
  std::sort(plan.visible.begin(), plan.visible.end());
  return plan;
}

/// Reconstruction loss given a prediction [M x K x 3] and the true groups
/// [M*K x 3], both center-relative.
inline Tensor mae_loss_from_prediction(const Tensor& prediction, const Tensor& target_groups, std::size_t masked) {
  return chamfer_groups(prediction, target_groups, masked);
}

struct MaeForward {
  Tensor loss;
  Tensor features;    // encoder output over visible patches, CLS first
  Tensor prediction;  // [M x K x 3]
};

/// Embeds the visible patches, encodes them, decodes the masked ones and
/// scores the prediction against the true masked groups.
inline MaeForward mae_forward(const TransformerModel& model, const PatchSet& patches, const MaskPlan& plan) {
  if (plan.masked.empty()) fail(ErrorKind::Input, "MAE forward needs at least one masked patch");
  const auto vis = patch_tensors(patches, plan.visible);
  const auto msk = patch_tensors(patches, plan.masked);
  auto enc = model.encode(model.embed_patches(vis.groups), model.positional_encoding(vis.centers));
  Tensor visible_features = slice_rows(enc.features, 1, enc.features.rows());
  Tensor pred = model.decode_masked(visible_features, vis.centers, msk.centers);
  Tensor loss = mae_loss_from_prediction(pred, msk.groups, plan.masked.size());
  return {loss, enc.features, pred};
}

struct MaeSampleSeeds {
  std::uint64_t augment, patches, mask;

  static MaeSampleSeeds from(std::uint64_t seed) {
    return {derive_seed(seed, {1}), derive_seed(seed, {2}), derive_seed(seed, {3})};
  }
};

/// Augments, patches and masks one cloud.
inline std::pair<PatchSet, MaskPlan> mae_inputs(const TransformerModel& model, const PointCloud& cloud, double ratio,
                                                const AugmentSpec& aug, const MaeSampleSeeds& seeds) {
  const auto& c = model.config();
  const PointCloud view = aug.identity() ? cloud : augment(cloud, aug, seeds.augment);
  PatchSet patches = make_patches(view, c.patches, c.group_size, seeds.patches);
  MaskPlan plan = make_mask(c.patches, ratio, seeds.mask);
  return {std::move(patches), std::move(plan)};
}

/// One optimization step's gradients: mean MAE loss over `batch`, with
/// gradients accumulated into the trainable parameters. `seeds[i]` drives
/// the randomness of sample i.
inline double mae_step(const TransformerModel& model, std::span<const PointCloud* const> batch,
                       std::span<const std::uint64_t> seeds, double ratio, const AugmentSpec& aug,
                       std::size_t threads = 1) {
  if (batch.empty()) fail(ErrorKind::Input, "mae_step: empty batch");
  if (seeds.size() != batch.size()) fail(ErrorKind::Dimension, "mae_step: one seed per sample required");
  const double w = 1.0 / static_cast<double>(batch.size());
  const double total = accumulate_gradients(batch.size(), threads, w, [&](std::size_t i) {
    auto [patches, plan] = mae_inputs(model, *batch[i], ratio, aug, MaeSampleSeeds::from(seeds[i]));
    return mae_forward(model, patches, plan).loss;
  });
  return total * w;
}

/// Mean reconstruction loss with per-sample masks fixed by (seed, index), so
/// repeated calls on the same data are comparable.
inline double mae_eval_loss(const TransformerModel& model, std::span<const PointCloud* const> clouds, double ratio,
                            std::uint64_t seed, std::size_t threads = 1) {
  if (clouds.empty()) return 0.0;
  NoGradGuard no_grad;
  std::vector<double> losses(clouds.size());
  parallel_for(clouds.size(), threads, [&](std::size_t i) {
    NoGradGuard guard;
    auto [patches, plan] = mae_inputs(model, *clouds[i], ratio, AugmentSpec{}, MaeSampleSeeds::from(derive_seed(seed, {i})));
    losses[i] = mae_forward(model, patches, plan).loss.item();
  });
  return std::accumulate(losses.begin(), losses.end(), 0.0) / static_cast<double>(losses.size());
}

// ------------------------------------------------------------------ pipeline

struct MaeTrainConfig {
  std::size_t epochs = 300;
  std::size_t batch_size = 128;
  double mask_ratio = kDefaultMaskRatio;
  LRPolicy policy = LRPolicy::pretrain();
  AugmentSpec augment = [] {
    AugmentSpec a;
    a.scale = true;
    return a;
  }();
  std::uint64_t seed = 0;
  std::size_t threads = 1;

  void validate() const {
    if (epochs > 0 && batch_size == 0) fail(ErrorKind::Config, "pretrain: batch size must be >= 1");
    if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) fail(ErrorKind::Config, "pretrain: mask ratio must be in (0, 1)");
    augment.validate();
  }
};

struct MaeStepLog {
  std::size_t epoch, step;
  double lr, loss;
};

struct MaeEpochLog {
  std::size_t epoch;
  double train_loss, val_loss;
};

struct MaeHistory {
  double initial_val_loss = 0.0;
  std::vector<MaeStepLog> steps;
  std::vector<MaeEpochLog> epochs;
};

inline std::vector<const PointCloud*> cloud_ptrs(const Dataset& ds, std::span<const std::size_t> indices) {
  std::vector<const PointCloud*> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(&ds.samples.at(i).cloud);
  return out;
}

/// Fixed seed for validation masks, shared by every epoch of a run.
inline std::uint64_t mae_val_seed(std::uint64_t seed) { return derive_seed(seed, {0x7a1}); }

/// Trains encoder and decoder by masked reconstruction on the training
/// split; the validation split is scored before training and after every
/// epoch. `on_epoch` runs after each epoch's log entry is appended.
inline MaeHistory pretrain_mae(TransformerModel& model, const Dataset& ds, const MaeTrainConfig& cfg,
                               const std::function<void(const MaeHistory&)>& on_epoch = {}) {
  cfg.validate();
  if (ds.train.empty()) fail(ErrorKind::Input, "pretrain: training split is empty");
  LRPolicy policy = cfg.policy;
  policy.total_epochs = cfg.epochs;
  policy.steps_per_epoch = (ds.train.size() + cfg.batch_size - 1) / std::max<std::size_t>(1, cfg.batch_size);
  policy.validate();

  const auto val = cloud_ptrs(ds, ds.val);
  const std::uint64_t val_seed = mae_val_seed(cfg.seed);
  MaeHistory history;
  history.initial_val_loss = mae_eval_loss(model, val, cfg.mask_ratio, val_seed, cfg.threads);

  AdamW opt;
  std::size_t step = 0;
  std::vector<std::size_t> order(ds.train.begin(), ds.train.end());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::mt19937_64 shuffle_rng(derive_seed(cfg.seed, {0xe70c, epoch}));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double epoch_loss = 0.0;
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size, ++step) {
      const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
      std::vector<const PointCloud*> batch;
      std::vector<std::uint64_t> seeds;
      for (std::size_t i = begin; i < end; ++i) {
        batch.push_back(&ds.samples[order[i]].cloud);
        seeds.push_back(derive_seed(cfg.seed, {epoch, i}));
      }
      model.params().zero_grad();
      const double loss = mae_step(model, batch, seeds, cfg.mask_ratio, cfg.augment, cfg.threads);
      const double lr = lr_at(policy, step);
      opt.step(model.params(), lr, policy.weight_decay);
      history.steps.push_back({epoch, step, lr, loss});
      epoch_loss += loss * static_cast<double>(end - begin);
    }
    model.params().zero_grad();
    history.epochs.push_back({epoch, epoch_loss / static_cast<double>(order.size()),
                              mae_eval_loss(model, val, cfg.mask_ratio, val_seed, cfg.threads)});
    if (on_epoch) on_epoch(history);
  }
  return history;
}

// ------------------------------------------------------------ reconstruction

struct Reconstruction {
  std::vector<Point3> visible;        // input points of the visible patches
  std::vector<Point3> reconstructed;  // M*K predicted points, absolute coordinates
  std::vector<Point3> truth;          // M*K true points of the masked patches
  double chamfer = 0.0;
  MaskPlan plan;
};

/// Inference-time masking at an arbitrary ratio.
inline Reconstruction reconstruct_at_ratio(const TransformerModel& model, const PointCloud& pc, double ratio,
                                           std::uint64_t seed) {
  const auto& c = model.config();
  if (!(ratio > 0.0)) fail(ErrorKind::Input, "reconstruct: ratio must be > 0 (nothing would be masked)");
  if (masked_count(c.patches, ratio) == 0) fail(ErrorKind::Input, "reconstruct: ratio masks no patch");
  NoGradGuard no_grad;
  const auto seeds = MaeSampleSeeds::from(seed);
  PatchSet patches = make_patches(pc, c.patches, c.group_size, seeds.patches);
  Reconstruction out;
  out.plan = make_mask(c.patches, ratio, seeds.mask);
  const auto fwd = mae_forward(model, patches, out.plan);
  const auto pred = fwd.prediction.values();
  for (std::size_t mi = 0; mi < out.plan.masked.size(); ++mi) {
    const std::size_t g = out.plan.masked[mi];
    const auto& center = patches.centers[g];
    const auto group = patches.group(g);
    for (std::size_t j = 0; j < c.group_size; ++j) {
      const double* p = pred.data() + (mi * c.group_size + j) * 3;
      out.reconstructed.push_back({p[0] + center[0], p[1] + center[1], p[2] + center[2]});
      out.truth.push_back({group[j][0] + center[0], group[j][1] + center[1], group[j][2] + center[2]});
    }
  }
  for (auto g : out.plan.visible) {
    const auto& center = patches.centers[g];
    for (const auto& q : patches.group(g)) out.visible.push_back({q[0] + center[0], q[1] + center[1], q[2] + center[2]});
  }
  out.chamfer = chamfer(out.reconstructed, out.truth);
  return out;
}

}  // namespace pointform
