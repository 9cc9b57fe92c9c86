#pragma once

#include <cmath>
#include <deque>
#include <functional>
#include <numeric>
#include <vector>

#include "pointform/data.hpp"
#include "pointform/error.hpp"
#include "pointform/mae.hpp"
#include "pointform/model.hpp"
#include "pointform/optim.hpp"
#include "pointform/parallel.hpp"
#include "pointform/random.hpp"

namespace pointform {

inline constexpr std::size_t kDefaultQueueCapacity = 4096;
inline constexpr double kDefaultTemperature = 0.07;
inline constexpr double kDefaultMomentum = 0.999;
inline constexpr double kDefaultContrastWeight = 1e-2;

/// Query model trained by backpropagation, key model following it by
/// exponential moving average. Key parameters never require gradients.
struct MomentumPair {
  TransformerModel query;
  TransformerModel key;
  double momentum = kDefaultMomentum;

  static MomentumPair from(const TransformerModel& model, double momentum = kDefaultMomentum) {
    if (!(momentum >= 0.0 && momentum <= 1.0)) fail(ErrorKind::Config, "momentum must be in [0, 1]");
    MomentumPair pair{model.clone(), model.clone(), momentum};
    pair.key.params().set_all_trainable(false);
    return pair;
  }
};

/// key <- m * key + (1 - m) * query, parameter by parameter.
inline void momentum_update(MomentumPair& pair) {
  const double m = pair.momentum;
  auto query = pair.query.params().entries();
  auto key = pair.key.params().entries();
  if (query.size() != key.size()) fail(ErrorKind::Config, "momentum_update: parameter sets differ");
  for (std::size_t i = 0; i < key.size(); ++i) {
    if (key[i].name != query[i].name) fail(ErrorKind::Config, "momentum_update: parameter " + key[i].name + " has no query match");
    auto k = key[i].tensor.mutable_values();
    const auto q = query[i].tensor.values();
    if (m == 0.0) {
      std::copy(q.begin(), q.end(), k.begin());
      continue;
    }
    for (std::size_t j = 0; j < k.size(); ++j) k[j] = m * k[j] + (1.0 - m) * q[j];
  }
}

/// FIFO of unit-norm key features; the oldest entry is evicted once full.
class NegativeQueue {
 public:
  NegativeQueue(std::size_t dim, std::size_t capacity = kDefaultQueueCapacity) : dim_(dim), capacity_(capacity) {
    if (dim == 0 || capacity == 0) fail(ErrorKind::Config, "queue: dim and capacity must be >= 1");
  }

  std::size_t dim() const { return dim_; }
  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  bool full() const { return entries_.size() == capacity_; }

  /// Stores a normalized copy of `v`.
  void enqueue(std::span<const double> v) {
    if (v.size() != dim_) fail(ErrorKind::Dimension, "queue: feature dim mismatch");
    double n = 0.0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    if (!(n > 0.0) || !std::isfinite(n)) fail(ErrorKind::Numeric, "queue: cannot normalize a zero or non-finite feature");
    std::vector<double> u(v.begin(), v.end());
    for (auto& x : u) x /= n;
    if (full()) entries_.pop_front();
    entries_.push_back(std::move(u));
  }

  /// Oldest first.
  std::span<const double> at(std::size_t i) const { return entries_.at(i); }

  /// Snapshot as a constant [size x dim] matrix; undefined while empty.
  Tensor matrix() const {
    if (entries_.empty()) return {};
    std::vector<double> data;
    data.reserve(entries_.size() * dim_);
    for (const auto& e : entries_) data.insert(data.end(), e.begin(), e.end());
    return Tensor(Shape{entries_.size(), dim_}, std::move(data));
  }

 private:
  std::size_t dim_, capacity_;
  std::deque<std::vector<double>> entries_;
};

/// InfoNCE with the positive at index 0: cross-entropy over
/// [q.k_pos, q.k_1, ..., q.k_Q] / tau. `q` is [1 x d]; `negatives` is a
/// [Q x d] snapshot (Q may be 0). q and k_pos are expected unit-norm.
inline Tensor contrastive_loss(const Tensor& q, const Tensor& k_pos, const Tensor& negatives, double tau) {
  if (!(tau > 0.0)) fail(ErrorKind::Config, "contrastive loss: temperature must be positive");
  if (q.shape() != k_pos.shape() || q.rank() != 2 || q.rows() != 1) {
    fail(ErrorKind::Dimension, "contrastive loss: q and k_pos must both be [1 x d]");
  }
  Tensor keys = negatives.defined() && negatives.rows() > 0 ? concat_rows({k_pos, negatives}) : k_pos;
  if (keys.cols() != q.cols()) fail(ErrorKind::Dimension, "contrastive loss: queue dim mismatch");
  Tensor logits = scale(matmul(q, transpose(keys)), 1.0 / tau);
  return cross_entropy(logits, 0);
}

inline Tensor contrastive_loss(const Tensor& q, const Tensor& k_pos, const NegativeQueue& queue, double tau) {
  return contrastive_loss(q, k_pos, queue.matrix(), tau);
}

struct MocoConfig {
  double momentum = kDefaultMomentum;
  double temperature = kDefaultTemperature;
  std::size_t queue_capacity = kDefaultQueueCapacity;
  bool hybrid = false;
  double contrast_weight = kDefaultContrastWeight;  // w_c
  double mask_ratio = kDefaultMaskRatio;            // hybrid reconstruction path
  AugmentSpec augment = [] {
    AugmentSpec a;
    a.scale = true;
    a.noise_sigma = 0.01;
    a.rotate_axes = {false, true, false};
    a.dropout = 0.2;
    return a;
  }();

  void validate() const {
    if (!(momentum >= 0.0 && momentum <= 1.0)) fail(ErrorKind::Config, "moco: momentum must be in [0, 1]");
    if (!(temperature > 0.0)) fail(ErrorKind::Config, "moco: temperature must be positive");
    if (queue_capacity == 0) fail(ErrorKind::Config, "moco: queue capacity must be >= 1");
    if (!(contrast_weight >= 0.0)) fail(ErrorKind::Config, "moco: contrast weight must be non-negative");
    augment.validate();
  }
};

struct MocoStepResult {
  double loss = 0.0;           // combined objective
  double reconstruction = 0.0;  // L_rec (hybrid only)
  double contrastive = 0.0;     // L_con
  bool warmup = false;          // queue was empty, contrastive term is trivially 0
};

namespace detail {

inline std::uint64_t view_seed(std::uint64_t sample_seed, std::uint64_t view) { return derive_seed(sample_seed, {0xc0, view}); }

/// Unit-norm CLS feature [1 x dim] of a full (unmasked) view.
inline Tensor cls_feature(const TransformerModel& model, const PointCloud& view, std::uint64_t patch_seed) {
  const auto& c = model.config();
  const auto patches = make_patches(view, c.patches, c.group_size, patch_seed);
  const auto pt = patch_tensors(patches);
  auto enc = model.encode(model.embed_patches(pt.groups), model.positional_encoding(pt.centers));
  return normalize_rows(slice_rows(enc.features, 0, 1));
}

/// Unit-norm key feature of a view, computed without recording.
inline std::vector<double> key_feature(const TransformerModel& key, const PointCloud& view, std::uint64_t patch_seed) {
  NoGradGuard guard;
  const auto f = cls_feature(key, view, patch_seed);
  return {f.values().begin(), f.values().end()};
}

}  // namespace detail

/// Shared implementation of the contrastive and hybrid steps. Gradients are
/// accumulated into the query model; the update callback (typically the
/// optimizer) runs before the momentum update and the enqueue.
inline MocoStepResult moco_batch(MomentumPair& pair, NegativeQueue& queue, std::span<const PointCloud* const> batch,
                                 std::span<const std::uint64_t> seeds, const MocoConfig& cfg, bool hybrid,
                                 const std::function<void()>& update, std::size_t threads) {
  cfg.validate();
  if (batch.empty()) fail(ErrorKind::Input, "moco: empty batch");
  if (seeds.size() != batch.size()) fail(ErrorKind::Dimension, "moco: one seed per sample required");
  const std::size_t n = batch.size();
  const double w = 1.0 / static_cast<double>(n);

  // Key views first: they only read the key model.
  std::vector<std::vector<double>> keys(n);
  std::vector<PointCloud> query_views(n);
  parallel_for(n, threads, [&](std::size_t i) {
    const PointCloud kv = augment(*batch[i], cfg.augment, detail::view_seed(seeds[i], 1));
    keys[i] = detail::key_feature(pair.key, kv, detail::view_seed(seeds[i], 3));
    query_views[i] = augment(*batch[i], cfg.augment, detail::view_seed(seeds[i], 0));
  });

  const Tensor negatives = queue.matrix();
  const bool use_contrast = !hybrid || cfg.contrast_weight != 0.0;
  std::vector<double> rec(n, 0.0), con(n, 0.0);
  const double total = accumulate_gradients(n, threads, w, [&](std::size_t i) {
    const Tensor k_pos(Shape{1, queue.dim()}, keys[i]);
    if (!hybrid) {
      Tensor q = detail::cls_feature(pair.query, query_views[i], detail::view_seed(seeds[i], 2));
      Tensor l = contrastive_loss(q, k_pos, negatives, cfg.temperature);
      con[i] = l.item();
      return l;
    }
    const auto& c = pair.query.config();
    const auto mae_seeds = MaeSampleSeeds::from(detail::view_seed(seeds[i], 2));
    PatchSet patches = make_patches(query_views[i], c.patches, c.group_size, mae_seeds.patches);
    MaskPlan plan = make_mask(c.patches, cfg.mask_ratio, mae_seeds.mask);
    auto fwd = mae_forward(pair.query, patches, plan);
    rec[i] = fwd.loss.item();
    if (!use_contrast) return fwd.loss;
    Tensor q = normalize_rows(slice_rows(fwd.features, 0, 1));
    Tensor l = contrastive_loss(q, k_pos, negatives, cfg.temperature);
    con[i] = l.item();
    return add(fwd.loss, scale(l, cfg.contrast_weight));
  });

  MocoStepResult result;
  result.loss = total * w;
  result.reconstruction = std::accumulate(rec.begin(), rec.end(), 0.0) * w;
  result.contrastive = std::accumulate(con.begin(), con.end(), 0.0) * w;
  result.warmup = queue.empty();

  if (update) update();
  momentum_update(pair);
  for (const auto& k : keys) queue.enqueue(k);
  return result;
}

/// Contrastive step: query CLS of one view against the key CLS of another.
inline MocoStepResult moco_step(MomentumPair& pair, NegativeQueue& queue, std::span<const PointCloud* const> batch,
                                std::span<const std::uint64_t> seeds, const MocoConfig& cfg,
                                const std::function<void()>& update = {}, std::size_t threads = 1) {
  return moco_batch(pair, queue, batch, seeds, cfg, false, update, threads);
}

/// L = L_rec + w_c * L_con, the reconstruction taken from the masked query
/// view and the contrastive term from that view's CLS feature.
inline MocoStepResult hybrid_step(MomentumPair& pair, NegativeQueue& queue, std::span<const PointCloud* const> batch,
                                  std::span<const std::uint64_t> seeds, const MocoConfig& cfg,
                                  const std::function<void()>& update = {}, std::size_t threads = 1) {
  return moco_batch(pair, queue, batch, seeds, cfg, true, update, threads);
}

// ------------------------------------------------------------------ pipeline

struct MocoTrainConfig {
  std::size_t epochs = 300;
  std::size_t batch_size = 128;
  LRPolicy policy = LRPolicy::pretrain();
  MocoConfig moco;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
};

struct MocoStepLog {
  std::size_t epoch, step;
  double lr;
  MocoStepResult result;
};

struct MocoHistory {
  std::vector<MocoStepLog> steps;
};

/// Contrastive (or hybrid) pretraining of `model` in place; the trained
/// query model is written back into `model`.
inline MocoHistory pretrain_moco(TransformerModel& model, const Dataset& ds, const MocoTrainConfig& cfg,
                                 const std::function<void(const MocoHistory&, std::size_t epoch)>& on_epoch = {}) {
  cfg.moco.validate();
  if (ds.train.empty()) fail(ErrorKind::Input, "pretrain: training split is empty");
  if (cfg.epochs > 0 && cfg.batch_size == 0) fail(ErrorKind::Config, "pretrain: batch size must be >= 1");
  LRPolicy policy = cfg.policy;
  policy.total_epochs = cfg.epochs;
  policy.steps_per_epoch = (ds.train.size() + cfg.batch_size - 1) / std::max<std::size_t>(1, cfg.batch_size);
  policy.validate();

  MomentumPair pair = MomentumPair::from(model, cfg.moco.momentum);
  NegativeQueue queue(model.config().dim, cfg.moco.queue_capacity);
  AdamW opt;
  MocoHistory history;
  std::size_t step = 0;
  std::vector<std::size_t> order(ds.train.begin(), ds.train.end());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::mt19937_64 shuffle_rng(derive_seed(cfg.seed, {0xe70c, epoch}));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size, ++step) {
      const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
      std::vector<const PointCloud*> batch;
      std::vector<std::uint64_t> seeds;
      for (std::size_t i = begin; i < end; ++i) {
        batch.push_back(&ds.samples[order[i]].cloud);
        seeds.push_back(derive_seed(cfg.seed, {epoch, i}));
      }
      const double lr = lr_at(policy, step);
      pair.query.params().zero_grad();
      auto update = [&] { opt.step(pair.query.params(), lr, policy.weight_decay); };
      auto r = cfg.moco.hybrid ? hybrid_step(pair, queue, batch, seeds, cfg.moco, update, cfg.threads)
                               : moco_step(pair, queue, batch, seeds, cfg.moco, update, cfg.threads);
      history.steps.push_back({epoch, step, lr, r});
    }
    if (on_epoch) on_epoch(history, epoch);
  }
  pair.query.params().zero_grad();
  model = pair.query.clone();
  return history;
}

}  // namespace pointform
