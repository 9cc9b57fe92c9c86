#pragma once

#include <algorithm>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "pointform/csv.hpp"
#include "pointform/data.hpp"
#include "pointform/error.hpp"
#include "pointform/mae.hpp"
#include "pointform/model.hpp"
#include "pointform/optim.hpp"
#include "pointform/parallel.hpp"
#include "pointform/random.hpp"

namespace pointform {

inline constexpr std::size_t kDefaultUnfreezeEpoch = 250;
inline constexpr std::size_t kDefaultFinetuneEpochs = 300;

/// Head-only training for epochs [0, U), joint training from U to T.
struct UnfreezeSchedule {
  std::size_t unfreeze_epoch = kDefaultUnfreezeEpoch;
  std::size_t total_epochs = kDefaultFinetuneEpochs;
  std::size_t adapt_epochs = 0;

  void validate() const {
    if (unfreeze_epoch > total_epochs) {
      fail(ErrorKind::Config, "unfreeze epoch " + std::to_string(unfreeze_epoch) + " exceeds total epochs " +
                                  std::to_string(total_epochs));
    }
  }

  bool frozen_at(std::size_t epoch) const { return epoch < unfreeze_epoch; }
};

/// Backbone flags follow `frozen`, the head is always trainable and the
/// decoder never is.
inline void apply_freeze(ParamRegistry& params, bool frozen) {
  for (auto& e : params.entries()) {
    const bool on = e.group == ParamGroup::Head || (is_backbone(e.group) && !frozen);
    e.tensor.set_requires_grad(on);
  }
}

inline std::size_t backbone_param_count(const ParamRegistry& params) {
  std::size_t n = 0;
  for (const auto& e : params.entries())
    if (is_backbone(e.group)) n += e.tensor.numel();
  return n;
}

inline std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

// ----------------------------------------------------------------- evaluate

struct ConfusionMatrix {
  std::size_t classes = 0;
  std::vector<std::size_t> counts;  // row = true class, column = prediction

  explicit ConfusionMatrix(std::size_t c = 0) : classes(c), counts(c * c, 0) {}

  void add(std::size_t truth, std::size_t predicted) { ++counts.at(truth * classes + predicted); }

  std::size_t row_total(std::size_t r) const {
    std::size_t n = 0;
    for (std::size_t c = 0; c < classes; ++c) n += counts[r * classes + c];
    return n;
  }

  /// Each row divided by its class's sample count; empty rows stay zero.
  std::vector<double> normalized() const {
    std::vector<double> out(counts.size(), 0.0);
    for (std::size_t r = 0; r < classes; ++r) {
      const auto total = row_total(r);
      if (total == 0) continue;
      for (std::size_t c = 0; c < classes; ++c)
        out[r * classes + c] = static_cast<double>(counts[r * classes + c]) / static_cast<double>(total);
    }
    return out;
  }
};

struct EvalOptions {
  std::optional<std::size_t> depth;
  std::size_t voting = 0;  // >1 averages logits over this many scale augmentations
  std::uint64_t seed = 0;
  std::size_t threads = 1;
};

struct Evaluation {
  double accuracy = 0.0;
  ConfusionMatrix confusion;
  std::vector<std::size_t> predictions;  // aligned with the evaluated indices
};

/// Patch seed for evaluation, fixed per sample so every epoch and every run
/// sees the same patches.
inline std::uint64_t eval_patch_seed(std::size_t sample) { return derive_seed(0xe7a1, {sample}); }

inline Evaluation evaluate(const TransformerModel& model, const Dataset& ds, std::span<const std::size_t> indices,
                           const EvalOptions& opt = {}) {
  const auto& c = model.config();
  if (indices.empty()) fail(ErrorKind::Input, "evaluate: no samples");
  if (ds.class_count() > c.classes) {
    fail(ErrorKind::Config, "evaluate: dataset has " + std::to_string(ds.class_count()) + " classes, model head has " +
                                std::to_string(c.classes));
  }
  Evaluation ev{0.0, ConfusionMatrix(c.classes), std::vector<std::size_t>(indices.size())};
  parallel_for(indices.size(), opt.threads, [&](std::size_t j) {
    NoGradGuard no_grad;
    const std::size_t idx = indices[j];
    const auto& cloud = ds.samples.at(idx).cloud;
    std::vector<double> logits(c.classes, 0.0);
    if (opt.voting > 1) {
      AugmentSpec scale_only;
      scale_only.scale = true;
      for (std::size_t r = 0; r < opt.voting; ++r) {
        const auto view = augment(cloud, scale_only, derive_seed(opt.seed, {0x70e, idx, r}));
        const auto l = forward_logits(model, make_patches(view, c.patches, c.group_size, eval_patch_seed(idx)), opt.depth);
        for (std::size_t k = 0; k < c.classes; ++k) logits[k] += l.values()[k];
      }
    } else {
      const auto l = forward_logits(model, make_patches(cloud, c.patches, c.group_size, eval_patch_seed(idx)), opt.depth);
      logits.assign(l.values().begin(), l.values().end());
    }
    ev.predictions[j] = argmax(logits);
  });
  std::size_t correct = 0;
  for (std::size_t j = 0; j < indices.size(); ++j) {
    const auto truth = static_cast<std::size_t>(ds.samples[indices[j]].label);
    ev.confusion.add(truth, ev.predictions[j]);
    if (truth == ev.predictions[j]) ++correct;
  }
  ev.accuracy = static_cast<double>(correct) / static_cast<double>(indices.size());
  return ev;
}

inline void write_confusion_csv(const std::filesystem::path& path, const ConfusionMatrix& cm,
                                const std::vector<std::string>& names) {
  std::vector<std::string> header{"class"};
  for (std::size_t c = 0; c < cm.classes; ++c) header.push_back(c < names.size() ? names[c] : std::to_string(c));
  CsvWriter csv(path, header);
  const auto norm = cm.normalized();
  for (std::size_t r = 0; r < cm.classes; ++r) {
    std::vector<std::string> row{header[r + 1]};
    std::ostringstream cell;
    for (std::size_t c = 0; c < cm.classes; ++c) {
      cell.str("");
      cell << std::setprecision(17) << norm[r * cm.classes + c];
      row.push_back(cell.str());
    }
    csv.row(row);
  }
}

// ----------------------------------------------------------------- finetune

struct FinetuneConfig {
  UnfreezeSchedule schedule;
  LRPolicy policy = LRPolicy::finetune();
  std::size_t batch_size = 32;
  AugmentSpec augment = [] {
    AugmentSpec a;
    a.scale = true;
    return a;
  }();
  std::optional<std::size_t> depth;  // classify from an earlier block's CLS
  std::uint64_t seed = 0;
  std::size_t threads = 1;

  void validate() const {
    schedule.validate();
    if (schedule.total_epochs > 0 && batch_size == 0) fail(ErrorKind::Config, "finetune: batch size must be >= 1");
    augment.validate();
  }
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double val_acc = 0.0;
  bool frozen = false;
  std::size_t trainable_params = 0;
};

struct FinetuneResult {
  std::vector<EpochMetrics> history;
  double best_val_acc = 0.0;
  std::size_t best_epoch = 0;
  double final_val_acc = 0.0;
};

/// Supervised training with strategic unfreezing. One scheduler spans all T
/// epochs; unfreezing neither restarts it nor resets optimizer state of the
/// head. `on_epoch` sees each epoch's metrics and the current model.
inline FinetuneResult finetune_run(TransformerModel& model, const Dataset& ds, const FinetuneConfig& cfg,
                                   const std::function<void(const EpochMetrics&, const TransformerModel&)>& on_epoch = {}) {
  cfg.validate();
  if (ds.train.empty()) fail(ErrorKind::Input, "finetune: training split is empty");
  if (ds.val.empty()) fail(ErrorKind::Input, "finetune: validation split is empty");
  const auto& mc = model.config();
  if (ds.class_count() > mc.classes) {
    fail(ErrorKind::Config, "finetune: dataset has " + std::to_string(ds.class_count()) + " classes, model head has " +
                                std::to_string(mc.classes));
  }
  if (cfg.depth && *cfg.depth > mc.blocks) fail(ErrorKind::Config, "finetune: depth exceeds encoder blocks");
  const std::size_t T = cfg.schedule.total_epochs;
  LRPolicy policy = cfg.policy;
  policy.total_epochs = T;
  policy.steps_per_epoch = (ds.train.size() + cfg.batch_size - 1) / std::max<std::size_t>(1, cfg.batch_size);
  policy.validate();

  AdamW opt;
  FinetuneResult result;
  std::size_t step = 0;
  std::vector<std::size_t> order(ds.train.begin(), ds.train.end());
  std::vector<std::size_t> predicted(order.size());
  EvalOptions eval_opt;
  eval_opt.depth = cfg.depth;
  eval_opt.threads = cfg.threads;

  for (std::size_t epoch = 0; epoch < T; ++epoch) {
    const bool frozen = cfg.schedule.frozen_at(epoch);
    apply_freeze(model.params(), frozen);
    std::mt19937_64 shuffle_rng(derive_seed(cfg.seed, {0xf17e, epoch}));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    EpochMetrics m;
    m.epoch = epoch;
    m.frozen = frozen;
    m.trainable_params = model.params().trainable_count();
    m.lr = lr_at(policy, step);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size, ++step) {
      const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
      const double w = 1.0 / static_cast<double>(end - begin);
      model.params().zero_grad();
      const double total = accumulate_gradients(end - begin, cfg.threads, w, [&](std::size_t j) {
        const std::size_t pos = begin + j, idx = order[pos];
        const auto& s = ds.samples[idx];
        const std::uint64_t sseed = derive_seed(cfg.seed, {epoch, pos});
        const auto view = augment(s.cloud, cfg.augment, derive_seed(sseed, {1}));
        const auto patches = make_patches(view, mc.patches, mc.group_size, derive_seed(sseed, {2}));
        Tensor logits = forward_logits(model, patches, cfg.depth);
        predicted[pos] = argmax(logits.values()) == static_cast<std::size_t>(s.label) ? 1 : 0;
        return cross_entropy(logits, static_cast<std::size_t>(s.label));
      });
      opt.step(model.params(), lr_at(policy, step), policy.weight_decay);
      loss_sum += total;
      for (std::size_t pos = begin; pos < end; ++pos) correct += predicted[pos];
    }
    model.params().zero_grad();
    m.train_loss = loss_sum / static_cast<double>(order.size());
    m.train_acc = static_cast<double>(correct) / static_cast<double>(order.size());
    m.val_acc = evaluate(model, ds, ds.val, eval_opt).accuracy;
    if (epoch == 0 || m.val_acc > result.best_val_acc) {
      result.best_val_acc = m.val_acc;
      result.best_epoch = epoch;
    }
    result.final_val_acc = m.val_acc;
    result.history.push_back(m);
    if (on_epoch) on_epoch(m, model);
  }
  apply_freeze(model.params(), cfg.schedule.frozen_at(T));
  return result;
}

inline void write_metrics_csv(const std::filesystem::path& path, const std::vector<EpochMetrics>& history) {
  CsvWriter csv(path, {"epoch", "lr", "train_loss", "train_acc", "val_acc", "frozen", "trainable_params"});
  for (const auto& m : history) csv.write(m.epoch, m.lr, m.train_loss, m.train_acc, m.val_acc, m.frozen ? 1 : 0, m.trainable_params);
}

/// Continues masked-reconstruction pretraining on a new distribution. Zero
/// epochs leaves the model untouched.
inline MaeHistory domain_adapt_pretrain(TransformerModel& model, const Dataset& ds, std::size_t epochs,
                                        MaeTrainConfig cfg = {}) {
  if (epochs == 0) return {};
  cfg.epochs = epochs;
  for (auto& e : model.params().entries()) e.tensor.set_requires_grad(e.group != ParamGroup::Head);
  auto history = pretrain_mae(model, ds, cfg);
  return history;
}

/// Accuracy of the model cut after `depth` blocks. With head_epochs > 0 a
/// copy is first trained on the truncated features: only its head, or the
/// whole network when `full_finetune` is set.
inline Evaluation evaluate_truncated(const TransformerModel& model, const Dataset& ds, std::size_t depth,
                                     std::size_t head_epochs, bool full_finetune = false, FinetuneConfig cfg = {},
                                     const EvalOptions& opt = {}) {
  truncate_depth(model, depth);
  EvalOptions eo = opt;
  eo.depth = depth;
  if (head_epochs == 0) return evaluate(model, ds, ds.val, eo);
  TransformerModel copy = model.clone();
  cfg.schedule = {full_finetune ? 0 : head_epochs, head_epochs, 0};
  cfg.depth = depth;
  cfg.policy.warmup_epochs = std::min(cfg.policy.warmup_epochs, head_epochs);
  finetune_run(copy, ds, cfg);
  return evaluate(copy, ds, ds.val, eo);
}

}  // namespace pointform
