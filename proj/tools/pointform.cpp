// pointform: pretraining, finetuning and analysis of point cloud transformers.

#include <cstdio>
#include <iostream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "pointform/pointform.hpp"
#include "run_config.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace pointform;
using namespace pointform::cli;

namespace {

struct Command {
  std::string name;
  CLI::App* app = nullptr;
  json defaults;
  std::unique_ptr<Binder> bind;
  std::string config_path;
  std::string run_name;
  bool run_dir = true;
  std::function<void(json&)> resolve;  // post-processing of the resolved config
  std::function<void(const json&, const fs::path&)> run;
};

json common_defaults() { return {{"seed", 0}, {"threads", default_threads()}, {"out", "runs"}}; }

void add_common(Command& c) {
  c.app->add_option("--config", c.config_path, "JSON config file; flags override its values")->check(CLI::ExistingFile);
  c.bind->option<std::uint64_t>("--seed", "/seed", "Random seed");
  c.bind->option<std::size_t>("--threads", "/threads", "Worker threads (fallback: POINTFORM_THREADS)")
      ->check(CLI::PositiveNumber);
  if (c.run_dir) {
    c.bind->option<std::string>("--out", "/out", "Parent directory for the run directory");
    c.app->add_option("--run-name", c.run_name, "Run directory name (default: <command>-<timestamp>)");
  }
}

void add_data(Command& c) {
  c.bind->option<std::string>("--data", "/data/dir", "Dataset directory with manifest.csv (empty: synthetic set)");
  c.bind->option<std::string>("--manifest", "/data/manifest", "Manifest path (default: <data>/manifest.csv)");
  c.bind->option<std::size_t>("--per-class", "/data/per_class", "Synthetic samples per class");
  c.bind->option<std::size_t>("--points", "/data/points", "Synthetic points per cloud");
  c.bind->option<double>("--val-ratio", "/data/val_ratio", "Validation fraction");
  c.bind->option<std::uint64_t>("--data-seed", "/data/seed", "Seed of the synthetic set and of the split");
}

void add_model(Command& c) {
  c.bind->option<std::size_t>("--blocks", "/model/blocks", "Encoder blocks");
  c.bind->option<std::size_t>("--heads", "/model/heads", "Attention heads");
  c.bind->option<std::size_t>("--dim", "/model/dim", "Token width");
  c.bind->option<std::size_t>("--patches", "/model/patches", "Patches per cloud");
  c.bind->option<std::size_t>("--group-size", "/model/group_size", "Points per patch");
}

void add_optimizer(Command& c) {
  c.bind->option<std::size_t>("--epochs", "/schedule/epochs", "Training epochs");
  c.bind->option<std::size_t>("--warmup-epochs", "/schedule/warmup_epochs", "Linear warmup epochs");
  c.bind->option<std::size_t>("--batch-size", "/optimizer/batch_size", "Batch size");
  c.bind->option<double>("--lr", "/optimizer/peak", "Peak learning rate");
  c.bind->option<double>("--weight-decay", "/optimizer/weight_decay", "Decoupled weight decay");
}

void clamp_warmup(json& r) {
  auto& s = r["schedule"];
  s["warmup_epochs"] = std::min(s["warmup_epochs"].get<std::size_t>(), s["epochs"].get<std::size_t>());
}

std::size_t threads_of(const json& r) { return r.at("threads").get<std::size_t>(); }
std::uint64_t seed_of(const json& r) { return r.at("seed").get<std::uint64_t>(); }

Dataset load_dataset(const json& r) {
  const auto& d = r.at("data");
  const std::string dir = d.at("dir").get<std::string>();
  const double val_ratio = d.at("val_ratio").get<double>();
  const auto seed = d.at("seed").get<std::uint64_t>();
  if (dir.empty()) {
    return make_dataset(d.at("per_class").get<std::size_t>(), seed,
                        {d.at("points").get<std::size_t>(), d.at("jitter").get<double>(), val_ratio});
  }
  const std::string manifest = d.at("manifest").get<std::string>();
  auto res = ingest_directory(dir, manifest.empty() ? fs::path(dir) / "manifest.csv" : fs::path(manifest), val_ratio, seed);
  const auto& rep = res.report;
  for (const auto& m : rep.missing) std::cerr << "warning: listed in manifest but missing: " << m << '\n';
  for (const auto& [f, why] : rep.unreadable) std::cerr << "warning: skipped unreadable " << f << ": " << why << '\n';
  for (const auto& f : rep.unlabeled) std::cerr << "warning: not in manifest: " << f << '\n';
  if (rep.skipped_extensions) std::cerr << "warning: skipped " << rep.skipped_extensions << " files with other extensions\n";
  return std::move(res.dataset);
}

std::span<const std::size_t> split_of(const Dataset& ds, const std::string& split, std::vector<std::size_t>& all) {
  if (split == "val") return ds.val;
  if (split == "train") return ds.train;
  if (split == "all") {
    all.resize(ds.samples.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    return all;
  }
  fail(ErrorKind::Config, "split must be train, val or all (got '" + split + "')");
}

const Sample& sample_at(const Dataset& ds, std::size_t i) {
  if (i >= ds.samples.size()) {
    fail(ErrorKind::Input, "sample " + std::to_string(i) + " out of range (dataset has " + std::to_string(ds.samples.size()) + ")");
  }
  return ds.samples[i];
}

std::optional<std::size_t> depth_of(long depth) {
  if (depth < 0) return std::nullopt;
  return static_cast<std::size_t>(depth);
}

Checkpoint load_from(const json& r, const std::string& key = "from") { return load_checkpoint(r.at(key).get<std::string>()); }

void save_model(const fs::path& dir, const TransformerModel& model, const json& r, std::uint64_t steps) {
  CheckpointMeta meta;
  meta.step = steps;
  meta.extra = {{"command", r.at("command")}, {"seed", r.at("seed")}};
  save_checkpoint(dir / "model.pfck", model, meta);
}

void write_mae_history(const fs::path& dir, const MaeHistory& h) {
  CsvWriter steps(dir / "steps.csv", {"epoch", "step", "lr", "loss"});
  for (const auto& s : h.steps) steps.write(s.epoch, s.step, s.lr, s.loss);
  CsvWriter epochs(dir / "epochs.csv", {"epoch", "train_loss", "val_loss"});
  epochs.write(0, "", h.initial_val_loss);
  for (const auto& e : h.epochs) epochs.write(e.epoch + 1, e.train_loss, e.val_loss);
}

void log_mae_epoch(const MaeHistory& h, std::size_t total) {
  const auto& e = h.epochs.back();
  std::fprintf(stderr, "epoch %zu/%zu train %.6f val %.6f\n", e.epoch + 1, total, e.train_loss, e.val_loss);
}

MaeTrainConfig mae_config_from(const json& r) {
  MaeTrainConfig cfg;
  cfg.epochs = r.at("schedule").at("epochs").get<std::size_t>();
  cfg.batch_size = r.at("optimizer").at("batch_size").get<std::size_t>();
  cfg.mask_ratio = r.at("mae").at("mask_ratio").get<double>();
  cfg.policy = policy_from(r);
  cfg.augment = augment_from(r.at("augmentation"));
  cfg.seed = seed_of(r);
  cfg.threads = threads_of(r);
  return cfg;
}

FinetuneConfig finetune_config_from(const json& r) {
  FinetuneConfig cfg;
  cfg.schedule.total_epochs = r.at("schedule").at("epochs").get<std::size_t>();
  cfg.schedule.unfreeze_epoch = r.at("schedule").at("unfreeze_epoch").get<std::size_t>();
  cfg.batch_size = r.at("optimizer").at("batch_size").get<std::size_t>();
  cfg.policy = policy_from(r);
  cfg.augment = augment_from(r.at("augmentation"));
  cfg.seed = seed_of(r);
  cfg.threads = threads_of(r);
  return cfg;
}

// ------------------------------------------------------------------ commands

void run_gen_data(const json& r, const fs::path&) {
  const auto& d = r.at("data");
  const fs::path out = r.at("out").get<std::string>();
  const auto ds = make_dataset(d.at("per_class").get<std::size_t>(), seed_of(r),
                               {d.at("points").get<std::size_t>(), d.at("jitter").get<double>(), 0.0});
  const std::string format = r.at("format").get<std::string>();
  if (format != "ply" && format != "xyz") fail(ErrorKind::Config, "format must be ply or xyz");
  fs::create_directories(out);
  export_dataset(ds, out, "." + format);
  write_json(out / "gen-data.json", r);
  std::printf("wrote %zu samples to %s\n", ds.samples.size(), out.string().c_str());
}

void run_pretrain_mae(const json& r, const fs::path& dir) {
  const auto ds = load_dataset(r);
  const ModelConfig mc = r.at("model").get<ModelConfig>();
  mc.validate();
  TransformerModel model(mc, seed_of(r));
  const auto cfg = mae_config_from(r);
  const auto h = pretrain_mae(model, ds, cfg, [&](const MaeHistory& hist) { log_mae_epoch(hist, cfg.epochs); });
  write_mae_history(dir, h);
  save_model(dir, model, r, h.steps.size());
  const double final_val = h.epochs.empty() ? h.initial_val_loss : h.epochs.back().val_loss;
  const json summary = {{"initial_val_loss", h.initial_val_loss},
                        {"final_val_loss", final_val},
                        {"reduction", 1.0 - final_val / h.initial_val_loss}};
  write_json(dir / "summary.json", summary);
  std::printf("val_loss initial=%.6f final=%.6f reduction=%.4f\n", h.initial_val_loss, final_val,
              summary["reduction"].get<double>());
}

void run_pretrain_moco(const json& r, const fs::path& dir) {
  const auto ds = load_dataset(r);
  const ModelConfig mc = r.at("model").get<ModelConfig>();
  mc.validate();
  TransformerModel model(mc, seed_of(r));
  MocoTrainConfig cfg;
  cfg.epochs = r.at("schedule").at("epochs").get<std::size_t>();
  cfg.batch_size = r.at("optimizer").at("batch_size").get<std::size_t>();
  cfg.policy = policy_from(r);
  const auto& m = r.at("moco");
  cfg.moco.hybrid = m.at("hybrid").get<bool>();
  cfg.moco.contrast_weight = m.at("contrast_weight").get<double>();
  cfg.moco.queue_capacity = m.at("queue_capacity").get<std::size_t>();
  cfg.moco.momentum = m.at("momentum").get<double>();
  cfg.moco.temperature = m.at("temperature").get<double>();
  cfg.moco.mask_ratio = r.at("mae").at("mask_ratio").get<double>();
  cfg.moco.augment = augment_from(r.at("augmentation"));
  cfg.seed = seed_of(r);
  cfg.threads = threads_of(r);
  CsvWriter csv(dir / "steps.csv", {"epoch", "step", "lr", "loss", "reconstruction", "contrastive", "warmup"});
  std::size_t written = 0;
  const auto h = pretrain_moco(model, ds, cfg, [&](const MocoHistory& hist, std::size_t epoch) {
    double sum = 0.0;
    std::size_t n = 0;
    for (; written < hist.steps.size(); ++written, ++n) {
      const auto& s = hist.steps[written];
      csv.write(s.epoch, s.step, s.lr, s.result.loss, s.result.reconstruction, s.result.contrastive, s.result.warmup ? 1 : 0);
      sum += s.result.loss;
    }
    csv.flush();
    std::fprintf(stderr, "epoch %zu/%zu loss %.6f\n", epoch + 1, cfg.epochs, n ? sum / static_cast<double>(n) : 0.0);
  });
  save_model(dir, model, r, h.steps.size());
  std::printf("steps=%zu final_loss=%.6f\n", h.steps.size(), h.steps.empty() ? 0.0 : h.steps.back().result.loss);
}

void run_finetune(const json& r, const fs::path& dir) {
  const auto ds = load_dataset(r);
  const std::string from = r.at("from").get<std::string>();
  TransformerModel model = from.empty() ? TransformerModel(r.at("model").get<ModelConfig>(), seed_of(r)) : load_from(r).model;
  const auto cfg = finetune_config_from(r);
  const auto res = finetune_run(model, ds, cfg, [&](const EpochMetrics& m, const TransformerModel&) {
    std::fprintf(stderr, "epoch %zu/%zu%s loss %.4f train_acc %.4f val_acc %.4f\n", m.epoch + 1,
                 cfg.schedule.total_epochs, m.frozen ? " [frozen]" : "", m.train_loss, m.train_acc, m.val_acc);
  });
  write_metrics_csv(dir / "metrics.csv", res.history);
  EvalOptions eo;
  eo.threads = cfg.threads;
  const auto ev = evaluate(model, ds, ds.val, eo);
  write_confusion_csv(dir / "confusion.csv", ev.confusion, ds.class_names);
  save_model(dir, model, r, 0);
  write_json(dir / "summary.json", {{"final_val_acc", res.final_val_acc},
                                    {"best_val_acc", res.best_val_acc},
                                    {"best_epoch", res.best_epoch}});
  std::printf("final_val_acc=%.4f best_val_acc=%.4f best_epoch=%zu\n", res.final_val_acc, res.best_val_acc, res.best_epoch);
}

void run_adapt(const json& r, const fs::path& dir) {
  if (r.at("data").at("dir").get<std::string>().empty()) fail(ErrorKind::Usage, "adapt: --data is required");
  const auto ds = load_dataset(r);
  auto model = load_from(r).model;
  const auto cfg = mae_config_from(r);
  const auto h = domain_adapt_pretrain(model, ds, cfg.epochs, cfg);
  write_mae_history(dir, h);
  save_model(dir, model, r, h.steps.size());
  std::printf("adapted for %zu epochs; val_loss %.6f -> %.6f\n", h.epochs.size(), h.initial_val_loss,
              h.epochs.empty() ? h.initial_val_loss : h.epochs.back().val_loss);
}

void run_eval(const json& r, const fs::path& dir) {
  const auto ds = load_dataset(r);
  const auto model = load_from(r).model;
  const auto& e = r.at("eval");
  EvalOptions eo;
  eo.voting = e.at("voting").get<std::size_t>();
  eo.seed = seed_of(r);
  eo.threads = threads_of(r);
  const auto depth = depth_of(e.at("truncate").get<long>());
  const auto head_epochs = e.at("head_epochs").get<std::size_t>();
  Evaluation ev;
  if (depth) {
    auto cfg = finetune_config_from(r);
    ev = evaluate_truncated(model, ds, *depth, head_epochs, e.at("full_finetune").get<bool>(), cfg, eo);
  } else {
    std::vector<std::size_t> all;
    ev = evaluate(model, ds, split_of(ds, e.at("split").get<std::string>(), all), eo);
  }
  write_confusion_csv(dir / "confusion.csv", ev.confusion, ds.class_names);
  const std::size_t used = depth ? *depth : model.config().blocks;
  write_json(dir / "eval.json", {{"accuracy", ev.accuracy}, {"depth", used}, {"samples", ev.predictions.size()}});
  std::printf("accuracy=%.4f depth=%zu samples=%zu\n", ev.accuracy, used, ev.predictions.size());
}

void run_reconstruct(const json& r, const fs::path& dir) {
  const auto ds = load_dataset(r);
  const auto model = load_from(r).model;
  const auto idx = r.at("sample").get<std::size_t>();
  const auto rec = reconstruct_at_ratio(model, sample_at(ds, idx).cloud, r.at("ratio").get<double>(),
                                        derive_seed(seed_of(r), {idx}));
  io::write_ply(dir / "visible.ply", rec.visible);
  io::write_ply(dir / "reconstructed.ply", rec.reconstructed);
  io::write_ply(dir / "truth.ply", rec.truth);
  write_json(dir / "reconstruct.json", {{"chamfer", rec.chamfer}, {"masked", rec.plan.masked.size()}});
  std::printf("chamfer=%.6f masked=%zu\n", rec.chamfer, rec.plan.masked.size());
}

void run_cka(const json& r, const fs::path& dir) {
  const auto ds = load_dataset(r);
  const auto a = load_from(r, "a").model, b = load_from(r, "b").model;
  std::vector<std::size_t> all;
  const auto idx = split_of(ds, r.at("split").get<std::string>(), all);
  CollectOptions co;
  const auto pooling = r.at("pooling").get<std::string>();
  if (pooling != "cls" && pooling != "mean") fail(ErrorKind::Config, "pooling must be cls or mean");
  co.pooling = pooling == "cls" ? Pooling::Cls : Pooling::Mean;
  co.threads = threads_of(r);
  const auto m = cka_compare(collect_activations(a, ds, idx, co), collect_activations(b, ds, idx, co));
  write_cka_csv(dir / "cka.csv", m);
  if (m.has_undefined()) std::fprintf(stderr, "warning: some probes have zero variance; their CKA is undefined (nan)\n");
  std::printf("mean_diagonal=%.6f\n", m.mean_diagonal());
}

void run_attdist(const json& r, const fs::path& dir) {
  const auto ds = load_dataset(r);
  const auto model = load_from(r).model;
  std::vector<std::size_t> all;
  const auto t = attention_distance_dataset(model, ds, split_of(ds, r.at("split").get<std::string>(), all),
                                            r.at("per_token").get<bool>(), threads_of(r));
  write_mad_csv(dir / "mad.csv", t);
  for (std::size_t l = 0; l < t.layers; ++l) {
    const auto v = t.sorted_layer(l);
    std::printf("layer %zu mad min=%.4f max=%.4f\n", l + 1, v.front(), v.back());
  }
}

void run_rf(const json& r, const fs::path& dir) {
  const auto ds = load_dataset(r);
  const auto model = load_from(r).model;
  const auto idx = r.at("sample").get<std::size_t>();
  const auto& cloud = sample_at(ds, idx).cloud;
  const auto& c = model.config();
  const auto patches = make_patches(cloud, c.patches, c.group_size, eval_patch_seed(idx));
  const auto rf = receptive_field(model, patches, r.at("patch").get<std::size_t>(), depth_of(r.at("depth").get<long>()));
  CsvWriter csv(dir / "rf.csv", {"patch", "x", "y", "z", "value"});
  for (std::size_t i = 0; i < rf.size(); ++i) csv.write(i, patches.centers[i][0], patches.centers[i][1], patches.centers[i][2], rf[i]);
  io::write_ply(dir / "rf.ply", cloud.points, patch_values_to_points(cloud, patches, rf));
  std::printf("max=%.6f at patch %zu\n", *std::max_element(rf.begin(), rf.end()),
              static_cast<std::size_t>(std::max_element(rf.begin(), rf.end()) - rf.begin()));
}

void run_attn(const json& r, const fs::path& dir) {
  const auto ds = load_dataset(r);
  const auto model = load_from(r).model;
  const auto idx = r.at("sample").get<std::size_t>();
  const auto& cloud = sample_at(ds, idx).cloud;
  const auto& c = model.config();
  const auto patches = make_patches(cloud, c.patches, c.group_size, eval_patch_seed(idx));
  const auto pt = patch_tensors(patches);
  NoGradGuard no_grad;
  EncodeOptions eo;
  eo.capture = true;
  const auto enc = model.encode(model.embed_patches(pt.groups), model.positional_encoding(pt.centers), eo);
  const auto files = export_cls_attention(*enc.attention, cloud, patches, dir);
  std::printf("wrote %zu layer maps\n", files.size());
}

void run_features(const json& r, const fs::path& dir) {
  const auto ds = load_dataset(r);
  const auto model = load_from(r).model;
  const auto train = extract_features(model, ds, ds.train, threads_of(r));
  const auto val = extract_features(model, ds, ds.val, threads_of(r));
  write_features_csv(dir / "features_train.csv", train);
  write_features_csv(dir / "features_val.csv", val);
  std::printf("nearest_centroid_accuracy=%.4f\n", nearest_centroid_accuracy(train, val));
}

// ------------------------------------------------------------------- wiring

Command& make(std::vector<std::unique_ptr<Command>>& cmds, CLI::App& parent, const std::string& name,
              const std::string& help, json defaults) {
  auto c = std::make_unique<Command>();
  c->name = name;
  c->app = parent.add_subcommand(name, help);
  c->defaults = std::move(defaults);
  c->defaults["command"] = name;
  c->bind = std::make_unique<Binder>(*c->app, c->defaults);
  cmds.push_back(std::move(c));
  return *cmds.back();
}

json training_defaults(const LRPolicy& policy, std::size_t batch, std::size_t epochs, const AugmentSpec& aug) {
  json j = common_defaults();
  j["data"] = data_section();
  j["optimizer"] = optimizer_section(policy, batch);
  j["schedule"] = {{"epochs", epochs}, {"warmup_epochs", policy.warmup_epochs}};
  j["augmentation"] = augment_section(aug);
  return j;
}

void build(CLI::App& app, std::vector<std::unique_ptr<Command>>& cmds) {
  {
    json d = common_defaults();
    d["out"] = "data";
    d["format"] = "ply";
    d["data"] = {{"per_class", 200}, {"points", 1024}, {"jitter", 0.01}};
    auto& c = make(cmds, app, "gen-data", "Write the synthetic 8-class dataset with a manifest", d);
    c.run_dir = false;
    c.app->add_option("--config", c.config_path, "JSON config file; flags override its values")->check(CLI::ExistingFile);
    c.bind->option<std::uint64_t>("--seed", "/seed", "Random seed");
    c.bind->option<std::string>("--out", "/out", "Output directory");
    c.bind->option<std::size_t>("--per-class", "/data/per_class", "Samples per class");
    c.bind->option<std::size_t>("--points", "/data/points", "Points per cloud");
    c.bind->option<double>("--jitter", "/data/jitter", "Maximum per-point displacement");
    c.bind->option<std::string>("--format", "/format", "File format: ply or xyz");
    c.run = run_gen_data;
  }
  {
    const MaeTrainConfig mae;
    json d = training_defaults(mae.policy, mae.batch_size, mae.epochs, mae.augment);
    d["model"] = model_section();
    d["mae"] = {{"mask_ratio", mae.mask_ratio}};
    auto& c = make(cmds, app, "pretrain-mae", "Masked-autoencoder pretraining", d);
    add_common(c);
    add_data(c);
    add_model(c);
    add_optimizer(c);
    c.bind->option<double>("--mask-ratio", "/mae/mask_ratio", "Fraction of patches masked");
    c.resolve = clamp_warmup;
    c.run = run_pretrain_mae;
  }
  {
    const MocoTrainConfig moco;
    json d = training_defaults(moco.policy, moco.batch_size, moco.epochs, moco.moco.augment);
    d["model"] = model_section();
    d["mae"] = {{"mask_ratio", moco.moco.mask_ratio}};
    d["moco"] = {{"hybrid", moco.moco.hybrid},
                 {"contrast_weight", moco.moco.contrast_weight},
                 {"queue_capacity", moco.moco.queue_capacity},
                 {"momentum", moco.moco.momentum},
                 {"temperature", moco.moco.temperature}};
    auto& c = make(cmds, app, "pretrain-moco", "Momentum-contrast pretraining, optionally hybrid with reconstruction", d);
    add_common(c);
    add_data(c);
    add_model(c);
    add_optimizer(c);
    c.bind->flag("--hybrid", "/moco/hybrid", "Add the masked reconstruction loss");
    c.bind->option<double>("--wc", "/moco/contrast_weight", "Contrastive weight in the hybrid loss");
    c.bind->option<std::size_t>("--queue", "/moco/queue_capacity", "Negative queue capacity");
    c.bind->option<double>("--momentum", "/moco/momentum", "Key encoder momentum");
    c.bind->option<double>("--temperature", "/moco/temperature", "Softmax temperature");
    c.bind->option<double>("--mask-ratio", "/mae/mask_ratio", "Mask ratio of the hybrid reconstruction path");
    c.resolve = clamp_warmup;
    c.run = run_pretrain_moco;
  }
  {
    const FinetuneConfig ft;
    json d = training_defaults(ft.policy, ft.batch_size, ft.schedule.total_epochs, ft.augment);
    d["schedule"]["unfreeze_epoch"] = ft.schedule.unfreeze_epoch;
    d["model"] = model_section();
    d["from"] = "";
    auto& c = make(cmds, app, "finetune", "Supervised finetuning with a frozen backbone until the unfreeze epoch", d);
    add_common(c);
    add_data(c);
    add_model(c);
    add_optimizer(c);
    c.bind->option<std::string>("--from", "/from", "Pretrained checkpoint (empty: random initialization)");
    c.bind->option<std::size_t>("--unfreeze-epoch", "/schedule/unfreeze_epoch", "Epoch at which the backbone starts training");
    c.resolve = [](json& r) {
      clamp_warmup(r);
      const std::string from = r["from"].get<std::string>();
      if (!from.empty()) r["model"] = load_checkpoint(from).model.config();
    };
    c.run = run_finetune;
  }
  {
    const MaeTrainConfig mae;
    json d = training_defaults(mae.policy, mae.batch_size, 40, mae.augment);
    d["mae"] = {{"mask_ratio", mae.mask_ratio}};
    d["from"] = "";
    auto& c = make(cmds, app, "adapt", "Continue masked pretraining on a new dataset", d);
    add_common(c);
    add_data(c);
    add_optimizer(c);
    c.bind->option<std::string>("--from", "/from", "Checkpoint to adapt")->required();
    c.bind->option<double>("--mask-ratio", "/mae/mask_ratio", "Fraction of patches masked");
    c.resolve = clamp_warmup;
    c.run = run_adapt;
  }
  {
    const FinetuneConfig ft;
    json d = training_defaults(ft.policy, ft.batch_size, 0, ft.augment);
    d["schedule"]["unfreeze_epoch"] = 0;
    d["from"] = "";
    d["eval"] = {{"truncate", -1}, {"voting", 0}, {"head_epochs", 0}, {"full_finetune", false}, {"split", "val"}};
    auto& c = make(cmds, app, "eval", "Classification accuracy, optionally of a depth-truncated model", d);
    add_common(c);
    add_data(c);
    c.bind->option<std::string>("--from", "/from", "Checkpoint to evaluate")->required();
    c.bind->option<long>("--truncate", "/eval/truncate", "Keep this many encoder blocks (-1: all)");
    c.bind->option<std::size_t>("--voting", "/eval/voting", "Average logits over this many scale augmentations");
    c.bind->option<std::size_t>("--head-epochs", "/eval/head_epochs", "Retrain a copy on truncated features first");
    c.bind->flag("--full-finetune", "/eval/full_finetune", "Retrain the whole truncated network, not only the head");
    c.bind->option<std::size_t>("--batch-size", "/optimizer/batch_size", "Batch size of the retraining");
    c.bind->option<std::string>("--split", "/eval/split", "Samples to score without truncation: train, val or all");
    c.resolve = [](json& r) { r["schedule"]["epochs"] = r["eval"]["head_epochs"]; clamp_warmup(r); };
    c.run = run_eval;
  }
  {
    json d = common_defaults();
    d["data"] = data_section();
    d["from"] = "";
    d["ratio"] = kDefaultMaskRatio;
    d["sample"] = 0;
    auto& c = make(cmds, app, "reconstruct", "Mask one cloud at a ratio and write the reconstruction", d);
    add_common(c);
    add_data(c);
    c.bind->option<std::string>("--from", "/from", "Pretrained checkpoint")->required();
    c.bind->option<double>("--ratio", "/ratio", "Fraction of patches masked");
    c.bind->option<std::size_t>("--sample", "/sample", "Dataset sample index");
    c.run = run_reconstruct;
  }

  auto* analyze = app.add_subcommand("analyze", "Representation analyses");
  analyze->require_subcommand(1);
  auto analysis = [&](const std::string& name, const std::string& help, json extra) -> Command& {
    json d = common_defaults();
    d["data"] = data_section();
    d.update(extra);
    auto& c = make(cmds, *analyze, name, help, d);
    add_common(c);
    add_data(c);
    return c;
  };
  {
    auto& c = analysis("cka", "Linear CKA between the probe points of two checkpoints",
                       {{"a", ""}, {"b", ""}, {"pooling", "cls"}, {"split", "val"}});
    c.bind->option<std::string>("--a", "/a", "First checkpoint")->required();
    c.bind->option<std::string>("--b", "/b", "Second checkpoint")->required();
    c.bind->option<std::string>("--pooling", "/pooling", "Block output pooling: cls or mean");
    c.bind->option<std::string>("--split", "/split", "Samples: train, val or all");
    c.run = run_cka;
  }
  {
    auto& c = analysis("attdist", "Mean attention distance per layer and head", {{"from", ""}, {"split", "val"}, {"per_token", false}});
    c.bind->option<std::string>("--from", "/from", "Checkpoint")->required();
    c.bind->option<std::string>("--split", "/split", "Samples: train, val or all");
    c.bind->flag("--per-token", "/per_token", "Average per token instead of dividing by N^2");
    c.run = run_attdist;
  }
  {
    auto& c = analysis("rf", "Effective receptive field of one patch", {{"from", ""}, {"patch", 0}, {"sample", 0}, {"depth", -1}});
    c.bind->option<std::string>("--from", "/from", "Checkpoint")->required();
    c.bind->option<std::size_t>("--patch", "/patch", "Target patch index");
    c.bind->option<std::size_t>("--sample", "/sample", "Dataset sample index");
    c.bind->option<long>("--depth", "/depth", "Blocks to backpropagate through (-1: all)");
    c.run = run_rf;
  }
  {
    auto& c = analysis("attn", "CLS attention maps per layer as scored PLY files", {{"from", ""}, {"sample", 0}});
    c.bind->option<std::string>("--from", "/from", "Checkpoint")->required();
    c.bind->option<std::size_t>("--sample", "/sample", "Dataset sample index");
    c.run = run_attn;
  }
  {
    auto& c = analysis("features", "Export CLS features and score a nearest-centroid classifier", {{"from", ""}});
    c.bind->option<std::string>("--from", "/from", "Checkpoint")->required();
    c.run = run_features;
  }
}

int report(ErrorKind kind, const std::string& message) {
  std::string line = message;
  std::replace(line.begin(), line.end(), '\n', ' ');
  std::cerr << "error[" << kind_name(kind) << "]: " << line << '\n';
  return exit_code(kind);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Point cloud transformer pretraining, finetuning and analysis"};
  app.require_subcommand(1);
  app.get_formatter()->column_width(44);
  std::vector<std::unique_ptr<Command>> cmds;
  build(app, cmds);

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report(ErrorKind::Usage, e.what());
  }

  try {
    for (auto& c : cmds) {
      if (!c->app->parsed()) continue;
      json resolved = c->defaults;
      if (!c->config_path.empty()) merge_config_file(resolved, c->config_path);
      c->bind->apply(resolved);
      if (c->resolve) c->resolve(resolved);
      fs::path dir;
      if (c->run_dir) {
        dir = make_run_dir(resolved.at("out").get<std::string>(), c->name, c->run_name);
        write_json(dir / "config.json", resolved);
        std::printf("run directory: %s\n", dir.string().c_str());
      }
      c->run(resolved, dir);
      return 0;
    }
  } catch (const Error& e) {
    return report(e.kind(), e.what());
  } catch (const json::exception& e) {
    return report(ErrorKind::Config, e.what());
  } catch (const fs::filesystem_error& e) {
    return report(ErrorKind::Data, e.what());
  } catch (const std::exception& e) {
    std::cerr << "error[internal]: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
