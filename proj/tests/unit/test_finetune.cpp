#include <fstream>
#include <random>

#include <gtest/gtest.h>

#include "pointform/checkpoint.hpp"
#include "pointform/finetune.hpp"
#include "support/tempdir.hpp"
#include "support/tiny.hpp"

namespace pf = pointform;

namespace {

pf::Dataset small_set(std::uint64_t seed) { return pf::make_dataset(2, seed, {256, 0.01, 0.5}); }

pf::FinetuneConfig quick_config(std::size_t unfreeze, std::size_t total) {
  pf::FinetuneConfig cfg;
  cfg.schedule = {unfreeze, total, 0};
  cfg.batch_size = 4;
  cfg.policy.warmup_epochs = 1;
  cfg.seed = 3;
  return cfg;
}

std::vector<double> values_of(const pf::TransformerModel& m, const std::string& name) {
  const auto v = m.params().get(name).values();
  return {v.begin(), v.end()};
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST(Schedule, DefaultsAndValidation) {
  pf::UnfreezeSchedule s;
  EXPECT_EQ(s.unfreeze_epoch, 250u);
  EXPECT_EQ(s.total_epochs, 300u);
  EXPECT_TRUE(s.frozen_at(249));
  EXPECT_FALSE(s.frozen_at(250));
  s.unfreeze_epoch = 301;
  try {
    s.validate();
    FAIL();
  } catch (const pf::Error& e) {
    EXPECT_EQ(e.kind(), pf::ErrorKind::Config);
  }
  s.unfreeze_epoch = 300;
  EXPECT_NO_THROW(s.validate());
  EXPECT_EQ(pf::FinetuneConfig{}.batch_size, 32u);
  EXPECT_EQ(pf::FinetuneConfig{}.policy.peak, 5e-4);
}

TEST(Freeze, FlagsPerGroup) {
  pf::TransformerModel m(pf::testing::tiny_config(), 1);
  pf::apply_freeze(m.params(), true);
  for (const auto& e : m.params().entries()) EXPECT_EQ(e.tensor.requires_grad(), e.group == pf::ParamGroup::Head) << e.name;
  pf::apply_freeze(m.params(), false);
  for (const auto& e : m.params().entries()) EXPECT_EQ(e.tensor.requires_grad(), e.group != pf::ParamGroup::Decoder) << e.name;
}

TEST(Freeze, GradientsFlowThroughFrozenBackbone) {
  pf::TransformerModel m(pf::testing::small_config(), 2);
  pf::apply_freeze(m.params(), true);
  const auto ps = pf::make_patches(pf::testing::gaussian_cloud(256, 2), 16, 16, 2);
  pf::Tape tape;
  auto loss = pf::cross_entropy(pf::forward_logits(m, ps), 3);
  auto grads = tape.gradients(loss);
  EXPECT_FALSE(grads.of(m.params().get("head.fc1.weight")).empty());
  EXPECT_TRUE(grads.of(m.params().get("enc.block0.attn.q.weight")).empty());
}

TEST(Finetune, BackboneConstantUntilUnfreezeThenCountJumps) {
  const auto ds = small_set(1);
  pf::TransformerModel m(pf::testing::small_config(), 3);
  const auto initial_q = values_of(m, "enc.block1.attn.q.weight");
  const auto initial_embed = values_of(m, "embed.fc1.weight");
  const auto initial_head = values_of(m, "head.fc3.weight");
  const auto initial_dec = values_of(m, "dec.head.weight");
  std::vector<bool> backbone_same, head_same;
  auto res = pf::finetune_run(m, ds, quick_config(2, 4), [&](const pf::EpochMetrics&, const pf::TransformerModel& cur) {
    backbone_same.push_back(values_of(cur, "enc.block1.attn.q.weight") == initial_q && values_of(cur, "embed.fc1.weight") == initial_embed);
    head_same.push_back(values_of(cur, "head.fc3.weight") == initial_head);
  });
  EXPECT_EQ(backbone_same, (std::vector<bool>{true, true, false, false}));
  EXPECT_EQ(head_same, (std::vector<bool>{false, false, false, false}));
  EXPECT_EQ(values_of(m, "dec.head.weight"), initial_dec);
  ASSERT_EQ(res.history.size(), 4u);
  EXPECT_TRUE(res.history[1].frozen);
  EXPECT_FALSE(res.history[2].frozen);
  EXPECT_EQ(res.history[2].trainable_params - res.history[1].trainable_params, pf::backbone_param_count(m.params()));
  EXPECT_EQ(res.history[0].trainable_params, res.history[1].trainable_params);
}

TEST(Finetune, FrozenForeverWhenUnfreezeEqualsTotal) {
  const auto ds = small_set(2);
  pf::TransformerModel m(pf::testing::small_config(), 4);
  const auto initial = values_of(m, "cls.token");
  const auto res = pf::finetune_run(m, ds, quick_config(3, 3));
  for (const auto& h : res.history) EXPECT_TRUE(h.frozen);
  EXPECT_EQ(values_of(m, "cls.token"), initial);
}

TEST(Finetune, ReproducibleAcrossRunsAndThreadCounts) {
  pf::testing::TempDir dir;
  const auto ds = small_set(3);
  pf::TransformerModel base(pf::testing::small_config(), 5);
  std::vector<std::string> csvs;
  for (std::size_t threads : {1u, 1u, 3u}) {
    auto m = base.clone();
    auto cfg = quick_config(1, 3);
    cfg.threads = threads;
    const auto res = pf::finetune_run(m, ds, cfg);
    const auto path = dir / ("metrics" + std::to_string(csvs.size()) + ".csv");
    pf::write_metrics_csv(path, res.history);
    csvs.push_back(slurp(path));
  }
  EXPECT_EQ(csvs[0], csvs[1]);
  EXPECT_EQ(csvs[0], csvs[2]);
  EXPECT_EQ(csvs[0].substr(0, csvs[0].find('\n')), "epoch,lr,train_loss,train_acc,val_acc,frozen,trainable_params");
}

TEST(Finetune, InputAndConfigErrors) {
  auto ds = small_set(4);
  pf::TransformerModel m(pf::testing::small_config(), 6);
  auto cfg = quick_config(5, 3);
  EXPECT_THROW(pf::finetune_run(m, ds, cfg), pf::Error);
  cfg = quick_config(0, 1);
  cfg.depth = 9;
  EXPECT_THROW(pf::finetune_run(m, ds, cfg), pf::Error);
  ds.val.clear();
  try {
    pf::finetune_run(m, ds, quick_config(0, 1));
    FAIL();
  } catch (const pf::Error& e) {
    EXPECT_EQ(e.kind(), pf::ErrorKind::Input);
  }
}

TEST(Confusion, PerfectPredictorGivesIdentity) {
  pf::ConfusionMatrix cm(4);
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t r = 0; r <= c; ++r) cm.add(c, c);
  const auto n = cm.normalized();
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(n[r * 4 + c], r == c ? 1.0 : 0.0);
}

TEST(Confusion, RowsSumToOneAndEmptyRowsStayZero) {
  std::mt19937_64 rng(7);
  pf::ConfusionMatrix cm(5);
  for (int i = 0; i < 200; ++i) cm.add(rng() % 4, rng() % 5);
  const auto n = cm.normalized();
  for (std::size_t r = 0; r < 5; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 5; ++c) s += n[r * 5 + c];
    EXPECT_NEAR(s, r < 4 ? 1.0 : 0.0, 1e-12);
  }
}

TEST(Evaluate, AccuracyMatchesRecount) {
  const auto ds = pf::make_dataset(3, 5, {256, 0.01, 0.5});
  pf::TransformerModel m(pf::testing::small_config(), 7);
  const auto ev = pf::evaluate(m, ds, ds.val);
  ASSERT_EQ(ev.predictions.size(), ds.val.size());
  std::size_t correct = 0, total = 0, trace = 0;
  for (std::size_t j = 0; j < ds.val.size(); ++j)
    if (ev.predictions[j] == static_cast<std::size_t>(ds.samples[ds.val[j]].label)) ++correct;
  for (std::size_t c = 0; c < 8; ++c) {
    trace += ev.confusion.counts[c * 8 + c];
    total += ev.confusion.row_total(c);
  }
  EXPECT_EQ(total, ds.val.size());
  EXPECT_EQ(trace, correct);
  EXPECT_EQ(ev.accuracy, static_cast<double>(correct) / static_cast<double>(ds.val.size()));
  EXPECT_EQ(pf::evaluate(m, ds, ds.val, {std::nullopt, 0, 0, 2}).predictions, ev.predictions);
  EXPECT_THROW(pf::evaluate(m, ds, std::vector<std::size_t>{}), pf::Error);
}

TEST(Evaluate, VotingIsDeterministic) {
  const auto ds = small_set(6);
  pf::TransformerModel m(pf::testing::small_config(), 8);
  pf::EvalOptions opt;
  opt.voting = 3;
  opt.seed = 4;
  EXPECT_EQ(pf::evaluate(m, ds, ds.val, opt).predictions, pf::evaluate(m, ds, ds.val, opt).predictions);
}

TEST(Evaluate, ConfusionCsvRowsNormalized) {
  pf::testing::TempDir dir;
  pf::ConfusionMatrix cm(2);
  cm.add(0, 0);
  cm.add(0, 1);
  cm.add(1, 1);
  pf::write_confusion_csv(dir / "cm.csv", cm, {"a", "b"});
  EXPECT_EQ(slurp(dir / "cm.csv"), "class,a,b\na,0.5,0.5\nb,0,1\n");
}

TEST(DomainAdapt, ZeroEpochsIsIdentity) {
  const auto ds = small_set(7);
  pf::TransformerModel m(pf::testing::small_config(), 9);
  const auto before = pf::encode_checkpoint(m, {});
  pf::domain_adapt_pretrain(m, ds, 0);
  EXPECT_EQ(pf::encode_checkpoint(m, {}), before);
}

TEST(DomainAdapt, TrainsBackboneAndDecoderOnly) {
  const auto ds = small_set(8);
  pf::TransformerModel m(pf::testing::small_config(), 10);
  const auto head = values_of(m, "head.fc1.weight"), dec = values_of(m, "dec.head.weight"), enc = values_of(m, "enc.block0.mlp.fc1.weight");
  pf::MaeTrainConfig cfg;
  cfg.batch_size = 4;
  cfg.policy.warmup_epochs = 0;
  const auto h = pf::domain_adapt_pretrain(m, ds, 2, cfg);
  EXPECT_EQ(h.epochs.size(), 2u);
  EXPECT_EQ(values_of(m, "head.fc1.weight"), head);
  EXPECT_NE(values_of(m, "dec.head.weight"), dec);
  EXPECT_NE(values_of(m, "enc.block0.mlp.fc1.weight"), enc);
}

TEST(Truncated, HeadRetrainLeavesSourceUntouched) {
  const auto ds = small_set(9);
  pf::TransformerModel m(pf::testing::small_config(), 11);
  const auto before = pf::encode_checkpoint(m, {});
  pf::EvalOptions opt;
  opt.depth = 1;
  const auto plain = pf::evaluate_truncated(m, ds, 1, 0);
  EXPECT_EQ(plain.predictions, pf::evaluate(m, ds, ds.val, opt).predictions);
  auto cfg = quick_config(0, 0);
  cfg.batch_size = 4;
  const auto retrained = pf::evaluate_truncated(m, ds, 1, 2, false, cfg);
  EXPECT_EQ(retrained.predictions.size(), ds.val.size());
  EXPECT_EQ(pf::encode_checkpoint(m, {}), before);
  EXPECT_THROW(pf::evaluate_truncated(m, ds, 5, 0), pf::Error);
}
