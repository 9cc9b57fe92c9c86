#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "pointform/moco.hpp"
#include "support/tiny.hpp"

namespace pf = pointform;
using pf::Shape;
using pf::Tensor;

namespace {

void shift_all(pf::TransformerModel& m, double by) {
  for (auto& e : m.params().entries())
    for (auto& v : e.tensor.mutable_values()) v += by;
}

}  // namespace

TEST(Momentum, ExtremesAndClosedForm) {
  pf::TransformerModel base(pf::testing::tiny_config(), 1);
  for (double m : {1.0, 0.0, 0.999}) {
    auto pair = pf::MomentumPair::from(base, m);
    shift_all(pair.query, 0.5);
    const auto q_before = pair.query.clone();
    const int steps = m == 0.999 ? 25 : 1;
    for (int t = 0; t < steps; ++t) pf::momentum_update(pair);
    const double keep = std::pow(m, steps);
    for (std::size_t i = 0; i < base.params().size(); ++i) {
      const auto& k = pair.key.params().entries()[i].tensor;
      const auto& q = pair.query.params().entries()[i].tensor;
      const auto& k0 = base.params().entries()[i].tensor;
      for (std::size_t j = 0; j < k.numel(); ++j) {
        EXPECT_EQ(q[j], q_before.params().entries()[i].tensor[j]);
        if (m == 1.0) EXPECT_EQ(k[j], k0[j]);
        if (m == 0.0) EXPECT_EQ(k[j], q[j]);
        EXPECT_NEAR(k[j], q[j] + (k0[j] - q[j]) * keep, 1e-9);
      }
    }
  }
  EXPECT_THROW(pf::MomentumPair::from(base, 1.5), pf::Error);
}

TEST(Momentum, KeyIsNeverTrainable) {
  auto pair = pf::MomentumPair::from(pf::TransformerModel(pf::testing::tiny_config(), 2));
  EXPECT_EQ(pair.key.params().trainable_count(), 0u);
  EXPECT_GT(pair.query.params().trainable_count(), 0u);
  EXPECT_EQ(pair.momentum, 0.999);
}

TEST(Queue, FifoCapacityAndUnitNorm) {
  pf::NegativeQueue q(2, 3);
  EXPECT_TRUE(q.empty());
  for (int i = 1; i <= 5; ++i) q.enqueue(std::vector<double>{double(i), 0.0 + i % 2});
  EXPECT_TRUE(q.full());
  EXPECT_EQ(q.size(), 3u);
  const double n3 = std::sqrt(9.0 + 1.0);
  EXPECT_NEAR(q.at(0)[0], 3.0 / n3, 1e-15);
  EXPECT_NEAR(q.at(2)[0], 5.0 / std::sqrt(26.0), 1e-15);
  for (std::size_t i = 0; i < q.size(); ++i) EXPECT_NEAR(q.at(i)[0] * q.at(i)[0] + q.at(i)[1] * q.at(i)[1], 1.0, 1e-12);
  EXPECT_EQ(q.matrix().shape(), (Shape{3, 2}));
  EXPECT_FALSE(pf::NegativeQueue(2).matrix().defined());
  try {
    q.enqueue(std::vector<double>{0.0, 0.0});
    FAIL();
  } catch (const pf::Error& e) {
    EXPECT_EQ(e.kind(), pf::ErrorKind::Numeric);
  }
  EXPECT_THROW(q.enqueue(std::vector<double>{1.0}), pf::Error);
}

TEST(Contrastive, HandComputedCase) {
  const Tensor e1 = Tensor::matrix({{1.0, 0.0}}), e2 = Tensor::matrix({{0.0, 1.0}});
  // logits [1, 0] with the positive first
  EXPECT_NEAR(pf::contrastive_loss(e1, e1, e2, 1.0).item(), std::log1p(std::exp(-1.0)), 1e-12);
  EXPECT_NEAR(pf::contrastive_loss(e1, e1, e2, 1.0).item(), 0.3133, 1e-4);
  EXPECT_EQ(pf::contrastive_loss(e1, e1, Tensor{}, 0.07).item(), 0.0);
  EXPECT_THROW(pf::contrastive_loss(e1, e1, e2, 0.0), pf::Error);
}

TEST(Contrastive, InvariantToNegativeOrder) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> d;
  std::vector<double> neg(20 * 4);
  for (auto& v : neg) v = d(rng);
  const Tensor q = pf::normalize_rows(Tensor(Shape{1, 4}, {0.3, -0.2, 0.9, 0.1}));
  const Tensor k = pf::normalize_rows(Tensor(Shape{1, 4}, {0.2, -0.1, 1.0, 0.0}));
  const Tensor a = pf::normalize_rows(Tensor(Shape{20, 4}, neg));
  std::vector<double> rev;
  for (std::size_t r = 20; r-- > 0;) rev.insert(rev.end(), neg.begin() + r * 4, neg.begin() + r * 4 + 4);
  const Tensor b = pf::normalize_rows(Tensor(Shape{20, 4}, rev));
  EXPECT_NEAR(pf::contrastive_loss(q, k, a, 0.07).item(), pf::contrastive_loss(q, k, b, 0.07).item(), 1e-12);
}

TEST(MocoStep, KeyGetsNoGradientAndQueueFills) {
  const auto ds = pf::make_dataset(1, 4, {256, 0.01, 0.0});
  const auto clouds = pf::cloud_ptrs(ds, ds.train);
  std::vector<std::uint64_t> seeds(clouds.size());
  std::iota(seeds.begin(), seeds.end(), std::uint64_t{1});
  auto pair = pf::MomentumPair::from(pf::TransformerModel(pf::testing::small_config(), 4));
  pf::NegativeQueue queue(32, 12);
  pf::MocoConfig cfg;
  auto r = pf::moco_step(pair, queue, clouds, seeds, cfg);
  EXPECT_TRUE(r.warmup);
  EXPECT_EQ(r.loss, 0.0);
  EXPECT_EQ(queue.size(), 8u);
  for (const auto& e : pair.key.params().entries()) EXPECT_FALSE(e.tensor.has_grad());
  EXPECT_TRUE(pair.query.params().get("cls.token").has_grad());
  r = pf::moco_step(pair, queue, clouds, seeds, cfg);
  EXPECT_FALSE(r.warmup);
  EXPECT_GT(r.loss, 0.0);
  EXPECT_EQ(queue.size(), 12u);
}

TEST(MocoStep, UpdateRunsBeforeMomentumAndEnqueue) {
  const auto ds = pf::make_dataset(1, 5, {256, 0.01, 0.0});
  const auto clouds = pf::cloud_ptrs(ds, ds.train);
  std::vector<std::uint64_t> seeds(clouds.size(), 3);
  auto pair = pf::MomentumPair::from(pf::TransformerModel(pf::testing::small_config(), 5), 0.0);
  pf::NegativeQueue queue(32);
  std::size_t seen = 99;
  pf::moco_step(pair, queue, clouds, seeds, {}, [&] {
    seen = queue.size();
    shift_all(pair.query, 1.0);
  });
  EXPECT_EQ(seen, 0u);
  // m = 0 copies the updated query into the key.
  EXPECT_EQ(pair.key.params().get("cls.token")[0], pair.query.params().get("cls.token")[0]);
}

TEST(HybridStep, ZeroWeightMatchesReconstructionGradientsBitwise) {
  const auto ds = pf::make_dataset(1, 6, {256, 0.01, 0.0});
  const auto clouds = pf::cloud_ptrs(ds, ds.train);
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < clouds.size(); ++i) seeds.push_back(100 + i);
  pf::TransformerModel base(pf::testing::small_config(), 6);
  auto pair = pf::MomentumPair::from(base);
  pf::NegativeQueue queue(32);
  queue.enqueue(std::vector<double>(32, 1.0));
  pf::MocoConfig cfg;
  cfg.hybrid = true;
  cfg.contrast_weight = 0.0;
  const auto r = pf::hybrid_step(pair, queue, clouds, seeds, cfg);
  EXPECT_EQ(r.contrastive, 0.0);

  // Same query views and masks through the plain reconstruction path.
  std::vector<pf::PointCloud> views;
  std::vector<std::uint64_t> mae_seeds;
  for (std::size_t i = 0; i < clouds.size(); ++i) {
    views.push_back(pf::augment(*clouds[i], cfg.augment, pf::detail::view_seed(seeds[i], 0)));
    mae_seeds.push_back(pf::detail::view_seed(seeds[i], 2));
  }
  std::vector<const pf::PointCloud*> view_ptrs;
  for (const auto& v : views) view_ptrs.push_back(&v);
  auto reference = base.clone();
  const double loss = pf::mae_step(reference, view_ptrs, mae_seeds, cfg.mask_ratio, {}, 1);
  EXPECT_EQ(r.loss, loss);
  EXPECT_EQ(r.reconstruction, loss);
  for (std::size_t i = 0; i < base.params().size(); ++i) {
    const auto ga = pair.query.params().entries()[i].tensor.grad();
    const auto gb = reference.params().entries()[i].tensor.grad();
    ASSERT_EQ(ga.size(), gb.size()) << reference.params().entries()[i].name;
    EXPECT_TRUE(std::equal(ga.begin(), ga.end(), gb.begin())) << reference.params().entries()[i].name;
  }
}

TEST(HybridStep, CombinesTermsWithWeight) {
  const auto ds = pf::make_dataset(1, 7, {256, 0.01, 0.0});
  const auto clouds = pf::cloud_ptrs(ds, ds.train);
  std::vector<std::uint64_t> seeds(clouds.size(), 11);
  auto pair = pf::MomentumPair::from(pf::TransformerModel(pf::testing::small_config(), 7));
  pf::NegativeQueue queue(32);
  pf::MocoConfig cfg;
  cfg.hybrid = true;
  cfg.contrast_weight = 1e-3;
  pf::hybrid_step(pair, queue, clouds, seeds, cfg);
  const auto r = pf::hybrid_step(pair, queue, clouds, seeds, cfg);
  EXPECT_GT(r.contrastive, 0.0);
  EXPECT_NEAR(r.loss, r.reconstruction + 1e-3 * r.contrastive, 1e-12);
}

TEST(MocoConfig, DefaultsAndValidation) {
  pf::MocoConfig c;
  EXPECT_EQ(c.temperature, 0.07);
  EXPECT_EQ(c.momentum, 0.999);
  EXPECT_EQ(c.queue_capacity, 4096u);
  EXPECT_EQ(c.contrast_weight, 1e-2);
  c.temperature = 0.0;
  EXPECT_THROW(c.validate(), pf::Error);
}

TEST(MocoTraining, ContrastiveLossDecreasesOver300Steps) {
  const auto ds = pf::make_dataset(8, 8, {256, 0.01, 0.0});
  pf::TransformerModel m(pf::testing::small_config(), 8);
  pf::MocoTrainConfig cfg;
  cfg.epochs = 75;
  cfg.batch_size = 16;
  cfg.policy.warmup_epochs = 5;
  // Smaller than the set, so a sample's own earlier key is rarely a negative.
  cfg.moco.queue_capacity = 16;
  cfg.moco.momentum = 0.99;
  cfg.seed = 8;
  const auto before = m.params().get("cls.token")[0];
  const auto h = pf::pretrain_moco(m, ds, cfg);
  ASSERT_EQ(h.steps.size(), 300u);
  auto window = [&](std::size_t from, std::size_t to) {
    double s = 0.0;
    for (std::size_t i = from; i < to; ++i) s += h.steps[i].result.contrastive;
    return s / static_cast<double>(to - from);
  };
  EXPECT_LT(window(260, 300), window(1, 41));
  EXPECT_NE(m.params().get("cls.token")[0], before);
}
