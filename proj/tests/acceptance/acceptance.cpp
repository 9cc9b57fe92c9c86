// Acceptance suite: one PASS/FAIL line per criterion. Groups:
//   core      gradients, geometry, formulas, hyperparameters, MoCo, determinism
//   mae       desk-scale masked pretraining; writes <work>/pretrained.pfck
//   transfer  unfreezing and CKA trends, starting from that checkpoint
// Usage: pointform_acceptance [--work DIR] [group...]

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "pointform/pointform.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"
#include "support/tempdir.hpp"
#include "support/tiny.hpp"

namespace fs = std::filesystem;
namespace pf = pointform;
using pf::Shape;
using pf::Tensor;

namespace {

// ---------------------------------------------------------------- tolerances

constexpr double kGradTol = 1e-4;
constexpr double kChamferTol = 1e-12;
constexpr double kCkaTol = 1e-9;
constexpr double kMomentumTol = 1e-9;
constexpr double kContrastTol = 1e-6;
constexpr double kContrastExpected = 0.3133;
constexpr double kRoundTripTol = 1e-6;
constexpr double kMaeReduction = 0.5;

// Desk-scale pretraining.
constexpr std::size_t kMaePerClass = 200;
constexpr std::size_t kMaeEpochs = 50;
constexpr std::uint64_t kMaeSeed = 0;

// Desk-scale finetuning.
constexpr std::size_t kFtPerClass = 40;
constexpr std::uint64_t kFtDataSeed = 1;
constexpr std::size_t kFtEpochs = 30;
constexpr std::size_t kFtLateGap = 5;  // late unfreeze at T - 5
constexpr std::size_t kFtWarmup = 3;
constexpr std::size_t kFtBatch = 32;
constexpr std::uint64_t kSeeds[] = {0, 1, 2};

int failures = 0;

void report(bool pass, const std::string& id, const std::string& detail) {
  if (!pass) ++failures;
  std::printf("%s %-22s %s\n", pass ? "PASS" : "FAIL", id.c_str(), detail.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Tensor weighted_sum(const Tensor& x, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Tensor w = pf::testing::random_tensor(x.shape(), rng, 1.0, false);
  return pf::sum(pf::mul(x, w));
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// ---------------------------------------------------------------------- core

void gradient_correctness() {
  const auto t0 = std::chrono::steady_clock::now();
  using pf::testing::check_gradients;
  using pf::testing::random_tensor;
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<std::size_t> ext(1, 5);
  double worst = 0.0;
  std::string worst_name;
  auto note = [&](const std::string& name, double err) {
    if (err > worst || worst_name.empty()) worst = err, worst_name = name;
  };
  using Unary = std::function<Tensor(const Tensor&)>;
  const std::vector<std::pair<std::string, Unary>> unary = {
      {"gelu", [](const Tensor& x) { return pf::gelu(x); }},
      {"relu", [](const Tensor& x) { return pf::relu(x); }},
      {"softmax_rows", [](const Tensor& x) { return pf::softmax_rows(x); }},
      {"transpose", [](const Tensor& x) { return pf::transpose(x); }},
      {"normalize_rows", [](const Tensor& x) { return pf::normalize_rows(x); }},
      {"mean_rows", [](const Tensor& x) { return pf::mean_rows(x); }},
      {"reshape", [](const Tensor& x) { return pf::reshape(x, Shape{x.numel()}); }},
      {"sum", [](const Tensor& x) { return pf::sum(x); }},
      {"mean", [](const Tensor& x) { return pf::mean(x); }},
      {"scale", [](const Tensor& x) { return pf::scale(x, -1.7); }},
      {"add_scalar", [](const Tensor& x) { return pf::add_scalar(x, 0.3); }},
  };
  for (int trial = 0; trial < 8; ++trial) {
    const std::size_t r = ext(rng), c = ext(rng), k = ext(rng);
    for (const auto& [name, op] : unary) {
      Tensor x = random_tensor({r, c}, rng, name == "gelu" ? 2.0 : 1.0);
      note(name, check_gradients([&, op = op] { return weighted_sum(op(x), 7); }, {x}).max_rel_error);
    }
    Tensor a = random_tensor({r, c}, rng), b = random_tensor({r, c}, rng), bias = random_tensor({c}, rng);
    note("add/sub/mul/add_bias", check_gradients([&] {
                                   return weighted_sum(pf::add_bias(pf::add(pf::mul(a, b), pf::sub(a, b)), bias), 3);
                                 }, {a, b, bias}).max_rel_error);
    Tensor w = random_tensor({c, k}, rng), wb = random_tensor({k}, rng);
    note("matmul", check_gradients([&] { return weighted_sum(pf::matmul(a, w), 4); }, {a, w}).max_rel_error);
    note("linear", check_gradients([&] { return weighted_sum(pf::linear(a, w, wb), 5); }, {a, w, wb}).max_rel_error);
    Tensor g = random_tensor({c}, rng), beta = random_tensor({c}, rng);
    note("layer_norm", check_gradients([&] { return weighted_sum(pf::layer_norm(a, g, beta), 6); }, {a, g, beta}).max_rel_error);
    Tensor p = random_tensor({r + 1, c + 1}, rng), q = random_tensor({r + 1, c + 1}, rng);
    const std::vector<std::size_t> idx{0, r, 0};
    note("slice/concat/gather/repeat", check_gradients([&] {
                                         Tensor rows = pf::concat_rows({pf::slice_rows(p, 1, r + 1), q});
                                         Tensor cols = pf::concat_cols({pf::slice_cols(p, 0, c + 1), pf::slice_cols(q, 1, c + 1)});
                                         Tensor rep = pf::repeat_rows(pf::slice_rows(q, 0, 1), 3);
                                         return pf::add(pf::add(weighted_sum(rows, 1), weighted_sum(cols, 2)),
                                                        pf::add(weighted_sum(pf::gather_rows(p, idx), 3), weighted_sum(rep, 4)));
                                       }, {p, q}).max_rel_error);
    Tensor grouped = random_tensor({r * k, c}, rng);
    note("max_pool_groups", check_gradients([&] { return weighted_sum(pf::max_pool_groups(grouped, k), 8); }, {grouped}).max_rel_error);
    Tensor logits = random_tensor({1, c + 1}, rng, 2.0);
    note("cross_entropy", check_gradients([&] { return pf::cross_entropy(logits, r % (c + 1)); }, {logits}).max_rel_error);
    Tensor pred = random_tensor({r * k, 3}, rng), target = random_tensor({r * (k + 1), 3}, rng, 1.0, false);
    note("chamfer_groups", check_gradients([&] { return pf::chamfer_groups(pred, target, r); }, {pred}).max_rel_error);
  }

  pf::ModelConfig tiny = pf::testing::tiny_config();  // 1 block, dim 8, 2 patches
  pf::TransformerModel model(tiny, 3);
  pf::testing::randomize(model, 3);
  std::vector<Tensor> leaves;
  for (auto& e : model.params().entries()) leaves.push_back(e.tensor);
  const auto patches = pf::make_patches(pf::testing::gaussian_cloud(24, 3), tiny.patches, tiny.group_size, 3);
  note("model/classification",
       check_gradients([&] { return pf::cross_entropy(pf::forward_logits(model, patches), 1); }, leaves).max_rel_error);
  const auto plan = pf::make_mask(tiny.patches, 0.5, 3);
  note("model/reconstruction", check_gradients([&] { return pf::mae_forward(model, patches, plan).loss; }, leaves).max_rel_error);

  const double secs = seconds_since(t0);
  report(worst < kGradTol && secs < 60.0, "gradient-correctness",
         fmt("worst rel error %.2e (%s), tol %.0e; %.1fs (limit 60s)", worst, worst_name.c_str(), kGradTol, secs));
}

void geometry_oracles() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(2);
  std::size_t fps_mismatch = 0, knn_mismatch = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t count = 1 + rng() % 12;
    const auto pc = pf::testing::random_cloud(rng, count, trial % 2 == 0);
    const std::size_t n = 1 + rng() % count, start = rng() % count, k = 1 + rng() % count;
    if (pf::fps_from(pc, n, start) != pf::testing::brute_fps(pc, n, start)) ++fps_mismatch;
    const auto centers = pf::fps_from(pc, n, start);
    const auto ps = pf::knn_group(pc, centers, k);
    for (std::size_t g = 0; g < centers.size(); ++g) {
      const auto expect = pf::testing::brute_knn(pc, pc.points[centers[g]], k);
      if (!std::equal(expect.begin(), expect.end(), ps.members.begin() + static_cast<std::ptrdiff_t>(g * k))) ++knn_mismatch;
    }
  }
  using P = std::vector<pf::Point3>;
  struct Case {
    P a, b;
    double expected;
  };
  const std::vector<Case> cases = {
      {{{0, 0, 0}}, {{1, 0, 0}}, 2.0},
      {{{0, 0, 0}, {2, 0, 0}}, {{0, 0, 0}}, 2.0},
      {{{0, 0, 0}}, {{1, 2, 2}, {3, 0, 0}}, 18.0},
      {{{1, 1, 1}, {-1, 0, 2}}, {{1, 1, 1}, {-1, 0, 2}}, 0.0},
      {{{0, 0, 0}, {1, 0, 0}}, {{0, 0, 1}, {1, 0, 1}, {5, 0, 0}}, 1.0 + (1.0 + 1.0 + 16.0) / 3.0},
  };
  double chamfer_err = 0.0;
  for (const auto& c : cases) chamfer_err = std::max(chamfer_err, std::abs(pf::chamfer(c.a, c.b) - c.expected));
  const double secs = seconds_since(t0);
  report(fps_mismatch == 0 && knn_mismatch == 0 && chamfer_err <= kChamferTol && secs < 60.0, "geometry-oracles",
         fmt("200 clouds: fps mismatches %zu, knn mismatches %zu; chamfer max error %.1e over %zu cases; %.2fs", fps_mismatch,
             knn_mismatch, chamfer_err, cases.size(), secs));
}

void formula_fidelity() {
  const std::vector<double> identity{1, 0, 0, 0, 1, 0, 0, 0, 1}, d3{0, 1, 2, 1, 0, 3, 2, 3, 0};
  const double d = 0.7;
  const bool mad_identity = pf::mean_attention_distance(identity, d3, 3) == 0.0;
  const bool mad_uniform = pf::mean_attention_distance(std::vector<double>{0.5, 0.5, 0.5, 0.5}, std::vector<double>{0, d, d, 0}, 2) == d / 4;

  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double lin_err = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + trial % 10;
    const auto dist = pf::pairwise_distances(pf::testing::random_cloud(rng, n, false).points);
    auto stochastic = [&] {
      std::vector<double> a(n * n);
      for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += a[i * n + j] = u(rng);
        for (std::size_t j = 0; j < n; ++j) a[i * n + j] /= s;
      }
      return a;
    };
    const auto a1 = stochastic(), a2 = stochastic();
    const double alpha = u(rng);
    std::vector<double> mix(n * n);
    for (std::size_t i = 0; i < n * n; ++i) mix[i] = alpha * a1[i] + (1 - alpha) * a2[i];
    const double lhs = pf::mean_attention_distance(mix, dist, n);
    const double rhs = alpha * pf::mean_attention_distance(a1, dist, n) + (1 - alpha) * pf::mean_attention_distance(a2, dist, n);
    lin_err = std::max(lin_err, std::abs(lhs - rhs) / std::max(1.0, std::abs(rhs)));
  }
  const bool mad_linear = lin_err <= 16 * std::numeric_limits<double>::epsilon();

  std::normal_distribution<double> g;
  const std::size_t n = 40, dim = 6;
  std::vector<double> x(n * dim);
  for (auto& v : x) v = g(rng);
  // Orthogonal matrix by Gram-Schmidt.
  std::vector<double> q(dim * dim);
  for (auto& v : q) v = g(rng);
  for (std::size_t i = 0; i < dim; ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      double dot = 0.0;
      for (std::size_t k = 0; k < dim; ++k) dot += q[i * dim + k] * q[j * dim + k];
      for (std::size_t k = 0; k < dim; ++k) q[i * dim + k] -= dot * q[j * dim + k];
    }
    double nn = 0.0;
    for (std::size_t k = 0; k < dim; ++k) nn += q[i * dim + k] * q[i * dim + k];
    for (std::size_t k = 0; k < dim; ++k) q[i * dim + k] /= std::sqrt(nn);
  }
  std::vector<double> rotated(n * dim, 0.0), scaled(x);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < dim; ++k)
      for (std::size_t j = 0; j < dim; ++j) rotated[i * dim + j] += x[i * dim + k] * q[k * dim + j];
  for (auto& v : scaled) v *= 4.2;
  const double self = std::abs(pf::linear_cka(x, dim, x, dim) - 1.0);
  const double orth = std::abs(pf::linear_cka(x, dim, rotated, dim) - 1.0);
  const double iso = std::abs(pf::linear_cka(x, dim, scaled, dim) - 1.0);
  const bool cka_ok = self <= kCkaTol && orth <= kCkaTol && iso <= kCkaTol;
  report(mad_identity && mad_uniform && mad_linear && cka_ok, "formula-fidelity",
         fmt("mAD identity=0 %s, N=2 uniform=d/4 %s, linearity err %.1e; CKA |1-self| %.1e, |1-orth| %.1e, |1-scale| %.1e (tol %.0e)",
             mad_identity ? "exact" : "WRONG", mad_uniform ? "exact" : "WRONG", lin_err, self, orth, iso, kCkaTol));
}

void hyperparameter_wiring() {
  const pf::LRPolicy ft = pf::LRPolicy::finetune(), pre = pf::LRPolicy::pretrain();
  auto at = [](pf::LRPolicy p, std::size_t step) {
    p.steps_per_epoch = 4;
    return pf::lr_at(p, step);
  };
  const bool lr_ok = at(ft, 0) == 1e-6 && at(pre, 0) == 1e-6 && ft.warmup_epochs == 10 && pre.warmup_epochs == 10 &&
                     at(ft, 10 * 4) == 5e-4 && at(pre, 10 * 4) == 1e-3 && ft.total_epochs == 300;
  const bool mask_ok = pf::MaeTrainConfig{}.mask_ratio == 0.6 && pf::kDefaultMaskRatio == 0.6;
  const pf::MocoConfig moco;
  const bool moco_ok = moco.queue_capacity == 4096 && moco.contrast_weight == 1e-2 && pf::NegativeQueue(8).capacity() == 4096;
  const pf::UnfreezeSchedule sched;
  const bool sched_ok = sched.total_epochs == 300;
  report(lr_ok && mask_ok && moco_ok && sched_ok, "hyperparameter-wiring",
         fmt("lr(0)=%.0e, peak finetune=%.0e pretrain=%.0e at epoch %zu; mask=%.1f; queue=%zu; w_c=%.0e; T=%zu",
             at(ft, 0), at(ft, 40), at(pre, 40), ft.warmup_epochs, pf::MaeTrainConfig{}.mask_ratio, moco.queue_capacity,
             moco.contrast_weight, sched.total_epochs));
}

void moco_mechanics() {
  // Momentum recurrence against k_t = q + (k_0 - q) m^t for a fixed query.
  pf::TransformerModel base(pf::testing::tiny_config(), 1);
  auto pair = pf::MomentumPair::from(base, 0.999);
  for (auto& e : pair.query.params().entries())
    for (auto& v : e.tensor.mutable_values()) v += 0.5;
  const int steps = 25;
  for (int t = 0; t < steps; ++t) pf::momentum_update(pair);
  double mom_err = 0.0;
  for (std::size_t i = 0; i < base.params().size(); ++i) {
    const auto& k = pair.key.params().entries()[i].tensor;
    const auto& q = pair.query.params().entries()[i].tensor;
    const auto& k0 = base.params().entries()[i].tensor;
    for (std::size_t j = 0; j < k.numel(); ++j) mom_err = std::max(mom_err, std::abs(k[j] - (q[j] + (k0[j] - q[j]) * std::pow(0.999, steps))));
  }

  pf::NegativeQueue queue(2, 3);
  for (int i = 1; i <= 5; ++i) queue.enqueue(std::vector<double>{double(i), double(i % 2)});
  const bool fifo = queue.size() == 3 && queue.full() && std::abs(queue.at(0)[0] - 3.0 / std::sqrt(10.0)) < 1e-15 &&
                    std::abs(queue.at(1)[0] - 1.0) < 1e-15 && std::abs(queue.at(2)[0] - 5.0 / std::sqrt(26.0)) < 1e-15;

  const Tensor e1 = Tensor::matrix({{1.0, 0.0}}), e2 = Tensor::matrix({{0.0, 1.0}});
  const double contrast = pf::contrastive_loss(e1, e1, e2, 1.0).item();

  const auto ds = pf::make_dataset(1, 6, {256, 0.01, 0.0});
  const auto clouds = pf::cloud_ptrs(ds, ds.train);
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < clouds.size(); ++i) seeds.push_back(100 + i);
  pf::TransformerModel model(pf::testing::small_config(), 6);
  auto hybrid_pair = pf::MomentumPair::from(model);
  pf::NegativeQueue negatives(32);
  negatives.enqueue(std::vector<double>(32, 1.0));
  pf::MocoConfig cfg;
  cfg.hybrid = true;
  cfg.contrast_weight = 0.0;
  pf::hybrid_step(hybrid_pair, negatives, clouds, seeds, cfg);
  std::vector<pf::PointCloud> views;
  std::vector<std::uint64_t> mae_seeds;
  for (std::size_t i = 0; i < clouds.size(); ++i) {
    views.push_back(pf::augment(*clouds[i], cfg.augment, pf::detail::view_seed(seeds[i], 0)));
    mae_seeds.push_back(pf::detail::view_seed(seeds[i], 2));
  }
  std::vector<const pf::PointCloud*> view_ptrs;
  for (const auto& v : views) view_ptrs.push_back(&v);
  auto reference = model.clone();
  pf::mae_step(reference, view_ptrs, mae_seeds, cfg.mask_ratio, {}, 1);
  bool bitwise = true;
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    const auto ga = hybrid_pair.query.params().entries()[i].tensor.grad();
    const auto gb = reference.params().entries()[i].tensor.grad();
    bitwise = bitwise && ga.size() == gb.size() && std::equal(ga.begin(), ga.end(), gb.begin());
  }
  report(mom_err <= kMomentumTol && fifo && std::abs(contrast - kContrastExpected) <= 1e-4 &&
             std::abs(contrast - std::log1p(std::exp(-1.0))) <= kContrastTol && bitwise,
         "moco-mechanics",
         fmt("momentum closed-form err %.1e (tol %.0e); queue FIFO/capacity %s; contrastive %.6f vs log(1+e^-1) (tol %.0e); "
             "hybrid w_c=0 grads %s",
             mom_err, kMomentumTol, fifo ? "exact" : "WRONG", contrast, kContrastTol, bitwise ? "bitwise equal" : "DIFFER"));
}

void determinism_persistence() {
  pf::testing::TempDir dir;
  const auto ds = pf::make_dataset(3, 9, {256, 0.01, 0.25});
  const pf::ModelConfig mc = pf::testing::small_config();
  auto run_once = [&](std::size_t threads, const std::string& tag) {
    pf::TransformerModel m(mc, 4);
    pf::MaeTrainConfig mae;
    mae.epochs = 2;
    mae.batch_size = 8;
    mae.policy.warmup_epochs = 1;
    mae.seed = 11;
    mae.threads = threads;
    const auto h = pf::pretrain_mae(m, ds, mae);
    {
      pf::CsvWriter csv(dir / ("mae_" + tag + ".csv"), {"epoch", "train_loss", "val_loss"});
      for (const auto& e : h.epochs) csv.write(e.epoch, e.train_loss, e.val_loss);
    }
    pf::FinetuneConfig ft;
    ft.schedule = {1, 3, 0};
    ft.batch_size = 8;
    ft.policy.warmup_epochs = 1;
    ft.seed = 12;
    ft.threads = threads;
    const auto r = pf::finetune_run(m, ds, ft);
    pf::write_metrics_csv(dir / ("ft_" + tag + ".csv"), r.history);
    return slurp(dir / ("mae_" + tag + ".csv")) + slurp(dir / ("ft_" + tag + ".csv"));
  };
  const auto a = run_once(1, "a"), b = run_once(1, "b"), c = run_once(2, "c");
  const bool same = a == b && a == c;

  pf::TransformerModel model(pf::ModelConfig{}, 21);
  pf::testing::randomize(model, 21, 0.1);
  pf::save_checkpoint(dir / "m.pfck", model);
  const auto loaded = pf::load_checkpoint(dir / "m.pfck").model;
  double rel = 0.0;
  for (std::size_t i = 0; i < 4; ++i) {
    const auto ps = pf::make_patches(ds.samples[i].cloud, 64, 32, i);
    const auto la = pf::forward_logits(model, ps), lb = pf::forward_logits(loaded, ps);
    double diff = 0.0, mag = 0.0;
    for (std::size_t j = 0; j < la.numel(); ++j) diff = std::max(diff, std::abs(la[j] - lb[j])), mag = std::max(mag, std::abs(la[j]));
    rel = std::max(rel, diff / mag);
  }
  report(same && rel <= kRoundTripTol, "determinism-persistence",
         fmt("metrics CSVs %s across repeat and 1 vs 2 threads; checkpoint forward rel diff %.1e (tol %.0e)",
             same ? "identical" : "DIFFER", rel, kRoundTripTol));
}

// ----------------------------------------------------------------------- mae

void desk_mae(const fs::path& work) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto ds = pf::make_dataset(kMaePerClass, kMaeSeed);
  pf::TransformerModel model(pf::ModelConfig{}, kMaeSeed);
  pf::MaeTrainConfig cfg;
  cfg.epochs = kMaeEpochs;
  cfg.seed = kMaeSeed;
  cfg.threads = pf::default_threads();
  const auto h = pf::pretrain_mae(model, ds, cfg, [&](const pf::MaeHistory& hist) {
    const auto& e = hist.epochs.back();
    std::fprintf(stderr, "mae epoch %zu/%zu train %.5f val %.5f (%.0fs)\n", e.epoch + 1, kMaeEpochs, e.train_loss, e.val_loss,
                 seconds_since(t0));
  });
  fs::create_directories(work);
  pf::save_checkpoint(work / "pretrained.pfck", model);
  const double final_val = h.epochs.back().val_loss, reduction = 1.0 - final_val / h.initial_val_loss;
  report(reduction >= kMaeReduction, "desk-mae",
         fmt("val Chamfer %.5f -> %.5f, reduction %.1f%% (need >= %.0f%%); %zu samples, %zu epochs, %.1f min", h.initial_val_loss,
             final_val, 100 * reduction, 100 * kMaeReduction, ds.samples.size(), kMaeEpochs, seconds_since(t0) / 60));
}

// ------------------------------------------------------------------ transfer

void desk_transfer(const fs::path& work) {
  const fs::path ckpt = work / "pretrained.pfck";
  if (!fs::exists(ckpt)) {
    report(false, "unfreezing-trend", "no pretrained checkpoint at " + ckpt.string() + " (run the mae group first)");
    report(false, "cka-trend", "no pretrained checkpoint");
    return;
  }
  const auto t0 = std::chrono::steady_clock::now();
  const auto pretrained = pf::load_checkpoint(ckpt).model;
  const auto ds = pf::make_dataset(kFtPerClass, kFtDataSeed);
  std::vector<std::size_t> all(ds.samples.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  pf::CollectOptions co;
  co.threads = pf::default_threads();
  const auto base_acts = pf::collect_activations(pretrained, ds, all, co);

  constexpr std::size_t T = kFtEpochs;
  auto finetune = [&](pf::TransformerModel model, std::size_t unfreeze, std::uint64_t seed, const char* tag) {
    pf::FinetuneConfig cfg;
    cfg.schedule = {unfreeze, T, 0};
    cfg.batch_size = kFtBatch;
    cfg.policy.warmup_epochs = kFtWarmup;
    cfg.seed = seed;
    cfg.threads = pf::default_threads();
    const auto r = pf::finetune_run(model, ds, cfg);
    const double cka = pf::cka_compare(base_acts, pf::collect_activations(model, ds, all, co)).mean_diagonal();
    std::fprintf(stderr, "seed %llu %-8s U=%-3zu final acc %.4f  cka %.4f  (%.0fs)\n", static_cast<unsigned long long>(seed), tag,
                 unfreeze, r.final_val_acc, cka, seconds_since(t0));
    return std::pair{r.final_val_acc, cka};
  };

  double mean_late = 0, mean_frozen = 0, mean_scratch = 0;
  int late_ge_frozen = 0, late_ge_scratch = 0, cka_monotone = 0;
  std::string per_seed, cka_seed;
  for (const auto seed : kSeeds) {
    const auto late = finetune(pretrained.clone(), T - kFtLateGap, seed, "late");
    const auto frozen = finetune(pretrained.clone(), T, seed, "frozen");
    const auto scratch = finetune(pf::TransformerModel(pf::ModelConfig{}, 100 + seed), 0, seed, "scratch");
    const auto full = finetune(pretrained.clone(), 0, seed, "U=0");
    const auto half = finetune(pretrained.clone(), T / 2, seed, "U=T/2");
    mean_late += late.first / 3, mean_frozen += frozen.first / 3, mean_scratch += scratch.first / 3;
    late_ge_frozen += late.first >= frozen.first;
    late_ge_scratch += late.first >= scratch.first;
    cka_monotone += full.second <= half.second && half.second <= late.second;
    per_seed += fmt(" s%llu:%.3f/%.3f/%.3f", static_cast<unsigned long long>(seed), late.first, frozen.first, scratch.first);
    cka_seed += fmt(" s%llu:%.3f<=%.3f<=%.3f", static_cast<unsigned long long>(seed), full.second, half.second, late.second);
  }
  const double minutes = seconds_since(t0) / 60;
  report(mean_late >= mean_frozen && mean_late >= mean_scratch && late_ge_frozen >= 2 && late_ge_scratch >= 2, "unfreezing-trend",
         fmt("mean acc late/frozen/scratch %.3f/%.3f/%.3f; late>=frozen in %d/3, late>=scratch in %d/3;%s; T=%zu U=%zu; %.0f min",
             mean_late, mean_frozen, mean_scratch, late_ge_frozen, late_ge_scratch, per_seed.c_str(), T, T - kFtLateGap, minutes));
  report(cka_monotone >= 2, "cka-trend",
         fmt("CKA(pretrained, finetuned) monotone over U in {0,%zu,%zu} for %d/3 seeds;%s", T / 2, T - kFtLateGap, cka_monotone,
             cka_seed.c_str()));
}

}  // namespace

int main(int argc, char** argv) {
  fs::path work = "acceptance_work";
  std::vector<std::string> groups;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--work" && i + 1 < argc) {
      work = argv[++i];
    } else if (arg == "core" || arg == "mae" || arg == "transfer") {
      groups.push_back(arg);
    } else {
      std::fprintf(stderr, "usage: %s [--work DIR] [core|mae|transfer]...\n", argv[0]);
      return 2;
    }
  }
  if (groups.empty()) groups = {"core", "mae", "transfer"};
  try {
    for (const auto& g : groups) {
      if (g == "core") {
        gradient_correctness();
        geometry_oracles();
        formula_fidelity();
        hyperparameter_wiring();
        moco_mechanics();
        determinism_persistence();
      } else if (g == "mae") {
        desk_mae(work);
      } else {
        desk_transfer(work);
      }
    }
  } catch (const std::exception& e) {
    std::printf("FAIL %-22s %s\n", "exception", e.what());
    return 1;
  }
  return failures == 0 ? 0 : 1;
}
