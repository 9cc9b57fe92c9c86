#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "pointform/error.hpp"

namespace pointform {

using Point3 = std::array<double, 3>;

struct PointCloud {
  std::vector<Point3> points;
  std::optional<int> label;

  std::size_t size() const { return points.size(); }
};

/// N patches of K points each. Groups are stored center-relative and flat:
/// group g occupies groups[g*K .. g*K+K).
struct PatchSet {
  std::vector<Point3> centers;
  std::vector<Point3> groups;
  std::vector<std::size_t> center_indices;
  std::vector<std::size_t> members;  // source point index per group entry
  std::size_t k = 0;

  std::size_t count() const { return centers.size(); }
  std::span<const Point3> group(std::size_t g) const { return {groups.data() + g * k, k}; }
};

inline double squared_distance(const Point3& a, const Point3& b) {
  const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

inline double norm(const Point3& p) { return std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]); }

/// Centers the cloud on its centroid and scales the farthest point to norm 1.
/// An all-coincident cloud maps to all zeros.
inline PointCloud normalize_unit_sphere(const PointCloud& pc) {
  if (pc.points.empty()) fail(ErrorKind::Input, "normalize_unit_sphere: empty point cloud");
  Point3 c{0, 0, 0};
  for (const auto& p : pc.points)
    for (int i = 0; i < 3; ++i) c[i] += p[i];
  for (auto& v : c) v /= static_cast<double>(pc.size());
  PointCloud out{pc.points, pc.label};
  double radius = 0.0;
  for (auto& p : out.points) {
    for (int i = 0; i < 3; ++i) p[i] -= c[i];
    radius = std::max(radius, norm(p));
  }
  if (radius > 0.0) {
    for (auto& p : out.points)
      for (auto& v : p) v /= radius;
  }
  return out;
}

/// Farthest point sampling from an explicit start index. Ties go to the
/// lowest index.
inline std::vector<std::size_t> fps_from(const PointCloud& pc, std::size_t n, std::size_t start) {
  const std::size_t count = pc.size();
  if (n == 0 || n > count) {
    fail(ErrorKind::Input, "fps: requested " + std::to_string(n) + " of " + std::to_string(count) + " points");
  }
  if (start >= count) fail(ErrorKind::Input, "fps: start index out of range");
  std::vector<std::size_t> picked{start};
  picked.reserve(n);
  // Selected points carry -1 so they are never picked again.
  std::vector<double> min_d(count, std::numeric_limits<double>::infinity());
  min_d[start] = -1.0;
  std::size_t last = start;
  while (picked.size() < n) {
    std::size_t best = 0;
    double best_d = -2.0;
    for (std::size_t i = 0; i < count; ++i) {
      min_d[i] = std::min(min_d[i], squared_distance(pc.points[i], pc.points[last]));
      if (min_d[i] > best_d) {  // strict: lowest index wins ties
        best_d = min_d[i];
        best = i;
      }
    }
    picked.push_back(best);
    min_d[best] = -1.0;
    last = best;
  }
  return picked;
}

/// Farthest point sampling with the first index drawn from a seeded generator.
inline std::vector<std::size_t> fps(const PointCloud& pc, std::size_t n, std::uint64_t seed) {
  if (pc.points.empty()) fail(ErrorKind::Input, "fps: empty point cloud");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, pc.size() - 1);
  return fps_from(pc, n, pick(rng));
}

/// For each center, the k nearest points (ties by lowest index), expressed
/// relative to the center.
inline PatchSet knn_group(const PointCloud& pc, std::span<const std::size_t> centers, std::size_t k) {
  const std::size_t count = pc.size();
  if (k == 0 || k > count) {
    fail(ErrorKind::Input, "knn_group: k=" + std::to_string(k) + " with " + std::to_string(count) + " points");
  }
  PatchSet out;
  out.k = k;
  out.center_indices.assign(centers.begin(), centers.end());
  out.groups.reserve(centers.size() * k);
  out.members.reserve(centers.size() * k);
  std::vector<std::pair<double, std::size_t>> dist(count);
  for (auto ci : centers) {
    if (ci >= count) fail(ErrorKind::Input, "knn_group: center index out of range");
    const Point3& c = pc.points[ci];
    out.centers.push_back(c);
    for (std::size_t i = 0; i < count; ++i) dist[i] = {squared_distance(pc.points[i], c), i};
    std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k), dist.end());
    for (std::size_t j = 0; j < k; ++j) {
      const auto& p = pc.points[dist[j].second];
      out.groups.push_back({p[0] - c[0], p[1] - c[1], p[2] - c[2]});
      out.members.push_back(dist[j].second);
    }
  }
  return out;
}

/// FPS centers followed by kNN grouping.
inline PatchSet make_patches(const PointCloud& pc, std::size_t n, std::size_t k, std::uint64_t seed) {
  const auto centers = fps(pc, n, seed);
  return knn_group(pc, centers, k);
}

/// Symmetric squared Chamfer distance: mean nearest squared distance from a
/// to b plus the same from b to a.
inline double chamfer(std::span<const Point3> a, std::span<const Point3> b) {
  if (a.empty() || b.empty()) fail(ErrorKind::Input, "chamfer: empty point set");
  auto one_way = [](std::span<const Point3> from, std::span<const Point3> to) {
    double total = 0.0;
    for (const auto& p : from) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& q : to) best = std::min(best, squared_distance(p, q));
      total += best;
    }
    return total / static_cast<double>(from.size());
  };
  return one_way(a, b) + one_way(b, a);
}

/// Euclidean distance matrix between centers, row-major N x N.
inline std::vector<double> pairwise_distances(std::span<const Point3> centers) {
  const std::size_t n = centers.size();
  std::vector<double> d(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) d[i * n + j] = d[j * n + i] = std::sqrt(squared_distance(centers[i], centers[j]));
  return d;
}

// -------------------------------------------------------------- augmentation

struct AugmentSpec {
  bool scale = false;
  double scale_low = 2.0 / 3.0;
  double scale_high = 3.0 / 2.0;
  double noise_sigma = 0.0;
  std::array<bool, 3> rotate_axes{false, false, false};
  double dropout = 0.0;
  std::size_t resample_to = 0;  // 0 keeps the current count

  bool identity() const {
    return !scale && noise_sigma == 0.0 && !rotate_axes[0] && !rotate_axes[1] && !rotate_axes[2] &&
           dropout == 0.0 && resample_to == 0;
  }

  void validate() const {
    if (!(scale_low > 0.0) || !(scale_high >= scale_low)) fail(ErrorKind::Config, "augment: scale bounds must be positive and ordered");
    if (!(noise_sigma >= 0.0)) fail(ErrorKind::Config, "augment: noise sigma must be non-negative");
    if (!(dropout >= 0.0 && dropout < 1.0)) fail(ErrorKind::Config, "augment: dropout must be in [0, 1)");
  }
};

/// Random resampling to exactly `count` points: a subset without replacement
/// when shrinking, the full cloud plus random repeats when growing.
inline PointCloud resample(const PointCloud& pc, std::size_t count, std::mt19937_64& rng) {
  if (pc.points.empty()) fail(ErrorKind::Input, "resample: empty point cloud");
  std::vector<std::size_t> idx(pc.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (count <= pc.size()) {
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(count);
    std::sort(idx.begin(), idx.end());
  } else {
    std::uniform_int_distribution<std::size_t> pick(0, pc.size() - 1);
    while (idx.size() < count) idx.push_back(pick(rng));
  }
  PointCloud out{{}, pc.label};
  out.points.reserve(count);
  for (auto i : idx) out.points.push_back(pc.points[i]);
  return out;
}

/// Applies, in order: dropout, resampling, per-axis scale, rotations about
/// the enabled axes, Gaussian noise.
inline PointCloud augment(const PointCloud& pc, const AugmentSpec& spec, std::uint64_t seed) {
  spec.validate();
  if (pc.points.empty()) fail(ErrorKind::Input, "augment: empty point cloud");
  PointCloud out = pc;
  if (spec.identity()) return out;
  std::mt19937_64 rng(seed);

  if (spec.dropout > 0.0) {
    const auto drop = static_cast<std::size_t>(std::floor(spec.dropout * static_cast<double>(pc.size())));
    const std::size_t keep = std::max<std::size_t>(1, pc.size() - drop);
    out = resample(out, keep, rng);
  }
  if (spec.resample_to > 0) out = resample(out, spec.resample_to, rng);
  if (spec.scale) {
    std::uniform_real_distribution<double> s(spec.scale_low, spec.scale_high);
    const Point3 f{s(rng), s(rng), s(rng)};
    for (auto& p : out.points)
      for (int i = 0; i < 3; ++i) p[i] *= f[i];
  }
  std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
  for (int axis = 0; axis < 3; ++axis) {
    if (!spec.rotate_axes[static_cast<std::size_t>(axis)]) continue;
    const double t = angle(rng), c = std::cos(t), s = std::sin(t);
    const int u = (axis + 1) % 3, v = (axis + 2) % 3;
    for (auto& p : out.points) {
      const double a = p[u], b = p[v];
      p[u] = c * a - s * b;
      p[v] = s * a + c * b;
    }
  }
  if (spec.noise_sigma > 0.0) {
    std::normal_distribution<double> noise(0.0, spec.noise_sigma);
    for (auto& p : out.points)
      for (auto& v : p) v += noise(rng);
  }
  return out;
}

}  // namespace pointform
