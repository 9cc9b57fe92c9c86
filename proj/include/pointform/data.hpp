#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "pointform/csv.hpp"
#include "pointform/error.hpp"
#include "pointform/geometry.hpp"
#include "pointform/pointio.hpp"
#include "pointform/random.hpp"

namespace pointform {

enum class ShapeClass { Sphere, Box, Cylinder, Cone, Torus, Plane, Helix, Cross };

inline constexpr std::array<std::string_view, 8> kShapeNames{"sphere", "box",   "cylinder", "cone",
                                                             "torus",  "plane", "helix",    "cross"};

inline std::string_view shape_name(ShapeClass c) { return kShapeNames[static_cast<std::size_t>(c)]; }

struct ShapeSpec {
  ShapeClass cls = ShapeClass::Sphere;
  std::size_t points = 1024;
  double jitter = 0.0;  // maximum displacement per point before normalization
};

namespace detail {

using Rng = std::mt19937_64;

inline double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

/// Picks an index with probability proportional to `weights`.
inline std::size_t pick_weighted(Rng& rng, const std::vector<double>& weights) {
  std::discrete_distribution<std::size_t> d(weights.begin(), weights.end());
  return d(rng);
}

/// Uniform sample on the surface of an axis-aligned box with the given half
/// extents and center.
inline Point3 box_surface(Rng& rng, const Point3& half, const Point3& center) {
  const double ax = half[1] * half[2], ay = half[0] * half[2], az = half[0] * half[1];
  const std::size_t face = pick_weighted(rng, {ax, ax, ay, ay, az, az});
  const int axis = static_cast<int>(face / 2);
  Point3 p;
  for (int i = 0; i < 3; ++i) p[i] = uniform(rng, -half[i], half[i]);
  p[axis] = (face % 2 == 0) ? -half[axis] : half[axis];
  for (int i = 0; i < 3; ++i) p[i] += center[i];
  return p;
}

inline Point3 sphere_direction(Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  for (;;) {
    Point3 v{n(rng), n(rng), n(rng)};
    const double r = norm(v);
    if (r > 1e-12) return {v[0] / r, v[1] / r, v[2] / r};
  }
}

inline std::vector<Point3> sample_sphere(Rng& rng, std::size_t count) {
  // Antipodal pairs (plus one 120-degree triple for odd counts) keep the
  // centroid exactly at the origin.
  std::vector<Point3> pts;
  pts.reserve(count);
  if (count % 2 == 1) {
    if (count == 1) return {sphere_direction(rng)};
    const auto a = sphere_direction(rng);
    auto b = sphere_direction(rng);
    const double ab = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    for (int i = 0; i < 3; ++i) b[i] -= ab * a[i];
    const double nb = norm(b);
    for (auto& v : b) v /= nb;
    const double c = -0.5, s = std::sqrt(3.0) / 2.0;
    pts.push_back(a);
    pts.push_back({c * a[0] + s * b[0], c * a[1] + s * b[1], c * a[2] + s * b[2]});
    pts.push_back({c * a[0] - s * b[0], c * a[1] - s * b[1], c * a[2] - s * b[2]});
  }
  while (pts.size() < count) {
    const auto d = sphere_direction(rng);
    pts.push_back(d);
    pts.push_back({-d[0], -d[1], -d[2]});
  }
  return pts;
}

inline std::vector<Point3> sample_box(Rng& rng, std::size_t count) {
  const Point3 half{uniform(rng, 0.25, 0.75), uniform(rng, 0.25, 0.75), uniform(rng, 0.25, 0.75)};
  std::vector<Point3> pts(count);
  for (auto& p : pts) p = box_surface(rng, half, {0, 0, 0});
  return pts;
}

inline std::vector<Point3> sample_cylinder(Rng& rng, std::size_t count) {
  const double r = uniform(rng, 0.3, 0.7), h = uniform(rng, 1.0, 2.0);
  const double side = 2.0 * std::numbers::pi * r * h, cap = std::numbers::pi * r * r;
  std::vector<Point3> pts(count);
  for (auto& p : pts) {
    const double t = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    const std::size_t part = pick_weighted(rng, {side, cap, cap});
    if (part == 0) {
      p = {r * std::cos(t), r * std::sin(t), uniform(rng, -h / 2, h / 2)};
    } else {
      const double rr = r * std::sqrt(uniform(rng, 0.0, 1.0));
      p = {rr * std::cos(t), rr * std::sin(t), part == 1 ? -h / 2 : h / 2};
    }
  }
  return pts;
}

inline std::vector<Point3> sample_cone(Rng& rng, std::size_t count) {
  const double r = uniform(rng, 0.4, 0.8), h = uniform(rng, 0.8, 1.6);
  const double side = std::numbers::pi * r * std::hypot(r, h), base = std::numbers::pi * r * r;
  std::vector<Point3> pts(count);
  for (auto& p : pts) {
    const double t = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    if (pick_weighted(rng, {side, base}) == 0) {
      const double s = std::sqrt(uniform(rng, 0.0, 1.0));  // fraction of the way from apex to base
      p = {s * r * std::cos(t), s * r * std::sin(t), h * (1.0 - s)};
    } else {
      const double rr = r * std::sqrt(uniform(rng, 0.0, 1.0));
      p = {rr * std::cos(t), rr * std::sin(t), 0.0};
    }
  }
  return pts;
}

inline std::vector<Point3> sample_torus(Rng& rng, std::size_t count) {
  const double big = uniform(rng, 0.7, 1.0), small = uniform(rng, 0.15, 0.35);
  std::vector<Point3> pts;
  pts.reserve(count);
  while (pts.size() < count) {
    const double u = uniform(rng, 0.0, 2.0 * std::numbers::pi), v = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    // Area element is proportional to (R + r cos v).
    if (uniform(rng, 0.0, big + small) > big + small * std::cos(v)) continue;
    const double ring = big + small * std::cos(v);
    pts.push_back({ring * std::cos(u), ring * std::sin(u), small * std::sin(v)});
  }
  return pts;
}

inline std::vector<Point3> sample_plane(Rng& rng, std::size_t count) {
  const double a = uniform(rng, 0.8, 1.5), b = uniform(rng, 0.8, 1.5);
  std::vector<Point3> pts(count);
  for (auto& p : pts) p = {uniform(rng, -a / 2, a / 2), uniform(rng, -b / 2, b / 2), 0.0};
  return pts;
}

inline std::vector<Point3> sample_helix(Rng& rng, std::size_t count) {
  const double turns = uniform(rng, 2.0, 4.0), height = uniform(rng, 1.2, 2.0);
  const double radius = 0.5, tube = 0.06;
  const double omega = 2.0 * std::numbers::pi * turns, rise = height;
  const double speed = std::hypot(radius * omega, rise);
  std::vector<Point3> pts(count);
  for (auto& p : pts) {
    const double s = uniform(rng, 0.0, 1.0), a = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    const double th = omega * s;
    const Point3 c{radius * std::cos(th), radius * std::sin(th), rise * s - rise / 2};
    const Point3 tan{-radius * omega * std::sin(th) / speed, radius * omega * std::cos(th) / speed, rise / speed};
    const Point3 nrm{-std::cos(th), -std::sin(th), 0.0};
    const Point3 bin{tan[1] * nrm[2] - tan[2] * nrm[1], tan[2] * nrm[0] - tan[0] * nrm[2],
                     tan[0] * nrm[1] - tan[1] * nrm[0]};
    for (int i = 0; i < 3; ++i) p[i] = c[i] + tube * (std::cos(a) * nrm[i] + std::sin(a) * bin[i]);
  }
  return pts;
}

inline std::vector<Point3> sample_cross(Rng& rng, std::size_t count) {
  const double len = uniform(rng, 1.5, 2.0), w = uniform(rng, 0.2, 0.4);
  const Point3 bar_x{len / 2, w / 2, w / 2}, bar_y{w / 2, len * uniform(rng, 0.35, 0.5), w / 2};
  auto area = [](const Point3& h) { return h[0] * h[1] + h[1] * h[2] + h[0] * h[2]; };
  std::vector<Point3> pts(count);
  for (auto& p : pts) {
    p = pick_weighted(rng, {area(bar_x), area(bar_y)}) == 0 ? box_surface(rng, bar_x, {0, 0, 0})
                                                            : box_surface(rng, bar_y, {0, 0, 0});
  }
  return pts;
}

}  // namespace detail

/// Uniform surface sample of a randomly parameterized shape, optionally
/// jittered, then normalized to the unit sphere.
inline PointCloud generate(const ShapeSpec& spec, std::uint64_t seed) {
  if (spec.points == 0) fail(ErrorKind::Config, "generate: point count must be >= 1");
  if (!(spec.jitter >= 0.0)) fail(ErrorKind::Config, "generate: jitter must be non-negative");
  detail::Rng rng(seed);
  std::vector<Point3> pts;
  switch (spec.cls) {
    case ShapeClass::Sphere: pts = detail::sample_sphere(rng, spec.points); break;
    case ShapeClass::Box: pts = detail::sample_box(rng, spec.points); break;
    case ShapeClass::Cylinder: pts = detail::sample_cylinder(rng, spec.points); break;
    case ShapeClass::Cone: pts = detail::sample_cone(rng, spec.points); break;
    case ShapeClass::Torus: pts = detail::sample_torus(rng, spec.points); break;
    case ShapeClass::Plane: pts = detail::sample_plane(rng, spec.points); break;
    case ShapeClass::Helix: pts = detail::sample_helix(rng, spec.points); break;
    case ShapeClass::Cross: pts = detail::sample_cross(rng, spec.points); break;
  }
  if (spec.jitter > 0.0) {
    for (auto& p : pts) {
      const auto d = detail::sphere_direction(rng);
      const double r = detail::uniform(rng, 0.0, spec.jitter);
      for (int i = 0; i < 3; ++i) p[i] += r * d[static_cast<std::size_t>(i)];
    }
  }
  PointCloud pc{std::move(pts), static_cast<int>(spec.cls)};
  return normalize_unit_sphere(pc);
}

// ------------------------------------------------------------------ datasets

struct Sample {
  PointCloud cloud;
  int label = 0;
  std::string source;
};

struct Dataset {
  std::vector<Sample> samples;
  std::vector<std::size_t> train, val;
  std::vector<std::string> class_names;
  std::uint64_t seed = 0;

  std::size_t class_count() const { return class_names.size(); }
};

/// Shuffles 0..count-1 with `seed` and assigns the first round(ratio*count)
/// to validation. Both halves are returned sorted.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(std::size_t count, double val_ratio,
                                                                                   std::uint64_t seed) {
  if (!(val_ratio >= 0.0 && val_ratio < 1.0)) fail(ErrorKind::Config, "split: validation ratio must be in [0, 1)");
  std::vector<std::size_t> idx(count);
  for (std::size_t i = 0; i < count; ++i) idx[i] = i;
  std::mt19937_64 rng(derive_seed(seed, {0x5b1u}));
  std::shuffle(idx.begin(), idx.end(), rng);
  const auto nval = static_cast<std::size_t>(std::floor(val_ratio * static_cast<double>(count) + 0.5));
  std::vector<std::size_t> val(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(nval));
  std::vector<std::size_t> train(idx.begin() + static_cast<std::ptrdiff_t>(nval), idx.end());
  std::sort(val.begin(), val.end());
  std::sort(train.begin(), train.end());
  return {std::move(train), std::move(val)};
}

struct DatasetOptions {
  std::size_t points = 1024;
  double jitter = 0.01;
  double val_ratio = 0.2;
};

/// Balanced synthetic set: `per_class` samples of each of the 8 shapes,
/// ordered class-major.
inline Dataset make_dataset(std::size_t per_class, std::uint64_t seed, const DatasetOptions& opt = {}) {
  if (per_class == 0) fail(ErrorKind::Config, "make_dataset: per-class count must be >= 1");
  Dataset ds;
  ds.seed = seed;
  ds.class_names.assign(kShapeNames.begin(), kShapeNames.end());
  ds.samples.reserve(per_class * kShapeNames.size());
  for (std::size_t c = 0; c < kShapeNames.size(); ++c) {
    for (std::size_t i = 0; i < per_class; ++i) {
      ShapeSpec spec{static_cast<ShapeClass>(c), opt.points, opt.jitter};
      auto cloud = generate(spec, derive_seed(seed, {c, i}));
      ds.samples.push_back({std::move(cloud), static_cast<int>(c), std::string(kShapeNames[c]) + "_" + std::to_string(i)});
    }
  }
  std::tie(ds.train, ds.val) = split_indices(ds.samples.size(), opt.val_ratio, seed);
  return ds;
}

/// Rotation-invariant summary of a cloud: mean and standard deviation of the
/// point radii, then an 8-bin histogram of radii over [0, 1].
inline std::vector<double> shape_statistics(const PointCloud& pc) {
  if (pc.points.empty()) fail(ErrorKind::Input, "shape_statistics: empty point cloud");
  std::vector<double> out(10, 0.0);
  const double n = static_cast<double>(pc.size());
  for (const auto& p : pc.points) {
    const double r = norm(p);
    out[0] += r / n;
    out[1] += r * r / n;
    out[2 + std::min<std::size_t>(7, static_cast<std::size_t>(r * 8.0))] += 1.0 / n;
  }
  out[1] = std::sqrt(std::max(0.0, out[1] - out[0] * out[0]));
  return out;
}

/// Per-sample files plus a "filename,label" manifest, readable by
/// ingest_directory().
inline void export_dataset(const Dataset& ds, const std::filesystem::path& dir, std::string_view ext = ".ply") {
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir / "manifest.csv");
  if (!manifest) fail(ErrorKind::Data, "cannot write manifest in " + dir.string());
  manifest << "filename,label\n";
  for (const auto& s : ds.samples) {
    const std::string name = s.source + std::string(ext);
    if (ext == ".xyz") {
      io::write_xyz(dir / name, s.cloud.points);
    } else {
      io::write_ply(dir / name, s.cloud.points);
    }
    manifest << name << ',' << ds.class_names.at(static_cast<std::size_t>(s.label)) << '\n';
  }
}

struct IngestReport {
  std::vector<std::string> missing;                             // listed in the manifest, absent on disk
  std::vector<std::pair<std::string, std::string>> unreadable;  // file, reason
  std::vector<std::string> unlabeled;                           // on disk, absent from the manifest
  std::size_t skipped_extensions = 0;

  bool clean() const { return missing.empty() && unreadable.empty() && unlabeled.empty() && skipped_extensions == 0; }
};

struct IngestResult {
  Dataset dataset;
  IngestReport report;
};

/// Loads every .xyz/.ply file under `dir` (sorted by name), normalizes it and
/// labels it from the manifest. Labels that are all integers are used as
/// class ids; otherwise distinct names are sorted and numbered.
inline IngestResult ingest_directory(const std::filesystem::path& dir, const std::filesystem::path& manifest_path,
                                     double val_ratio = 0.2, std::uint64_t seed = 0) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) fail(ErrorKind::Input, "ingest: not a directory: " + dir.string());
  std::ifstream in(manifest_path);
  if (!in) fail(ErrorKind::Data, "ingest: cannot open manifest " + manifest_path.string());

  std::map<std::string, std::string> labels;
  std::vector<std::string> manifest_order;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line_no == 1 && line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line.erase(0, 3);
    auto fields = split_csv_line(line);
    if (fields.empty() || (fields.size() == 1 && fields[0].empty())) continue;
    if (line_no == 1 && fields.size() == 2 && fields[0] == "filename" && fields[1] == "label") continue;
    if (fields.size() != 2 || fields[0].empty() || fields[1].empty()) {
      fail(ErrorKind::Format, manifest_path.filename().string() + ":" + std::to_string(line_no) + ": expected filename,label");
    }
    if (labels.emplace(fields[0], fields[1]).second) manifest_order.push_back(fields[0]);
  }

  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file()) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());

  IngestResult result;
  auto& report = result.report;
  std::set<std::string> on_disk;
  struct Loaded {
    std::string name;
    PointCloud cloud;
    std::string label;
  };
  std::vector<Loaded> loaded;
  for (const auto& path : files) {
    const std::string name = path.filename().string();
    if (path.extension() != ".xyz" && path.extension() != ".ply") {
      if (name != manifest_path.filename().string()) ++report.skipped_extensions;
      continue;
    }
    on_disk.insert(name);
    auto it = labels.find(name);
    if (it == labels.end()) {
      report.unlabeled.push_back(name);
      continue;
    }
    try {
      auto pc = io::read_points(path);
      if (pc.points.empty()) fail(ErrorKind::Format, name + ": no points");
      loaded.push_back({name, normalize_unit_sphere(pc), it->second});
    } catch (const Error& e) {
      report.unreadable.emplace_back(name, e.what());
    }
  }
  for (const auto& name : manifest_order)
    if (!on_disk.count(name)) report.missing.push_back(name);
  if (loaded.empty()) fail(ErrorKind::Input, "ingest: no usable point clouds in " + dir.string());

  const bool numeric = std::all_of(loaded.begin(), loaded.end(), [](const Loaded& l) {
    return !l.label.empty() && std::all_of(l.label.begin(), l.label.end(), [](char c) { return c >= '0' && c <= '9'; });
  });
  std::map<std::string, int> ids;
  auto& ds = result.dataset;
  if (numeric) {
    int top = 0;
    for (const auto& l : loaded) top = std::max(top, std::stoi(l.label));
    for (int c = 0; c <= top; ++c) ds.class_names.push_back(std::to_string(c));
    for (const auto& l : loaded) ids[l.label] = std::stoi(l.label);
  } else {
    std::set<std::string> names;
    for (const auto& l : loaded) names.insert(l.label);
    for (const auto& n : names) {
      ids[n] = static_cast<int>(ds.class_names.size());
      ds.class_names.push_back(n);
    }
  }
  for (auto& l : loaded) {
    const int id = ids.at(l.label);
    l.cloud.label = id;
    ds.samples.push_back({std::move(l.cloud), id, l.name});
  }
  ds.seed = seed;
  std::tie(ds.train, ds.val) = split_indices(ds.samples.size(), val_ratio, seed);
  return result;
}

inline IngestResult ingest_directory(const std::filesystem::path& dir, double val_ratio = 0.2, std::uint64_t seed = 0) {
  return ingest_directory(dir, dir / "manifest.csv", val_ratio, seed);
}

}  // namespace pointform
