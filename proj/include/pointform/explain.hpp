#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "pointform/csv.hpp"
#include "pointform/data.hpp"
#include "pointform/error.hpp"
#include "pointform/finetune.hpp"
#include "pointform/geometry.hpp"
#include "pointform/model.hpp"
#include "pointform/parallel.hpp"
#include "pointform/pointio.hpp"

namespace pointform {

// ---------------------------------------------------------------------- CKA

enum class Pooling { Cls, Mean };

inline std::string_view pooling_name(Pooling p) { return p == Pooling::Cls ? "cls" : "mean"; }

/// Per-sample features at each probe point: positional embedding, feature
/// embedding, then each block output. The two embedding probes carry no CLS
/// token and are always mean-pooled over patches.
struct LayerActivations {
  std::vector<std::string> labels;
  std::vector<std::vector<double>> probes;  // samples x width, row-major
  std::vector<std::size_t> widths;
  std::size_t samples = 0;
  Pooling pooling = Pooling::Cls;

  std::size_t probe_count() const { return probes.size(); }
};

struct CollectOptions {
  Pooling pooling = Pooling::Cls;
  std::optional<std::size_t> depth;
  std::size_t threads = 1;
};

namespace detail {

inline std::vector<double> pool_rows(const Tensor& t, std::size_t first_row) {
  const std::size_t cols = t.cols(), rows = t.rows() - first_row;
  std::vector<double> out(cols, 0.0);
  for (std::size_t r = first_row; r < t.rows(); ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c] += t.values()[r * cols + c];
  for (auto& v : out) v /= static_cast<double>(rows);
  return out;
}

}  // namespace detail

inline LayerActivations collect_activations(const TransformerModel& model, const Dataset& ds,
                                            std::span<const std::size_t> indices, const CollectOptions& opt = {}) {
  const auto& c = model.config();
  const std::size_t depth = opt.depth ? *opt.depth : c.blocks;
  truncate_depth(model, depth);
  if (indices.empty()) fail(ErrorKind::Input, "collect_activations: no samples");
  const std::size_t probes = depth + 2, n = indices.size();
  LayerActivations acts;
  acts.samples = n;
  acts.pooling = opt.pooling;
  acts.labels = {"pos_embed", "feat_embed"};
  for (std::size_t b = 0; b < depth; ++b) acts.labels.push_back("block" + std::to_string(b + 1));
  acts.widths.assign(probes, c.dim);
  acts.probes.assign(probes, std::vector<double>(n * c.dim));
  parallel_for(n, opt.threads, [&](std::size_t j) {
    NoGradGuard no_grad;
    const std::size_t idx = indices[j];
    const auto patches = make_patches(ds.samples.at(idx).cloud, c.patches, c.group_size, eval_patch_seed(idx));
    const auto pt = patch_tensors(patches);
    const Tensor tokens = model.embed_patches(pt.groups);
    const Tensor pos = model.positional_encoding(pt.centers);
    EncodeOptions eo;
    eo.depth = depth;
    eo.keep_block_outputs = true;
    const auto enc = model.encode(tokens, pos, eo);
    auto store = [&](std::size_t probe, const std::vector<double>& v) {
      std::copy(v.begin(), v.end(), acts.probes[probe].begin() + static_cast<std::ptrdiff_t>(j * c.dim));
    };
    store(0, detail::pool_rows(pos, 0));
    store(1, detail::pool_rows(tokens, 0));
    for (std::size_t b = 0; b < depth; ++b) {
      const Tensor& out = enc.block_outputs[b];
      if (opt.pooling == Pooling::Cls) {
        store(b + 2, std::vector<double>(out.values().begin(), out.values().begin() + static_cast<std::ptrdiff_t>(c.dim)));
      } else {
        store(b + 2, detail::pool_rows(out, 1));
      }
    }
  });
  return acts;
}

/// Linear CKA between two representations of the same n samples
/// (row-major n x d1 and n x d2). NaN when either centered input is zero.
inline double linear_cka(std::span<const double> x, std::size_t d1, std::span<const double> y, std::size_t d2) {
  if (d1 == 0 || d2 == 0 || x.size() % d1 != 0 || y.size() % d2 != 0) fail(ErrorKind::Dimension, "linear_cka: bad extents");
  const std::size_t n = x.size() / d1;
  if (y.size() / d2 != n) fail(ErrorKind::Dimension, "linear_cka: sample counts differ");
  if (n < 2) fail(ErrorKind::Input, "linear_cka: needs at least 2 samples");
  auto center = [n](std::span<const double> m, std::size_t d) {
    std::vector<double> out(m.begin(), m.end()), mean(d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < d; ++c) mean[c] += m[i * d + c];
    for (auto& v : mean) v /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < d; ++c) out[i * d + c] -= mean[c];
    return out;
  };
  const auto xc = center(x, d1), yc = center(y, d2);
  // ||A^T B||_F^2 for centered A (n x da), B (n x db).
  auto cross = [n](const std::vector<double>& a, std::size_t da, const std::vector<double>& b, std::size_t db) {
    std::vector<double> prod(da * db, 0.0);
    kernel::gemm_tn(n, da, db, a.data(), b.data(), prod.data());
    double s = 0.0;
    for (double v : prod) s += v * v;
    return s;
  };
  const double xy = cross(yc, d2, xc, d1), xx = std::sqrt(cross(xc, d1, xc, d1)), yy = std::sqrt(cross(yc, d2, yc, d2));
  if (!(xx > 0.0) || !(yy > 0.0)) return std::numeric_limits<double>::quiet_NaN();
  return xy / (xx * yy);
}

struct CKAMatrix {
  std::vector<std::string> row_labels, col_labels;
  std::vector<double> values;  // rows x cols

  std::size_t rows() const { return row_labels.size(); }
  std::size_t cols() const { return col_labels.size(); }
  double at(std::size_t r, std::size_t c) const { return values.at(r * cols() + c); }
  bool has_undefined() const {
    return std::any_of(values.begin(), values.end(), [](double v) { return std::isnan(v); });
  }

  /// Mean of the diagonal (square matrices).
  double mean_diagonal() const {
    const std::size_t n = std::min(rows(), cols());
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += at(i, i);
    return s / static_cast<double>(n);
  }
};

/// All-pairs CKA: rows index probes of `a`, columns probes of `b`.
inline CKAMatrix cka_compare(const LayerActivations& a, const LayerActivations& b) {
  if (a.samples != b.samples) fail(ErrorKind::Dimension, "cka_compare: activation sets cover different sample counts");
  CKAMatrix m{a.labels, b.labels, {}};
  m.values.reserve(a.probe_count() * b.probe_count());
  for (std::size_t i = 0; i < a.probe_count(); ++i)
    for (std::size_t j = 0; j < b.probe_count(); ++j)
      m.values.push_back(linear_cka(a.probes[i], a.widths[i], b.probes[j], b.widths[j]));
  return m;
}

/// Matrix CSV with row labels in the first column; undefined cells are "nan".
inline void write_cka_csv(const std::filesystem::path& path, const CKAMatrix& m) {
  std::vector<std::string> header{"probe"};
  header.insert(header.end(), m.col_labels.begin(), m.col_labels.end());
  CsvWriter csv(path, header);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    std::vector<std::string> row{m.row_labels[r]};
    for (std::size_t c = 0; c < m.cols(); ++c) {
      std::ostringstream cell;
      cell << std::setprecision(17) << m.at(r, c);
      row.push_back(std::isnan(m.at(r, c)) ? "nan" : cell.str());
    }
    csv.row(row);
  }
}

// ---------------------------------------------------- mean attention distance

/// (1/N^2) * sum_ij A_ij D_ij over N x N matrices; the per-token variant
/// divides by N instead.
inline double mean_attention_distance(std::span<const double> a, std::span<const double> d, std::size_t n,
                                      bool per_token = false) {
  if (a.size() != n * n || d.size() != n * n) fail(ErrorKind::Input, "attention distance: A and D must both be N x N");
  if (n == 0) fail(ErrorKind::Input, "attention distance: empty matrices");
  double s = 0.0;
  for (std::size_t i = 0; i < n * n; ++i) s += a[i] * d[i];
  const double nn = static_cast<double>(n);
  return per_token ? s / nn : s / (nn * nn);
}

/// mAD per (layer, head), layer-major, using the patch-to-patch block of each
/// attention matrix.
inline std::vector<double> attention_distance(const AttentionRecord& record, std::span<const double> dists,
                                              bool per_token = false) {
  std::vector<std::size_t> patch_tokens;
  for (std::size_t t = 0; t < record.token_patch.size(); ++t)
    if (record.token_patch[t] >= 0) patch_tokens.push_back(t);
  const std::size_t n = patch_tokens.size();
  if (dists.size() != n * n) {
    fail(ErrorKind::Input, "attention distance: " + std::to_string(n) + " patch tokens vs distance matrix of " +
                               std::to_string(dists.size()) + " entries");
  }
  std::vector<double> out;
  std::vector<double> block(n * n);
  for (std::size_t l = 0; l < record.layers; ++l) {
    for (std::size_t h = 0; h < record.heads; ++h) {
      const auto m = record.matrix(l, h);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) block[i * n + j] = m[patch_tokens[i] * record.tokens + patch_tokens[j]];
      out.push_back(mean_attention_distance(block, dists, n, per_token));
    }
  }
  return out;
}

struct MadTable {
  std::size_t layers = 0, heads = 0;
  std::vector<double> values;  // layer-major, averaged over samples

  /// Heads of one layer sorted ascending.
  std::vector<double> sorted_layer(std::size_t l) const {
    std::vector<double> v(values.begin() + static_cast<std::ptrdiff_t>(l * heads),
                          values.begin() + static_cast<std::ptrdiff_t>((l + 1) * heads));
    std::sort(v.begin(), v.end());
    return v;
  }
};

inline MadTable attention_distance_dataset(const TransformerModel& model, const Dataset& ds,
                                           std::span<const std::size_t> indices, bool per_token = false,
                                           std::size_t threads = 1) {
  const auto& c = model.config();
  if (indices.empty()) fail(ErrorKind::Input, "attention distance: no samples");
  std::vector<std::vector<double>> per(indices.size());
  parallel_for(indices.size(), threads, [&](std::size_t j) {
    NoGradGuard no_grad;
    const std::size_t idx = indices[j];
    const auto patches = make_patches(ds.samples.at(idx).cloud, c.patches, c.group_size, eval_patch_seed(idx));
    const auto pt = patch_tensors(patches);
    EncodeOptions eo;
    eo.capture = true;
    const auto enc = model.encode(model.embed_patches(pt.groups), model.positional_encoding(pt.centers), eo);
    per[j] = attention_distance(*enc.attention, pairwise_distances(patches.centers), per_token);
  });
  MadTable t{c.blocks, c.heads, std::vector<double>(c.blocks * c.heads, 0.0)};
  for (const auto& v : per)
    for (std::size_t i = 0; i < v.size(); ++i) t.values[i] += v[i];
  for (auto& v : t.values) v /= static_cast<double>(per.size());
  return t;
}

/// Columns: layer, rank (ascending order within the layer), head, mad.
inline void write_mad_csv(const std::filesystem::path& path, const MadTable& t) {
  CsvWriter csv(path, {"layer", "rank", "head", "mad"});
  for (std::size_t l = 0; l < t.layers; ++l) {
    std::vector<std::size_t> heads(t.heads);
    std::iota(heads.begin(), heads.end(), std::size_t{0});
    std::stable_sort(heads.begin(), heads.end(),
                     [&](std::size_t a, std::size_t b) { return t.values[l * t.heads + a] < t.values[l * t.heads + b]; });
    for (std::size_t r = 0; r < t.heads; ++r) csv.write(l + 1, r, heads[r], t.values[l * t.heads + heads[r]]);
  }
}

// --------------------------------------------------------- receptive fields

/// Norm, per input patch, of the gradient of sum(feature of `target`) with
/// respect to the combined (feature + positional) input embeddings.
inline std::vector<double> receptive_field(const TransformerModel& model, const PatchSet& patches, std::size_t target,
                                           std::optional<std::size_t> depth = std::nullopt) {
  const std::size_t n = patches.count(), dim = model.config().dim;
  if (target >= n) fail(ErrorKind::Input, "receptive_field: patch " + std::to_string(target) + " out of range");
  Tensor combined;
  {
    NoGradGuard no_grad;
    const auto pt = patch_tensors(patches);
    const Tensor x = add(model.embed_patches(pt.groups), model.positional_encoding(pt.centers));
    combined = Tensor::variable(x.shape(), std::vector<double>(x.values().begin(), x.values().end()));
  }
  Tape tape;
  EncodeOptions eo;
  eo.depth = depth;
  const auto enc = model.encode_input(combined, eo);
  std::vector<double> seed(enc.features.numel(), 0.0);
  std::fill(seed.begin() + static_cast<std::ptrdiff_t>((target + 1) * dim),
            seed.begin() + static_cast<std::ptrdiff_t>((target + 2) * dim), 1.0);
  const auto grads = tape.gradients(enc.features, seed);
  const auto g = grads.of(combined);
  std::vector<double> norms(n, 0.0);
  if (g.empty()) return norms;
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < dim; ++c) s += g[i * dim + c] * g[i * dim + c];
    norms[i] = std::sqrt(s);
  }
  return norms;
}

/// Spreads per-patch values onto points: each point takes the value of its
/// nearest patch center.
inline std::vector<double> patch_values_to_points(const PointCloud& pc, const PatchSet& patches,
                                                  std::span<const double> values) {
  if (values.size() != patches.count()) fail(ErrorKind::Dimension, "patch values: one value per patch required");
  std::vector<double> out(pc.size());
  for (std::size_t i = 0; i < pc.size(); ++i) {
    std::size_t best = 0;
    double bd = std::numeric_limits<double>::infinity();
    for (std::size_t g = 0; g < patches.count(); ++g) {
      const double d = squared_distance(pc.points[i], patches.centers[g]);
      if (d < bd) bd = d, best = g;
    }
    out[i] = values[best];
  }
  return out;
}

// ------------------------------------------------------ CLS attention maps

/// Per layer: the head-averaged CLS attention row, min-max scaled over all
/// entries including the CLS self-score, restricted to the patch entries.
inline std::vector<std::vector<double>> cls_attention_maps(const AttentionRecord& record) {
  std::size_t cls = record.token_patch.size();
  for (std::size_t t = 0; t < record.token_patch.size(); ++t)
    if (record.token_patch[t] < 0) cls = t;
  if (cls == record.token_patch.size()) fail(ErrorKind::Input, "attention record has no CLS token");
  std::vector<std::vector<double>> maps;
  for (std::size_t l = 0; l < record.layers; ++l) {
    std::vector<double> row(record.tokens, 0.0);
    for (std::size_t h = 0; h < record.heads; ++h) {
      const auto m = record.matrix(l, h);
      for (std::size_t t = 0; t < record.tokens; ++t) row[t] += m[cls * record.tokens + t];
    }
    for (auto& v : row) v /= static_cast<double>(record.heads);
    const auto [lo, hi] = std::minmax_element(row.begin(), row.end());
    const double low = *lo, range = *hi - *lo;
    std::vector<double> scores;
    for (std::size_t t = 0; t < record.tokens; ++t) {
      if (record.token_patch[t] < 0) continue;
      scores.push_back(range > 0.0 ? (row[t] - low) / range : 0.0);
    }
    maps.push_back(std::move(scores));
  }
  return maps;
}

/// One "<prefix>_layerNN.ply" per encoder layer with a per-point score.
inline std::vector<std::filesystem::path> export_cls_attention(const AttentionRecord& record, const PointCloud& pc,
                                                               const PatchSet& patches,
                                                               const std::filesystem::path& dir,
                                                               const std::string& prefix = "cls_attention") {
  std::filesystem::create_directories(dir);
  const auto maps = cls_attention_maps(record);
  std::vector<std::filesystem::path> files;
  for (std::size_t l = 0; l < maps.size(); ++l) {
    std::ostringstream name;
    name << prefix << "_layer" << std::setw(2) << std::setfill('0') << (l + 1) << ".ply";
    files.push_back(dir / name.str());
    io::write_ply(files.back(), pc.points, patch_values_to_points(pc, patches, maps[l]));
  }
  return files;
}

// ----------------------------------------------------------------- features

struct FeatureTable {
  std::vector<int> labels;
  std::vector<double> values;  // rows x dim
  std::size_t dim = 0;

  std::size_t rows() const { return labels.size(); }
};

/// Final CLS feature of every listed sample.
inline FeatureTable extract_features(const TransformerModel& model, const Dataset& ds, std::span<const std::size_t> indices,
                                     std::size_t threads = 1) {
  const auto& c = model.config();
  FeatureTable t{std::vector<int>(indices.size()), std::vector<double>(indices.size() * c.dim), c.dim};
  parallel_for(indices.size(), threads, [&](std::size_t j) {
    NoGradGuard no_grad;
    const std::size_t idx = indices[j];
    const auto patches = make_patches(ds.samples.at(idx).cloud, c.patches, c.group_size, eval_patch_seed(idx));
    const auto pt = patch_tensors(patches);
    const auto enc = model.encode(model.embed_patches(pt.groups), model.positional_encoding(pt.centers));
    std::copy(enc.features.values().begin(), enc.features.values().begin() + static_cast<std::ptrdiff_t>(c.dim),
              t.values.begin() + static_cast<std::ptrdiff_t>(j * c.dim));
    t.labels[j] = ds.samples[idx].label;
  });
  return t;
}

/// Columns: label, f0 .. f{dim-1}.
inline void write_features_csv(const std::filesystem::path& path, const FeatureTable& t) {
  std::vector<std::string> header{"label"};
  for (std::size_t c = 0; c < t.dim; ++c) header.push_back("f" + std::to_string(c));
  CsvWriter csv(path, header);
  std::vector<double> row(t.dim + 1);
  for (std::size_t r = 0; r < t.rows(); ++r) {
    row[0] = t.labels[r];
    std::copy(t.values.begin() + static_cast<std::ptrdiff_t>(r * t.dim),
              t.values.begin() + static_cast<std::ptrdiff_t>((r + 1) * t.dim), row.begin() + 1);
    csv.row(row);
  }
}

inline FeatureTable read_features_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Data, "cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) fail(ErrorKind::Format, path.filename().string() + ": empty feature file");
  FeatureTable t;
  t.dim = split_csv_line(line).size() - 1;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto fields = split_csv_line(line);
    const std::string where = path.filename().string() + ":" + std::to_string(line_no);
    if (fields.size() != t.dim + 1) fail(ErrorKind::Format, where + ": expected " + std::to_string(t.dim + 1) + " columns");
    try {
      t.labels.push_back(std::stoi(fields[0]));
      for (std::size_t c = 1; c < fields.size(); ++c) t.values.push_back(std::stod(fields[c]));
    } catch (const std::exception&) {
      fail(ErrorKind::Format, where + ": invalid number");
    }
  }
  return t;
}

/// Accuracy on `test` of a classifier assigning each row to the class with
/// the nearest mean of `train` rows.
inline double nearest_centroid_accuracy(const FeatureTable& train, const FeatureTable& test) {
  if (train.dim != test.dim) fail(ErrorKind::Dimension, "nearest centroid: feature widths differ");
  if (train.rows() == 0 || test.rows() == 0) fail(ErrorKind::Input, "nearest centroid: empty table");
  const int classes = *std::max_element(train.labels.begin(), train.labels.end()) + 1;
  const std::size_t d = train.dim;
  std::vector<double> centroid(static_cast<std::size_t>(classes) * d, 0.0);
  std::vector<std::size_t> count(static_cast<std::size_t>(classes), 0);
  for (std::size_t r = 0; r < train.rows(); ++r) {
    const auto c = static_cast<std::size_t>(train.labels[r]);
    ++count[c];
    for (std::size_t k = 0; k < d; ++k) centroid[c * d + k] += train.values[r * d + k];
  }
  for (std::size_t c = 0; c < count.size(); ++c)
    for (std::size_t k = 0; k < d && count[c]; ++k) centroid[c * d + k] /= static_cast<double>(count[c]);
  std::size_t correct = 0;
  for (std::size_t r = 0; r < test.rows(); ++r) {
    std::size_t best = 0;
    double bd = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < count.size(); ++c) {
      if (count[c] == 0) continue;
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = test.values[r * d + k] - centroid[c * d + k];
        s += diff * diff;
      }
      if (s < bd) bd = s, best = c;
    }
    if (static_cast<int>(best) == test.labels[r]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(test.rows());
}

}  // namespace pointform
