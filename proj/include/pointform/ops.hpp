#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "pointform/tensor.hpp"

namespace pointform {

namespace kernel {

// Register-blocked product of R rows of A with W columns of B. Each output
// element is c + (fma chain over p ascending, starting from 0), whatever R
// is, so a row's result does not depend on its neighbours.
template <std::size_t R, std::size_t W>
inline void gemm_tile(std::size_t k, std::size_t n, const double* __restrict a, std::size_t lda,
                      const double* __restrict b, double* __restrict c) {
  double acc[R][W] = {};
  for (std::size_t p = 0; p < k; ++p) {
    const double* __restrict brow = b + p * n;
    for (std::size_t r = 0; r < R; ++r) {
      const double av = a[r * lda + p];
      for (std::size_t j = 0; j < W; ++j) acc[r][j] += av * brow[j];
    }
  }
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t j = 0; j < W; ++j) c[r * n + j] += acc[r][j];
}

template <std::size_t R>
inline void gemm_rows(std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
  std::size_t j = 0;
  for (; j + 32 <= n; j += 32) gemm_tile<R, 32>(k, n, a, k, b + j, c + j);
  for (; j + 8 <= n; j += 8) gemm_tile<R, 8>(k, n, a, k, b + j, c + j);
  for (; j < n; ++j) gemm_tile<R, 1>(k, n, a, k, b + j, c + j);
}

// C[m x n] += A[m x k] * B[k x n]
inline void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) gemm_rows<4>(k, n, a + i * k, b, c + i * n);
  for (; i < m; ++i) gemm_rows<1>(k, n, a + i * k, b, c + i * n);
}

inline std::vector<double> transpose(std::size_t rows, std::size_t cols, const double* src) {
  std::vector<double> out(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = src[i * cols + j];
  return out;
}

// C[k x n] += A[m x k]^T * B[m x n]
inline void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
  auto at = transpose(m, k, a);
  gemm_nn(k, m, n, at.data(), b, c);
}

// C[m x n] += A[m x k] * B[n x k]^T
inline void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
                    double* c) {
  auto bt = transpose(n, k, b);
  gemm_nn(m, k, n, a, bt.data(), c);
}

}  // namespace kernel

namespace detail {

inline bool recording(std::initializer_list<const Tensor*> inputs) {
  if (!Tape::active()) return false;
  for (const auto* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

template <typename Fn>
Tensor finish(Tensor out, std::initializer_list<const Tensor*> inputs, Fn&& fn) {
  ++op_counter;
  if (recording(inputs)) {
    std::vector<std::shared_ptr<Node>> nodes;
    nodes.reserve(inputs.size());
    for (const auto* t : inputs) nodes.push_back(t->handle());
    Tape::active()->record(std::move(nodes), out.handle(), std::forward<Fn>(fn));
  }
  return out;
}

inline Tensor finish_many(Tensor out, const std::vector<Tensor>& inputs, Tape::BackwardFn fn) {
  ++op_counter;
  bool any = false;
  for (const auto& t : inputs) any = any || t.requires_grad();
  if (Tape::active() && any) {
    std::vector<std::shared_ptr<Node>> nodes;
    for (const auto& t : inputs) nodes.push_back(t.handle());
    Tape::active()->record(std::move(nodes), out.handle(), std::move(fn));
  }
  return out;
}

inline void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) fail(ErrorKind::Dimension, std::string(op) + " expects a matrix, got " + shape_str(t.shape()));
}

inline void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    fail(ErrorKind::Dimension, std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

inline void add_into(std::vector<double>* dst, std::span<const double> src) {
  if (!dst) return;
  for (std::size_t i = 0; i < src.size(); ++i) (*dst)[i] += src[i];
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::finish(Tensor(a.shape(), std::move(out)), {&a, &b}, [](auto g, auto in) {
    detail::add_into(in[0], g);
    detail::add_into(in[1], g);
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return detail::finish(Tensor(a.shape(), std::move(out)), {&a, &b}, [](auto g, auto in) {
    detail::add_into(in[0], g);
    if (in[1])
      for (std::size_t i = 0; i < g.size(); ++i) (*in[1])[i] -= g[i];
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::finish(Tensor(a.shape(), std::move(out)), {&a, &b}, [a, b](auto g, auto in) {
    if (in[0])
      for (std::size_t i = 0; i < g.size(); ++i) (*in[0])[i] += g[i] * b[i];
    if (in[1])
      for (std::size_t i = 0; i < g.size(); ++i) (*in[1])[i] += g[i] * a[i];
  });
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  return detail::finish(Tensor(a.shape(), std::move(out)), {&a}, [s](auto g, auto in) {
    for (std::size_t i = 0; i < g.size(); ++i) (*in[0])[i] += g[i] * s;
  });
}

inline Tensor add_scalar(const Tensor& a, double s) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + s;
  return detail::finish(Tensor(a.shape(), std::move(out)), {&a},
                        [](auto g, auto in) { detail::add_into(in[0], g); });
}

/// x + bias broadcast over every trailing-axis row.
inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
  const std::size_t n = x.cols();
  if (bias.numel() != n) {
    fail(ErrorKind::Dimension, "add_bias: bias " + shape_str(bias.shape()) + " vs input " + shape_str(x.shape()));
  }
  std::vector<double> out(x.values().begin(), x.values().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bias[i % n];
  return detail::finish(Tensor(x.shape(), std::move(out)), {&x, &bias}, [n](auto g, auto in) {
    detail::add_into(in[0], g);
    if (in[1])
      for (std::size_t i = 0; i < g.size(); ++i) (*in[1])[i % n] += g[i];
  });
}

// tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluA = 0.044715;

inline Tensor gelu(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x[i];
    out[i] = 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
  }
  return detail::finish(Tensor(x.shape(), std::move(out)), {&x}, [x](auto g, auto in) {
    auto& dx = *in[0];
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = x[i];
      const double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
      const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
      dx[i] += g[i] * d;
    }
  });
}

inline Tensor relu(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
  return detail::finish(Tensor(x.shape(), std::move(out)), {&x}, [x](auto g, auto in) {
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x[i] > 0.0) (*in[0])[i] += g[i];
  });
}

// ------------------------------------------------------------- linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank2(a, "matmul");
  detail::require_rank2(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    fail(ErrorKind::Dimension, "matmul: inner extents differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  kernel::gemm_nn(m, k, n, a.values().data(), b.values().data(), out.data());
  return detail::finish(Tensor(Shape{m, n}, std::move(out)), {&a, &b}, [a, b, m, k, n](auto g, auto in) {
    if (in[0]) kernel::gemm_nt(m, n, k, g.data(), b.values().data(), in[0]->data());
    if (in[1]) kernel::gemm_tn(m, k, n, a.values().data(), g.data(), in[1]->data());
  });
}

/// x[m x k] * weight[k x n] + bias[n]; bias may be undefined.
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  detail::require_rank2(x, "linear");
  detail::require_rank2(weight, "linear");
  const std::size_t m = x.dim(0), k = x.dim(1), n = weight.dim(1);
  if (weight.dim(0) != k) {
    fail(ErrorKind::Dimension, "linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(weight.shape()));
  }
  const bool has_bias = bias.defined();
  if (has_bias && bias.numel() != n) fail(ErrorKind::Dimension, "linear: bias extent mismatch");
  std::vector<double> out(m * n, 0.0);
  if (has_bias)
    for (std::size_t i = 0; i < m; ++i) std::copy(bias.values().begin(), bias.values().end(), out.begin() + i * n);
  kernel::gemm_nn(m, k, n, x.values().data(), weight.values().data(), out.data());
  Tensor result(Shape{m, n}, std::move(out));
  auto fn = [x, weight, m, k, n](std::span<const double> g, Tape::InGrads in) {
    if (in[0]) kernel::gemm_nt(m, n, k, g.data(), weight.values().data(), in[0]->data());
    if (in[1]) kernel::gemm_tn(m, k, n, x.values().data(), g.data(), in[1]->data());
    if (in.size() > 2 && in[2]) {
      auto& db = *in[2];
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) db[j] += g[i * n + j];
    }
  };
  if (has_bias) return detail::finish(std::move(result), {&x, &weight, &bias}, fn);
  return detail::finish(std::move(result), {&x, &weight}, fn);
}

inline Tensor transpose(const Tensor& a) {
  detail::require_rank2(a, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  return detail::finish(Tensor(Shape{c, r}, kernel::transpose(r, c, a.values().data())), {&a},
                        [r, c](auto g, auto in) {
                          auto& da = *in[0];
                          for (std::size_t i = 0; i < r; ++i)
                            for (std::size_t j = 0; j < c; ++j) da[i * c + j] += g[j * r + i];
                        });
}

// ------------------------------------------------------------------- layout

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    fail(ErrorKind::Dimension, "reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  return detail::finish(Tensor(std::move(shape), std::vector<double>(a.values().begin(), a.values().end())),
                        {&a}, [](auto g, auto in) { detail::add_into(in[0], g); });
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) fail(ErrorKind::Dimension, "concat_rows of nothing");
  const std::size_t c = parts.front().cols();
  std::size_t rows = 0;
  std::vector<double> out;
  for (const auto& p : parts) {
    detail::require_rank2(p, "concat_rows");
    if (p.cols() != c) fail(ErrorKind::Dimension, "concat_rows: column count mismatch");
    rows += p.rows();
    out.insert(out.end(), p.values().begin(), p.values().end());
  }
  std::vector<std::size_t> sizes;
  for (const auto& p : parts) sizes.push_back(p.numel());
  return detail::finish_many(Tensor(Shape{rows, c}, std::move(out)), parts, [sizes](auto g, auto in) {
    std::size_t offset = 0;
    for (std::size_t i = 0; i < sizes.size(); ++i) {
      if (in[i])
        for (std::size_t j = 0; j < sizes[i]; ++j) (*in[i])[j] += g[offset + j];
      offset += sizes[i];
    }
  });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) fail(ErrorKind::Dimension, "concat_cols of nothing");
  const std::size_t r = parts.front().rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::require_rank2(p, "concat_cols");
    if (p.rows() != r) fail(ErrorKind::Dimension, "concat_cols: row count mismatch");
    widths.push_back(p.cols());
    total += p.cols();
  }
  std::vector<double> out(r * total);
  std::size_t col = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < widths[k]; ++j) out[i * total + col + j] = parts[k].at(i, j);
    col += widths[k];
  }
  return detail::finish_many(Tensor(Shape{r, total}, std::move(out)), parts, [widths, r, total](auto g, auto in) {
    std::size_t col = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      if (in[k])
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < widths[k]; ++j) (*in[k])[i * widths[k] + j] += g[i * total + col + j];
      col += widths[k];
    }
  });
}

inline Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  detail::require_rank2(a, "slice_rows");
  if (begin >= end || end > a.rows()) fail(ErrorKind::Dimension, "slice_rows: bad range");
  const std::size_t c = a.cols();
  std::vector<double> out(a.values().begin() + begin * c, a.values().begin() + end * c);
  return detail::finish(Tensor(Shape{end - begin, c}, std::move(out)), {&a}, [begin, c](auto g, auto in) {
    for (std::size_t i = 0; i < g.size(); ++i) (*in[0])[begin * c + i] += g[i];
  });
}

inline Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  detail::require_rank2(a, "slice_cols");
  if (begin >= end || end > a.cols()) fail(ErrorKind::Dimension, "slice_cols: bad range");
  const std::size_t r = a.rows(), c = a.cols(), w = end - begin;
  std::vector<double> out(r * w);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = a[i * c + begin + j];
  return detail::finish(Tensor(Shape{r, w}, std::move(out)), {&a}, [r, c, w, begin](auto g, auto in) {
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) (*in[0])[i * c + begin + j] += g[i * w + j];
  });
}

inline Tensor gather_rows(const Tensor& a, std::span<const std::size_t> indices) {
  detail::require_rank2(a, "gather_rows");
  if (indices.empty()) fail(ErrorKind::Dimension, "gather_rows: no indices");
  const std::size_t c = a.cols();
  std::vector<double> out;
  out.reserve(indices.size() * c);
  for (auto idx : indices) {
    if (idx >= a.rows()) fail(ErrorKind::Dimension, "gather_rows: index out of range");
    out.insert(out.end(), a.values().begin() + idx * c, a.values().begin() + (idx + 1) * c);
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return detail::finish(Tensor(Shape{idx.size(), c}, std::move(out)), {&a}, [idx, c](auto g, auto in) {
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) (*in[0])[idx[i] * c + j] += g[i * c + j];
  });
}

/// Replicates a single row `count` times (token embedding broadcast).
inline Tensor repeat_rows(const Tensor& row, std::size_t count) {
  const std::size_t c = row.numel();
  std::vector<double> out;
  out.reserve(count * c);
  for (std::size_t i = 0; i < count; ++i) out.insert(out.end(), row.values().begin(), row.values().end());
  return detail::finish(Tensor(Shape{count, c}, std::move(out)), {&row}, [count, c](auto g, auto in) {
    for (std::size_t i = 0; i < count; ++i)
      for (std::size_t j = 0; j < c; ++j) (*in[0])[j] += g[i * c + j];
  });
}

// --------------------------------------------------------------- reductions

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  return detail::finish(Tensor::scalar(s), {&a}, [](auto g, auto in) {
    for (auto& v : *in[0]) v += g[0];
  });
}

inline Tensor mean(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  const double n = static_cast<double>(a.numel());
  return detail::finish(Tensor::scalar(s / n), {&a}, [n](auto g, auto in) {
    for (auto& v : *in[0]) v += g[0] / n;
  });
}

/// Column means over rows: [r x c] -> [1 x c].
inline Tensor mean_rows(const Tensor& a) {
  detail::require_rank2(a, "mean_rows");
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(c, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j] += a[i * c + j];
  for (auto& v : out) v /= static_cast<double>(r);
  return detail::finish(Tensor(Shape{1, c}, std::move(out)), {&a}, [r, c](auto g, auto in) {
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) (*in[0])[i * c + j] += g[j] / static_cast<double>(r);
  });
}

/// Max over consecutive groups of `group` rows: [G*group x C] -> [G x C].
/// Gradient goes to the first maximizing row.
inline Tensor max_pool_groups(const Tensor& x, std::size_t group) {
  detail::require_rank2(x, "max_pool_groups");
  if (group == 0 || x.rows() % group != 0) fail(ErrorKind::Dimension, "max_pool_groups: rows not divisible by group size");
  const std::size_t groups = x.rows() / group, c = x.cols();
  std::vector<double> out(groups * c);
  std::vector<std::size_t> arg(groups * c);
  for (std::size_t gi = 0; gi < groups; ++gi) {
    for (std::size_t j = 0; j < c; ++j) {
      std::size_t best = gi * group;
      for (std::size_t r = gi * group + 1; r < (gi + 1) * group; ++r)
        if (x[r * c + j] > x[best * c + j]) best = r;
      out[gi * c + j] = x[best * c + j];
      arg[gi * c + j] = best * c + j;
    }
  }
  return detail::finish(Tensor(Shape{groups, c}, std::move(out)), {&x}, [arg](auto g, auto in) {
    for (std::size_t i = 0; i < g.size(); ++i) (*in[0])[arg[i]] += g[i];
  });
}

// ------------------------------------------------------------ normalization

inline Tensor softmax_rows(const Tensor& x) {
  const std::size_t n = x.cols(), rows = x.numel() / n;
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.values().data() + r * n;
    double* o = out.data() + r * n;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (std::isnan(in[j])) fail(ErrorKind::Numeric, "softmax_rows: NaN input");
      mx = std::max(mx, in[j]);
    }
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = std::exp(in[j] - mx);
      total += o[j];
    }
    for (std::size_t j = 0; j < n; ++j) o[j] /= total;
  }
  Tensor result(x.shape(), std::move(out));
  return detail::finish(result, {&x}, [y = result.detach(), n, rows](auto g, auto in) {
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * y[r * n + j];
      for (std::size_t j = 0; j < n; ++j) (*in[0])[r * n + j] += y[r * n + j] * (g[r * n + j] - dot);
    }
  });
}

/// Row-wise layer normalization with population variance and affine params
/// gamma/beta over the trailing axis.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
  const std::size_t n = x.cols(), rows = x.numel() / n;
  if (gamma.numel() != n || beta.numel() != n) {
    fail(ErrorKind::Dimension, "layer_norm: affine extent mismatch with " + shape_str(x.shape()));
  }
  std::vector<double> out(x.numel()), xhat(x.numel()), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.values().data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += in[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[r * n + j] = (in[j] - mu) * inv_std[r];
      out[r * n + j] = xhat[r * n + j] * gamma[j] + beta[j];
    }
  }
  return detail::finish(
      Tensor(x.shape(), std::move(out)), {&x, &gamma, &beta},
      [xhat = std::move(xhat), inv_std = std::move(inv_std), gamma, n, rows](auto g, auto in) {
        for (std::size_t r = 0; r < rows; ++r) {
          const double* gr = g.data() + r * n;
          const double* xr = xhat.data() + r * n;
          if (in[1])
            for (std::size_t j = 0; j < n; ++j) (*in[1])[j] += gr[j] * xr[j];
          if (in[2])
            for (std::size_t j = 0; j < n; ++j) (*in[2])[j] += gr[j];
          if (in[0]) {
            double mean_g = 0.0, mean_gx = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double gh = gr[j] * gamma[j];
              mean_g += gh;
              mean_gx += gh * xr[j];
            }
            mean_g /= static_cast<double>(n);
            mean_gx /= static_cast<double>(n);
            for (std::size_t j = 0; j < n; ++j) {
              const double gh = gr[j] * gamma[j];
              (*in[0])[r * n + j] += inv_std[r] * (gh - mean_g - xr[j] * mean_gx);
            }
          }
        }
      });
}

/// Scales every trailing-axis row to unit Euclidean norm.
inline Tensor normalize_rows(const Tensor& x, double eps = 1e-12) {
  const std::size_t n = x.cols(), rows = x.numel() / n;
  std::vector<double> out(x.numel()), norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += x[r * n + j] * x[r * n + j];
    norms[r] = std::max(std::sqrt(s), eps);
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = x[r * n + j] / norms[r];
  }
  Tensor result(x.shape(), std::move(out));
  return detail::finish(result, {&x}, [y = result.detach(), norms, n, rows](auto g, auto in) {
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * y[r * n + j];
      for (std::size_t j = 0; j < n; ++j) (*in[0])[r * n + j] += (g[r * n + j] - y[r * n + j] * dot) / norms[r];
    }
  });
}

// ------------------------------------------------------------------- losses

/// -log softmax(logits)[target] for a single row of logits.
inline Tensor cross_entropy(const Tensor& logits, std::size_t target) {
  const std::size_t n = logits.numel();
  if (target >= n) fail(ErrorKind::Dimension, "cross_entropy: target index out of range");
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : logits.values()) {
    if (std::isnan(v)) fail(ErrorKind::Numeric, "cross_entropy: NaN logit");
    mx = std::max(mx, v);
  }
  std::vector<double> p(n);
  double total = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    p[j] = std::exp(logits[j] - mx);
    total += p[j];
  }
  for (auto& v : p) v /= total;
  const double loss = -(logits[target] - mx - std::log(total));
  return detail::finish(Tensor::scalar(loss), {&logits}, [p, target](auto g, auto in) {
    for (std::size_t j = 0; j < p.size(); ++j) (*in[0])[j] += g[0] * (p[j] - (j == target ? 1.0 : 0.0));
  });
}

/// Mean over `groups` of the symmetric squared Chamfer distance between the
/// predicted group (rows of `pred`) and the matching target group. Both are
/// flattened [groups * k x 3] arrays; gradient flows to `pred` only.
inline Tensor chamfer_groups(const Tensor& pred, const Tensor& target, std::size_t groups) {
  if (pred.numel() % (3 * groups) != 0 || target.numel() % (3 * groups) != 0) {
    fail(ErrorKind::Dimension, "chamfer_groups: point arrays not divisible into groups");
  }
  const std::size_t kp = pred.numel() / (3 * groups), kt = target.numel() / (3 * groups);
  const double* p = pred.values().data();
  const double* t = target.values().data();
  std::vector<double> grad(pred.numel(), 0.0);
  double total = 0.0;
  auto sq = [](const double* a, const double* b) {
    const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
    return dx * dx + dy * dy + dz * dz;
  };
  const double w = 1.0 / static_cast<double>(groups);
  for (std::size_t gi = 0; gi < groups; ++gi) {
    const double* pg = p + gi * kp * 3;
    const double* tg = t + gi * kt * 3;
    double* gg = grad.data() + gi * kp * 3;
    double term_p = 0.0, term_t = 0.0;
    for (std::size_t i = 0; i < kp; ++i) {
      std::size_t best = 0;
      double bd = sq(pg + 3 * i, tg);
      for (std::size_t j = 1; j < kt; ++j) {
        const double d = sq(pg + 3 * i, tg + 3 * j);
        if (d < bd) bd = d, best = j;
      }
      term_p += bd;
      for (int c = 0; c < 3; ++c) gg[3 * i + c] += w * 2.0 * (pg[3 * i + c] - tg[3 * best + c]) / static_cast<double>(kp);
    }
    for (std::size_t j = 0; j < kt; ++j) {
      std::size_t best = 0;
      double bd = sq(tg + 3 * j, pg);
      for (std::size_t i = 1; i < kp; ++i) {
        const double d = sq(tg + 3 * j, pg + 3 * i);
        if (d < bd) bd = d, best = i;
      }
      term_t += bd;
      for (int c = 0; c < 3; ++c) gg[3 * best + c] += w * 2.0 * (pg[3 * best + c] - tg[3 * j + c]) / static_cast<double>(kt);
    }
    total += term_p / static_cast<double>(kp) + term_t / static_cast<double>(kt);
  }
  return detail::finish(Tensor::scalar(total * w), {&pred, &target}, [grad = std::move(grad)](auto g, auto in) {
    if (in[0])
      for (std::size_t i = 0; i < grad.size(); ++i) (*in[0])[i] += g[0] * grad[i];
  });
}

}  // namespace pointform
