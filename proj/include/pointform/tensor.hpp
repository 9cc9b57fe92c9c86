#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "pointform/error.hpp"

namespace pointform {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

class Tape;

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  // Leaf gradient accumulator; empty until the first backward that reaches it.
  std::vector<double> grad;
  bool requires_grad = false;
  // Nonzero when the node is the output of an operation recorded on that tape.
  std::uint64_t tape_id = 0;
};

inline thread_local Tape* active_tape = nullptr;
inline std::atomic<std::uint64_t> tape_serial{0};
inline thread_local std::size_t op_counter = 0;

}  // namespace detail

/// Dense row-major 64-bit tensor. Copies share the underlying node; values are
/// immutable once constructed except through `mutable_values()`, which is
/// reserved for optimizer updates of leaf parameters.
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> values) : node_(std::make_shared<detail::Node>()) {
    for (auto extent : shape) {
      if (extent == 0) fail(ErrorKind::Dimension, "tensor extents must be positive, got " + shape_str(shape));
    }
    if (shape_numel(shape) != values.size()) {
      fail(ErrorKind::Dimension, "shape " + shape_str(shape) + " does not match " +
                                     std::to_string(values.size()) + " values");
    }
    node_->shape = std::move(shape);
    node_->data = std::move(values);
  }

  explicit Tensor(Shape shape, double fill = 0.0)
      : Tensor(shape, std::vector<double>(shape_numel(shape), fill)) {}

  static Tensor scalar(double value) { return Tensor(Shape{1}, std::vector<double>{value}); }

  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    std::vector<double> values;
    std::size_t cols = rows.size() ? rows.begin()->size() : 0;
    for (const auto& row : rows) {
      if (row.size() != cols) fail(ErrorKind::Dimension, "ragged matrix literal");
      values.insert(values.end(), row.begin(), row.end());
    }
    return Tensor(Shape{rows.size(), cols}, std::move(values));
  }

  /// Leaf tensor that participates in differentiation.
  static Tensor variable(Shape shape, std::vector<double> values) {
    Tensor t(std::move(shape), std::move(values));
    t.node_->requires_grad = true;
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t rows() const { return node_->shape.front(); }
  std::size_t cols() const { return node_->shape.back(); }

  std::span<const double> values() const { return node_->data; }
  double operator[](std::size_t i) const { return node_->data[i]; }
  double at(std::size_t row, std::size_t col) const { return node_->data[row * cols() + col]; }
  double item() const {
    if (numel() != 1) fail(ErrorKind::Dimension, "item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->tape_id == 0; }

  /// Toggle gradient tracking on a leaf (used for trainable flags).
  void set_requires_grad(bool on) {
    if (!is_leaf()) fail(ErrorKind::Usage, "requires_grad can only be changed on leaf tensors");
    node_->requires_grad = on;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }
  std::span<double> mutable_values() { return node_->data; }
  std::vector<double>& mutable_grad() {
    if (node_->grad.empty()) node_->grad.assign(numel(), 0.0);
    return node_->grad;
  }

  /// Fresh leaf with copied values and no gradient tracking.
  Tensor detach() const { return Tensor(shape(), node_->data); }

  /// Deep copy that keeps the tracking flag (for cloning parameters).
  Tensor clone() const {
    Tensor copy(shape(), node_->data);
    copy.node_->requires_grad = node_->requires_grad && is_leaf();
    return copy;
  }

  const std::shared_ptr<detail::Node>& handle() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Leaf gradients produced by one backward pass. Kept separate from the leaf
/// buffers so independent graphs can run concurrently and be reduced in a
/// fixed order afterwards.
class Gradients {
 public:
  std::span<const double> of(const Tensor& t) const {
    auto it = index_.find(t.handle().get());
    if (it == index_.end()) return {};
    return items_[it->second].second;
  }

  bool contains(const Tensor& t) const { return index_.count(t.handle().get()) != 0; }
  std::size_t size() const { return items_.size(); }

  void accumulate_into_leaves() const {
    for (const auto& [node, grad] : items_) {
      if (node->grad.empty()) node->grad.assign(grad.size(), 0.0);
      for (std::size_t i = 0; i < grad.size(); ++i) node->grad[i] += grad[i];
    }
  }

  void insert(std::shared_ptr<detail::Node> node, std::vector<double> grad) {
    index_.emplace(node.get(), items_.size());
    items_.emplace_back(std::move(node), std::move(grad));
  }

 private:
  std::vector<std::pair<std::shared_ptr<detail::Node>, std::vector<double>>> items_;
  std::unordered_map<const detail::Node*, std::size_t> index_;
};

/// Differentiation graph: operations recorded in execution order while the
/// tape is active on the current thread. One tape per forward pass; destroy
/// it after backward.
class Tape {
 public:
  using InGrads = std::span<std::vector<double>* const>;
  using BackwardFn = std::function<void(std::span<const double> out_grad, InGrads in_grads)>;

  Tape() : id_(++detail::tape_serial), previous_(detail::active_tape) { detail::active_tape = this; }
  ~Tape() { detail::active_tape = previous_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return detail::active_tape; }
  std::size_t size() const { return entries_.size(); }

  void record(std::vector<std::shared_ptr<detail::Node>> inputs,
              const std::shared_ptr<detail::Node>& output, BackwardFn fn) {
    output->tape_id = id_;
    output->requires_grad = true;
    entries_.push_back(Entry{std::move(inputs), output, std::move(fn)});
  }

  /// Reverse sweep from `root`. With an empty seed the root must be scalar.
  Gradients gradients(const Tensor& root, std::span<const double> seed = {}) const {
    const auto* root_node = root.handle().get();
    bool root_is_leaf = root.is_leaf() && root.requires_grad();
    if (root_node->tape_id != id_ && !root_is_leaf) {
      fail(ErrorKind::Usage, "backward root is not part of the active graph");
    }
    std::vector<double> seed_values;
    if (seed.empty()) {
      if (root.numel() != 1) {
        fail(ErrorKind::Usage, "backward on non-scalar " + shape_str(root.shape()) + " needs a seed gradient");
      }
      seed_values.assign(1, 1.0);
    } else {
      if (seed.size() != root.numel()) fail(ErrorKind::Dimension, "seed gradient size mismatch");
      seed_values.assign(seed.begin(), seed.end());
    }

    std::unordered_map<const detail::Node*, std::vector<double>> grads;
    std::unordered_map<const detail::Node*, std::shared_ptr<detail::Node>> leaves;
    grads.emplace(root_node, std::move(seed_values));
    if (root_is_leaf) leaves.emplace(root_node, root.handle());

    std::vector<std::vector<double>*> in_grads;
    for (auto e = entries_.rbegin(); e != entries_.rend(); ++e) {
      auto out_it = grads.find(e->output.get());
      if (out_it == grads.end()) continue;
      in_grads.assign(e->inputs.size(), nullptr);
      for (std::size_t i = 0; i < e->inputs.size(); ++i) {
        const auto& in = e->inputs[i];
        if (!in->requires_grad) continue;
        auto& buf = grads[in.get()];
        if (buf.empty()) buf.assign(in->data.size(), 0.0);
        in_grads[i] = &buf;
        if (in->tape_id != id_) leaves.emplace(in.get(), in);
      }
      e->fn(out_it->second, in_grads);
      grads.erase(e->output.get());
    }

    Gradients result;
    // Deterministic leaf order: first appearance in the recorded operations.
    std::vector<const detail::Node*> order;
    std::unordered_set<const detail::Node*> seen;
    if (root_is_leaf) {
      order.push_back(root_node);
      seen.insert(root_node);
    }
    for (const auto& e : entries_) {
      for (const auto& in : e.inputs) {
        if (leaves.count(in.get()) && seen.insert(in.get()).second) order.push_back(in.get());
      }
    }
    for (const auto* node : order) {
      auto g = grads.find(node);
      if (g == grads.end()) continue;
      result.insert(leaves.at(node), std::move(g->second));
    }
    return result;
  }

 private:
  struct Entry {
    std::vector<std::shared_ptr<detail::Node>> inputs;
    std::shared_ptr<detail::Node> output;
    BackwardFn fn;
  };
  std::vector<Entry> entries_;
  std::uint64_t id_;
  Tape* previous_;
};

/// Suspends recording on the current thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : saved_(detail::active_tape) { detail::active_tape = nullptr; }
  ~NoGradGuard() { detail::active_tape = saved_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape* saved_;
};

/// Backpropagate through the active tape and accumulate into leaf buffers.
inline void backward(const Tensor& root, std::span<const double> seed = {}) {
  Tape* tape = Tape::active();
  if (!tape) fail(ErrorKind::Usage, "backward called with no active graph");
  tape->gradients(root, seed).accumulate_into_leaves();
}

/// Number of primitive operations executed on this thread (forward only).
inline std::size_t operation_count() { return detail::op_counter; }

}  // namespace pointform
