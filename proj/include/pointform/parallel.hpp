#pragma once

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <functional>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "pointform/tensor.hpp"

namespace pointform {

/// POINTFORM_THREADS if set, otherwise the available hardware parallelism.
inline std::size_t default_threads() {
  if (const char* env = std::getenv("POINTFORM_THREADS")) {
    try {
      const long v = std::stol(env);
      if (v > 0) return static_cast<std::size_t>(v);
    } catch (...) {
    }
  }
  return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

/// Runs fn(i) for i in [0, n) on up to `threads` workers. The first exception
/// thrown by any worker is rethrown on the caller.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      for (std::size_t i = t; i < n; i += threads) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

/// Builds one graph per sample with `loss_fn(i)`, backpropagates each with
/// seed `weight`, and adds the leaf gradients in sample order, so results do
/// not depend on the thread count. Returns the sum of the per-sample losses.
template <typename LossFn>
double accumulate_gradients(std::size_t count, std::size_t threads, double weight, LossFn&& loss_fn) {
  double total = 0.0;
  const std::size_t chunk = std::max<std::size_t>(1, threads);
  std::vector<Gradients> grads(chunk);
  std::vector<double> losses(chunk);
  const std::vector<double> seed{weight};
  for (std::size_t begin = 0; begin < count; begin += chunk) {
    const std::size_t len = std::min(chunk, count - begin);
    parallel_for(len, threads, [&](std::size_t j) {
      Tape tape;
      Tensor loss = loss_fn(begin + j);
      losses[j] = loss.item();
      grads[j] = loss.requires_grad() ? tape.gradients(loss, seed) : Gradients{};
    });
    for (std::size_t j = 0; j < len; ++j) {
      grads[j].accumulate_into_leaves();
      grads[j] = Gradients{};
      total += losses[j];
    }
  }
  return total;
}

}  // namespace pointform
