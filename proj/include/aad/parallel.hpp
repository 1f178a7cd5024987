#pragma once

/**
 * Ordered parallel map over an index range. Results land in input order, so
 * downstream aggregation is deterministic regardless of scheduling.
 */

#include <cstddef>
#include <atomic>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace aad {

template <typename Result, typename Fn>
std::vector<Result> parallel_map(std::size_t count, int workers, Fn&& fn) {
  std::vector<Result> results(count);
  if (count == 0) return results;
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) results[i] = fn(i);
    return results;
  }
  std::atomic<std::size_t> cursor{0};
  std::exception_ptr first_error;
  std::mutex error_mu;
  auto worker = [&] {
    for (;;) {
      const std::size_t i = cursor.fetch_add(1);
      if (i >= count) return;
      try {
        results[i] = fn(i);
      } catch (...) {
        std::lock_guard lock(error_mu);
        if (!first_error) first_error = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> threads;
  const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(workers), count);
  threads.reserve(n);
  for (std::size_t i = 0; i < n; ++i) threads.emplace_back(worker);
  for (auto& t : threads) t.join();
  if (first_error) std::rethrow_exception(first_error);
  return results;
}

}  // namespace aad
