#pragma once

#include <algorithm>
#include <atomic>
#include <functional>
#include <thread>
#include <vector>

namespace flowcot {

/// Index-parallel loop. Results must be written to pre-sized, per-index
/// slots so the reduction order (and therefore every output) is independent
/// of the worker count.
inline void parallel_for(int n, int jobs, const std::function<void(int)>& body) {
  jobs = std::max(1, jobs);
  if (jobs == 1 || n <= 1) {
    for (int i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> workers;
  const int nthreads = std::min(jobs, n);
  workers.reserve(nthreads);
  for (int w = 0; w < nthreads; ++w) {
    workers.emplace_back([&] {
      for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) body(i);
    });
  }
  for (auto& t : workers) t.join();
}

}  // namespace flowcot
