#pragma once

#include <cstddef>
#include <exception>
#include <vector>

namespace partrag {

/// Runs f(i) for i in [0, n) across OpenMP threads. Each index writes only
/// its own outputs, so results do not depend on scheduling. The first
/// exception (by index) is rethrown after the loop.
template <typename F>
void parallel_for(std::size_t n, F&& f) {
  std::vector<std::exception_ptr> errors(n);
  const auto count = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < count; ++i) {
    try {
      f(static_cast<std::size_t>(i));
    } catch (...) {
      errors[static_cast<std::size_t>(i)] = std::current_exception();
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace partrag
