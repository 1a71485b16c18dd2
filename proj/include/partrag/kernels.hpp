#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

// Dense inner loops used by the tensor engine, retrieval and metrics.
//
// Each kernel exists twice: a serial reference and an OpenMP version. Both
// accumulate every output element in the same order, so their results are
// bit-identical; tests assert this and bench/ compares their speed.

namespace partrag::kernels {

using Point3 = std::array<double, 3>;

namespace serial {

// C[m x n] = A[m x k] * B[k x n]
void matmul(std::span<const double> a, std::span<const double> b,
            std::span<double> c, std::size_t m, std::size_t k, std::size_t n);
// C[m x n] = A[m x k] * B[n x k]^T
void matmul_nt(std::span<const double> a, std::span<const double> b,
               std::span<double> c, std::size_t m, std::size_t k,
               std::size_t n);
// C[m x n] = A[k x m]^T * B[k x n]
void matmul_tn(std::span<const double> a, std::span<const double> b,
               std::span<double> c, std::size_t k, std::size_t m,
               std::size_t n);

// For each point of `from`, the squared distance to its nearest point in `to`.
std::vector<double> nearest_sq_dist(std::span<const Point3> from,
                                    std::span<const Point3> to);

// scores[i] = dot(rows[i], query) for a row-major [n x d] matrix.
std::vector<double> row_dots(std::span<const double> rows, std::size_t d,
                             std::span<const double> query);

}  // namespace serial

namespace parallel {

void matmul(std::span<const double> a, std::span<const double> b,
            std::span<double> c, std::size_t m, std::size_t k, std::size_t n);
void matmul_nt(std::span<const double> a, std::span<const double> b,
               std::span<double> c, std::size_t m, std::size_t k,
               std::size_t n);
void matmul_tn(std::span<const double> a, std::span<const double> b,
               std::span<double> c, std::size_t k, std::size_t m,
               std::size_t n);
std::vector<double> nearest_sq_dist(std::span<const Point3> from,
                                    std::span<const Point3> to);
std::vector<double> row_dots(std::span<const double> rows, std::size_t d,
                             std::span<const double> query);

}  // namespace parallel

// Dispatch used by the library: the parallel kernels when built with OpenMP.
using namespace parallel;

int max_threads();

}  // namespace partrag::kernels
