#pragma once

#include <cstddef>
#include <span>

// Dense row-major kernels used by the autodiff engine.
//
// The functions in `selfdetr::kernels` are the OpenMP-parallel versions and
// distribute output rows across threads. Each output element is produced by
// exactly one thread with a fixed reduction order, so results do not depend
// on the thread count. `selfdetr::kernels::ref` holds straightforward serial
// implementations kept as a test oracle and as the benchmark baseline.
namespace selfdetr::kernels {

// C[m x n] (+)= A[m x k] * B[k x n]
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, std::span<const double> a,
             std::span<const double> b, std::span<double> c, bool accumulate);
// C[m x n] (+)= A[m x k] * B[n x k]^T
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, std::span<const double> a,
             std::span<const double> b, std::span<double> c, bool accumulate);
// C[m x n] (+)= A[k x m]^T * B[k x n]
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, std::span<const double> a,
             std::span<const double> b, std::span<double> c, bool accumulate);

// y = softmax(scale * x) per row.
void softmax_rows(std::size_t m, std::size_t n, double scale, std::span<const double> x,
                  std::span<double> y);
// gx += scale * y * (gy - <gy, y>) per row.
void softmax_rows_backward(std::size_t m, std::size_t n, double scale, std::span<const double> y,
                           std::span<const double> gy, std::span<double> gx);

// Normalizes each row of x to zero mean / unit variance. Writes the
// normalized values to xhat and 1/sqrt(var + eps) per row to inv_std.
void layer_norm_rows(std::size_t m, std::size_t n, double eps, std::span<const double> x,
                     std::span<double> xhat, std::span<double> inv_std);
// gx += inv_std/n * (n*g - sum(g) - xhat*sum(g*xhat)), with g = gy * gain.
void layer_norm_rows_backward(std::size_t m, std::size_t n, std::span<const double> xhat,
                              std::span<const double> inv_std, std::span<const double> gain,
                              std::span<const double> gy, std::span<double> gx);

namespace ref {

void gemm_nn(std::size_t m, std::size_t n, std::size_t k, std::span<const double> a,
             std::span<const double> b, std::span<double> c, bool accumulate);
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, std::span<const double> a,
             std::span<const double> b, std::span<double> c, bool accumulate);
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, std::span<const double> a,
             std::span<const double> b, std::span<double> c, bool accumulate);
void softmax_rows(std::size_t m, std::size_t n, double scale, std::span<const double> x,
                  std::span<double> y);
void softmax_rows_backward(std::size_t m, std::size_t n, double scale, std::span<const double> y,
                           std::span<const double> gy, std::span<double> gx);
void layer_norm_rows(std::size_t m, std::size_t n, double eps, std::span<const double> x,
                     std::span<double> xhat, std::span<double> inv_std);
void layer_norm_rows_backward(std::size_t m, std::size_t n, std::span<const double> xhat,
                              std::span<const double> inv_std, std::span<const double> gain,
                              std::span<const double> gy, std::span<double> gx);

}  // namespace ref

}  // namespace selfdetr::kernels
