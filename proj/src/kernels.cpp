#include "selfdetr/kernels.hpp"

#include <algorithm>
#include <cmath>

namespace selfdetr::kernels {

namespace {

// Below this many multiply-adds the fork/join cost dominates.
constexpr std::size_t kParallelWork = 1 << 15;

inline bool worth_parallel(std::size_t work) { return work >= kParallelWork; }

}  // namespace

void gemm_nn(std::size_t m, std::size_t n, std::size_t k, std::span<const double> a,
             std::span<const double> b, std::span<double> c, bool accumulate) {
    const double* pa = a.data();
    const double* pb = b.data();
    double* pc = c.data();
#pragma omp parallel for schedule(static) if (worth_parallel(m * n * k))
    for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(m); ++ii) {
        const auto i = static_cast<std::size_t>(ii);
        double* crow = pc + i * n;
        if (!accumulate) std::fill(crow, crow + n, 0.0);
        const double* arow = pa + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* brow = pb + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

void gemm_nt(std::size_t m, std::size_t n, std::size_t k, std::span<const double> a,
             std::span<const double> b, std::span<double> c, bool accumulate) {
    const double* pa = a.data();
    const double* pb = b.data();
    double* pc = c.data();
#pragma omp parallel for schedule(static) if (worth_parallel(m * n * k))
    for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(m); ++ii) {
        const auto i = static_cast<std::size_t>(ii);
        const double* arow = pa + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            const double* brow = pb + j * k;
            double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
            std::size_t p = 0;
            for (; p + 4 <= k; p += 4) {
                s0 += arow[p] * brow[p];
                s1 += arow[p + 1] * brow[p + 1];
                s2 += arow[p + 2] * brow[p + 2];
                s3 += arow[p + 3] * brow[p + 3];
            }
            for (; p < k; ++p) s0 += arow[p] * brow[p];
            const double s = (s0 + s1) + (s2 + s3);
            pc[i * n + j] = accumulate ? pc[i * n + j] + s : s;
        }
    }
}

void gemm_tn(std::size_t m, std::size_t n, std::size_t k, std::span<const double> a,
             std::span<const double> b, std::span<double> c, bool accumulate) {
    const double* pa = a.data();
    const double* pb = b.data();
    double* pc = c.data();
#pragma omp parallel for schedule(static) if (worth_parallel(m * n * k))
    for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(m); ++ii) {
        const auto i = static_cast<std::size_t>(ii);
        double* crow = pc + i * n;
        if (!accumulate) std::fill(crow, crow + n, 0.0);
        for (std::size_t p = 0; p < k; ++p) {
            const double av = pa[p * m + i];
            const double* brow = pb + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

void softmax_rows(std::size_t m, std::size_t n, double scale, std::span<const double> x,
                  std::span<double> y) {
#pragma omp parallel for schedule(static) if (worth_parallel(m * n * 16))
    for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(m); ++ii) {
        const auto i = static_cast<std::size_t>(ii);
        const double* xr = x.data() + i * n;
        double* yr = y.data() + i * n;
        double mx = xr[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xr[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            yr[j] = std::exp(scale * (xr[j] - mx));
            sum += yr[j];
        }
        const double inv = 1.0 / sum;
        for (std::size_t j = 0; j < n; ++j) yr[j] *= inv;
    }
}

void softmax_rows_backward(std::size_t m, std::size_t n, double scale, std::span<const double> y,
                           std::span<const double> gy, std::span<double> gx) {
#pragma omp parallel for schedule(static) if (worth_parallel(m * n * 4))
    for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(m); ++ii) {
        const auto i = static_cast<std::size_t>(ii);
        const double* yr = y.data() + i * n;
        const double* gr = gy.data() + i * n;
        double* out = gx.data() + i * n;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += gr[j] * yr[j];
        for (std::size_t j = 0; j < n; ++j) out[j] += scale * yr[j] * (gr[j] - dot);
    }
}

void layer_norm_rows(std::size_t m, std::size_t n, double eps, std::span<const double> x,
                     std::span<double> xhat, std::span<double> inv_std) {
#pragma omp parallel for schedule(static) if (worth_parallel(m * n * 8))
    for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(m); ++ii) {
        const auto i = static_cast<std::size_t>(ii);
        const double* xr = x.data() + i * n;
        double* hr = xhat.data() + i * n;
        double mean = 0.0;
        for (std::size_t j = 0; j < n; ++j) mean += xr[j];
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double d = xr[j] - mean;
            var += d * d;
        }
        var /= static_cast<double>(n);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[i] = is;
        for (std::size_t j = 0; j < n; ++j) hr[j] = (xr[j] - mean) * is;
    }
}

void layer_norm_rows_backward(std::size_t m, std::size_t n, std::span<const double> xhat,
                              std::span<const double> inv_std, std::span<const double> gain,
                              std::span<const double> gy, std::span<double> gx) {
    const double nd = static_cast<double>(n);
#pragma omp parallel for schedule(static) if (worth_parallel(m * n * 8))
    for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(m); ++ii) {
        const auto i = static_cast<std::size_t>(ii);
        const double* hr = xhat.data() + i * n;
        const double* gr = gy.data() + i * n;
        double* out = gx.data() + i * n;
        double sum_g = 0.0, sum_gh = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double g = gr[j] * gain[j];
            sum_g += g;
            sum_gh += g * hr[j];
        }
        const double c = inv_std[i] / nd;
        for (std::size_t j = 0; j < n; ++j) {
            const double g = gr[j] * gain[j];
            out[j] += c * (nd * g - sum_g - hr[j] * sum_gh);
        }
    }
}

namespace ref {

void gemm_nn(std::size_t m, std::size_t n, std::size_t k, std::span<const double> a,
             std::span<const double> b, std::span<double> c, bool accumulate) {
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
            c[i * n + j] = accumulate ? c[i * n + j] + s : s;
        }
}

void gemm_nt(std::size_t m, std::size_t n, std::size_t k, std::span<const double> a,
             std::span<const double> b, std::span<double> c, bool accumulate) {
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[j * k + p];
            c[i * n + j] = accumulate ? c[i * n + j] + s : s;
        }
}

void gemm_tn(std::size_t m, std::size_t n, std::size_t k, std::span<const double> a,
             std::span<const double> b, std::span<double> c, bool accumulate) {
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) s += a[p * m + i] * b[p * n + j];
            c[i * n + j] = accumulate ? c[i * n + j] + s : s;
        }
}

void softmax_rows(std::size_t m, std::size_t n, double scale, std::span<const double> x,
                  std::span<double> y) {
    for (std::size_t i = 0; i < m; ++i) {
        double mx = x[i * n];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[i * n + j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) sum += std::exp(scale * (x[i * n + j] - mx));
        for (std::size_t j = 0; j < n; ++j) y[i * n + j] = std::exp(scale * (x[i * n + j] - mx)) / sum;
    }
}

void softmax_rows_backward(std::size_t m, std::size_t n, double scale, std::span<const double> y,
                           std::span<const double> gy, std::span<double> gx) {
    // Full Jacobian-vector product: dy_j/dx_k = scale * y_j (delta_jk - y_k).
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t k = 0; k < n; ++k) {
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                const double jac = scale * y[i * n + j] * ((j == k ? 1.0 : 0.0) - y[i * n + k]);
                s += gy[i * n + j] * jac;
            }
            gx[i * n + k] += s;
        }
}

void layer_norm_rows(std::size_t m, std::size_t n, double eps, std::span<const double> x,
                     std::span<double> xhat, std::span<double> inv_std) {
    for (std::size_t i = 0; i < m; ++i) {
        double mean = 0.0;
        for (std::size_t j = 0; j < n; ++j) mean += x[i * n + j] / static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j)
            var += (x[i * n + j] - mean) * (x[i * n + j] - mean) / static_cast<double>(n);
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < n; ++j) xhat[i * n + j] = (x[i * n + j] - mean) * inv_std[i];
    }
}

void layer_norm_rows_backward(std::size_t m, std::size_t n, std::span<const double> xhat,
                              std::span<const double> inv_std, std::span<const double> gain,
                              std::span<const double> gy, std::span<double> gx) {
    // Explicit Jacobian of xhat w.r.t. x:
    // d xhat_j / d x_k = inv_std * (delta_jk - 1/n - xhat_j xhat_k / n).
    const double nd = static_cast<double>(n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t k = 0; k < n; ++k) {
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                const double jac = inv_std[i] * ((j == k ? 1.0 : 0.0) - 1.0 / nd -
                                                 xhat[i * n + j] * xhat[i * n + k] / nd);
                s += gy[i * n + j] * gain[j] * jac;
            }
            gx[i * n + k] += s;
        }
}

}  // namespace ref

}  // namespace selfdetr::kernels
