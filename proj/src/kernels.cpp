#include "cvid/kernels.hpp"

#include <atomic>
#include <cmath>

namespace cvid::kernels {

namespace {
std::atomic<bool> g_parallel{true};

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

inline double gelu_one(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }
inline double gelu_grad_one(double x) {
    return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

// one output row of C = op(A)*op(B); the inner accumulation order is the
// contract shared by the serial reference and the omp kernels
inline void matmul_row(const double* a, const double* b, double* c, int64_t i, int64_t m,
                       int64_t k, int64_t n, bool ta, bool tb, bool accumulate) {
    for (int64_t j = 0; j < n; ++j) {
        double s = 0.0;
        if (!ta && !tb) {
            const double* ai = a + i * k;
            for (int64_t p = 0; p < k; ++p) s += ai[p] * b[p * n + j];
        } else if (!ta && tb) {
            const double* ai = a + i * k;
            const double* bj = b + j * k;
            for (int64_t p = 0; p < k; ++p) s += ai[p] * bj[p];
        } else if (ta && !tb) {
            for (int64_t p = 0; p < k; ++p) s += a[p * m + i] * b[p * n + j];
        } else {
            for (int64_t p = 0; p < k; ++p) s += a[p * m + i] * b[j * k + p];
        }
        double* out = c + i * n + j;
        *out = accumulate ? *out + s : s;
    }
}

inline void softmax_row(double* x, int64_t cols) {
    double mx = x[0];
    for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
    double sum = 0.0;
    for (int64_t j = 0; j < cols; ++j) {
        x[j] = std::exp(x[j] - mx);
        sum += x[j];
    }
    double inv = 1.0 / sum;
    for (int64_t j = 0; j < cols; ++j) x[j] *= inv;
}

inline void layernorm_row(const double* x, const double* gamma, const double* beta, double* y,
                          double* mean, double* rstd, int64_t i, int64_t cols) {
    const double* xi = x + i * cols;
    double mu = 0.0;
    for (int64_t j = 0; j < cols; ++j) mu += xi[j];
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (int64_t j = 0; j < cols; ++j) {
        double d = xi[j] - mu;
        var += d * d;
    }
    var /= static_cast<double>(cols);
    double rs = 1.0 / std::sqrt(var + 1e-6);
    mean[i] = mu;
    rstd[i] = rs;
    double* yi = y + i * cols;
    for (int64_t j = 0; j < cols; ++j) yi[j] = (xi[j] - mu) * rs * gamma[j] + beta[j];
}

}  // namespace

void set_parallel(bool on) { g_parallel.store(on, std::memory_order_relaxed); }
bool parallel_enabled() { return g_parallel.load(std::memory_order_relaxed); }

void matmul(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n, bool ta,
            bool tb, bool accumulate) {
    if (parallel_enabled()) {
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < m; ++i) matmul_row(a, b, c, i, m, k, n, ta, tb, accumulate);
    } else {
        for (int64_t i = 0; i < m; ++i) matmul_row(a, b, c, i, m, k, n, ta, tb, accumulate);
    }
}

void softmax_rows(double* x, int64_t rows, int64_t cols) {
    if (parallel_enabled()) {
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < rows; ++i) softmax_row(x + i * cols, cols);
    } else {
        for (int64_t i = 0; i < rows; ++i) softmax_row(x + i * cols, cols);
    }
}

void softmax_backward_rows(const double* w, const double* dw, double* ds, int64_t rows,
                           int64_t cols) {
#pragma omp parallel for schedule(static) if (parallel_enabled())
    for (int64_t i = 0; i < rows; ++i) {
        const double* wi = w + i * cols;
        const double* dwi = dw + i * cols;
        double* dsi = ds + i * cols;
        double inner = 0.0;
        for (int64_t j = 0; j < cols; ++j) inner += dwi[j] * wi[j];
        for (int64_t j = 0; j < cols; ++j) dsi[j] = wi[j] * (dwi[j] - inner);
    }
}

void layernorm_forward(const double* x, const double* gamma, const double* beta, double* y,
                       double* mean, double* rstd, int64_t rows, int64_t cols) {
#pragma omp parallel for schedule(static) if (parallel_enabled())
    for (int64_t i = 0; i < rows; ++i) layernorm_row(x, gamma, beta, y, mean, rstd, i, cols);
}

void layernorm_backward(const double* x, const double* gamma, const double* mean,
                        const double* rstd, const double* dy, double* dx, double* dgamma,
                        double* dbeta, int64_t rows, int64_t cols) {
    // dx rows are independent; dgamma/dbeta are column reductions done with a
    // fixed row order so results do not depend on the thread count
    if (dx) {
#pragma omp parallel for schedule(static) if (parallel_enabled())
        for (int64_t i = 0; i < rows; ++i) {
            const double* xi = x + i * cols;
            const double* dyi = dy + i * cols;
            double* dxi = dx + i * cols;
            double mu = mean[i], rs = rstd[i];
            double sum_dyg = 0.0, sum_dyg_xhat = 0.0;
            for (int64_t j = 0; j < cols; ++j) {
                double xhat = (xi[j] - mu) * rs;
                double dyg = dyi[j] * gamma[j];
                sum_dyg += dyg;
                sum_dyg_xhat += dyg * xhat;
            }
            double inv_n = 1.0 / static_cast<double>(cols);
            for (int64_t j = 0; j < cols; ++j) {
                double xhat = (xi[j] - mu) * rs;
                double dyg = dyi[j] * gamma[j];
                dxi[j] += rs * (dyg - inv_n * sum_dyg - xhat * inv_n * sum_dyg_xhat);
            }
        }
    }
    if (dgamma || dbeta) {
#pragma omp parallel for schedule(static) if (parallel_enabled())
        for (int64_t j = 0; j < cols; ++j) {
            double dg = 0.0, db = 0.0;
            for (int64_t i = 0; i < rows; ++i) {
                double xhat = (x[i * cols + j] - mean[i]) * rstd[i];
                dg += dy[i * cols + j] * xhat;
                db += dy[i * cols + j];
            }
            if (dgamma) dgamma[j] += dg;
            if (dbeta) dbeta[j] += db;
        }
    }
}

void gelu_forward(const double* x, double* y, int64_t n) {
#pragma omp parallel for schedule(static) if (parallel_enabled())
    for (int64_t i = 0; i < n; ++i) y[i] = gelu_one(x[i]);
}

void gelu_backward(const double* x, const double* dy, double* dx, int64_t n) {
#pragma omp parallel for schedule(static) if (parallel_enabled())
    for (int64_t i = 0; i < n; ++i) dx[i] += dy[i] * gelu_grad_one(x[i]);
}

void conv2d_forward(const double* x, const double* w, const double* b, double* y, int64_t f,
                    int64_t cin, int64_t h, int64_t wd, int64_t cout, int64_t kh, int64_t kw,
                    int64_t stride) {
    int64_t how = (h - kh) / stride + 1;
    int64_t wow = (wd - kw) / stride + 1;
    int64_t total = f * cout * how * wow;
#pragma omp parallel for schedule(static) if (parallel_enabled())
    for (int64_t t = 0; t < total; ++t) {
        int64_t wo = t % wow;
        int64_t ho = (t / wow) % how;
        int64_t co = (t / (wow * how)) % cout;
        int64_t fi = t / (wow * how * cout);
        double s = b ? b[co] : 0.0;
        for (int64_t ci = 0; ci < cin; ++ci)
            for (int64_t i = 0; i < kh; ++i)
                for (int64_t j = 0; j < kw; ++j)
                    s += x[((fi * cin + ci) * h + ho * stride + i) * wd + wo * stride + j] *
                         w[((co * cin + ci) * kh + i) * kw + j];
        y[t] = s;
    }
}

void conv2d_backward_input(const double* w, const double* dy, double* dx, int64_t f, int64_t cin,
                           int64_t h, int64_t wd, int64_t cout, int64_t kh, int64_t kw,
                           int64_t stride) {
    int64_t how = (h - kh) / stride + 1;
    int64_t wow = (wd - kw) / stride + 1;
    int64_t total = f * cin * h * wd;
#pragma omp parallel for schedule(static) if (parallel_enabled())
    for (int64_t t = 0; t < total; ++t) {
        int64_t xx = t % wd;
        int64_t yy = (t / wd) % h;
        int64_t ci = (t / (wd * h)) % cin;
        int64_t fi = t / (wd * h * cin);
        double s = 0.0;
        for (int64_t i = 0; i < kh; ++i) {
            int64_t hn = yy - i;
            if (hn < 0 || hn % stride != 0) continue;
            int64_t ho = hn / stride;
            if (ho >= how) continue;
            for (int64_t j = 0; j < kw; ++j) {
                int64_t wn = xx - j;
                if (wn < 0 || wn % stride != 0) continue;
                int64_t wo = wn / stride;
                if (wo >= wow) continue;
                for (int64_t co = 0; co < cout; ++co)
                    s += dy[((fi * cout + co) * how + ho) * wow + wo] *
                         w[((co * cin + ci) * kh + i) * kw + j];
            }
        }
        dx[t] += s;
    }
}

void conv2d_backward_weight(const double* x, const double* dy, double* dw, double* db, int64_t f,
                            int64_t cin, int64_t h, int64_t wd, int64_t cout, int64_t kh,
                            int64_t kw, int64_t stride) {
    int64_t how = (h - kh) / stride + 1;
    int64_t wow = (wd - kw) / stride + 1;
    int64_t total = cout * cin * kh * kw;
#pragma omp parallel for schedule(static) if (parallel_enabled())
    for (int64_t t = 0; t < total; ++t) {
        int64_t j = t % kw;
        int64_t i = (t / kw) % kh;
        int64_t ci = (t / (kw * kh)) % cin;
        int64_t co = t / (kw * kh * cin);
        double s = 0.0;
        for (int64_t fi = 0; fi < f; ++fi)
            for (int64_t ho = 0; ho < how; ++ho)
                for (int64_t wo = 0; wo < wow; ++wo)
                    s += dy[((fi * cout + co) * how + ho) * wow + wo] *
                         x[((fi * cin + ci) * h + ho * stride + i) * wd + wo * stride + j];
        dw[t] += s;
    }
    if (db) {
#pragma omp parallel for schedule(static) if (parallel_enabled())
        for (int64_t co = 0; co < cout; ++co) {
            double s = 0.0;
            for (int64_t fi = 0; fi < f; ++fi)
                for (int64_t ho = 0; ho < how; ++ho)
                    for (int64_t wo = 0; wo < wow; ++wo)
                        s += dy[((fi * cout + co) * how + ho) * wow + wo];
            db[co] += s;
        }
    }
}

void gather_rows(const double* x, const int64_t* idx, double* y, int64_t rows_out, int64_t cols) {
#pragma omp parallel for schedule(static) if (parallel_enabled())
    for (int64_t i = 0; i < rows_out; ++i) {
        const double* src = x + idx[i] * cols;
        double* dst = y + i * cols;
        for (int64_t j = 0; j < cols; ++j) dst[j] = src[j];
    }
}

void add(const double* a, const double* b, double* y, int64_t n) {
#pragma omp parallel for schedule(static) if (parallel_enabled())
    for (int64_t i = 0; i < n; ++i) y[i] = a[i] + b[i];
}

void mul(const double* a, const double* b, double* y, int64_t n) {
#pragma omp parallel for schedule(static) if (parallel_enabled())
    for (int64_t i = 0; i < n; ++i) y[i] = a[i] * b[i];
}

void axpy(double alpha, const double* x, double* y, int64_t n) {
#pragma omp parallel for schedule(static) if (parallel_enabled())
    for (int64_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void scale(const double* x, double alpha, double* y, int64_t n) {
#pragma omp parallel for schedule(static) if (parallel_enabled())
    for (int64_t i = 0; i < n; ++i) y[i] = x[i] * alpha;
}

// ---- serial reference ----

namespace ref {

void matmul(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n, bool ta,
            bool tb, bool accumulate) {
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (int64_t p = 0; p < k; ++p) {
                double av = ta ? a[p * m + i] : a[i * k + p];
                double bv = tb ? b[j * k + p] : b[p * n + j];
                s += av * bv;
            }
            double* out = c + i * n + j;
            *out = accumulate ? *out + s : s;
        }
}

void softmax_rows(double* x, int64_t rows, int64_t cols) {
    for (int64_t i = 0; i < rows; ++i) {
        double* xi = x + i * cols;
        double mx = xi[0];
        for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, xi[j]);
        double sum = 0.0;
        for (int64_t j = 0; j < cols; ++j) {
            xi[j] = std::exp(xi[j] - mx);
            sum += xi[j];
        }
        for (int64_t j = 0; j < cols; ++j) xi[j] *= 1.0 / sum;
    }
}

void softmax_backward_rows(const double* w, const double* dw, double* ds, int64_t rows,
                           int64_t cols) {
    for (int64_t i = 0; i < rows; ++i) {
        double inner = 0.0;
        for (int64_t j = 0; j < cols; ++j) inner += dw[i * cols + j] * w[i * cols + j];
        for (int64_t j = 0; j < cols; ++j)
            ds[i * cols + j] = w[i * cols + j] * (dw[i * cols + j] - inner);
    }
}

void layernorm_forward(const double* x, const double* gamma, const double* beta, double* y,
                       double* mean, double* rstd, int64_t rows, int64_t cols) {
    for (int64_t i = 0; i < rows; ++i) layernorm_row(x, gamma, beta, y, mean, rstd, i, cols);
}

void gelu_forward(const double* x, double* y, int64_t n) {
    for (int64_t i = 0; i < n; ++i) y[i] = gelu_one(x[i]);
}

void conv2d_forward(const double* x, const double* w, const double* b, double* y, int64_t f,
                    int64_t cin, int64_t h, int64_t wd, int64_t cout, int64_t kh, int64_t kw,
                    int64_t stride) {
    int64_t how = (h - kh) / stride + 1;
    int64_t wow = (wd - kw) / stride + 1;
    for (int64_t fi = 0; fi < f; ++fi)
        for (int64_t co = 0; co < cout; ++co)
            for (int64_t ho = 0; ho < how; ++ho)
                for (int64_t wo = 0; wo < wow; ++wo) {
                    double s = b ? b[co] : 0.0;
                    for (int64_t ci = 0; ci < cin; ++ci)
                        for (int64_t i = 0; i < kh; ++i)
                            for (int64_t j = 0; j < kw; ++j)
                                s += x[((fi * cin + ci) * h + ho * stride + i) * wd + wo * stride +
                                       j] *
                                     w[((co * cin + ci) * kh + i) * kw + j];
                    y[((fi * cout + co) * how + ho) * wow + wo] = s;
                }
}

}  // namespace ref

}  // namespace cvid::kernels
