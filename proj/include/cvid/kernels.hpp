#pragma once

#include <cstdint>

namespace cvid::kernels {

// Global switch consulted by the omp kernels; owner-computes loop structure
// keeps results bit-identical to the serial reference either way.
void set_parallel(bool on);
bool parallel_enabled();

// ---- parallel kernels (default execution path) ----

// c[m,n] = op(a) * op(b); op transposes when the flag is set.
// a is [m,k] (or [k,m] when ta), b is [k,n] (or [n,k] when tb).
// accumulate=true adds into c instead of overwriting.
void matmul(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n, bool ta,
            bool tb, bool accumulate);

// in-place row softmax of x [rows, cols]
void softmax_rows(double* x, int64_t rows, int64_t cols);

// ds = w .* (dw - rowsum(dw .* w)), the softmax Jacobian product; w is the
// forward output. ds may alias dw.
void softmax_backward_rows(const double* w, const double* dw, double* ds, int64_t rows,
                           int64_t cols);

// rowwise layernorm; mean/rstd are [rows] scratch written for backward
void layernorm_forward(const double* x, const double* gamma, const double* beta, double* y,
                       double* mean, double* rstd, int64_t rows, int64_t cols);
void layernorm_backward(const double* x, const double* gamma, const double* mean,
                        const double* rstd, const double* dy, double* dx, double* dgamma,
                        double* dbeta, int64_t rows, int64_t cols);

// exact (erf-based) gelu
void gelu_forward(const double* x, double* y, int64_t n);
void gelu_backward(const double* x, const double* dy, double* dx, int64_t n);  // accumulates

// y[f,co,ho,wo] = sum_{ci,i,j} x[f,ci,ho*s+i,wo*s+j] * w[co,ci,i,j] + b[co]
void conv2d_forward(const double* x, const double* w, const double* b, double* y, int64_t f,
                    int64_t cin, int64_t h, int64_t wd, int64_t cout, int64_t kh, int64_t kw,
                    int64_t stride);
void conv2d_backward_input(const double* w, const double* dy, double* dx, int64_t f, int64_t cin,
                           int64_t h, int64_t wd, int64_t cout, int64_t kh, int64_t kw,
                           int64_t stride);  // accumulates
void conv2d_backward_weight(const double* x, const double* dy, double* dw, double* db, int64_t f,
                            int64_t cin, int64_t h, int64_t wd, int64_t cout, int64_t kh,
                            int64_t kw, int64_t stride);  // accumulates

// y[i,:] = x[idx[i],:]
void gather_rows(const double* x, const int64_t* idx, double* y, int64_t rows_out, int64_t cols);

// elementwise
void add(const double* a, const double* b, double* y, int64_t n);
void mul(const double* a, const double* b, double* y, int64_t n);
void axpy(double alpha, const double* x, double* y, int64_t n);  // y += alpha*x
void scale(const double* x, double alpha, double* y, int64_t n);

// ---- serial reference implementations (tests and the benchmark baseline) ----
namespace ref {
void matmul(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n, bool ta,
            bool tb, bool accumulate);
void softmax_rows(double* x, int64_t rows, int64_t cols);
void softmax_backward_rows(const double* w, const double* dw, double* ds, int64_t rows,
                           int64_t cols);
void layernorm_forward(const double* x, const double* gamma, const double* beta, double* y,
                       double* mean, double* rstd, int64_t rows, int64_t cols);
void gelu_forward(const double* x, double* y, int64_t n);
void conv2d_forward(const double* x, const double* w, const double* b, double* y, int64_t f,
                    int64_t cin, int64_t h, int64_t wd, int64_t cout, int64_t kh, int64_t kw,
                    int64_t stride);
}  // namespace ref

}  // namespace cvid::kernels
