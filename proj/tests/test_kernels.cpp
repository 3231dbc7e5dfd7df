#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <vector>

#include "cvid/kernels.hpp"
#include "cvid/rng.hpp"

using namespace cvid;
namespace K = cvid::kernels;

namespace {

std::vector<double> randvec(Rng& rng, int64_t n, double scale = 1.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.normal() * scale;
    return v;
}

bool bit_equal(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) return false;
    return std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

}  // namespace

// ===== parallel vs serial reference: exact equality =====

TEST_CASE("matmul omp matches ref bitwise for all transpose combos") {
    Rng rng(11);
    const int64_t m = 17, k = 23, n = 13;
    for (int ta = 0; ta <= 1; ++ta) {
        for (int tb = 0; tb <= 1; ++tb) {
            auto a = randvec(rng, ta ? k * m : m * k);
            auto b = randvec(rng, tb ? n * k : k * n);
            std::vector<double> c_ref(m * n, 0.5), c_omp(m * n, 0.5);
            K::ref::matmul(a.data(), b.data(), c_ref.data(), m, k, n, ta, tb, true);
            K::set_parallel(true);
            K::matmul(a.data(), b.data(), c_omp.data(), m, k, n, ta, tb, true);
            CHECK(bit_equal(c_ref, c_omp));

            K::ref::matmul(a.data(), b.data(), c_ref.data(), m, k, n, ta, tb, false);
            K::matmul(a.data(), b.data(), c_omp.data(), m, k, n, ta, tb, false);
            CHECK(bit_equal(c_ref, c_omp));
        }
    }
}

TEST_CASE("matmul parallel switch off still matches") {
    Rng rng(12);
    const int64_t m = 9, k = 8, n = 7;
    auto a = randvec(rng, m * k);
    auto b = randvec(rng, k * n);
    std::vector<double> c1(m * n), c2(m * n);
    K::set_parallel(false);
    K::matmul(a.data(), b.data(), c1.data(), m, k, n, false, false, false);
    K::set_parallel(true);
    K::matmul(a.data(), b.data(), c2.data(), m, k, n, false, false, false);
    CHECK(bit_equal(c1, c2));
}

TEST_CASE("softmax omp matches ref bitwise") {
    Rng rng(13);
    const int64_t rows = 37, cols = 19;
    auto x = randvec(rng, rows * cols, 3.0);
    auto x_ref = x;
    K::ref::softmax_rows(x_ref.data(), rows, cols);
    K::set_parallel(true);
    K::softmax_rows(x.data(), rows, cols);
    CHECK(bit_equal(x, x_ref));
}

TEST_CASE("softmax backward omp matches ref bitwise") {
    Rng rng(14);
    const int64_t rows = 21, cols = 11;
    auto w = randvec(rng, rows * cols);
    K::ref::softmax_rows(w.data(), rows, cols);
    auto dw = randvec(rng, rows * cols);
    std::vector<double> ds_ref(rows * cols), ds_omp(rows * cols);
    K::ref::softmax_backward_rows(w.data(), dw.data(), ds_ref.data(), rows, cols);
    K::set_parallel(true);
    K::softmax_backward_rows(w.data(), dw.data(), ds_omp.data(), rows, cols);
    CHECK(bit_equal(ds_ref, ds_omp));
}

TEST_CASE("layernorm omp matches ref bitwise") {
    Rng rng(15);
    const int64_t rows = 25, cols = 16;
    auto x = randvec(rng, rows * cols);
    auto gamma = randvec(rng, cols);
    auto beta = randvec(rng, cols);
    std::vector<double> y1(rows * cols), y2(rows * cols), m1(rows), m2(rows), r1(rows), r2(rows);
    K::ref::layernorm_forward(x.data(), gamma.data(), beta.data(), y1.data(), m1.data(), r1.data(),
                              rows, cols);
    K::set_parallel(true);
    K::layernorm_forward(x.data(), gamma.data(), beta.data(), y2.data(), m2.data(), r2.data(),
                         rows, cols);
    CHECK(bit_equal(y1, y2));
    CHECK(bit_equal(m1, m2));
    CHECK(bit_equal(r1, r2));
}

TEST_CASE("gelu omp matches ref bitwise") {
    Rng rng(16);
    auto x = randvec(rng, 1001, 2.0);
    std::vector<double> y1(x.size()), y2(x.size());
    K::ref::gelu_forward(x.data(), y1.data(), (int64_t)x.size());
    K::set_parallel(true);
    K::gelu_forward(x.data(), y2.data(), (int64_t)x.size());
    CHECK(bit_equal(y1, y2));
}

TEST_CASE("conv2d omp matches ref bitwise") {
    Rng rng(17);
    const int64_t f = 3, cin = 2, h = 9, w = 11, cout = 5, kh = 3, kw = 3, stride = 2;
    const int64_t how = (h - kh) / stride + 1, wow = (w - kw) / stride + 1;
    auto x = randvec(rng, f * cin * h * w);
    auto wt = randvec(rng, cout * cin * kh * kw);
    auto b = randvec(rng, cout);
    std::vector<double> y1(f * cout * how * wow), y2(y1.size());
    K::ref::conv2d_forward(x.data(), wt.data(), b.data(), y1.data(), f, cin, h, w, cout, kh, kw,
                           stride);
    K::set_parallel(true);
    K::conv2d_forward(x.data(), wt.data(), b.data(), y2.data(), f, cin, h, w, cout, kh, kw,
                      stride);
    CHECK(bit_equal(y1, y2));
}

// ===== correctness spot checks =====

TEST_CASE("matmul 2x2 by hand") {
    double a[] = {1, 2, 3, 4};
    double b[] = {5, 6, 7, 8};
    double c[4];
    K::matmul(a, b, c, 2, 2, 2, false, false, false);
    CHECK(c[0] == doctest::Approx(19));
    CHECK(c[1] == doctest::Approx(22));
    CHECK(c[2] == doctest::Approx(43));
    CHECK(c[3] == doctest::Approx(50));
}

TEST_CASE("matmul transpose flags consistent with explicit transpose") {
    Rng rng(18);
    const int64_t m = 5, k = 4, n = 6;
    auto a = randvec(rng, m * k);
    auto b = randvec(rng, k * n);
    std::vector<double> at(k * m), bt(n * k);
    for (int64_t i = 0; i < m; ++i)
        for (int64_t p = 0; p < k; ++p) at[p * m + i] = a[i * k + p];
    for (int64_t p = 0; p < k; ++p)
        for (int64_t j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];
    std::vector<double> c0(m * n), c1(m * n), c2(m * n), c3(m * n);
    K::matmul(a.data(), b.data(), c0.data(), m, k, n, false, false, false);
    K::matmul(at.data(), b.data(), c1.data(), m, k, n, true, false, false);
    K::matmul(a.data(), bt.data(), c2.data(), m, k, n, false, true, false);
    K::matmul(at.data(), bt.data(), c3.data(), m, k, n, true, true, false);
    for (size_t i = 0; i < c0.size(); ++i) {
        CHECK(c1[i] == doctest::Approx(c0[i]).epsilon(1e-12));
        CHECK(c2[i] == doctest::Approx(c0[i]).epsilon(1e-12));
        CHECK(c3[i] == doctest::Approx(c0[i]).epsilon(1e-12));
    }
}

TEST_CASE("softmax rows sum to one and order preserved") {
    Rng rng(19);
    const int64_t rows = 8, cols = 12;
    auto x = randvec(rng, rows * cols, 4.0);
    auto s = x;
    K::softmax_rows(s.data(), rows, cols);
    for (int64_t i = 0; i < rows; ++i) {
        double sum = 0;
        for (int64_t j = 0; j < cols; ++j) {
            CHECK(s[i * cols + j] > 0.0);
            sum += s[i * cols + j];
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
        for (int64_t j = 0; j + 1 < cols; ++j)
            CHECK((x[i * cols + j] < x[i * cols + j + 1]) ==
                  (s[i * cols + j] < s[i * cols + j + 1]));
    }
}

TEST_CASE("softmax invariant to constant row shift") {
    double x1[] = {1.0, 2.0, 3.0};
    double x2[] = {101.0, 102.0, 103.0};
    K::softmax_rows(x1, 1, 3);
    K::softmax_rows(x2, 1, 3);
    for (int j = 0; j < 3; ++j) CHECK(x1[j] == doctest::Approx(x2[j]).epsilon(1e-12));
}

TEST_CASE("layernorm output standardized under unit gamma zero beta") {
    Rng rng(20);
    const int64_t rows = 6, cols = 32;
    auto x = randvec(rng, rows * cols, 2.5);
    std::vector<double> gamma(cols, 1.0), beta(cols, 0.0);
    std::vector<double> y(rows * cols), mean(rows), rstd(rows);
    K::layernorm_forward(x.data(), gamma.data(), beta.data(), y.data(), mean.data(), rstd.data(),
                         rows, cols);
    for (int64_t i = 0; i < rows; ++i) {
        double mu = 0, var = 0;
        for (int64_t j = 0; j < cols; ++j) mu += y[i * cols + j];
        mu /= cols;
        for (int64_t j = 0; j < cols; ++j) {
            double d = y[i * cols + j] - mu;
            var += d * d;
        }
        var /= cols;
        CHECK(mu == doctest::Approx(0.0).epsilon(1e-10));
        CHECK(var == doctest::Approx(1.0).epsilon(1e-4));
    }
}

TEST_CASE("gelu known values") {
    double x[] = {0.0, 100.0, -100.0};
    double y[3];
    K::gelu_forward(x, y, 3);
    CHECK(y[0] == doctest::Approx(0.0));
    CHECK(y[1] == doctest::Approx(100.0).epsilon(1e-12));
    CHECK(y[2] == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("conv2d identity kernel reproduces input") {
    Rng rng(21);
    const int64_t f = 2, c = 3, h = 5, w = 5;
    auto x = randvec(rng, f * c * h * w);
    std::vector<double> wt(c * c, 0.0);
    for (int64_t i = 0; i < c; ++i) wt[i * c + i] = 1.0;  // [cout=c, cin=c, 1, 1]
    std::vector<double> y(f * c * h * w);
    K::conv2d_forward(x.data(), wt.data(), nullptr, y.data(), f, c, h, w, c, 1, 1, 1);
    CHECK(bit_equal(x, y));
}

TEST_CASE("gather rows copies selected rows") {
    double x[] = {1, 2, 3, 4, 5, 6};
    int64_t idx[] = {2, 0, 2};
    double y[6];
    K::gather_rows(x, idx, y, 3, 2);
    CHECK(y[0] == 5);
    CHECK(y[1] == 6);
    CHECK(y[2] == 1);
    CHECK(y[3] == 2);
    CHECK(y[4] == 5);
    CHECK(y[5] == 6);
}

// ===== finite difference checks of backward kernels =====

namespace {
constexpr double kFdH = 1e-5;
constexpr double kFdTol = 1e-6;

double loss_weighted_sum(const std::vector<double>& y, const std::vector<double>& c) {
    double s = 0;
    for (size_t i = 0; i < y.size(); ++i) s += y[i] * c[i];
    return s;
}
}  // namespace

TEST_CASE("softmax backward matches finite differences") {
    Rng rng(22);
    const int64_t rows = 4, cols = 7;
    auto s = randvec(rng, rows * cols);
    auto c = randvec(rng, rows * cols);

    auto w = s;
    K::softmax_rows(w.data(), rows, cols);
    std::vector<double> ds(rows * cols);
    K::softmax_backward_rows(w.data(), c.data(), ds.data(), rows, cols);

    for (int64_t i = 0; i < rows * cols; i += 3) {
        auto sp = s, sm = s;
        sp[i] += kFdH;
        sm[i] -= kFdH;
        K::softmax_rows(sp.data(), rows, cols);
        K::softmax_rows(sm.data(), rows, cols);
        double fd = (loss_weighted_sum(sp, c) - loss_weighted_sum(sm, c)) / (2 * kFdH);
        CHECK(ds[i] == doctest::Approx(fd).epsilon(kFdTol).scale(1.0));
    }
}

TEST_CASE("layernorm backward matches finite differences") {
    Rng rng(23);
    const int64_t rows = 3, cols = 9;
    auto x = randvec(rng, rows * cols);
    auto gamma = randvec(rng, cols);
    auto beta = randvec(rng, cols);
    auto c = randvec(rng, rows * cols);

    std::vector<double> y(rows * cols), mean(rows), rstd(rows);
    K::layernorm_forward(x.data(), gamma.data(), beta.data(), y.data(), mean.data(), rstd.data(),
                         rows, cols);
    std::vector<double> dx(rows * cols, 0.0), dgamma(cols, 0.0), dbeta(cols, 0.0);
    K::layernorm_backward(x.data(), gamma.data(), mean.data(), rstd.data(), c.data(), dx.data(),
                          dgamma.data(), dbeta.data(), rows, cols);

    auto eval = [&](const std::vector<double>& xx, const std::vector<double>& gg,
                    const std::vector<double>& bb) {
        std::vector<double> yy(rows * cols), mm(rows), rr(rows);
        K::layernorm_forward(xx.data(), gg.data(), bb.data(), yy.data(), mm.data(), rr.data(),
                             rows, cols);
        return loss_weighted_sum(yy, c);
    };

    for (int64_t i = 0; i < rows * cols; i += 4) {
        auto xp = x, xm = x;
        xp[i] += kFdH;
        xm[i] -= kFdH;
        double fd = (eval(xp, gamma, beta) - eval(xm, gamma, beta)) / (2 * kFdH);
        CHECK(dx[i] == doctest::Approx(fd).epsilon(kFdTol).scale(1.0));
    }
    for (int64_t j = 0; j < cols; ++j) {
        auto gp = gamma, gm = gamma;
        gp[j] += kFdH;
        gm[j] -= kFdH;
        double fd = (eval(x, gp, beta) - eval(x, gm, beta)) / (2 * kFdH);
        CHECK(dgamma[j] == doctest::Approx(fd).epsilon(kFdTol).scale(1.0));
        auto bp = beta, bm = beta;
        bp[j] += kFdH;
        bm[j] -= kFdH;
        fd = (eval(x, gamma, bp) - eval(x, gamma, bm)) / (2 * kFdH);
        CHECK(dbeta[j] == doctest::Approx(fd).epsilon(kFdTol).scale(1.0));
    }
}

TEST_CASE("gelu backward matches finite differences") {
    Rng rng(24);
    auto x = randvec(rng, 50, 1.5);
    auto c = randvec(rng, 50);
    std::vector<double> dx(50, 0.0);
    K::gelu_backward(x.data(), c.data(), dx.data(), 50);
    for (int64_t i = 0; i < 50; i += 5) {
        std::vector<double> yp(50), ym(50);
        auto xp = x, xm = x;
        xp[i] += kFdH;
        xm[i] -= kFdH;
        K::gelu_forward(xp.data(), yp.data(), 50);
        K::gelu_forward(xm.data(), ym.data(), 50);
        double fd = (loss_weighted_sum(yp, c) - loss_weighted_sum(ym, c)) / (2 * kFdH);
        CHECK(dx[i] == doctest::Approx(fd).epsilon(kFdTol).scale(1.0));
    }
}

TEST_CASE("conv2d backward matches finite differences") {
    Rng rng(25);
    const int64_t f = 2, cin = 2, h = 6, w = 5, cout = 3, kh = 3, kw = 2, stride = 1;
    const int64_t how = (h - kh) / stride + 1, wow = (w - kw) / stride + 1;
    auto x = randvec(rng, f * cin * h * w);
    auto wt = randvec(rng, cout * cin * kh * kw);
    auto b = randvec(rng, cout);
    auto c = randvec(rng, f * cout * how * wow);

    auto eval = [&](const std::vector<double>& xx, const std::vector<double>& ww,
                    const std::vector<double>& bb) {
        std::vector<double> yy(f * cout * how * wow);
        K::conv2d_forward(xx.data(), ww.data(), bb.data(), yy.data(), f, cin, h, w, cout, kh, kw,
                          stride);
        return loss_weighted_sum(yy, c);
    };

    std::vector<double> dx(x.size(), 0.0), dw(wt.size(), 0.0), db(cout, 0.0);
    K::conv2d_backward_input(wt.data(), c.data(), dx.data(), f, cin, h, w, cout, kh, kw, stride);
    K::conv2d_backward_weight(x.data(), c.data(), dw.data(), db.data(), f, cin, h, w, cout, kh,
                              kw, stride);

    for (size_t i = 0; i < x.size(); i += 17) {
        auto xp = x, xm = x;
        xp[i] += kFdH;
        xm[i] -= kFdH;
        double fd = (eval(xp, wt, b) - eval(xm, wt, b)) / (2 * kFdH);
        CHECK(dx[i] == doctest::Approx(fd).epsilon(kFdTol).scale(1.0));
    }
    for (size_t i = 0; i < wt.size(); i += 5) {
        auto wp = wt, wm = wt;
        wp[i] += kFdH;
        wm[i] -= kFdH;
        double fd = (eval(x, wp, b) - eval(x, wm, b)) / (2 * kFdH);
        CHECK(dw[i] == doctest::Approx(fd).epsilon(kFdTol).scale(1.0));
    }
    for (int64_t i = 0; i < cout; ++i) {
        auto bp = b, bm = b;
        bp[i] += kFdH;
        bm[i] -= kFdH;
        double fd = (eval(x, wt, bp) - eval(x, wt, bm)) / (2 * kFdH);
        CHECK(db[i] == doctest::Approx(fd).epsilon(kFdTol).scale(1.0));
    }
}

TEST_CASE("elementwise ops") {
    double a[] = {1, 2, 3};
    double b[] = {4, 5, 6};
    double y[3];
    K::add(a, b, y, 3);
    CHECK(y[2] == 9);
    K::mul(a, b, y, 3);
    CHECK(y[2] == 18);
    K::scale(a, 2.0, y, 3);
    CHECK(y[2] == 6);
    K::axpy(3.0, a, y, 3);  // y = 2a + 3a
    CHECK(y[0] == 5);
    CHECK(y[2] == 15);
}
