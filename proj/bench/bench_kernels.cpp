#include <benchmark/benchmark.h>

#include <vector>

#include "cvid/denoiser.hpp"
#include "cvid/kernels.hpp"
#include "cvid/structure_guide.hpp"

using namespace cvid;

namespace {

std::vector<double> randu(int64_t n, uint64_t seed) {
    Rng rng(seed);
    std::vector<double> v((size_t)n);
    for (double& x : v) x = rng.uniform() - 0.5;
    return v;
}

// args: 0 = serial reference, 1 = omp path
void BM_matmul(benchmark::State& state) {
    bool omp = state.range(0) != 0;
    const int64_t m = 512, k = 96, n = 96;
    auto a = randu(m * k, 1), b = randu(k * n, 2);
    std::vector<double> c((size_t)(m * n));
    for (auto _ : state) {
        if (omp)
            kernels::matmul(a.data(), b.data(), c.data(), m, k, n, false, false, false);
        else
            kernels::ref::matmul(a.data(), b.data(), c.data(), m, k, n, false, false, false);
        benchmark::DoNotOptimize(c.data());
    }
    state.SetItemsProcessed(state.iterations() * m * k * n);
}

void BM_softmax_rows(benchmark::State& state) {
    bool omp = state.range(0) != 0;
    const int64_t rows = 2048, cols = 64;
    auto x0 = randu(rows * cols, 3);
    std::vector<double> x(x0);
    for (auto _ : state) {
        x = x0;
        if (omp)
            kernels::softmax_rows(x.data(), rows, cols);
        else
            kernels::ref::softmax_rows(x.data(), rows, cols);
        benchmark::DoNotOptimize(x.data());
    }
}

void BM_conv2d_stem(benchmark::State& state) {
    bool omp = state.range(0) != 0;
    const int64_t f = 8, cin = 1, h = 32, w = 32, cout = 24, kh = 4, kw = 4, stride = 4;
    auto x = randu(f * cin * h * w, 4);
    auto wt = randu(cout * cin * kh * kw, 5);
    auto b = randu(cout, 6);
    std::vector<double> y((size_t)(f * cout * (h / stride) * (w / stride)));
    for (auto _ : state) {
        if (omp)
            kernels::conv2d_forward(x.data(), wt.data(), b.data(), y.data(), f, cin, h, w, cout,
                                    kh, kw, stride);
        else
            kernels::ref::conv2d_forward(x.data(), wt.data(), b.data(), y.data(), f, cin, h, w,
                                         cout, kh, kw, stride);
        benchmark::DoNotOptimize(y.data());
    }
}

void BM_guide_denoise(benchmark::State& state) {
    kernels::set_parallel(state.range(0) != 0);
    DenoiserConfig cfg;
    Rng rng(7);
    Denoiser den(cfg, rng);
    StructureGuide guide(den, rng);
    PromptEmbedding prompt = den.make_prompt({0, 1}, {"a", "b"}, -1);
    ControlSequence ctrl;
    ctrl.kind = "edge";
    ctrl.maps = Tensor({cfg.frames, 1, cfg.pixel_h(), cfg.pixel_w()});
    for (size_t i = 0; i < ctrl.maps.data.size(); ++i) ctrl.maps.data[i] = (i % 7) / 6.0;
    VideoLatent z(rng.randn({cfg.frames, cfg.channels, cfg.height, cfg.width}), 10);
    for (auto _ : state) {
        DenoiseResult r = guide.guide_denoise(z, 10, prompt, ctrl);
        benchmark::DoNotOptimize(r.eps.data.data());
    }
    kernels::set_parallel(true);
}

}  // namespace

BENCHMARK(BM_matmul)->Arg(0)->Arg(1)->ArgNames({"omp"});
BENCHMARK(BM_softmax_rows)->Arg(0)->Arg(1)->ArgNames({"omp"});
BENCHMARK(BM_conv2d_stem)->Arg(0)->Arg(1)->ArgNames({"omp"});
BENCHMARK(BM_guide_denoise)->Arg(0)->Arg(1)->ArgNames({"omp"});

BENCHMARK_MAIN();
