#pragma once

#include <cstdint>
#include <random>

#include "cvid/tensor.hpp"

namespace cvid {

// Seeded generator with a pinned draw algorithm. std::normal_distribution is
// implementation-defined, so normals come from an explicit Box-Muller pair;
// every consumer documents its draw order against this class.
class Rng {
  public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // [0,1), 53-bit resolution
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    // inclusive on both ends, rejection-free modulo bias is irrelevant at our ranges
    int uniform_int(int lo, int hi) {
        return lo + static_cast<int>(gen_() % static_cast<uint64_t>(hi - lo + 1));
    }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    Tensor randn(std::vector<int64_t> shape, double stddev = 1.0) {
        Tensor t(std::move(shape));
        for (auto& v : t.data) v = normal() * stddev;
        return t;
    }

    // Derive an independent stream; used to give each pipeline stage its own
    // generator in a documented order.
    Rng fork() { return Rng(next_u64() ^ 0x9e3779b97f4a7c15ull); }

  private:
    std::mt19937_64 gen_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace cvid
