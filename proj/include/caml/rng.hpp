#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace caml {

// Derives a child seed from a root seed, a stream name and up to two
// indices. All randomness in the project flows from one root seed through
// named sub-streams so that runs are reproducible and independent
// components never share a stream.
uint64_t derive_seed(uint64_t root, std::string_view stream, uint64_t a = 0, uint64_t b = 0);

// Deterministic RNG. Distributions are implemented by hand on top of
// mt19937_64 so sequences do not depend on the standard library version.
class Rng {
public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    uint64_t next_u64() { return eng_(); }

    // Uniform double in [0, 1), 53-bit resolution.
    double uniform() {
        return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
    }

    // Uniform integer in [0, n). n must be > 0.
    int uniform_int(int n);

    // Standard normal via Box-Muller (one value per two uniform draws;
    // the sine branch is discarded so the draw count per call is fixed).
    double normal();

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Fisher-Yates shuffle.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(uniform_int(static_cast<int>(i)));
            std::swap(v[i - 1], v[j]);
        }
    }

    // k distinct values from [0, n), in sampling order.
    std::vector<int> sample_without_replacement(int n, int k);

private:
    std::mt19937_64 eng_;
};

} // namespace caml
