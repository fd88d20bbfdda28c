#include "caml/rng.hpp"

#include "caml/errors.hpp"

#include <algorithm>

namespace caml {

namespace {

uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

} // namespace

uint64_t derive_seed(uint64_t root, std::string_view stream, uint64_t a, uint64_t b) {
    uint64_t h = 0xcbf29ce484222325ULL; // FNV-1a offset basis
    for (unsigned char c : stream) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    h = splitmix64(h ^ splitmix64(root));
    h = splitmix64(h ^ splitmix64(a + 0x51ed270b0a3f5a11ULL));
    h = splitmix64(h ^ splitmix64(b + 0x2545f4914f6cdd1dULL));
    return h;
}

int Rng::uniform_int(int n) {
    if (n <= 0) {
        throw UsageError("Rng::uniform_int: n must be positive, got " + std::to_string(n));
    }
    const uint64_t un = static_cast<uint64_t>(n);
    // Rejection sampling for an unbiased draw.
    const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    uint64_t x;
    do {
        x = eng_();
    } while (x >= limit);
    return static_cast<int>(x % un);
}

double Rng::normal() {
    // u1 in (0, 1] so the log is finite.
    double u1 = 1.0 - uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.141592653589793 * u2);
}

std::vector<int> Rng::sample_without_replacement(int n, int k) {
    if (k > n) {
        throw UsageError("sample_without_replacement: k > n");
    }
    // Partial Fisher-Yates over an index pool.
    std::vector<int> pool(n);
    for (int i = 0; i < n; ++i) pool[i] = i;
    std::vector<int> out;
    out.reserve(k);
    for (int i = 0; i < k; ++i) {
        int j = i + uniform_int(n - i);
        std::swap(pool[i], pool[j]);
        out.push_back(pool[i]);
    }
    return out;
}

} // namespace caml
