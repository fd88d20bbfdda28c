#pragma once

#include "caml/vocab.hpp"

#include <cstdint>
#include <filesystem>
#include <vector>

namespace caml {

struct Sample {
    std::vector<int> x;
    std::vector<int> y;
};

struct Corpus {
    std::vector<Sample> train;
    std::vector<Sample> dev;
    std::vector<Sample> test;
};

// Target pair plus the set of (approximately) equivalent sources.
// x itself is always x_s[0].
struct EquivSet {
    std::vector<int> x;
    std::vector<int> y;
    std::vector<std::vector<int>> x_s;
    std::vector<double> weights; // selection weights of generated members; empty for oracle sets
    uint64_t gen_seed = 0;

    int i_count() const { return static_cast<int>(x_s.size()); }
};

// One sample per line, tab-separated source/target token strings.
void write_corpus_file(const std::filesystem::path& file, const std::vector<Sample>& samples,
                       const Vocab& src, const Vocab& tgt);
std::vector<Sample> read_corpus_file(const std::filesystem::path& file, const Vocab& src,
                                     const Vocab& tgt);

// Newline-delimited JSON records (sample id, x, y, x^s, seed, weights),
// re-loadable without the generator models.
void write_equiv_file(const std::filesystem::path& file, const std::vector<EquivSet>& sets,
                      const Vocab& src, const Vocab& tgt, uint64_t cache_key);
std::vector<EquivSet> read_equiv_file(const std::filesystem::path& file, const Vocab& src,
                                      const Vocab& tgt, uint64_t expected_cache_key = 0);

// FNV over the token content of a sample list; used to key caches.
uint64_t corpus_hash(const std::vector<Sample>& samples);

} // namespace caml
