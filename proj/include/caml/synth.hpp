#pragma once

#include "caml/data.hpp"
#include "caml/rng.hpp"

#include <filesystem>
#include <optional>
#include <span>

namespace caml {

// Synthetic many-to-one translation task: each concept has several source
// synonyms and one canonical target token; sources additionally undergo
// local adjacent swaps. The generator doubles as a ground-truth
// equivalence oracle for evaluation.
struct SynthSpec {
    int n_concepts = 60;
    int synonyms_per_concept = 3;
    int len_min = 3;
    int len_max = 10;
    double swap_prob = 0.3;
    int train_size = 2000;
    int dev_size = 200;
    int test_size = 400;
    uint64_t seed = 7;

    void validate() const;
    void save(const std::filesystem::path& file) const;
    static SynthSpec load(const std::filesystem::path& file);
};

class SynthTask {
public:
    explicit SynthTask(SynthSpec spec);

    const SynthSpec& spec() const { return spec_; }
    const Vocab& src_vocab() const { return src_; }
    const Vocab& tgt_vocab() const { return tgt_; }

    Corpus generate() const;

    // n distinct re-renderings of x (fresh synonym draws and fresh swaps),
    // none equal to x; by construction they share x's reference target.
    // salt separates independent variant draws for the same sentence.
    std::vector<std::vector<int>> oracle_variants(std::span<const int> x, int n,
                                                  uint64_t salt = 0) const;

    // Inverse of rendering; total on generated data, empty on any token
    // outside the synonym tables.
    std::optional<std::vector<int>> decode_concepts(std::span<const int> x) const;

    std::vector<int> render_source(std::span<const int> concepts, Rng& rng) const;
    std::vector<int> render_target(std::span<const int> concepts) const;

private:
    std::vector<int> draw_concepts(Rng& rng) const;

    SynthSpec spec_;
    Vocab src_;
    Vocab tgt_;
    std::vector<int> src_concept_; // src id -> concept, -1 for reserved
};

} // namespace caml
