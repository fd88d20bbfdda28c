#pragma once

#include "caml/data.hpp"
#include "caml/model.hpp"

#include <filesystem>
#include <span>

namespace caml {

struct GenConfig {
    double replace_ratio = 0.2; // fraction of words substituted in step 1
    int top_k = 20;             // similar-word candidate list length
    int j_samples = 8;          // J noisy forward decodes
    int select_count = 1;       // candidates kept (I - 1)
    double noise_sigma = 1.0;   // sigma for the noisy forward pass
    int em_iters = 5;
    int decode_max_len = 24;

    void validate() const;
    uint64_t hash() const;
};

// Lexical translation probabilities p(target | source) from IBM-Model-1
// style EM, plus precomputed similar-word lists: candidates for source
// word w are the source words w' maximizing sum_t p(t|w) p(t|w')
// (shared-translation similarity).
struct AlignTable {
    int src_size = 0;
    int tgt_size = 0;
    int top_k = 0;
    std::vector<double> probs; // [src_size x tgt_size], rows of seen words sum to 1
    std::vector<char> seen;    // source word occurred in the corpus
    std::vector<std::vector<int>> candidates;
    std::vector<double> em_loglik; // corpus log-likelihood per EM iteration

    double prob(int s, int t) const {
        return probs[static_cast<size_t>(s) * tgt_size + t];
    }

    void save(const std::filesystem::path& file) const;
    static AlignTable load(const std::filesystem::path& file);
};

AlignTable train_aligner(const std::vector<Sample>& corpus, int src_vocab_size,
                         int tgt_vocab_size, int em_iters, int top_k);

struct SubstituteStats {
    int replaced = 0;
    int skipped_no_candidates = 0;
};

// Step 1: replace ceil(replace_ratio * len) sampled positions with a
// uniform draw from the word's candidate list. Reserved tokens are never
// touched; positions whose word has no candidates are skipped, not fatal.
std::vector<int> substitute_words(std::span<const int> x, const AlignTable& table,
                                  const GenConfig& cfg, uint64_t seed,
                                  SubstituteStats* stats = nullptr);

struct RoundTripCandidate {
    std::vector<int> pivot;  // y' in the target language
    std::vector<int> source; // noise-free back-translation
};

// Step 2: J forward decodes under distinct encoder-noise seeds, each
// back-translated without noise. Degenerate (empty) decodes are dropped.
std::vector<RoundTripCandidate> noisy_round_trip(std::span<const int> x_sub,
                                                 const Seq2SeqModel& fwd,
                                                 const Seq2SeqModel& bwd, const GenConfig& cfg,
                                                 uint64_t seed);

// weight_j = (levenshtein / max_len) * jaccard-token-overlap against y.
// High weight = different surface, same content.
std::vector<double> score_candidates(const std::vector<std::vector<int>>& y_primes,
                                     std::span<const int> y);

// The sampling function: x_s = {x} + top select_count round-trip sources
// by weight, padded with step-1-only substitutions when too few
// candidates survive.
EquivSet build_equiv_set(std::span<const int> x, std::span<const int> y,
                         const Seq2SeqModel& fwd, const Seq2SeqModel& bwd,
                         const AlignTable& table, const GenConfig& cfg, uint64_t seed);

} // namespace caml
