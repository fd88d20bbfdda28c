#pragma once

#include "caml/data.hpp"
#include "caml/model.hpp"

#include <span>

namespace caml {

struct DecodeOptions {
    int beam = 5;
    double length_penalty = 0.6;
    int max_len = 24;
};

// Corpus-level BLEU-4 in [0, 100]: geometric mean of clipped n-gram
// precisions times the brevity penalty, corpus-level counts, no smoothing.
double corpus_bleu(const std::vector<std::vector<int>>& hyps,
                   const std::vector<std::vector<int>>& refs);

// Single-pair BLEU with add-one smoothing on the n >= 2 precisions (short
// sentences would otherwise score 0 whenever any higher-order count is
// empty).
double sentence_bleu(std::span<const int> hyp, std::span<const int> ref);

// Token-level Levenshtein distance, unit costs.
int edit_distance(std::span<const int> a, std::span<const int> b);

// Counts per [edge_i, edge_i+1) bin; the final bin is closed.
std::vector<int> histogram_counts(const std::vector<double>& scores,
                                  const std::vector<double>& edges);

struct ConsistencyReport {
    double exact_match_rate = 0.0;        // identical greedy decodes among within-set pairs
    double mean_pairwise_output_bleu = 0.0; // symmetrized sentence BLEU between decodes
    double mean_encoder_distance = 0.0;   // ||mean-pooled Enc(x_i) - Enc(x_j)||^2
    int n_sets = 0;
    int n_pairs = 0;
    int n_skipped = 0; // sets with fewer than two members

    // A constant decoder scores a perfect 1.0 here, which is why this
    // report is always read next to BLEU, never alone.
};

ConsistencyReport consistency_report(const Seq2SeqModel& model, const ModelParams& params,
                                     const std::vector<EquivSet>& sets, int decode_max_len);

struct DegradationCurve {
    std::vector<double> proportions;
    std::vector<double> bleu;
};

// Corpus BLEU after replacing a seeded p-fraction of test inputs with
// their paraphrases, for each proportion. Replacement subsets are nested
// (a fixed shuffled order, prefix replacement), so the curve varies only
// through p.
DegradationCurve degradation_curve(const Seq2SeqModel& model, const ModelParams& params,
                                   const std::vector<Sample>& samples,
                                   const std::vector<std::vector<int>>& paraphrases,
                                   const std::vector<double>& proportions, uint64_t seed,
                                   const DecodeOptions& opts);

// Sentence-BLEU histogram of decoded test samples.
std::vector<int> bleu_histogram(const Seq2SeqModel& model, const ModelParams& params,
                                const std::vector<Sample>& samples,
                                const std::vector<double>& bin_edges, const DecodeOptions& opts);

// Decode helper shared by the analyses.
std::vector<int> decode_sample(const Seq2SeqModel& model, const ModelParams& params,
                               std::span<const int> x, const DecodeOptions& opts);

} // namespace caml
