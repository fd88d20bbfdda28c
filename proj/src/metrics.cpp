#include "caml/metrics.hpp"

#include "caml/errors.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace caml {

namespace {

using NgramCounts = std::map<std::vector<int>, int>;

NgramCounts count_ngrams(std::span<const int> seq, int n) {
    NgramCounts counts;
    if (static_cast<int>(seq.size()) >= n) {
        for (size_t i = 0; i + n <= seq.size(); ++i) {
            counts[std::vector<int>(seq.begin() + i, seq.begin() + i + n)] += 1;
        }
    }
    return counts;
}

struct PrecisionCounts {
    long long matches = 0;
    long long total = 0;
};

PrecisionCounts clipped_matches(std::span<const int> hyp, std::span<const int> ref, int n) {
    PrecisionCounts pc;
    const NgramCounts hyp_counts = count_ngrams(hyp, n);
    const NgramCounts ref_counts = count_ngrams(ref, n);
    for (const auto& [gram, count] : hyp_counts) {
        pc.total += count;
        auto it = ref_counts.find(gram);
        if (it != ref_counts.end()) {
            pc.matches += std::min(count, it->second);
        }
    }
    return pc;
}

double brevity_penalty(long long hyp_len, long long ref_len) {
    if (hyp_len == 0) return 0.0;
    if (hyp_len >= ref_len) return 1.0;
    return std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len));
}

} // namespace

double corpus_bleu(const std::vector<std::vector<int>>& hyps,
                   const std::vector<std::vector<int>>& refs) {
    if (hyps.empty()) {
        throw UsageError("corpus_bleu: empty hypothesis set");
    }
    if (hyps.size() != refs.size()) {
        throw UsageError("corpus_bleu: " + std::to_string(hyps.size()) + " hypotheses vs " +
                         std::to_string(refs.size()) + " references");
    }
    long long hyp_len = 0, ref_len = 0;
    PrecisionCounts pc[4];
    for (size_t i = 0; i < hyps.size(); ++i) {
        hyp_len += static_cast<long long>(hyps[i].size());
        ref_len += static_cast<long long>(refs[i].size());
        for (int n = 1; n <= 4; ++n) {
            const PrecisionCounts c = clipped_matches(hyps[i], refs[i], n);
            pc[n - 1].matches += c.matches;
            pc[n - 1].total += c.total;
        }
    }
    double log_prec_sum = 0.0;
    for (int n = 0; n < 4; ++n) {
        if (pc[n].matches == 0 || pc[n].total == 0) return 0.0;
        log_prec_sum += std::log(static_cast<double>(pc[n].matches) /
                                 static_cast<double>(pc[n].total));
    }
    return 100.0 * brevity_penalty(hyp_len, ref_len) * std::exp(log_prec_sum / 4.0);
}

double sentence_bleu(std::span<const int> hyp, std::span<const int> ref) {
    if (ref.empty()) {
        throw UsageError("sentence_bleu: empty reference");
    }
    if (hyp.empty()) return 0.0;
    double log_prec_sum = 0.0;
    for (int n = 1; n <= 4; ++n) {
        const PrecisionCounts c = clipped_matches(hyp, ref, n);
        double p;
        if (n == 1) {
            if (c.matches == 0) return 0.0;
            p = static_cast<double>(c.matches) / static_cast<double>(c.total);
        } else {
            p = static_cast<double>(c.matches + 1) / static_cast<double>(c.total + 1);
        }
        log_prec_sum += std::log(p);
    }
    return 100.0 * brevity_penalty(static_cast<long long>(hyp.size()),
                                   static_cast<long long>(ref.size())) *
           std::exp(log_prec_sum / 4.0);
}

int edit_distance(std::span<const int> a, std::span<const int> b) {
    const size_t n = a.size(), m = b.size();
    std::vector<int> prev(m + 1), cur(m + 1);
    for (size_t j = 0; j <= m; ++j) prev[j] = static_cast<int>(j);
    for (size_t i = 1; i <= n; ++i) {
        cur[0] = static_cast<int>(i);
        for (size_t j = 1; j <= m; ++j) {
            const int sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
            cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
        }
        std::swap(prev, cur);
    }
    return prev[m];
}

std::vector<int> histogram_counts(const std::vector<double>& scores,
                                  const std::vector<double>& edges) {
    if (edges.size() < 2 || !std::is_sorted(edges.begin(), edges.end()) ||
        std::adjacent_find(edges.begin(), edges.end()) != edges.end()) {
        throw UsageError("histogram_counts: edges must be strictly increasing");
    }
    std::vector<int> counts(edges.size() - 1, 0);
    for (double s : scores) {
        if (s < edges.front() || s > edges.back()) {
            throw UsageError("histogram_counts: score " + std::to_string(s) +
                             " outside [" + std::to_string(edges.front()) + ", " +
                             std::to_string(edges.back()) + "]");
        }
        size_t bin = counts.size() - 1; // final bin closed
        for (size_t i = 0; i + 1 < edges.size(); ++i) {
            if (s >= edges[i] && s < edges[i + 1]) {
                bin = i;
                break;
            }
        }
        counts[bin] += 1;
    }
    return counts;
}

std::vector<int> decode_sample(const Seq2SeqModel& model, const ModelParams& params,
                               std::span<const int> x, const DecodeOptions& opts) {
    NoGradGuard ng;
    EncoderOutput enc = model.encode(params, x);
    if (opts.beam <= 1 && opts.length_penalty == 0.0) {
        return model.greedy_decode(params, enc, opts.max_len);
    }
    return model.beam_decode(params, enc, opts.beam, opts.length_penalty, opts.max_len);
}

namespace {

// Pairwise output BLEU, symmetrized and tolerant of empty decodes.
double pair_bleu(std::span<const int> a, std::span<const int> b) {
    if (a.empty() && b.empty()) return 100.0;
    if (a.empty() || b.empty()) return 0.0;
    return 0.5 * (sentence_bleu(a, b) + sentence_bleu(b, a));
}

std::vector<double> mean_pool_states(const EncoderOutput& enc) {
    std::vector<double> pooled(enc.states.cols(), 0.0);
    int rows = 0;
    for (int i = 0; i < enc.states.rows(); ++i) {
        if (enc.is_pad[i]) continue;
        for (int j = 0; j < enc.states.cols(); ++j) pooled[j] += enc.states.at(i, j);
        ++rows;
    }
    for (double& v : pooled) v /= std::max(rows, 1);
    return pooled;
}

} // namespace

ConsistencyReport consistency_report(const Seq2SeqModel& model, const ModelParams& params,
                                     const std::vector<EquivSet>& sets, int decode_max_len) {
    NoGradGuard ng;
    ConsistencyReport rep;
    double bleu_sum = 0.0, dist_sum = 0.0;
    long long matches = 0;
    for (const auto& set : sets) {
        if (set.i_count() < 2) {
            rep.n_skipped += 1;
            continue;
        }
        rep.n_sets += 1;
        std::vector<std::vector<int>> outs;
        std::vector<std::vector<double>> pooled;
        outs.reserve(set.x_s.size());
        for (const auto& xs : set.x_s) {
            EncoderOutput enc = model.encode(params, xs);
            outs.push_back(model.greedy_decode(params, enc, decode_max_len));
            pooled.push_back(mean_pool_states(enc));
        }
        for (size_t i = 0; i < outs.size(); ++i) {
            for (size_t j = i + 1; j < outs.size(); ++j) {
                rep.n_pairs += 1;
                if (outs[i] == outs[j]) matches += 1;
                bleu_sum += pair_bleu(outs[i], outs[j]);
                double d2 = 0.0;
                for (size_t k = 0; k < pooled[i].size(); ++k) {
                    const double d = pooled[i][k] - pooled[j][k];
                    d2 += d * d;
                }
                dist_sum += d2;
            }
        }
    }
    if (rep.n_pairs == 0) {
        throw UsageError("consistency_report: no set with at least two members");
    }
    rep.exact_match_rate = static_cast<double>(matches) / rep.n_pairs;
    rep.mean_pairwise_output_bleu = bleu_sum / rep.n_pairs;
    rep.mean_encoder_distance = dist_sum / rep.n_pairs;
    return rep;
}

DegradationCurve degradation_curve(const Seq2SeqModel& model, const ModelParams& params,
                                   const std::vector<Sample>& samples,
                                   const std::vector<std::vector<int>>& paraphrases,
                                   const std::vector<double>& proportions, uint64_t seed,
                                   const DecodeOptions& opts) {
    if (samples.empty()) {
        throw UsageError("degradation_curve: empty test set");
    }
    if (paraphrases.size() != samples.size()) {
        throw UsageError("degradation_curve: " + std::to_string(paraphrases.size()) +
                         " paraphrases for " + std::to_string(samples.size()) + " samples");
    }
    for (double p : proportions) {
        if (p < 0.0 || p > 1.0) {
            throw UsageError("degradation_curve: proportion " + std::to_string(p) +
                             " outside [0, 1]");
        }
    }
    const size_t n = samples.size();
    std::vector<std::vector<int>> hyp_orig(n), hyp_para(n);
    for (size_t i = 0; i < n; ++i) {
        hyp_orig[i] = decode_sample(model, params, samples[i].x, opts);
        hyp_para[i] = samples[i].x == paraphrases[i]
                          ? hyp_orig[i]
                          : decode_sample(model, params, paraphrases[i], opts);
    }
    std::vector<int> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = static_cast<int>(i);
    Rng rng(derive_seed(seed, "degradation"));
    rng.shuffle(order);

    std::vector<std::vector<int>> refs(n);
    for (size_t i = 0; i < n; ++i) refs[i] = samples[i].y;

    DegradationCurve curve;
    for (double p : proportions) {
        const size_t k = static_cast<size_t>(std::lround(p * static_cast<double>(n)));
        std::vector<char> replaced(n, 0);
        for (size_t i = 0; i < k; ++i) replaced[order[i]] = 1;
        std::vector<std::vector<int>> hyps(n);
        for (size_t i = 0; i < n; ++i) {
            hyps[i] = replaced[i] ? hyp_para[i] : hyp_orig[i];
        }
        curve.proportions.push_back(p);
        curve.bleu.push_back(corpus_bleu(hyps, refs));
    }
    return curve;
}

std::vector<int> bleu_histogram(const Seq2SeqModel& model, const ModelParams& params,
                                const std::vector<Sample>& samples,
                                const std::vector<double>& bin_edges, const DecodeOptions& opts) {
    std::vector<double> scores;
    scores.reserve(samples.size());
    for (const auto& s : samples) {
        scores.push_back(sentence_bleu(decode_sample(model, params, s.x, opts), s.y));
    }
    return histogram_counts(scores, bin_edges);
}

} // namespace caml
