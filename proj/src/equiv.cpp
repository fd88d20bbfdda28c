#include "caml/equiv.hpp"

#include "caml/errors.hpp"
#include "caml/metrics.hpp"
#include "caml/rng.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

namespace caml {

void GenConfig::validate() const {
    if (replace_ratio <= 0.0 || replace_ratio > 1.0) {
        throw ConfigError("gen: replace_ratio must be in (0, 1]");
    }
    if (top_k < 1 || j_samples < 1 || em_iters < 1 || decode_max_len < 2) {
        throw ConfigError("gen: top_k, j_samples, em_iters and decode_max_len must be positive");
    }
    if (select_count < 0 || select_count >= j_samples + 1) {
        throw ConfigError("gen: select_count must be in [0, j_samples]");
    }
    if (noise_sigma < 0.0) {
        throw ConfigError("gen: noise_sigma must be >= 0");
    }
}

uint64_t GenConfig::hash() const {
    uint64_t h = derive_seed(0x9e3779b9, "gen_config");
    auto mix = [&h](uint64_t v) { h = derive_seed(h, "f", v); };
    mix(static_cast<uint64_t>(replace_ratio * 1e9));
    mix(static_cast<uint64_t>(top_k));
    mix(static_cast<uint64_t>(j_samples));
    mix(static_cast<uint64_t>(select_count));
    mix(static_cast<uint64_t>(noise_sigma * 1e9));
    mix(static_cast<uint64_t>(em_iters));
    mix(static_cast<uint64_t>(decode_max_len));
    return h;
}

AlignTable train_aligner(const std::vector<Sample>& corpus, int src_vocab_size,
                         int tgt_vocab_size, int em_iters, int top_k) {
    if (corpus.empty()) {
        throw DataError("train_aligner: empty corpus");
    }
    if (em_iters < 1) {
        throw ConfigError("train_aligner: at least one EM iteration required");
    }
    AlignTable table;
    table.src_size = src_vocab_size;
    table.tgt_size = tgt_vocab_size;
    table.top_k = top_k;
    table.probs.assign(static_cast<size_t>(src_vocab_size) * tgt_vocab_size, 0.0);
    table.seen.assign(src_vocab_size, 0);

    // init: uniform over co-occurring target words
    std::vector<std::set<int>> cooc(src_vocab_size);
    for (const auto& s : corpus) {
        for (int e : s.x) {
            table.seen[e] = 1;
            for (int f : s.y) cooc[e].insert(f);
        }
    }
    for (int e = 0; e < src_vocab_size; ++e) {
        if (cooc[e].empty()) continue;
        const double p = 1.0 / static_cast<double>(cooc[e].size());
        for (int f : cooc[e]) table.probs[static_cast<size_t>(e) * tgt_vocab_size + f] = p;
    }

    std::vector<double> counts(table.probs.size());
    for (int iter = 0; iter < em_iters; ++iter) {
        std::fill(counts.begin(), counts.end(), 0.0);
        double loglik = 0.0;
        for (const auto& s : corpus) {
            for (int f : s.y) {
                double denom = 0.0;
                for (int e : s.x) denom += table.prob(e, f);
                if (denom <= 0.0) {
                    throw NumericError("train_aligner: zero alignment mass for a target word");
                }
                loglik += std::log(denom / static_cast<double>(s.x.size()));
                for (int e : s.x) {
                    counts[static_cast<size_t>(e) * tgt_vocab_size + f] +=
                        table.prob(e, f) / denom;
                }
            }
        }
        table.em_loglik.push_back(loglik);
        for (int e = 0; e < src_vocab_size; ++e) {
            double total = 0.0;
            for (int f = 0; f < tgt_vocab_size; ++f) {
                total += counts[static_cast<size_t>(e) * tgt_vocab_size + f];
            }
            if (total <= 0.0) continue;
            for (int f = 0; f < tgt_vocab_size; ++f) {
                table.probs[static_cast<size_t>(e) * tgt_vocab_size + f] =
                    counts[static_cast<size_t>(e) * tgt_vocab_size + f] / total;
            }
        }
    }
    // final log-likelihood under the last update
    {
        double loglik = 0.0;
        for (const auto& s : corpus) {
            for (int f : s.y) {
                double denom = 0.0;
                for (int e : s.x) denom += table.prob(e, f);
                loglik += std::log(denom / static_cast<double>(s.x.size()));
            }
        }
        table.em_loglik.push_back(loglik);
    }

    // similar-word lists via shared-translation similarity
    table.candidates.assign(src_vocab_size, {});
    for (int w = Vocab::RESERVED; w < src_vocab_size; ++w) {
        if (!table.seen[w]) continue;
        std::vector<std::pair<double, int>> sims;
        for (int v = Vocab::RESERVED; v < src_vocab_size; ++v) {
            if (v == w || !table.seen[v]) continue;
            double sim = 0.0;
            for (int f = 0; f < tgt_vocab_size; ++f) {
                sim += table.prob(w, f) * table.prob(v, f);
            }
            if (sim > 0.0) sims.push_back({sim, v});
        }
        std::sort(sims.begin(), sims.end(), [](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first > b.first;
            return a.second < b.second;
        });
        const size_t keep = std::min<size_t>(top_k, sims.size());
        for (size_t i = 0; i < keep; ++i) table.candidates[w].push_back(sims[i].second);
    }
    return table;
}

void AlignTable::save(const std::filesystem::path& file) const {
    std::ofstream os(file, std::ios::trunc);
    if (!os) throw DataError("cannot open '" + file.string() + "' for writing");
    os << src_size << ' ' << tgt_size << ' ' << top_k << ' ' << em_loglik.size() << '\n';
    os.precision(17);
    for (double ll : em_loglik) os << ll << '\n';
    for (int e = 0; e < src_size; ++e) {
        if (!seen[e]) continue;
        for (int f = 0; f < tgt_size; ++f) {
            const double p = prob(e, f);
            if (p > 0.0) os << e << ' ' << f << ' ' << p << '\n';
        }
    }
    if (!os) throw DataError("failed writing '" + file.string() + "'");
}

AlignTable AlignTable::load(const std::filesystem::path& file) {
    std::ifstream is(file);
    if (!is) throw DataError("cannot open alignment table '" + file.string() + "'");
    AlignTable t;
    size_t n_ll = 0;
    if (!(is >> t.src_size >> t.tgt_size >> t.top_k >> n_ll)) {
        throw DataError("malformed alignment table header in '" + file.string() + "'");
    }
    t.em_loglik.resize(n_ll);
    for (double& ll : t.em_loglik) {
        if (!(is >> ll)) throw DataError("truncated alignment table '" + file.string() + "'");
    }
    t.probs.assign(static_cast<size_t>(t.src_size) * t.tgt_size, 0.0);
    t.seen.assign(t.src_size, 0);
    int e, f;
    double p;
    while (is >> e >> f >> p) {
        if (e < 0 || e >= t.src_size || f < 0 || f >= t.tgt_size) {
            throw DataError("alignment table entry out of range in '" + file.string() + "'");
        }
        t.probs[static_cast<size_t>(e) * t.tgt_size + f] = p;
        t.seen[e] = 1;
    }
    // rebuild candidate lists exactly as train_aligner does
    t.candidates.assign(t.src_size, {});
    for (int w = Vocab::RESERVED; w < t.src_size; ++w) {
        if (!t.seen[w]) continue;
        std::vector<std::pair<double, int>> sims;
        for (int v = Vocab::RESERVED; v < t.src_size; ++v) {
            if (v == w || !t.seen[v]) continue;
            double sim = 0.0;
            for (int g = 0; g < t.tgt_size; ++g) sim += t.prob(w, g) * t.prob(v, g);
            if (sim > 0.0) sims.push_back({sim, v});
        }
        std::sort(sims.begin(), sims.end(), [](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first > b.first;
            return a.second < b.second;
        });
        const size_t keep = std::min<size_t>(t.top_k, sims.size());
        for (size_t i = 0; i < keep; ++i) t.candidates[w].push_back(sims[i].second);
    }
    return t;
}

std::vector<int> substitute_words(std::span<const int> x, const AlignTable& table,
                                  const GenConfig& cfg, uint64_t seed, SubstituteStats* stats) {
    if (x.empty()) {
        throw UsageError("substitute_words: empty sentence");
    }
    std::vector<int> out(x.begin(), x.end());
    std::vector<int> eligible;
    for (size_t i = 0; i < x.size(); ++i) {
        if (!Vocab::is_reserved(x[i])) eligible.push_back(static_cast<int>(i));
    }
    if (eligible.empty()) return out;
    const int want = static_cast<int>(std::ceil(cfg.replace_ratio * double(x.size())));
    const int count = std::min<int>(want, static_cast<int>(eligible.size()));
    Rng rng(seed);
    std::vector<int> picks = rng.sample_without_replacement(static_cast<int>(eligible.size()),
                                                            count);
    std::sort(picks.begin(), picks.end());
    for (int k : picks) {
        const int pos = eligible[k];
        const auto& cands = table.candidates[x[pos]];
        if (cands.empty()) {
            if (stats) stats->skipped_no_candidates += 1;
            continue;
        }
        out[pos] = cands[rng.uniform_int(static_cast<int>(cands.size()))];
        if (stats) stats->replaced += 1;
    }
    return out;
}

std::vector<RoundTripCandidate> noisy_round_trip(std::span<const int> x_sub,
                                                 const Seq2SeqModel& fwd,
                                                 const Seq2SeqModel& bwd, const GenConfig& cfg,
                                                 uint64_t seed) {
    NoGradGuard ng;
    std::vector<RoundTripCandidate> out;
    for (int j = 0; j < cfg.j_samples; ++j) {
        EncoderOutput enc = fwd.encode(fwd.params(), x_sub, cfg.noise_sigma,
                                       derive_seed(seed, "rt_noise", j));
        RoundTripCandidate cand;
        cand.pivot = fwd.greedy_decode(fwd.params(), enc, cfg.decode_max_len);
        if (cand.pivot.empty()) continue; // degenerate decode dropped
        EncoderOutput benc = bwd.encode(bwd.params(), cand.pivot);
        cand.source = bwd.greedy_decode(bwd.params(), benc, cfg.decode_max_len);
        if (cand.source.empty()) continue;
        out.push_back(std::move(cand));
    }
    return out;
}

std::vector<double> score_candidates(const std::vector<std::vector<int>>& y_primes,
                                     std::span<const int> y) {
    std::vector<double> weights;
    weights.reserve(y_primes.size());
    std::set<int> y_set(y.begin(), y.end());
    for (const auto& yp : y_primes) {
        const size_t max_len = std::max(yp.size(), y.size());
        if (max_len == 0) {
            weights.push_back(0.0);
            continue;
        }
        const double ed = static_cast<double>(edit_distance(yp, y)) /
                          static_cast<double>(max_len);
        std::set<int> yp_set(yp.begin(), yp.end());
        std::vector<int> inter, uni;
        std::set_intersection(y_set.begin(), y_set.end(), yp_set.begin(), yp_set.end(),
                              std::back_inserter(inter));
        std::set_union(y_set.begin(), y_set.end(), yp_set.begin(), yp_set.end(),
                       std::back_inserter(uni));
        const double overlap =
            uni.empty() ? 0.0
                        : static_cast<double>(inter.size()) / static_cast<double>(uni.size());
        weights.push_back(ed * overlap);
    }
    return weights;
}

EquivSet build_equiv_set(std::span<const int> x, std::span<const int> y,
                         const Seq2SeqModel& fwd, const Seq2SeqModel& bwd,
                         const AlignTable& table, const GenConfig& cfg, uint64_t seed) {
    cfg.validate();
    EquivSet set;
    set.x.assign(x.begin(), x.end());
    set.y.assign(y.begin(), y.end());
    set.gen_seed = seed;
    set.x_s.push_back(set.x);
    if (cfg.select_count == 0) {
        return set;
    }

    const std::vector<int> x_sub = substitute_words(x, table, cfg, derive_seed(seed, "subst"));
    const std::vector<RoundTripCandidate> cands =
        noisy_round_trip(x_sub, fwd, bwd, cfg, derive_seed(seed, "round_trip"));
    std::vector<std::vector<int>> pivots;
    pivots.reserve(cands.size());
    for (const auto& c : cands) pivots.push_back(c.pivot);
    const std::vector<double> weights = score_candidates(pivots, y);

    std::vector<int> order(cands.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (weights[a] != weights[b]) return weights[a] > weights[b];
        return a < b;
    });
    for (int idx : order) {
        if (static_cast<int>(set.x_s.size()) > cfg.select_count) break;
        if (weights[idx] <= 0.0) break; // identical or disjoint pivots are never selected
        set.x_s.push_back(cands[idx].source);
        set.weights.push_back(weights[idx]);
    }
    // pad with step-1-only substitutions when too few candidates survived
    for (uint64_t k = 0; static_cast<int>(set.x_s.size()) < cfg.select_count + 1; ++k) {
        set.x_s.push_back(substitute_words(x, table, cfg, derive_seed(seed, "pad", k)));
        set.weights.push_back(0.0);
    }
    return set;
}

} // namespace caml
