#include "caml/objectives.hpp"

#include "caml/errors.hpp"

#include <algorithm>
#include <cmath>

namespace caml {

void LossWeights::validate() const {
    if (gamma < 0.0 || epsilon < 0.0) {
        throw ConfigError("loss weights: gamma and epsilon must be >= 0");
    }
    if (beta_inner_lr <= 0.0) {
        throw ConfigError("loss weights: inner learning rate must be > 0");
    }
    if (label_smoothing < 0.0 || label_smoothing >= 1.0) {
        throw ConfigError("loss weights: label_smoothing must be in [0, 1)");
    }
}

std::vector<int> decoder_input(std::span<const int> y) {
    std::vector<int> out;
    out.reserve(y.size() + 1);
    out.push_back(Vocab::BOS);
    out.insert(out.end(), y.begin(), y.end());
    return out;
}

std::vector<int> decoder_labels(std::span<const int> y) {
    std::vector<int> out(y.begin(), y.end());
    out.push_back(Vocab::EOS);
    return out;
}

Tensor nll_loss(const Tensor& logits, std::span<const int> targets, double label_smoothing) {
    if (static_cast<int>(targets.size()) != logits.rows()) {
        throw ShapeError("nll_loss: " + std::to_string(targets.size()) + " targets for logits " +
                         logits.shape_str());
    }
    std::vector<int> valid_rows;
    std::vector<int> valid_targets;
    for (size_t i = 0; i < targets.size(); ++i) {
        if (targets[i] != Vocab::PAD) {
            valid_rows.push_back(static_cast<int>(i));
            valid_targets.push_back(targets[i]);
        }
    }
    if (valid_rows.empty()) {
        throw UsageError("nll_loss: all targets are PAD, loss undefined");
    }
    Tensor logp = log_softmax_rows(logits);
    Tensor sel = static_cast<int>(valid_rows.size()) == logits.rows()
                     ? logp
                     : select_rows(logp, valid_rows);
    Tensor target_term = scale(mean_all(gather_cols(sel, valid_targets)), -1.0);
    if (label_smoothing == 0.0) {
        return target_term;
    }
    Tensor uniform_term = scale(mean_all(sel), -1.0);
    return add(scale(target_term, 1.0 - label_smoothing), scale(uniform_term, label_smoothing));
}

MaskPlan make_mask_plan(std::span<const int> x_i, std::span<const int> x_j, double ratio,
                        uint64_t seed) {
    if (x_i.empty() || x_j.empty()) {
        throw UsageError("make_mask_plan: both sentences must be non-empty");
    }
    if (ratio < 0.0 || ratio > 1.0) {
        throw UsageError("make_mask_plan: ratio must be in [0, 1]");
    }
    const int min_len = static_cast<int>(std::min(x_i.size(), x_j.size()));
    std::vector<int> eligible;
    for (int p = 0; p < min_len; ++p) {
        const bool reserved = x_i[p] == Vocab::PAD || x_i[p] == Vocab::BOS ||
                              x_i[p] == Vocab::EOS || x_j[p] == Vocab::PAD ||
                              x_j[p] == Vocab::BOS || x_j[p] == Vocab::EOS;
        if (!reserved) eligible.push_back(p);
    }
    if (eligible.empty()) {
        throw UsageError("make_mask_plan: no maskable shared positions");
    }
    int count = static_cast<int>(std::lround(ratio * min_len));
    count = std::max(1, std::min(count, static_cast<int>(eligible.size())));
    Rng rng(seed);
    std::vector<int> picks = rng.sample_without_replacement(static_cast<int>(eligible.size()),
                                                            count);
    MaskPlan plan;
    plan.seed = seed;
    plan.positions.reserve(picks.size());
    for (int k : picks) plan.positions.push_back(eligible[k]);
    std::sort(plan.positions.begin(), plan.positions.end());
    return plan;
}

uint64_t pair_mask_seed(uint64_t root, std::span<const int> live, std::span<const int> other) {
    auto fnv = [](std::span<const int> ids) {
        uint64_t h = 0xcbf29ce484222325ULL;
        for (int id : ids) {
            h ^= static_cast<uint64_t>(id) + 1;
            h *= 0x100000001b3ULL;
        }
        return h;
    };
    return derive_seed(root, "pair_mask", fnv(live), fnv(other));
}

std::vector<int> apply_mask(std::span<const int> tokens, const MaskPlan& plan) {
    std::vector<int> out(tokens.begin(), tokens.end());
    for (int p : plan.positions) {
        if (p < 0 || p >= static_cast<int>(out.size())) {
            throw UsageError("apply_mask: position " + std::to_string(p) +
                             " outside sequence of length " + std::to_string(out.size()));
        }
        out[p] = Vocab::MASK;
    }
    return out;
}

namespace {

// One reconstruction direction: encode x_src, reconstruct the masked copy
// of x_tgt, score only the masked positions.
Tensor recon_direction(const Seq2SeqModel& model, const ModelParams& params,
                       std::span<const int> x_src, std::span<const int> x_tgt,
                       const MaskPlan& plan, double label_smoothing, Rng* dropout) {
    EncoderOutput enc = model.encode(params, x_src, 0.0, 0, dropout);
    const std::vector<int> masked = apply_mask(x_tgt, plan);
    Tensor logits = model.reconstruct(params, enc, masked, dropout);
    Tensor at_masked = select_rows(logits, plan.positions);
    std::vector<int> targets;
    targets.reserve(plan.positions.size());
    for (int p : plan.positions) targets.push_back(x_tgt[p]);
    return nll_loss(at_masked, targets, label_smoothing);
}

} // namespace

Tensor sentence_loss_ls(const Seq2SeqModel& model, const ModelParams& params,
                        std::span<const int> x_i, std::span<const int> x_j, const MaskPlan& plan,
                        double label_smoothing, Rng* dropout) {
    if (plan.positions.empty()) {
        throw UsageError("sentence_loss_ls: empty mask plan");
    }
    Tensor a = recon_direction(model, params, x_i, x_j, plan, label_smoothing, dropout);
    Tensor b = recon_direction(model, params, x_j, x_i, plan, label_smoothing, dropout);
    return add(a, b);
}

Tensor sentence_loss_ls_mixed(const Seq2SeqModel& model, const ModelParams& live,
                              const ModelParams& frozen, std::span<const int> x_live,
                              std::span<const int> x_frozen, const MaskPlan& plan,
                              double label_smoothing, Rng* dropout) {
    if (plan.positions.empty()) {
        throw UsageError("sentence_loss_ls_mixed: empty mask plan");
    }
    Tensor a = recon_direction(model, live, x_live, x_frozen, plan, label_smoothing, dropout);
    Tensor b;
    {
        NoGradGuard ng;
        b = recon_direction(model, frozen, x_frozen, x_live, plan, label_smoothing, nullptr);
    }
    return add(a, b);
}

Tensor word_loss_lw(const Seq2SeqModel& model, const ModelParams& live,
                    const ModelParams& frozen, std::span<const int> x_ref,
                    std::span<const int> x_alt, std::span<const int> y, Rng* dropout) {
    const std::vector<int> prefix = decoder_input(y);
    Tensor teacher_probs;
    {
        NoGradGuard ng;
        EncoderOutput enc_t = model.encode(frozen, x_ref);
        teacher_probs = softmax_rows(model.decode_teacher_forced(frozen, enc_t, prefix));
    }
    EncoderOutput enc = model.encode(live, x_alt, 0.0, 0, dropout);
    Tensor live_logp = log_softmax_rows(model.decode_teacher_forced(live, enc, prefix, dropout));
    if (teacher_probs.rows() != live_logp.rows() || teacher_probs.cols() != live_logp.cols()) {
        throw ShapeError("word_loss_lw: teacher " + teacher_probs.shape_str() + " vs live " +
                         live_logp.shape_str());
    }
    const double n_steps = static_cast<double>(live_logp.rows());
    return scale(sum_all(mul(teacher_probs, live_logp)), -1.0 / n_steps);
}

Tensor meta_train_loss(const Seq2SeqModel& model, const ModelParams& params,
                       const std::vector<SupportPair>& pairs, std::span<const int> y,
                       const LossWeights& weights, double mask_ratio, uint64_t mask_seed_root,
                       const ConsistencyTerms& terms, Rng* dropout) {
    if (pairs.empty()) {
        throw UsageError("meta_train_loss: empty support pair list");
    }
    Tensor total;
    for (size_t t = 0; t < pairs.size(); ++t) {
        const auto& pr = pairs[t];
        Tensor pair_loss;
        bool have = false;
        if (terms.use_ls) {
            const MaskPlan plan = make_mask_plan(*pr.live, *pr.other, mask_ratio,
                                                 pair_mask_seed(mask_seed_root, *pr.live,
                                                                *pr.other));
            pair_loss = sentence_loss_ls(model, params, *pr.live, *pr.other, plan,
                                         weights.label_smoothing, dropout);
            have = true;
        }
        if (terms.use_lw) {
            Tensor lw = word_loss_lw(model, params, params, *pr.other, *pr.live, y, dropout);
            pair_loss = have ? add(pair_loss, lw) : lw;
            have = true;
        }
        if (terms.add_translation) {
            Tensor ln = translation_loss(model, params, *pr.live, y, weights.label_smoothing,
                                         dropout);
            pair_loss = have ? add(pair_loss, ln) : ln;
            have = true;
        }
        if (!have) {
            throw UsageError("meta_train_loss: no loss terms enabled");
        }
        total = t == 0 ? pair_loss : add(total, pair_loss);
    }
    return total;
}

Tensor translation_loss(const Seq2SeqModel& model, const ModelParams& params,
                        std::span<const int> x, std::span<const int> y, double label_smoothing,
                        Rng* dropout) {
    EncoderOutput enc = model.encode(params, x, 0.0, 0, dropout);
    const std::vector<int> prefix = decoder_input(y);
    Tensor logits = model.decode_teacher_forced(params, enc, prefix, dropout);
    const std::vector<int> labels = decoder_labels(y);
    return nll_loss(logits, labels, label_smoothing);
}

Tensor meta_test_loss(const Seq2SeqModel& model, std::span<const int> x, std::span<const int> y,
                      std::span<const int> x_s_i, const ModelParams& theta,
                      const ModelParams* theta_prime, const LossWeights& weights,
                      double mask_ratio, uint64_t mask_seed, const ConsistencyTerms& terms,
                      Rng* dropout_nll, Rng* dropout_cons, MetaTestParts* parts) {
    weights.validate();
    Tensor ln = translation_loss(model, theta, x, y, weights.label_smoothing, dropout_nll);
    if (parts) parts->l_n = ln.item();
    Tensor total = scale(ln, weights.gamma);
    if (weights.epsilon == 0.0) {
        return total;
    }
    if (theta_prime == nullptr) {
        throw UsageError("meta_test_loss: epsilon > 0 requires inner-loop parameters");
    }
    Tensor cons;
    bool have = false;
    if (terms.use_ls) {
        const MaskPlan plan = make_mask_plan(x, x_s_i, mask_ratio, mask_seed);
        cons = sentence_loss_ls_mixed(model, theta, *theta_prime, x, x_s_i, plan,
                                      weights.label_smoothing, dropout_cons);
        if (parts) parts->l_s = cons.item();
        have = true;
    }
    if (terms.use_lw) {
        Tensor lw = word_loss_lw(model, theta, *theta_prime, x_s_i, x, y, dropout_cons);
        if (parts) parts->l_w = lw.item();
        cons = have ? add(cons, lw) : lw;
        have = true;
    }
    if (!have) {
        return total;
    }
    return add(total, scale(cons, weights.epsilon));
}

} // namespace caml
