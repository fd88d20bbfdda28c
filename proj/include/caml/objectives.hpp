#pragma once

#include "caml/model.hpp"

#include <optional>
#include <span>

namespace caml {

struct LossWeights {
    double gamma = 1.0;           // weight of the translation loss
    double epsilon = 0.5;         // weight of the consistency regularizer
    double beta_inner_lr = 1e-4;  // inner-loop step size (one-tenth of the outer lr)
    double label_smoothing = 0.1;

    void validate() const;
};

// Shared masked positions for a sentence pair: valid in both sentences,
// never a reserved token, at least one position.
struct MaskPlan {
    std::vector<int> positions; // ascending
    uint64_t seed = 0;
};

// Smoothed token NLL over the non-PAD rows of a logits matrix:
// (1-ls) * CE(one-hot target) + ls * CE(uniform over the vocabulary).
// Mean over non-PAD targets; all-PAD targets are an error.
Tensor nll_loss(const Tensor& logits, std::span<const int> targets, double label_smoothing);

// count = max(1, round(ratio * min_len)) positions sampled uniformly
// without replacement from the shared prefix of the pair.
MaskPlan make_mask_plan(std::span<const int> x_i, std::span<const int> x_j, double ratio,
                        uint64_t seed);

// Mask seed for a support pair, derived from the pair's content so that a
// duplicated pair is masked identically within one objective evaluation.
uint64_t pair_mask_seed(uint64_t root, std::span<const int> live, std::span<const int> other);

std::vector<int> apply_mask(std::span<const int> tokens, const MaskPlan& plan);

// Sentence-level consistency: symmetric sum of the two cross-reconstruction
// NLLs (encode one sentence, reconstruct the masked positions of the other),
// each averaged over masked positions only.
Tensor sentence_loss_ls(const Seq2SeqModel& model, const ModelParams& params,
                        std::span<const int> x_i, std::span<const int> x_j, const MaskPlan& plan,
                        double label_smoothing, Rng* dropout = nullptr);

// Variant for the meta-test regularizer: the x side runs under `live`
// (gradients flow), the x_s side runs under `frozen` (value only).
Tensor sentence_loss_ls_mixed(const Seq2SeqModel& model, const ModelParams& live,
                              const ModelParams& frozen, std::span<const int> x_live,
                              std::span<const int> x_frozen, const MaskPlan& plan,
                              double label_smoothing, Rng* dropout = nullptr);

// Word-level consistency: per-step cross-entropy between the frozen
// teacher's distribution on x_ref and the live model's log-distribution on
// x_alt, both teacher-forced on y. Gradient flows only through the live
// pass.
Tensor word_loss_lw(const Seq2SeqModel& model, const ModelParams& live,
                    const ModelParams& frozen, std::span<const int> x_ref,
                    std::span<const int> x_alt, std::span<const int> y, Rng* dropout = nullptr);

struct SupportPair {
    const std::vector<int>* live;  // x_i
    const std::vector<int>* other; // the equivalent sentence paired with it
};

struct ConsistencyTerms {
    bool use_ls = true;
    bool use_lw = true;
    bool add_translation = false; // also add L_N(y, f(x_i)) per support pair
};

// Meta-train objective: sum over the sampled support pairs of L_S + L_W
// (teacher side = stop-gradient copy of the current parameters). The
// inner-loop learning rate is applied by the caller, not here.
Tensor meta_train_loss(const Seq2SeqModel& model, const ModelParams& params,
                       const std::vector<SupportPair>& pairs, std::span<const int> y,
                       const LossWeights& weights, double mask_ratio, uint64_t mask_seed_root,
                       const ConsistencyTerms& terms = {}, Rng* dropout = nullptr);

// Unweighted component values of one meta-test evaluation, for logging.
struct MetaTestParts {
    double l_n = 0.0;
    std::optional<double> l_s;
    std::optional<double> l_w;
};

// Meta-test objective: gamma * L_N(y, f_theta(x)) plus epsilon times the
// consistency terms evaluated against theta_prime (treated as a constant;
// gradients reach theta only). theta_prime may be null when epsilon == 0.
Tensor meta_test_loss(const Seq2SeqModel& model, std::span<const int> x, std::span<const int> y,
                      std::span<const int> x_s_i, const ModelParams& theta,
                      const ModelParams* theta_prime, const LossWeights& weights,
                      double mask_ratio, uint64_t mask_seed, const ConsistencyTerms& terms = {},
                      Rng* dropout_nll = nullptr, Rng* dropout_cons = nullptr,
                      MetaTestParts* parts = nullptr);

// Teacher-forced translation NLL L_N(y, f(x)) built from encode + decode.
Tensor translation_loss(const Seq2SeqModel& model, const ModelParams& params,
                        std::span<const int> x, std::span<const int> y, double label_smoothing,
                        Rng* dropout = nullptr);

// Decoder input [BOS, y...] and labels [y..., EOS].
std::vector<int> decoder_input(std::span<const int> y);
std::vector<int> decoder_labels(std::span<const int> y);

} // namespace caml
