#pragma once

#include "caml/adam.hpp"
#include "caml/params.hpp"
#include "caml/vocab.hpp"

#include <filesystem>
#include <optional>
#include <span>

namespace caml {

struct ModelConfig {
    int d_model = 32;
    int n_heads = 2;
    int n_enc_layers = 2;
    int n_dec_layers = 2;
    int n_recon_layers = 2; // parallel reconstruction head depth
    int ffn_dim = 64;
    double dropout = 0.1;
    double label_smoothing = 0.1;
    int max_len = 32;
    // Gaussian noise injected into final encoder states is standard normal
    // scaled by this multiplier times the caller's sigma.
    double noise_multiplier = 0.1;

    void validate() const;
};

struct EncoderOutput {
    Tensor states;                // [len x d_model]
    std::vector<uint8_t> is_pad;  // per position
    int n_real = 0;               // non-pad count
};

// One decoding step: full per-token log-probabilities given a prefix of
// already-emitted tokens (BOS handling is the scorer's concern). Both the
// transformer decoder and the toy models used by the search tests
// implement this.
class StepScorer {
public:
    virtual ~StepScorer() = default;
    virtual int vocab_size() const = 0;
    virtual int eos_id() const = 0;
    virtual std::vector<double> step_log_probs(const std::vector<int>& prefix) const = 0;
};

// Beam search over a StepScorer. Returns the finished hypothesis (content
// tokens, EOS stripped) maximizing sum-log-prob / ((5+len)/6)^lp, where
// len counts scored tokens including the terminating EOS. At each step the
// top `beam` candidates by raw score are selected; selected EOS
// expansions finish (so beam=1, lp=0 follows the greedy path exactly).
// Hypotheses still alive at max_len finish without EOS. Ties: earlier
// finishing step, then lexicographic token order.
std::vector<int> beam_search(const StepScorer& scorer, int beam, double length_penalty,
                             int max_len);
std::vector<int> greedy_search(const StepScorer& scorer, int max_len);

// Small pre-norm transformer encoder-decoder plus a non-autoregressive
// reconstruction head over the source vocabulary. Forward passes take the
// parameter set explicitly so the same architecture can run with inner-loop
// or frozen copies.
class Seq2SeqModel {
public:
    Seq2SeqModel(ModelConfig cfg, Vocab src, Vocab tgt, uint64_t init_seed);

    const ModelConfig& config() const { return cfg_; }
    const Vocab& src_vocab() const { return src_; }
    const Vocab& tgt_vocab() const { return tgt_; }
    ModelParams& params() { return params_; }
    const ModelParams& params() const { return params_; }

    size_t param_count() const { return params_.count_scalars(); }
    // Closed-form count implied by the config and vocab sizes.
    size_t expected_param_count() const;

    // Encodes a source id sequence. noise_sigma > 0 adds elementwise
    // Gaussian noise of sd noise_sigma * cfg.noise_multiplier to the final
    // encoder states, drawn from noise_seed. dropout != nullptr enables
    // training-mode dropout fed from that stream.
    EncoderOutput encode(const ModelParams& p, std::span<const int> tokens,
                         double noise_sigma = 0.0, uint64_t noise_seed = 0,
                         Rng* dropout = nullptr) const;

    // Teacher-forced decoder logits, one row per prefix position; row t
    // depends only on prefix positions <= t and the encoder output.
    // prefix must start with BOS.
    Tensor decode_teacher_forced(const ModelParams& p, const EncoderOutput& enc,
                                 std::span<const int> prefix, Rng* dropout = nullptr) const;

    // Non-autoregressive reconstruction logits over the source vocabulary,
    // one row per position of masked_tokens.
    Tensor reconstruct(const ModelParams& p, const EncoderOutput& enc,
                       std::span<const int> masked_tokens, Rng* dropout = nullptr) const;

    std::vector<int> greedy_decode(const ModelParams& p, const EncoderOutput& enc,
                                   int max_len) const;
    std::vector<int> beam_decode(const ModelParams& p, const EncoderOutput& enc, int beam,
                                 double length_penalty, int max_len) const;

    // Convenience: encode + decode with this model's params, no noise.
    std::vector<int> translate(std::span<const int> tokens, int beam, double length_penalty,
                               int max_len) const;

private:
    Tensor embed_sequence(const ModelParams& p, const std::string& embed_path,
                          std::span<const int> ids, Rng* dropout, int vocab_size) const;
    Tensor attention(const ModelParams& p, const std::string& prefix, const Tensor& q_in,
                     const Tensor& kv_in, const Tensor& mask, Rng* dropout) const;
    Tensor ffn_block(const ModelParams& p, const std::string& prefix, const Tensor& x,
                     Rng* dropout) const;
    Tensor maybe_dropout(const Tensor& x, Rng* dropout) const;
    Tensor decoder_stack(const ModelParams& p, const std::string& section, int n_layers,
                         std::span<const int> input_ids, const EncoderOutput& enc, bool causal,
                         int out_vocab, Rng* dropout) const;

    ModelConfig cfg_;
    Vocab src_;
    Vocab tgt_;
    ModelParams params_;
    Tensor pos_; // constant sinusoidal table [max_len x d_model]
};

// Checkpoint = binary parameter snapshot + key/value sidecar holding the
// model config and both vocabularies.
void save_checkpoint(const Seq2SeqModel& model, const std::filesystem::path& snap_file,
                     const std::filesystem::path& cfg_file);
Seq2SeqModel load_checkpoint(const std::filesystem::path& cfg_file,
                             const std::filesystem::path& snap_file);

} // namespace caml
