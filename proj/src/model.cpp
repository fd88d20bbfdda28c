#include "caml/model.hpp"

#include "caml/errors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace caml {

namespace {

constexpr double kMaskValue = -1e30;

Tensor xavier(int rows, int cols, Rng& rng) {
    const double limit = std::sqrt(6.0 / (rows + cols));
    Tensor t = Tensor::zeros(rows, cols, true);
    for (double& v : t.values()) {
        v = (rng.uniform() * 2.0 - 1.0) * limit;
    }
    return t;
}

Tensor sinusoidal_table(int max_len, int d_model) {
    Tensor t = Tensor::zeros(max_len, d_model, false);
    for (int pos = 0; pos < max_len; ++pos) {
        for (int i = 0; i < d_model; i += 2) {
            const double angle = pos / std::pow(10000.0, static_cast<double>(i) / d_model);
            t.values()[static_cast<size_t>(pos) * d_model + i] = std::sin(angle);
            if (i + 1 < d_model) {
                t.values()[static_cast<size_t>(pos) * d_model + i + 1] = std::cos(angle);
            }
        }
    }
    return t;
}

void add_attention_params(ModelParams& p, const std::string& prefix, int d, Rng& rng) {
    for (const char* w : {"wq", "wk", "wv", "wo"}) {
        p.add(prefix + w, xavier(d, d, rng));
    }
    for (const char* b : {"bq", "bk", "bv", "bo"}) {
        p.add(prefix + b, Tensor::zeros(1, d, true));
    }
}

void add_layer_norm_params(ModelParams& p, const std::string& prefix, int d) {
    p.add(prefix + "g", Tensor::full(1, d, 1.0, true));
    p.add(prefix + "b", Tensor::zeros(1, d, true));
}

void add_ffn_params(ModelParams& p, const std::string& prefix, int d, int f, Rng& rng) {
    p.add(prefix + "w1", xavier(d, f, rng));
    p.add(prefix + "b1", Tensor::zeros(1, f, true));
    p.add(prefix + "w2", xavier(f, d, rng));
    p.add(prefix + "b2", Tensor::zeros(1, d, true));
}

// Attention mask [q_len x k_len]: 0 where attending is allowed, a large
// negative value where it is not. Built as a constant outside the tape.
Tensor build_mask(int q_len, const std::vector<uint8_t>& key_is_pad, bool causal) {
    const int k_len = static_cast<int>(key_is_pad.size());
    Tensor m = Tensor::zeros(q_len, k_len, false);
    for (int i = 0; i < q_len; ++i) {
        for (int j = 0; j < k_len; ++j) {
            const bool banned = key_is_pad[j] || (causal && j > i);
            if (banned) {
                m.values()[static_cast<size_t>(i) * k_len + j] = kMaskValue;
            }
        }
    }
    return m;
}

} // namespace

void ModelConfig::validate() const {
    if (d_model <= 0 || n_heads <= 0 || d_model % n_heads != 0) {
        throw ConfigError("model: d_model (" + std::to_string(d_model) +
                          ") must be positive and divisible by n_heads (" +
                          std::to_string(n_heads) + ")");
    }
    if (n_recon_layers < 1) {
        throw ConfigError("model: n_recon_layers must be >= 1");
    }
    if (n_enc_layers < 1 || n_dec_layers < 1 || ffn_dim < 1 || max_len < 2) {
        throw ConfigError("model: layer counts, ffn_dim and max_len must be positive");
    }
    if (dropout < 0.0 || dropout >= 1.0) {
        throw ConfigError("model: dropout must be in [0, 1)");
    }
    if (label_smoothing < 0.0 || label_smoothing >= 1.0) {
        throw ConfigError("model: label_smoothing must be in [0, 1)");
    }
}

Seq2SeqModel::Seq2SeqModel(ModelConfig cfg, Vocab src, Vocab tgt, uint64_t init_seed)
    : cfg_(cfg), src_(std::move(src)), tgt_(std::move(tgt)) {
    cfg_.validate();
    if (src_.size() < 6 || tgt_.size() < 6) {
        throw ConfigError("model: vocabularies must contain at least one non-reserved token");
    }
    Rng rng(derive_seed(init_seed, "param_init"));
    const int d = cfg_.d_model, f = cfg_.ffn_dim;

    params_.add("enc.embed", xavier(src_.size(), d, rng));
    for (int l = 0; l < cfg_.n_enc_layers; ++l) {
        const std::string p = "enc.l" + std::to_string(l) + ".";
        add_layer_norm_params(params_, p + "ln1.", d);
        add_attention_params(params_, p + "attn.", d, rng);
        add_layer_norm_params(params_, p + "ln2.", d);
        add_ffn_params(params_, p + "ffn.", d, f, rng);
    }
    add_layer_norm_params(params_, "enc.lnf.", d);

    auto add_decoder_section = [&](const std::string& section, int n_layers, int out_vocab) {
        params_.add(section + ".embed",
                    xavier(section == "dec" ? tgt_.size() : src_.size(), d, rng));
        for (int l = 0; l < n_layers; ++l) {
            const std::string p = section + ".l" + std::to_string(l) + ".";
            add_layer_norm_params(params_, p + "ln1.", d);
            add_attention_params(params_, p + "self.", d, rng);
            add_layer_norm_params(params_, p + "ln2.", d);
            add_attention_params(params_, p + "cross.", d, rng);
            add_layer_norm_params(params_, p + "ln3.", d);
            add_ffn_params(params_, p + "ffn.", d, f, rng);
        }
        add_layer_norm_params(params_, section + ".lnf.", d);
        params_.add(section + ".out.w", xavier(d, out_vocab, rng));
        params_.add(section + ".out.b", Tensor::zeros(1, out_vocab, true));
    };
    add_decoder_section("dec", cfg_.n_dec_layers, tgt_.size());
    add_decoder_section("recon", cfg_.n_recon_layers, src_.size());

    pos_ = sinusoidal_table(cfg_.max_len, d);
}

size_t Seq2SeqModel::expected_param_count() const {
    const size_t d = cfg_.d_model, f = cfg_.ffn_dim;
    const size_t vs = src_.size(), vt = tgt_.size();
    const size_t attn = 4 * (d * d + d);
    const size_t ln = 2 * d;
    const size_t ffn = d * f + f + f * d + d;
    const size_t enc_layer = attn + ffn + 2 * ln;
    const size_t dec_layer = 2 * attn + ffn + 3 * ln;
    const size_t enc = vs * d + cfg_.n_enc_layers * enc_layer + ln;
    const size_t dec = vt * d + cfg_.n_dec_layers * dec_layer + ln + d * vt + vt;
    const size_t recon = vs * d + cfg_.n_recon_layers * dec_layer + ln + d * vs + vs;
    return enc + dec + recon;
}

Tensor Seq2SeqModel::maybe_dropout(const Tensor& x, Rng* dropout) const {
    if (dropout == nullptr || cfg_.dropout == 0.0) return x;
    return dropout_mask_apply(x, make_dropout_mask(x.rows(), x.cols(), cfg_.dropout, *dropout));
}

Tensor Seq2SeqModel::embed_sequence(const ModelParams& p, const std::string& embed_path,
                                    std::span<const int> ids, Rng* dropout,
                                    int vocab_size) const {
    if (ids.empty()) {
        throw UsageError("model: cannot embed an empty sequence");
    }
    if (static_cast<int>(ids.size()) > cfg_.max_len) {
        throw UsageError("model: sequence length " + std::to_string(ids.size()) +
                         " exceeds max_len " + std::to_string(cfg_.max_len));
    }
    for (int id : ids) {
        if (id < 0 || id >= vocab_size) {
            throw UsageError("model: token id " + std::to_string(id) + " out of range [0, " +
                             std::to_string(vocab_size) + ")");
        }
    }
    Tensor x = scale(embedding_lookup(p.at(embed_path), ids), std::sqrt(double(cfg_.d_model)));
    x = add(x, slice(pos_, 0, static_cast<int>(ids.size()), 0, cfg_.d_model));
    return maybe_dropout(x, dropout);
}

Tensor Seq2SeqModel::attention(const ModelParams& p, const std::string& prefix,
                               const Tensor& q_in, const Tensor& kv_in, const Tensor& mask,
                               Rng* dropout) const {
    const int d = cfg_.d_model;
    const int dh = d / cfg_.n_heads;
    Tensor q = add(matmul(q_in, p.at(prefix + "wq")), p.at(prefix + "bq"));
    Tensor k = add(matmul(kv_in, p.at(prefix + "wk")), p.at(prefix + "bk"));
    Tensor v = add(matmul(kv_in, p.at(prefix + "wv")), p.at(prefix + "bv"));
    std::vector<Tensor> heads;
    heads.reserve(cfg_.n_heads);
    for (int h = 0; h < cfg_.n_heads; ++h) {
        Tensor qh = slice(q, 0, q.rows(), h * dh, (h + 1) * dh);
        Tensor kh = slice(k, 0, k.rows(), h * dh, (h + 1) * dh);
        Tensor vh = slice(v, 0, v.rows(), h * dh, (h + 1) * dh);
        Tensor scores = scale(matmul(qh, transpose(kh)), 1.0 / std::sqrt(double(dh)));
        Tensor weights = softmax_rows(add(scores, mask));
        heads.push_back(matmul(weights, vh));
    }
    Tensor ctx = cfg_.n_heads == 1 ? heads[0] : concat(heads, 1);
    Tensor out = add(matmul(ctx, p.at(prefix + "wo")), p.at(prefix + "bo"));
    return maybe_dropout(out, dropout);
}

Tensor Seq2SeqModel::ffn_block(const ModelParams& p, const std::string& prefix, const Tensor& x,
                               Rng* dropout) const {
    Tensor h = relu(add(matmul(x, p.at(prefix + "w1")), p.at(prefix + "b1")));
    Tensor out = add(matmul(h, p.at(prefix + "w2")), p.at(prefix + "b2"));
    return maybe_dropout(out, dropout);
}

EncoderOutput Seq2SeqModel::encode(const ModelParams& p, std::span<const int> tokens,
                                   double noise_sigma, uint64_t noise_seed, Rng* dropout) const {
    if (noise_sigma < 0.0) {
        throw UsageError("encode: noise_sigma must be >= 0");
    }
    EncoderOutput out;
    out.is_pad.reserve(tokens.size());
    for (int id : tokens) {
        out.is_pad.push_back(id == Vocab::PAD ? 1 : 0);
        if (id != Vocab::PAD) out.n_real += 1;
    }
    Tensor x = embed_sequence(p, "enc.embed", tokens, dropout, src_.size());
    const Tensor mask = build_mask(static_cast<int>(tokens.size()), out.is_pad, false);
    for (int l = 0; l < cfg_.n_enc_layers; ++l) {
        const std::string pre = "enc.l" + std::to_string(l) + ".";
        Tensor normed = layer_norm(x, p.at(pre + "ln1.g"), p.at(pre + "ln1.b"));
        x = add(x, attention(p, pre + "attn.", normed, normed, mask, dropout));
        Tensor normed2 = layer_norm(x, p.at(pre + "ln2.g"), p.at(pre + "ln2.b"));
        x = add(x, ffn_block(p, pre + "ffn.", normed2, dropout));
    }
    x = layer_norm(x, p.at("enc.lnf.g"), p.at("enc.lnf.b"));
    if (noise_sigma > 0.0 && cfg_.noise_multiplier > 0.0) {
        Rng noise_rng(noise_seed);
        const double sd = noise_sigma * cfg_.noise_multiplier;
        Tensor noise = Tensor::zeros(x.rows(), x.cols(), false);
        for (double& v : noise.values()) v = noise_rng.normal() * sd;
        x = add(x, noise);
    }
    out.states = x;
    return out;
}

Tensor Seq2SeqModel::decoder_stack(const ModelParams& p, const std::string& section, int n_layers,
                                   std::span<const int> input_ids, const EncoderOutput& enc,
                                   bool causal, int out_vocab, Rng* dropout) const {
    Tensor x = embed_sequence(p, section + ".embed", input_ids,
                              dropout, section == "dec" ? tgt_.size() : src_.size());
    const int n = static_cast<int>(input_ids.size());
    std::vector<uint8_t> self_pad(input_ids.size(), 0);
    for (size_t i = 0; i < input_ids.size(); ++i) {
        self_pad[i] = input_ids[i] == Vocab::PAD ? 1 : 0;
    }
    const Tensor self_mask = build_mask(n, self_pad, causal);
    const Tensor cross_mask = build_mask(n, enc.is_pad, false);
    for (int l = 0; l < n_layers; ++l) {
        const std::string pre = section + ".l" + std::to_string(l) + ".";
        Tensor n1 = layer_norm(x, p.at(pre + "ln1.g"), p.at(pre + "ln1.b"));
        x = add(x, attention(p, pre + "self.", n1, n1, self_mask, dropout));
        Tensor n2 = layer_norm(x, p.at(pre + "ln2.g"), p.at(pre + "ln2.b"));
        x = add(x, attention(p, pre + "cross.", n2, enc.states, cross_mask, dropout));
        Tensor n3 = layer_norm(x, p.at(pre + "ln3.g"), p.at(pre + "ln3.b"));
        x = add(x, ffn_block(p, pre + "ffn.", n3, dropout));
    }
    x = layer_norm(x, p.at(section + ".lnf.g"), p.at(section + ".lnf.b"));
    Tensor logits = add(matmul(x, p.at(section + ".out.w")), p.at(section + ".out.b"));
    (void)out_vocab;
    return logits;
}

Tensor Seq2SeqModel::decode_teacher_forced(const ModelParams& p, const EncoderOutput& enc,
                                           std::span<const int> prefix, Rng* dropout) const {
    if (prefix.empty() || prefix[0] != Vocab::BOS) {
        throw UsageError("decode_teacher_forced: target prefix must start with BOS");
    }
    return decoder_stack(p, "dec", cfg_.n_dec_layers, prefix, enc, /*causal=*/true, tgt_.size(),
                         dropout);
}

Tensor Seq2SeqModel::reconstruct(const ModelParams& p, const EncoderOutput& enc,
                                 std::span<const int> masked_tokens, Rng* dropout) const {
    return decoder_stack(p, "recon", cfg_.n_recon_layers, masked_tokens, enc, /*causal=*/false,
                         src_.size(), dropout);
}

namespace {

// Transformer decoder as a StepScorer (full recompute per step; there is
// no KV cache at this scale).
class DecoderScorer : public StepScorer {
public:
    DecoderScorer(const Seq2SeqModel& model, const ModelParams& p, const EncoderOutput& enc)
        : model_(model), p_(p), enc_(enc) {}

    int vocab_size() const override { return model_.tgt_vocab().size(); }
    int eos_id() const override { return Vocab::EOS; }

    std::vector<double> step_log_probs(const std::vector<int>& prefix) const override {
        NoGradGuard ng;
        std::vector<int> input;
        input.reserve(prefix.size() + 1);
        input.push_back(Vocab::BOS);
        input.insert(input.end(), prefix.begin(), prefix.end());
        Tensor logits = model_.decode_teacher_forced(p_, enc_, input);
        Tensor lp = log_softmax_rows(slice(logits, logits.rows() - 1, logits.rows(), 0,
                                           logits.cols()));
        return lp.values();
    }

private:
    const Seq2SeqModel& model_;
    const ModelParams& p_;
    const EncoderOutput& enc_;
};

struct Hypothesis {
    std::vector<int> tokens; // content, EOS not stored
    double raw_score = 0.0;
    double final_score = 0.0;
    int finish_step = -1;
};

double length_penalty_factor(int len, double lp) {
    return std::pow((5.0 + len) / 6.0, lp);
}

bool better_finished(const Hypothesis& a, const Hypothesis& b) {
    if (a.final_score != b.final_score) return a.final_score > b.final_score;
    if (a.finish_step != b.finish_step) return a.finish_step < b.finish_step;
    return a.tokens < b.tokens;
}

} // namespace

std::vector<int> beam_search(const StepScorer& scorer, int beam, double length_penalty,
                             int max_len) {
    if (beam < 1) {
        throw UsageError("beam_search: beam must be >= 1, got " + std::to_string(beam));
    }
    if (max_len < 1) {
        throw UsageError("beam_search: max_len must be >= 1");
    }
    const int V = scorer.vocab_size();
    const int eos = scorer.eos_id();

    std::vector<Hypothesis> live{{std::vector<int>{}, 0.0, 0.0, -1}};
    std::vector<Hypothesis> finished;

    for (int step = 0; step < max_len && !live.empty(); ++step) {
        struct Candidate {
            double raw;
            const Hypothesis* parent;
            int token;
        };
        std::vector<Candidate> cands;
        cands.reserve(live.size() * V);
        for (const auto& hyp : live) {
            const std::vector<double> lp = scorer.step_log_probs(hyp.tokens);
            for (int v = 0; v < V; ++v) {
                cands.push_back({hyp.raw_score + lp[v], &hyp, v});
            }
        }
        std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
            if (a.raw != b.raw) return a.raw > b.raw;
            if (a.parent->tokens != b.parent->tokens) return a.parent->tokens < b.parent->tokens;
            return a.token < b.token;
        });
        const size_t take = std::min<size_t>(beam, cands.size());
        std::vector<Hypothesis> next;
        next.reserve(take);
        for (size_t i = 0; i < take; ++i) {
            const Candidate& c = cands[i];
            Hypothesis h;
            h.tokens = c.parent->tokens;
            h.raw_score = c.raw;
            if (c.token == eos) {
                // len counts scored tokens including this EOS.
                const int len = static_cast<int>(h.tokens.size()) + 1;
                h.final_score = c.raw / length_penalty_factor(len, length_penalty);
                h.finish_step = step;
                finished.push_back(std::move(h));
            } else {
                h.tokens.push_back(c.token);
                next.push_back(std::move(h));
            }
        }
        live = std::move(next);
    }
    for (auto& hyp : live) {
        const int len = static_cast<int>(hyp.tokens.size());
        hyp.final_score = hyp.raw_score / length_penalty_factor(len, length_penalty);
        hyp.finish_step = max_len;
        finished.push_back(std::move(hyp));
    }
    const Hypothesis* best = nullptr;
    for (const auto& hyp : finished) {
        if (best == nullptr || better_finished(hyp, *best)) best = &hyp;
    }
    return best->tokens;
}

std::vector<int> greedy_search(const StepScorer& scorer, int max_len) {
    std::vector<int> out;
    for (int step = 0; step < max_len; ++step) {
        const std::vector<double> lp = scorer.step_log_probs(out);
        int best = 0;
        for (int v = 1; v < scorer.vocab_size(); ++v) {
            if (lp[v] > lp[best]) best = v;
        }
        if (best == scorer.eos_id()) break;
        out.push_back(best);
    }
    return out;
}

std::vector<int> Seq2SeqModel::greedy_decode(const ModelParams& p, const EncoderOutput& enc,
                                             int max_len) const {
    DecoderScorer scorer(*this, p, enc);
    return greedy_search(scorer, std::min(max_len, cfg_.max_len - 1));
}

std::vector<int> Seq2SeqModel::beam_decode(const ModelParams& p, const EncoderOutput& enc,
                                           int beam, double length_penalty, int max_len) const {
    DecoderScorer scorer(*this, p, enc);
    return beam_search(scorer, beam, length_penalty, std::min(max_len, cfg_.max_len - 1));
}

std::vector<int> Seq2SeqModel::translate(std::span<const int> tokens, int beam,
                                         double length_penalty, int max_len) const {
    NoGradGuard ng;
    EncoderOutput enc = encode(params_, tokens);
    if (beam <= 1 && length_penalty == 0.0) {
        return greedy_decode(params_, enc, max_len);
    }
    return beam_decode(params_, enc, beam, length_penalty, max_len);
}

// ---- checkpoint io ----

void save_checkpoint(const Seq2SeqModel& model, const std::filesystem::path& snap_file,
                     const std::filesystem::path& cfg_file) {
    save_snapshot(snapshot(model.params()), snap_file);
    std::ofstream os(cfg_file, std::ios::trunc);
    if (!os) {
        throw DataError("cannot open '" + cfg_file.string() + "' for writing");
    }
    const ModelConfig& c = model.config();
    os << "d_model = " << c.d_model << "\n";
    os << "n_heads = " << c.n_heads << "\n";
    os << "n_enc_layers = " << c.n_enc_layers << "\n";
    os << "n_dec_layers = " << c.n_dec_layers << "\n";
    os << "n_recon_layers = " << c.n_recon_layers << "\n";
    os << "ffn_dim = " << c.ffn_dim << "\n";
    os << "dropout = " << c.dropout << "\n";
    os << "label_smoothing = " << c.label_smoothing << "\n";
    os << "max_len = " << c.max_len << "\n";
    os << "noise_multiplier = " << c.noise_multiplier << "\n";
    os << "src_vocab = " << model.src_vocab().serialize() << "\n";
    os << "tgt_vocab = " << model.tgt_vocab().serialize() << "\n";
    os << "src_vocab_hash = " << model.src_vocab().hash() << "\n";
    os << "tgt_vocab_hash = " << model.tgt_vocab().hash() << "\n";
    if (!os) {
        throw DataError("failed writing '" + cfg_file.string() + "'");
    }
}

Seq2SeqModel load_checkpoint(const std::filesystem::path& cfg_file,
                             const std::filesystem::path& snap_file) {
    std::ifstream is(cfg_file);
    if (!is) {
        throw DataError("cannot open checkpoint sidecar '" + cfg_file.string() + "'");
    }
    ModelConfig cfg;
    Vocab src, tgt;
    uint64_t src_hash = 0, tgt_hash = 0;
    std::string line;
    while (std::getline(is, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        std::string key = line.substr(0, eq);
        std::string val = line.substr(eq + 1);
        auto trim = [](std::string& s) {
            s.erase(0, s.find_first_not_of(" \t"));
            s.erase(s.find_last_not_of(" \t") + 1);
        };
        trim(key);
        trim(val);
        if (key == "d_model") cfg.d_model = std::stoi(val);
        else if (key == "n_heads") cfg.n_heads = std::stoi(val);
        else if (key == "n_enc_layers") cfg.n_enc_layers = std::stoi(val);
        else if (key == "n_dec_layers") cfg.n_dec_layers = std::stoi(val);
        else if (key == "n_recon_layers") cfg.n_recon_layers = std::stoi(val);
        else if (key == "ffn_dim") cfg.ffn_dim = std::stoi(val);
        else if (key == "dropout") cfg.dropout = std::stod(val);
        else if (key == "label_smoothing") cfg.label_smoothing = std::stod(val);
        else if (key == "max_len") cfg.max_len = std::stoi(val);
        else if (key == "noise_multiplier") cfg.noise_multiplier = std::stod(val);
        else if (key == "src_vocab") src = Vocab::parse(val);
        else if (key == "tgt_vocab") tgt = Vocab::parse(val);
        else if (key == "src_vocab_hash") src_hash = std::stoull(val);
        else if (key == "tgt_vocab_hash") tgt_hash = std::stoull(val);
        else throw DataError("checkpoint sidecar: unknown key '" + key + "'");
    }
    if (src_hash != src.hash() || tgt_hash != tgt.hash()) {
        throw DataError("checkpoint sidecar vocab hash mismatch in '" + cfg_file.string() + "'");
    }
    Seq2SeqModel model(cfg, std::move(src), std::move(tgt), /*init_seed=*/0);
    restore(model.params(), load_snapshot(snap_file));
    return model;
}

} // namespace caml
