#include "caml/objectives.hpp"

#include "oracles.hpp"

#include <doctest.h>

#include <cmath>

using namespace caml;

namespace {

Vocab make_vocab(int n_tokens, const std::string& prefix) {
    Vocab v;
    for (int i = 0; i < n_tokens; ++i) v.add(prefix + std::to_string(i));
    return v;
}

Seq2SeqModel tiny_model(uint64_t seed = 5) {
    ModelConfig cfg;
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.n_enc_layers = 1;
    cfg.n_dec_layers = 1;
    cfg.n_recon_layers = 1;
    cfg.ffn_dim = 20;
    cfg.dropout = 0.0;
    cfg.max_len = 16;
    return Seq2SeqModel(cfg, make_vocab(6, "s"), make_vocab(6, "t"), seed);
}

} // namespace

TEST_CASE("nll on uniform logits equals ln V for any smoothing") {
    const int V = 7;
    Tensor logits = Tensor::full(3, V, 0.4);
    std::vector<int> targets{5, 6, 5};
    for (double ls : {0.0, 0.1, 0.5}) {
        CHECK(nll_loss(logits, targets, ls).item() ==
              doctest::Approx(std::log(double(V))).epsilon(1e-13));
    }
}

TEST_CASE("nll approaches zero for a confident correct prediction") {
    Tensor logits = Tensor::from(1, 3, {0.0, 40.0, 0.0});
    std::vector<int> t{1};
    CHECK(nll_loss(logits, t, 0.0).item() < 1e-15);
}

TEST_CASE("nll hand-computed smoothed value") {
    // vocab 3, one logit raised by 1 on the target class, ls = 0.1
    Tensor logits = Tensor::from(1, 3, {0.0, 1.0, 0.0});
    std::vector<int> t{1};
    const double z = std::exp(1.0) + 2.0;
    const double lp_target = 1.0 - std::log(z);
    const double lp_other = -std::log(z);
    const double expected = -(0.9 * lp_target + 0.1 * (lp_target + 2 * lp_other) / 3.0);
    CHECK(nll_loss(logits, t, 0.1).item() == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("nll excludes PAD targets and rejects all-PAD") {
    Tensor logits = Tensor::from(3, 4, {1, 0, 0, 0, 0, 2, 0, 0, 0, 0, 3, 0});
    std::vector<int> with_pad{1, Vocab::PAD, 2};
    std::vector<int> no_pad_rows{0, 2};
    Tensor sel = select_rows(logits, no_pad_rows);
    std::vector<int> no_pad{1, 2};
    CHECK(nll_loss(logits, with_pad, 0.1).item() ==
          doctest::Approx(nll_loss(sel, no_pad, 0.1).item()).epsilon(1e-14));
    std::vector<int> all_pad{Vocab::PAD, Vocab::PAD, Vocab::PAD};
    CHECK_THROWS_AS(nll_loss(logits, all_pad, 0.1), UsageError);
}

TEST_CASE("mask plan obeys the count rule and stays in the shared prefix") {
    std::vector<int> xi{5, 6, 7, 8, 9, 5, 6, 7, 8, 9};
    std::vector<int> xj{9, 8, 7, 6, 5, 9};

    // ratio 0 -> floor of one position
    MaskPlan p0 = make_mask_plan(xi, xj, 0.0, 1);
    CHECK(p0.positions.size() == 1);

    // ratio 1 -> all shared positions
    MaskPlan p1 = make_mask_plan(xi, xj, 1.0, 1);
    CHECK(p1.positions.size() == 6);

    // lengths (10, 6), ratio 0.5 -> 3 positions, all < 6
    MaskPlan p = make_mask_plan(xi, xj, 0.5, 7);
    CHECK(p.positions.size() == 3);
    for (int pos : p.positions) CHECK(pos < 6);

    // deterministic per seed
    MaskPlan q = make_mask_plan(xi, xj, 0.5, 7);
    CHECK(p.positions == q.positions);
}

TEST_CASE("mask plan never touches reserved positions") {
    std::vector<int> xi{Vocab::EOS, 5, 6};
    std::vector<int> xj{5, 6, 7};
    for (uint64_t seed = 0; seed < 20; ++seed) {
        MaskPlan p = make_mask_plan(xi, xj, 1.0, seed);
        for (int pos : p.positions) CHECK(pos != 0);
    }
}

TEST_CASE("sentence loss is exactly symmetric under pair swap") {
    Seq2SeqModel m = tiny_model();
    std::vector<int> xi{5, 6, 7, 8};
    std::vector<int> xj{7, 5, 6, 9};
    MaskPlan plan = make_mask_plan(xi, xj, 0.5, 3);
    const double a = sentence_loss_ls(m, m.params(), xi, xj, plan, 0.1).item();
    const double b = sentence_loss_ls(m, m.params(), xj, xi, plan, 0.1).item();
    CHECK(a == b);
}

TEST_CASE("sentence loss rejects an empty mask plan") {
    Seq2SeqModel m = tiny_model();
    std::vector<int> xi{5, 6};
    MaskPlan empty;
    CHECK_THROWS_AS(sentence_loss_ls(m, m.params(), xi, xi, empty, 0.1), UsageError);
}

TEST_CASE("sentence loss on hand-set toy logits matches a scalar recomputation") {
    // The oracle recomputes the two masked-NLL directions from raw logits
    // produced by the same forward passes, using plain scalar math.
    Seq2SeqModel m = tiny_model(11);
    std::vector<int> xi{5, 6, 7, 8};
    std::vector<int> xj{6, 5, 8, 9};
    MaskPlan plan = make_mask_plan(xi, xj, 0.5, 13);
    const double ls = 0.1;
    const double got = sentence_loss_ls(m, m.params(), xi, xj, plan, ls).item();

    NoGradGuard ng;
    auto direction = [&](std::span<const int> src, std::span<const int> tgt) {
        EncoderOutput enc = m.encode(m.params(), src);
        std::vector<int> masked = apply_mask(tgt, plan);
        Tensor logits = m.reconstruct(m.params(), enc, masked);
        double total = 0.0;
        for (int pos : plan.positions) {
            // scalar log-softmax of the row
            double mx = -1e300;
            for (int v = 0; v < logits.cols(); ++v) mx = std::max(mx, logits.at(pos, v));
            double z = 0.0;
            for (int v = 0; v < logits.cols(); ++v) z += std::exp(logits.at(pos, v) - mx);
            const double lse = mx + std::log(z);
            double sum_lp = 0.0;
            for (int v = 0; v < logits.cols(); ++v) sum_lp += logits.at(pos, v) - lse;
            const double lp_target = logits.at(pos, tgt[pos]) - lse;
            total += -(1.0 - ls) * lp_target - ls * sum_lp / logits.cols();
        }
        return total / static_cast<double>(plan.positions.size());
    };
    const double expected = direction(xi, xj) + direction(xj, xi);
    CHECK(got == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("degenerate self-pair sentence loss falls with overfitting") {
    Seq2SeqModel m = tiny_model(21);
    AdamConfig acfg;
    acfg.base_lr = 3e-3;
    acfg.warmup_steps = 20;
    AdamState adam(acfg);
    std::vector<int> x{5, 6, 7, 8};
    MaskPlan plan = make_mask_plan(x, x, 0.5, 3);
    const double before = sentence_loss_ls(m, m.params(), x, x, plan, 0.0).item();
    for (int step = 0; step < 120; ++step) {
        m.params().zero_grad();
        Tensor loss = sentence_loss_ls(m, m.params(), x, x, plan, 0.0);
        backward(loss);
        adam.step(m.params());
    }
    const double after = sentence_loss_ls(m, m.params(), x, x, plan, 0.0).item();
    CHECK(after < before);
    CHECK(after < 0.05);
}

TEST_CASE("word loss on a self pair equals mean predictive entropy") {
    Seq2SeqModel m = tiny_model(31);
    std::vector<int> x{5, 6, 7};
    std::vector<int> y{5, 6};
    const double lw = word_loss_lw(m, m.params(), m.params(), x, x, y).item();

    NoGradGuard ng;
    EncoderOutput enc = m.encode(m.params(), x);
    const std::vector<int> prefix = decoder_input(y);
    Tensor probs = softmax_rows(m.decode_teacher_forced(m.params(), enc, prefix));
    double entropy = 0.0;
    for (int i = 0; i < probs.rows(); ++i) {
        for (int j = 0; j < probs.cols(); ++j) {
            const double p = probs.at(i, j);
            entropy += -p * std::log(p);
        }
    }
    entropy /= probs.rows();
    CHECK(lw == doctest::Approx(entropy).epsilon(1e-9));
}

TEST_CASE("word loss hand-computed from fixed distributions") {
    // Two steps with teacher p = (0.5, 0.25, 0.25) and live q shifted:
    // L_W = mean over steps of -sum p log q.
    std::vector<double> p{0.5, 0.25, 0.25};
    std::vector<double> q{0.25, 0.5, 0.25};
    double expected = 0.0;
    for (int j = 0; j < 3; ++j) expected += -p[j] * std::log(q[j]);
    // replicate via the tensor path used by word_loss_lw internals
    Tensor teacher = Tensor::from(2, 3, {p[0], p[1], p[2], p[0], p[1], p[2]});
    std::vector<double> logq{std::log(q[0]), std::log(q[1]), std::log(q[2])};
    Tensor live_logp = Tensor::from(2, 3, {logq[0], logq[1], logq[2],
                                           logq[0], logq[1], logq[2]});
    Tensor loss = scale(sum_all(mul(teacher, live_logp)), -1.0 / 2.0);
    CHECK(loss.item() == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("word loss gradient never reaches the frozen pass") {
    Seq2SeqModel m = tiny_model(41);
    ModelParams frozen = m.params().clone(/*requires_grad=*/false);
    std::vector<int> x_ref{5, 6, 7};
    std::vector<int> x_alt{6, 5, 7};
    std::vector<int> y{5, 6};
    m.params().zero_grad();
    Tensor loss = word_loss_lw(m, m.params(), frozen, x_ref, x_alt, y);
    backward(loss);
    for (const auto& [path, t] : frozen.all()) {
        CHECK_FALSE(t.has_grad());
    }
    // live gradients match finite differences with the teacher held fixed
    double worst = oracles::model_fd_max_rel_error(
        m.params(),
        [&] { return word_loss_lw(m, m.params(), frozen, x_ref, x_alt, y).item(); },
        [] {});
    CHECK(worst < 1e-4);
}

TEST_CASE("meta-train loss composes additively over support pairs") {
    Seq2SeqModel m = tiny_model(51);
    std::vector<int> a{5, 6, 7};
    std::vector<int> b{6, 7, 5};
    std::vector<int> y{5, 6};
    LossWeights w;
    w.label_smoothing = 0.1;

    std::vector<SupportPair> one{{&a, &b}};
    std::vector<SupportPair> two{{&a, &b}, {&a, &b}};
    const double l1 = meta_train_loss(m, m.params(), one, y, w, 0.3, 77).item();
    const double l2 = meta_train_loss(m, m.params(), two, y, w, 0.3, 77).item();
    CHECK(l2 == doctest::Approx(2.0 * l1).epsilon(1e-12));

    // T=1 equals L_S + L_W for that pair
    MaskPlan plan = make_mask_plan(a, b, 0.3, pair_mask_seed(77, a, b));
    const double ls = sentence_loss_ls(m, m.params(), a, b, plan, 0.1).item();
    const double lw = word_loss_lw(m, m.params(), m.params(), b, a, y).item();
    CHECK(l1 == doctest::Approx(ls + lw).epsilon(1e-12));

    std::vector<SupportPair> none;
    CHECK_THROWS_AS(meta_train_loss(m, m.params(), none, y, w, 0.3, 77), UsageError);
}

TEST_CASE("meta-test loss with epsilon 0 reduces to gamma * L_N") {
    Seq2SeqModel m = tiny_model(61);
    std::vector<int> x{5, 6, 7};
    std::vector<int> y{6, 7};
    LossWeights w;
    w.gamma = 1.0;
    w.epsilon = 0.0;
    const double got =
        meta_test_loss(m, x, y, x, m.params(), nullptr, w, 0.3, 5).item();
    const double ln = translation_loss(m, m.params(), x, y, w.label_smoothing).item();
    CHECK(got == ln);

    w.gamma = 2.5;
    const double got2 =
        meta_test_loss(m, x, y, x, m.params(), nullptr, w, 0.3, 5).item();
    CHECK(got2 == 2.5 * ln);
}

TEST_CASE("meta-test loss requires inner parameters when epsilon > 0") {
    Seq2SeqModel m = tiny_model(62);
    std::vector<int> x{5, 6};
    std::vector<int> y{6};
    LossWeights w; // epsilon 0.5 default
    CHECK_THROWS_AS(meta_test_loss(m, x, y, x, m.params(), nullptr, w, 0.3, 5), UsageError);
}

TEST_CASE("meta-test degenerate case reduces to the self-pair components") {
    Seq2SeqModel m = tiny_model(63);
    ModelParams theta_prime = m.params().clone(true);
    std::vector<int> x{5, 6, 7};
    std::vector<int> y{6, 7};
    LossWeights w; // gamma 1, epsilon 0.5
    const uint64_t mask_seed = 17;
    const double got =
        meta_test_loss(m, x, y, x, m.params(), &theta_prime, w, 0.3, mask_seed).item();

    const double ln = translation_loss(m, m.params(), x, y, w.label_smoothing).item();
    MaskPlan plan = make_mask_plan(x, x, 0.3, mask_seed);
    const double ls = sentence_loss_ls(m, m.params(), x, x, plan, w.label_smoothing).item();
    const double lw = word_loss_lw(m, m.params(), m.params(), x, x, y).item();
    CHECK(got == doctest::Approx(1.0 * ln + 0.5 * (ls + lw)).epsilon(1e-12));
}

TEST_CASE("scaling gamma and epsilon by powers of two scales loss and grads exactly") {
    Seq2SeqModel m = tiny_model(64);
    ModelParams theta_prime = m.params().clone(true);
    std::vector<int> x{5, 6, 7};
    std::vector<int> y{6, 7};
    LossWeights w;
    w.gamma = 1.0;
    w.epsilon = 0.5;

    m.params().clear_grads();
    Tensor l1 = meta_test_loss(m, x, y, x, m.params(), &theta_prime, w, 0.3, 3);
    backward(l1);
    std::map<std::string, std::vector<double>> g1;
    for (auto& [path, t] : m.params().all()) g1[path] = t.grad();
    m.params().clear_grads();

    LossWeights w2 = w;
    w2.gamma *= 2.0;
    w2.epsilon *= 2.0;
    Tensor l2 = meta_test_loss(m, x, y, x, m.params(), &theta_prime, w2, 0.3, 3);
    backward(l2);
    CHECK(l2.item() == 2.0 * l1.item());
    for (auto& [path, t] : m.params().all()) {
        const auto& a = g1[path];
        const auto& b = t.grad();
        for (size_t i = 0; i < a.size(); ++i) {
            CHECK(b[i] == 2.0 * a[i]);
        }
    }
}

TEST_CASE("every composite loss is finite and non-negative on random params") {
    Seq2SeqModel m = tiny_model(65);
    ModelParams theta_prime = m.params().clone(true);
    std::vector<int> x{5, 6, 7, 8};
    std::vector<int> xs{6, 5, 7, 9};
    std::vector<int> y{6, 7, 8};
    LossWeights w;
    MaskPlan plan = make_mask_plan(x, xs, 0.3, 2);
    for (double v : {translation_loss(m, m.params(), x, y, 0.1).item(),
                     sentence_loss_ls(m, m.params(), x, xs, plan, 0.1).item(),
                     word_loss_lw(m, m.params(), m.params(), x, xs, y).item(),
                     meta_test_loss(m, x, y, xs, m.params(), &theta_prime, w, 0.3, 2).item()}) {
        CHECK(std::isfinite(v));
        CHECK(v >= 0.0);
    }
}

TEST_CASE("composite loss gradients match finite differences") {
    Seq2SeqModel m = tiny_model(66);
    std::vector<int> x{5, 6, 7};
    std::vector<int> xs{6, 5, 7};
    std::vector<int> y{6, 7};
    LossWeights w;
    ModelParams theta_prime = m.params().clone(true);
    // perturb theta_prime so the frozen side is genuinely different
    {
        Rng rng(7);
        for (auto& [path, t] : theta_prime.all()) {
            for (double& v : t.values()) v += 0.01 * rng.normal();
        }
    }

    SUBCASE("translation loss") {
        m.params().clear_grads();
        Tensor loss = translation_loss(m, m.params(), x, y, 0.1);
        backward(loss);
        const double worst = oracles::model_fd_max_rel_error(
            m.params(), [&] { return translation_loss(m, m.params(), x, y, 0.1).item(); },
            [] {});
        CHECK(worst < 1e-4);
    }
    SUBCASE("sentence loss") {
        MaskPlan plan = make_mask_plan(x, xs, 0.5, 4);
        m.params().clear_grads();
        Tensor loss = sentence_loss_ls(m, m.params(), x, xs, plan, 0.1);
        backward(loss);
        const double worst = oracles::model_fd_max_rel_error(
            m.params(),
            [&] { return sentence_loss_ls(m, m.params(), x, xs, plan, 0.1).item(); }, [] {});
        CHECK(worst < 1e-4);
    }
    SUBCASE("meta-test loss with theta_prime held fixed") {
        m.params().clear_grads();
        Tensor loss = meta_test_loss(m, x, y, xs, m.params(), &theta_prime, w, 0.5, 9);
        backward(loss);
        const double worst = oracles::model_fd_max_rel_error(
            m.params(),
            [&] {
                return meta_test_loss(m, x, y, xs, m.params(), &theta_prime, w, 0.5, 9).item();
            },
            [] {});
        CHECK(worst < 1e-3);
    }
}
