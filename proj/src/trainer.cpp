#include "caml/trainer.hpp"

#include "caml/errors.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

namespace caml {

TrainMode parse_mode(const std::string& name) {
    if (name == "baseline") return TrainMode::baseline;
    if (name == "aug") return TrainMode::aug;
    if (name == "mtl") return TrainMode::mtl;
    if (name == "maml") return TrainMode::maml;
    if (name == "caml") return TrainMode::caml;
    throw ConfigError("unknown training mode '" + name +
                      "' (expected baseline, aug, mtl, maml or caml)");
}

std::string mode_name(TrainMode mode) {
    switch (mode) {
        case TrainMode::baseline: return "baseline";
        case TrainMode::aug: return "aug";
        case TrainMode::mtl: return "mtl";
        case TrainMode::maml: return "maml";
        case TrainMode::caml: return "caml";
    }
    throw UsageError("mode_name: bad enum value");
}

void TrainConfig::validate() const {
    if (epochs_pretrain < 0 || epochs_main < 0) {
        throw ConfigError("train: epoch counts must be >= 0");
    }
    if (equiv_i < 1) {
        throw ConfigError("train: equiv_i must be >= 1");
    }
    if (batch_size < 1 || grad_accum < 1) {
        throw ConfigError("train: batch_size and grad_accum must be >= 1");
    }
    if (gamma < 0.0 || epsilon < 0.0) {
        throw ConfigError("train: gamma and epsilon must be >= 0");
    }
    if (mask_ratio < 0.0 || mask_ratio > 1.0) {
        throw ConfigError("train: mask_ratio must be in [0, 1]");
    }
    if (label_smoothing < 0.0 || label_smoothing >= 1.0) {
        throw ConfigError("train: label_smoothing must be in [0, 1)");
    }
    if (resolved_inner_lr() <= 0.0) {
        throw ConfigError("train: inner learning rate must be > 0");
    }
    if ((mode == TrainMode::caml || mode == TrainMode::mtl) && !use_ls && !use_lw) {
        throw ConfigError("train: caml/mtl need at least one of the consistency losses");
    }
    if (eval_every < 0 || dev_decode_max_len < 2) {
        throw ConfigError("train: eval_every must be >= 0 and dev_decode_max_len >= 2");
    }
}

StepLogger::StepLogger(const std::filesystem::path& file) : os_(file, std::ios::app) {
    if (!os_) {
        throw DataError("cannot open training log '" + file.string() + "'");
    }
}

void StepLogger::log(int64_t step, const std::string& phase, const std::string& mode, int epoch,
                     double loss, std::optional<double> l_n, std::optional<double> l_s,
                     std::optional<double> l_w, double lr, double wall_ms) {
    nlohmann::json rec;
    rec["step"] = step;
    rec["phase"] = phase;
    rec["mode"] = mode;
    rec["epoch"] = epoch;
    rec["loss"] = loss;
    if (l_n) rec["L_N"] = *l_n;
    if (l_s) rec["L_S"] = *l_s;
    if (l_w) rec["L_W"] = *l_w;
    rec["lr"] = lr;
    rec["wall_ms"] = wall_ms;
    os_ << rec.dump() << '\n';
    os_.flush();
}

DevMetrics evaluate_dev(const Seq2SeqModel& model, const ModelParams& params,
                        const DevData& dev, int decode_max_len) {
    NoGradGuard ng;
    DevMetrics out;
    if (!dev.samples.empty()) {
        std::vector<std::vector<int>> hyps, refs;
        long long correct = 0, total = 0;
        for (const auto& s : dev.samples) {
            EncoderOutput enc = model.encode(params, s.x);
            hyps.push_back(model.greedy_decode(params, enc, decode_max_len));
            refs.push_back(s.y);
            const std::vector<int> prefix = decoder_input(s.y);
            const std::vector<int> labels = decoder_labels(s.y);
            Tensor logits = model.decode_teacher_forced(params, enc, prefix);
            for (int t = 0; t < logits.rows(); ++t) {
                int argmax = 0;
                for (int v = 1; v < logits.cols(); ++v) {
                    if (logits.at(t, v) > logits.at(t, argmax)) argmax = v;
                }
                correct += argmax == labels[t] ? 1 : 0;
                total += 1;
            }
        }
        out.bleu = corpus_bleu(hyps, refs);
        out.token_acc = total > 0 ? static_cast<double>(correct) / total : 0.0;
    }
    if (!dev.oracle_sets.empty()) {
        out.exact_match =
            consistency_report(model, params, dev.oracle_sets, decode_max_len).exact_match_rate;
    }
    return out;
}

TrainSession::TrainSession(Seq2SeqModel& model, TrainConfig cfg)
    : model_(model), cfg_(cfg), adam_(cfg.adam) {
    cfg_.validate();
}

TrainSession::TrainSession(Seq2SeqModel& model, TrainConfig cfg, AdamState adam, int epochs_done)
    : model_(model), cfg_(cfg), adam_(std::move(adam)), epochs_done_(epochs_done) {
    cfg_.validate();
}

Rng TrainSession::dropout_rng(const char* stream, int64_t step, int k) const {
    return Rng(derive_seed(cfg_.seed, stream, static_cast<uint64_t>(step),
                           static_cast<uint64_t>(k)));
}

TrainSession::SampleLosses TrainSession::baseline_loss(std::span<const int> x,
                                                       std::span<const int> y, double scale_by,
                                                       int64_t step, int k) {
    Rng drop = dropout_rng("drop_nll", step, k);
    Rng* dp = model_.config().dropout > 0.0 ? &drop : nullptr;
    Tensor loss = translation_loss(model_, model_.params(), x, y, cfg_.label_smoothing, dp);
    backward(scale(loss, scale_by));
    SampleLosses out;
    out.total = loss.item();
    out.l_n = loss.item();
    return out;
}

TrainSession::SampleLosses TrainSession::mtl_loss(const EquivSet& equiv, double scale_by,
                                                  int64_t step, int k) {
    if (equiv.i_count() < 2) {
        throw DataError("mtl: every sample needs an equivalence set with I >= 2");
    }
    Rng drop_nll = dropout_rng("drop_nll", step, k);
    Rng drop_cons = dropout_rng("drop_cons", step, k);
    Rng* dn = model_.config().dropout > 0.0 ? &drop_nll : nullptr;
    Rng* dc = model_.config().dropout > 0.0 ? &drop_cons : nullptr;

    Tensor ln = translation_loss(model_, model_.params(), equiv.x, equiv.y,
                                 cfg_.label_smoothing, dn);
    // one ordered support pair per step, same stream family as the inner loop
    Rng pick(derive_seed(cfg_.seed, "mtl_pair", static_cast<uint64_t>(step),
                         static_cast<uint64_t>(k)));
    const int I = equiv.i_count();
    const int a = pick.uniform_int(I);
    int b = pick.uniform_int(I - 1);
    if (b >= a) b += 1;

    SampleLosses out;
    out.l_n = ln.item();
    Tensor total = scale(ln, cfg_.gamma);
    Tensor cons;
    bool have = false;
    if (cfg_.use_ls) {
        const MaskPlan plan =
            make_mask_plan(equiv.x_s[a], equiv.x_s[b], cfg_.mask_ratio,
                           pair_mask_seed(derive_seed(cfg_.seed, "mtl_mask",
                                                      static_cast<uint64_t>(step),
                                                      static_cast<uint64_t>(k)),
                                          equiv.x_s[a], equiv.x_s[b]));
        cons = sentence_loss_ls(model_, model_.params(), equiv.x_s[a], equiv.x_s[b], plan,
                                cfg_.label_smoothing, dc);
        out.l_s = cons.item();
        have = true;
    }
    if (cfg_.use_lw) {
        Tensor lw = word_loss_lw(model_, model_.params(), model_.params(), equiv.x_s[b],
                                 equiv.x_s[a], equiv.y, dc);
        out.l_w = lw.item();
        cons = have ? add(cons, lw) : lw;
        have = true;
    }
    total = add(total, scale(cons, cfg_.epsilon));
    backward(scale(total, scale_by));
    out.total = total.item();
    return out;
}

TrainSession::SampleLosses TrainSession::maml_loss(const EquivSet& equiv, double scale_by,
                                                   int64_t step, int k) {
    const uint64_t inner_seed = derive_seed(cfg_.seed, "inner", static_cast<uint64_t>(step),
                                            static_cast<uint64_t>(k));
    // meta-train: one SGD step on the mean support translation loss
    ModelParams theta_prime = model_.params().clone(true);
    {
        Rng drop(derive_seed(inner_seed, "drop"));
        Rng* dp = model_.config().dropout > 0.0 ? &drop : nullptr;
        Tensor support;
        for (int i = 0; i < equiv.i_count(); ++i) {
            Tensor ln = translation_loss(model_, theta_prime, equiv.x_s[i], equiv.y,
                                         cfg_.label_smoothing, dp);
            support = i == 0 ? ln : add(support, ln);
        }
        support = scale(support, 1.0 / equiv.i_count());
        theta_prime.zero_grad();
        backward(support);
        const double beta = cfg_.resolved_inner_lr();
        for (auto& [path, t] : theta_prime.all()) {
            auto& vals = t.values();
            const auto& g = t.grad();
            for (size_t i = 0; i < vals.size(); ++i) vals[i] -= beta * g[i];
        }
        theta_prime.clear_grads();
    }
    // meta-test: translation loss at theta', gradient applied to theta
    Rng drop = dropout_rng("drop_nll", step, k);
    Rng* dp = model_.config().dropout > 0.0 ? &drop : nullptr;
    Tensor outer = translation_loss(model_, theta_prime, equiv.x, equiv.y,
                                    cfg_.label_smoothing, dp);
    theta_prime.zero_grad();
    backward(scale(outer, scale_by));
    for (auto& [path, t] : model_.params().all()) {
        const Tensor& src = theta_prime.at(path);
        if (!src.has_grad()) continue;
        auto& dst = t.grad();
        const auto& g = src.grad();
        for (size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
    }
    SampleLosses out;
    out.total = outer.item();
    out.l_n = outer.item();
    return out;
}

ModelParams TrainSession::inner_loop(const Seq2SeqModel& model, const ModelParams& theta,
                                     const EquivSet& equiv, int t_steps, double beta,
                                     uint64_t seed, const TrainConfig& cfg) {
    if (t_steps < 0) {
        throw UsageError("inner_loop: T must be >= 0");
    }
    if (equiv.i_count() < 2) {
        throw UsageError("inner_loop: equivalence set needs at least two members");
    }
    ModelParams theta_prime = theta.clone(true);
    if (t_steps == 0 || beta == 0.0) {
        return theta_prime;
    }
    const int I = equiv.i_count();
    std::vector<std::pair<int, int>> all_pairs;
    for (int i = 0; i < I; ++i) {
        for (int j = 0; j < I; ++j) {
            if (i != j) all_pairs.push_back({i, j});
        }
    }
    ConsistencyTerms terms;
    terms.use_ls = cfg.use_ls;
    terms.use_lw = cfg.use_lw;
    terms.add_translation = cfg.inner_add_translation;
    LossWeights weights;
    weights.label_smoothing = cfg.label_smoothing;
    weights.beta_inner_lr = beta;

    std::vector<std::pair<int, int>> order;
    uint64_t round = 0;
    for (int t = 0; t < t_steps; ++t) {
        if (order.empty()) {
            order = all_pairs;
            Rng shuffle_rng(derive_seed(seed, "pairs", round++));
            shuffle_rng.shuffle(order);
        }
        const auto [live_idx, other_idx] = order.back();
        order.pop_back();

        Rng drop(derive_seed(seed, "drop", t));
        Rng* dp = model.config().dropout > 0.0 ? &drop : nullptr;
        std::vector<SupportPair> pair{{&equiv.x_s[live_idx], &equiv.x_s[other_idx]}};
        Tensor loss = meta_train_loss(model, theta_prime, pair, equiv.y, weights,
                                      cfg.mask_ratio, derive_seed(seed, "mask", t), terms, dp);
        theta_prime.zero_grad();
        backward(loss);
        for (auto& [path, t_param] : theta_prime.all()) {
            auto& vals = t_param.values();
            const auto& g = t_param.grad();
            for (size_t i = 0; i < vals.size(); ++i) vals[i] -= beta * g[i];
        }
        theta_prime.clear_grads();
    }
    return theta_prime;
}

TrainSession::SampleLosses TrainSession::caml_loss(const EquivSet& equiv, double scale_by,
                                                   int64_t step, int k) {
    LossWeights weights;
    weights.gamma = cfg_.gamma;
    weights.epsilon = cfg_.epsilon;
    weights.label_smoothing = cfg_.label_smoothing;
    weights.beta_inner_lr = cfg_.resolved_inner_lr();
    ConsistencyTerms terms;
    terms.use_ls = cfg_.use_ls;
    terms.use_lw = cfg_.use_lw;

    std::optional<ModelParams> theta_prime;
    std::optional<int> pick;
    if (cfg_.epsilon > 0.0) {
        const uint64_t inner_seed = derive_seed(cfg_.seed, "inner", static_cast<uint64_t>(step),
                                                static_cast<uint64_t>(k));
        theta_prime = inner_loop(model_, model_.params(), equiv, cfg_.resolved_inner_steps(),
                                 cfg_.resolved_inner_lr(), inner_seed, cfg_);
        // regularizer input: uniform over the generated members, falling
        // back to x when the set holds nothing else
        Rng pick_rng(derive_seed(cfg_.seed, "regpick", static_cast<uint64_t>(step),
                                 static_cast<uint64_t>(k)));
        pick = equiv.i_count() > 1 ? 1 + pick_rng.uniform_int(equiv.i_count() - 1) : 0;
    }

    Rng drop_nll = dropout_rng("drop_nll", step, k);
    Rng drop_cons = dropout_rng("drop_cons", step, k);
    Rng* dn = model_.config().dropout > 0.0 ? &drop_nll : nullptr;
    Rng* dc = model_.config().dropout > 0.0 ? &drop_cons : nullptr;

    const std::vector<int>& x_s_i = pick ? equiv.x_s[*pick] : equiv.x;
    Tensor loss = meta_test_loss(model_, equiv.x, equiv.y, x_s_i, model_.params(),
                                 theta_prime ? &*theta_prime : nullptr, weights, cfg_.mask_ratio,
                                 derive_seed(cfg_.seed, "mask_test", static_cast<uint64_t>(step),
                                             static_cast<uint64_t>(k)),
                                 terms, dn, dc);
    backward(scale(loss, scale_by));

    SampleLosses out;
    out.total = loss.item();
    // component values recomputed cheaply for the log
    {
        NoGradGuard ng;
        out.l_n = translation_loss(model_, model_.params(), equiv.x, equiv.y,
                                   cfg_.label_smoothing)
                      .item();
        if (theta_prime) {
            if (cfg_.use_ls) {
                const MaskPlan plan = make_mask_plan(
                    equiv.x, x_s_i, cfg_.mask_ratio,
                    derive_seed(cfg_.seed, "mask_test", static_cast<uint64_t>(step),
                                static_cast<uint64_t>(k)));
                out.l_s = sentence_loss_ls_mixed(model_, model_.params(), *theta_prime, equiv.x,
                                                 x_s_i, plan, cfg_.label_smoothing)
                              .item();
            }
            if (cfg_.use_lw) {
                out.l_w = word_loss_lw(model_, model_.params(), *theta_prime, x_s_i, equiv.x,
                                       equiv.y)
                              .item();
            }
        }
    }
    return out;
}

TrainSession::SampleLosses TrainSession::accumulate_sample(TrainMode mode, const EquivSet& equiv,
                                                           double scale_by, int64_t step,
                                                           int k) {
    switch (mode) {
        case TrainMode::baseline:
        case TrainMode::aug:
            return baseline_loss(equiv.x, equiv.y, scale_by, step, k);
        case TrainMode::mtl:
            return mtl_loss(equiv, scale_by, step, k);
        case TrainMode::maml:
            return maml_loss(equiv, scale_by, step, k);
        case TrainMode::caml:
            return caml_loss(equiv, scale_by, step, k);
    }
    throw UsageError("accumulate_sample: bad mode");
}

void TrainSession::run_epochs(const std::string& phase, int first_epoch, int n_epochs,
                              TrainMode mode, const std::vector<EquivSet>& data,
                              const DevData* dev, StepLogger* log, const EpochCallback& cb) {
    if (data.empty()) {
        throw DataError("training: empty corpus");
    }
    const int n = static_cast<int>(data.size());
    const int effective_batch = cfg_.batch_size * cfg_.grad_accum;
    for (int epoch = first_epoch; epoch < first_epoch + n_epochs; ++epoch) {
        std::vector<int> order(n);
        std::iota(order.begin(), order.end(), 0);
        Rng shuffle_rng(derive_seed(cfg_.seed, "order", static_cast<uint64_t>(epoch)));
        shuffle_rng.shuffle(order);

        double epoch_loss = 0.0;
        int64_t epoch_samples = 0;
        for (int start = 0; start < n; start += effective_batch) {
            const auto t0 = std::chrono::steady_clock::now();
            const int batch_n = std::min(effective_batch, n - start);
            const int64_t step = adam_.step_count() + 1;
            model_.params().zero_grad();
            double batch_loss = 0.0, sum_ln = 0.0, sum_ls = 0.0, sum_lw = 0.0;
            int n_ln = 0, n_ls = 0, n_lw = 0;
            for (int k = 0; k < batch_n; ++k) {
                const EquivSet& sample = data[order[start + k]];
                SampleLosses losses =
                    accumulate_sample(mode, sample, 1.0 / batch_n, step, k);
                batch_loss += losses.total;
                if (losses.l_n) {
                    sum_ln += *losses.l_n;
                    ++n_ln;
                }
                if (losses.l_s) {
                    sum_ls += *losses.l_s;
                    ++n_ls;
                }
                if (losses.l_w) {
                    sum_lw += *losses.l_w;
                    ++n_lw;
                }
            }
            adam_.step(model_.params());
            epoch_loss += batch_loss;
            epoch_samples += batch_n;
            if (log) {
                const double wall_ms = std::chrono::duration<double, std::milli>(
                                           std::chrono::steady_clock::now() - t0)
                                           .count();
                log->log(adam_.step_count(), phase, mode_name(mode), epoch,
                         batch_loss / batch_n,
                         n_ln ? std::optional<double>(sum_ln / n_ln) : std::nullopt,
                         n_ls ? std::optional<double>(sum_ls / n_ls) : std::nullopt,
                         n_lw ? std::optional<double>(sum_lw / n_lw) : std::nullopt,
                         adam_.lr_at(adam_.step_count()), wall_ms);
            }
        }

        EpochReport report;
        report.phase = phase;
        report.epoch = epoch;
        report.mean_loss = epoch_loss / static_cast<double>(epoch_samples);
        if (dev && cfg_.eval_every > 0 && ((epoch + 1) % cfg_.eval_every == 0)) {
            report.dev = evaluate_dev(model_, model_.params(), *dev, cfg_.dev_decode_max_len);
        }
        history_.push_back(report);
        epochs_done_ = epoch + 1;
        if (cb) cb(report);
    }
}

void TrainSession::pretrain(const std::vector<Sample>& corpus, const DevData* dev,
                            StepLogger* log, const EpochCallback& cb) {
    std::vector<EquivSet> wrapped;
    wrapped.reserve(corpus.size());
    for (const auto& s : corpus) {
        EquivSet e;
        e.x = s.x;
        e.y = s.y;
        e.x_s.push_back(s.x);
        wrapped.push_back(std::move(e));
    }
    const int remaining = cfg_.epochs_pretrain - epochs_done_;
    if (remaining <= 0) return;
    run_epochs("pretrain", epochs_done_, remaining, TrainMode::baseline, wrapped, dev, log, cb);
}

void TrainSession::train(const std::vector<EquivSet>& data, const DevData* dev, StepLogger* log,
                         const EpochCallback& cb) {
    const int target = cfg_.epochs_pretrain + cfg_.epochs_main;
    const int remaining = target - epochs_done_;
    if (remaining <= 0) return;

    if (cfg_.mode == TrainMode::aug) {
        // augmented corpus: the original pairs plus every generated
        // source paired with the same reference
        std::vector<EquivSet> expanded;
        for (const auto& e : data) {
            EquivSet base;
            base.x = e.x;
            base.y = e.y;
            base.x_s.push_back(e.x);
            expanded.push_back(base);
            for (int i = 0; i < e.i_count(); ++i) {
                if (e.x_s[i] == e.x) continue;
                EquivSet extra;
                extra.x = e.x_s[i];
                extra.y = e.y;
                extra.x_s.push_back(extra.x);
                expanded.push_back(std::move(extra));
            }
        }
        run_epochs("main", epochs_done_, remaining, TrainMode::aug, expanded, dev, log, cb);
        return;
    }
    run_epochs("main", epochs_done_, remaining, cfg_.mode, data, dev, log, cb);
}

void TrainSession::caml_step(const EquivSet& equiv) {
    const int64_t step = adam_.step_count() + 1;
    model_.params().zero_grad();
    caml_loss(equiv, 1.0, step, 0);
    adam_.step(model_.params());
}

} // namespace caml
