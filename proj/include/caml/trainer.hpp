#pragma once

#include "caml/adam.hpp"
#include "caml/data.hpp"
#include "caml/metrics.hpp"
#include "caml/model.hpp"
#include "caml/objectives.hpp"

#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>

namespace caml {

enum class TrainMode { baseline, aug, mtl, maml, caml };

TrainMode parse_mode(const std::string& name);
std::string mode_name(TrainMode mode);

struct TrainConfig {
    int epochs_pretrain = 2;
    int epochs_main = 2;
    int equiv_i = 2;        // I, members per equivalence set
    int inner_steps = -1;   // T; negative resolves to 2*I
    double inner_lr = -1.0; // beta; negative resolves to base_lr / 10
    AdamConfig adam;
    double gamma = 1.0;
    double epsilon = 0.5;
    double mask_ratio = 0.15;
    double label_smoothing = 0.1;
    int batch_size = 8;
    int grad_accum = 1;
    uint64_t seed = 1;
    TrainMode mode = TrainMode::caml;
    bool use_ls = true;
    bool use_lw = true;
    bool inner_add_translation = false; // translation loss added to the meta-train objective
    int eval_every = 1;                 // dev evaluation every k epochs, 0 disables
    int dev_decode_max_len = 24;

    int resolved_inner_steps() const { return inner_steps >= 0 ? inner_steps : 2 * equiv_i; }
    double resolved_inner_lr() const {
        return inner_lr > 0.0 ? inner_lr : adam.base_lr / 10.0;
    }
    void validate() const;
};

// One structured record per optimizer step, appended as NDJSON.
class StepLogger {
public:
    explicit StepLogger(const std::filesystem::path& file);
    void log(int64_t step, const std::string& phase, const std::string& mode, int epoch,
             double loss, std::optional<double> l_n, std::optional<double> l_s,
             std::optional<double> l_w, double lr, double wall_ms);

private:
    std::ofstream os_;
};

struct DevMetrics {
    double bleu = 0.0;
    double token_acc = 0.0;
    std::optional<double> exact_match;
};

struct EpochReport {
    std::string phase;
    int epoch = 0;
    double mean_loss = 0.0;
    std::optional<DevMetrics> dev;
};

struct DevData {
    std::vector<Sample> samples;
    std::vector<EquivSet> oracle_sets; // may be empty; enables the consistency metric
};

// Teacher-forced next-token accuracy plus greedy corpus BLEU (and
// exact-match consistency when oracle sets are given).
DevMetrics evaluate_dev(const Seq2SeqModel& model, const ModelParams& params,
                        const DevData& dev, int decode_max_len);

// Drives parameter updates for one model. Global epoch and step counters
// span the pretraining phase and the mode phase, so (pretrain E1; baseline
// E2) walks the same trajectory as (pretrain E1+E2), and a resumed session
// continues bit-identically.
class TrainSession {
public:
    TrainSession(Seq2SeqModel& model, TrainConfig cfg);
    // Resume: counters and optimizer state from a checkpoint.
    TrainSession(Seq2SeqModel& model, TrainConfig cfg, AdamState adam, int epochs_done);

    const TrainConfig& config() const { return cfg_; }
    AdamState& adam() { return adam_; }
    int64_t global_step() const { return adam_.step_count(); }
    int epochs_done() const { return epochs_done_; }
    const std::vector<EpochReport>& history() const { return history_; }

    using EpochCallback = std::function<void(const EpochReport&)>;

    // Phase 1 (epochs [0, epochs_pretrain)): plain translation-loss Adam.
    void pretrain(const std::vector<Sample>& corpus, const DevData* dev = nullptr,
                  StepLogger* log = nullptr, const EpochCallback& cb = {});

    // Phase 2 (epochs [epochs_pretrain, epochs_pretrain + epochs_main)):
    // dispatch on cfg.mode.
    void train(const std::vector<EquivSet>& data, const DevData* dev = nullptr,
               StepLogger* log = nullptr, const EpochCallback& cb = {});

    // One outer update on a single equivalence sample (batch of one).
    void caml_step(const EquivSet& equiv);

    // T successive plain-gradient-descent steps, each on one sampled
    // support pair's consistency losses; theta itself is untouched.
    static ModelParams inner_loop(const Seq2SeqModel& model, const ModelParams& theta,
                                  const EquivSet& equiv, int t_steps, double beta, uint64_t seed,
                                  const TrainConfig& cfg);

private:
    struct SampleLosses {
        double total = 0.0;
        std::optional<double> l_n, l_s, l_w;
    };

    SampleLosses accumulate_sample(TrainMode mode, const EquivSet& equiv, double scale,
                                   int64_t step, int k);
    SampleLosses baseline_loss(std::span<const int> x, std::span<const int> y, double scale,
                               int64_t step, int k);
    SampleLosses mtl_loss(const EquivSet& equiv, double scale, int64_t step, int k);
    SampleLosses maml_loss(const EquivSet& equiv, double scale, int64_t step, int k);
    SampleLosses caml_loss(const EquivSet& equiv, double scale, int64_t step, int k);

    void run_epochs(const std::string& phase, int first_epoch, int n_epochs, TrainMode mode,
                    const std::vector<EquivSet>& data, const DevData* dev, StepLogger* log,
                    const EpochCallback& cb);

    Rng dropout_rng(const char* stream, int64_t step, int k) const;

    Seq2SeqModel& model_;
    TrainConfig cfg_;
    AdamState adam_;
    int epochs_done_ = 0;
    std::vector<EpochReport> history_;
};

} // namespace caml
