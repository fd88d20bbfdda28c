#pragma once

#include "caml/params.hpp"

#include <cstdint>
#include <filesystem>
#include <map>

namespace caml {

struct AdamConfig {
    double base_lr = 1e-3;
    int64_t warmup_steps = 4000;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-8;
};

// Adam with inverse-square-root warmup. The effective learning rate at
// step s is base_lr * sqrt(warmup) * min(s^-1/2, s * warmup^-3/2), which
// peaks at exactly base_lr when s == warmup_steps.
class AdamState {
public:
    explicit AdamState(AdamConfig cfg) : cfg_(cfg) {}

    double lr_at(int64_t s) const;
    int64_t step_count() const { return step_; }
    const AdamConfig& config() const { return cfg_; }

    // One update over every parameter. Requires a populated gradient on
    // each (error lists missing paths); increments the step counter and
    // clears gradients afterwards.
    void step(ModelParams& params);

    void save(const std::filesystem::path& file) const;
    static AdamState load(const std::filesystem::path& file);

private:
    AdamConfig cfg_;
    int64_t step_ = 0;
    struct Moments {
        std::vector<double> m;
        std::vector<double> v;
    };
    std::map<std::string, Moments> moments_;
};

} // namespace caml
