#include "caml/adam.hpp"

#include "caml/errors.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace caml {

double AdamState::lr_at(int64_t s) const {
    const double w = static_cast<double>(cfg_.warmup_steps);
    const double sd = static_cast<double>(s);
    return cfg_.base_lr * std::sqrt(w) * std::min(1.0 / std::sqrt(sd), sd / (w * std::sqrt(w)));
}

void AdamState::step(ModelParams& params) {
    std::string missing;
    for (const auto& [path, t] : params.all()) {
        if (!t.has_grad()) {
            if (!missing.empty()) missing += ", ";
            missing += path;
        }
    }
    if (!missing.empty()) {
        throw UsageError("adam_step: missing gradient for: " + missing);
    }

    step_ += 1;
    const double lr = lr_at(step_);
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(step_));
    for (auto& [path, t] : params.all()) {
        auto& mom = moments_[path];
        if (mom.m.empty()) {
            mom.m.assign(t.size(), 0.0);
            mom.v.assign(t.size(), 0.0);
        } else if (mom.m.size() != t.size()) {
            throw ShapeError("adam_step: moment buffer for '" + path + "' has size " +
                             std::to_string(mom.m.size()) + ", parameter has " +
                             std::to_string(t.size()));
        }
        auto& vals = t.values();
        const auto& g = t.grad();
        for (size_t i = 0; i < vals.size(); ++i) {
            mom.m[i] = b1 * mom.m[i] + (1.0 - b1) * g[i];
            mom.v[i] = b2 * mom.v[i] + (1.0 - b2) * g[i] * g[i];
            const double mhat = mom.m[i] / bc1;
            const double vhat = mom.v[i] / bc2;
            vals[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            if (!std::isfinite(vals[i])) {
                throw NumericError("adam_step: parameter '" + path + "' became non-finite");
            }
        }
    }
    params.clear_grads();
}

namespace {

constexpr char kMagic[8] = {'C', 'A', 'M', 'L', 'A', 'D', 'A', 'M'};

template <typename T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw DataError("optimizer state file truncated");
    return v;
}

} // namespace

void AdamState::save(const std::filesystem::path& file) const {
    std::ofstream os(file, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open '" + file.string() + "' for writing");
    os.write(kMagic, sizeof(kMagic));
    write_pod<int64_t>(os, step_);
    write_pod(os, cfg_.base_lr);
    write_pod(os, cfg_.warmup_steps);
    write_pod(os, cfg_.beta1);
    write_pod(os, cfg_.beta2);
    write_pod(os, cfg_.eps);
    write_pod<uint64_t>(os, moments_.size());
    for (const auto& [path, mom] : moments_) {
        write_pod<uint32_t>(os, static_cast<uint32_t>(path.size()));
        os.write(path.data(), static_cast<std::streamsize>(path.size()));
        write_pod<uint64_t>(os, mom.m.size());
        os.write(reinterpret_cast<const char*>(mom.m.data()),
                 static_cast<std::streamsize>(mom.m.size() * sizeof(double)));
        os.write(reinterpret_cast<const char*>(mom.v.data()),
                 static_cast<std::streamsize>(mom.v.size() * sizeof(double)));
    }
    if (!os) throw DataError("failed writing optimizer state to '" + file.string() + "'");
}

AdamState AdamState::load(const std::filesystem::path& file) {
    std::ifstream is(file, std::ios::binary);
    if (!is) throw DataError("cannot open optimizer state '" + file.string() + "'");
    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw DataError("'" + file.string() + "' is not an optimizer state file");
    }
    const int64_t step = read_pod<int64_t>(is);
    AdamConfig cfg;
    cfg.base_lr = read_pod<double>(is);
    cfg.warmup_steps = read_pod<int64_t>(is);
    cfg.beta1 = read_pod<double>(is);
    cfg.beta2 = read_pod<double>(is);
    cfg.eps = read_pod<double>(is);
    AdamState state(cfg);
    state.step_ = step;
    const uint64_t count = read_pod<uint64_t>(is);
    for (uint64_t i = 0; i < count; ++i) {
        const uint32_t len = read_pod<uint32_t>(is);
        std::string path(len, '\0');
        is.read(path.data(), len);
        const uint64_t n = read_pod<uint64_t>(is);
        Moments mom;
        mom.m.resize(n);
        mom.v.resize(n);
        is.read(reinterpret_cast<char*>(mom.m.data()),
                static_cast<std::streamsize>(n * sizeof(double)));
        is.read(reinterpret_cast<char*>(mom.v.data()),
                static_cast<std::streamsize>(n * sizeof(double)));
        if (!is) throw DataError("optimizer state truncated in entry '" + path + "'");
        state.moments_.emplace(std::move(path), std::move(mom));
    }
    return state;
}

} // namespace caml
