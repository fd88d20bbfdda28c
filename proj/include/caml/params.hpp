#pragma once

#include "caml/tensor.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace caml {

// Named collection of trainable parameters. Paths are unique, iteration
// order is sorted (stable across snapshot/restore and serialization).
// Role prefixes: "enc." encoder, "dec." decoder, "recon." reconstruction
// head.
class ModelParams {
public:
    Tensor& add(const std::string& path, Tensor t);
    Tensor& at(const std::string& path);
    const Tensor& at(const std::string& path) const;
    bool contains(const std::string& path) const { return params_.count(path) > 0; }

    const std::map<std::string, Tensor>& all() const { return params_; }
    std::map<std::string, Tensor>& all() { return params_; }
    size_t count() const { return params_.size(); }
    size_t count_scalars() const;

    // Deep copy with fresh graph leaves. requires_grad=false yields a
    // frozen teacher copy whose forward passes record no tape.
    ModelParams clone(bool requires_grad = true) const;

    void zero_grad();
    void clear_grads();

private:
    std::map<std::string, Tensor> params_;
};

struct ParamSnapshot {
    struct Entry {
        std::string path;
        int rows = 0;
        int cols = 0;
        std::vector<double> values;
    };
    std::vector<Entry> entries; // sorted by path
};

ParamSnapshot snapshot(const ModelParams& params);
// Makes every parameter bit-identical to snapshot time. Optimizer state
// is not part of a snapshot. Incompatible paths or shapes -> error.
void restore(ModelParams& params, const ParamSnapshot& snap);

// Flat binary file: magic, version, count, then per parameter
// path length + path bytes + shape + little-endian float64 values.
// Round trips bit-exactly.
void save_snapshot(const ParamSnapshot& snap, const std::filesystem::path& file);
ParamSnapshot load_snapshot(const std::filesystem::path& file);

// Largest |a - b| over all parameters; 0 means bit-identical values.
double max_abs_diff(const ModelParams& a, const ModelParams& b);

} // namespace caml
