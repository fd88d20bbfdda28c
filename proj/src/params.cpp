#include "caml/params.hpp"

#include "caml/errors.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

namespace caml {

Tensor& ModelParams::add(const std::string& path, Tensor t) {
    auto [it, inserted] = params_.emplace(path, std::move(t));
    if (!inserted) {
        throw UsageError("ModelParams::add: duplicate path '" + path + "'");
    }
    return it->second;
}

Tensor& ModelParams::at(const std::string& path) {
    auto it = params_.find(path);
    if (it == params_.end()) {
        throw UsageError("ModelParams::at: no parameter '" + path + "'");
    }
    return it->second;
}

const Tensor& ModelParams::at(const std::string& path) const {
    auto it = params_.find(path);
    if (it == params_.end()) {
        throw UsageError("ModelParams::at: no parameter '" + path + "'");
    }
    return it->second;
}

size_t ModelParams::count_scalars() const {
    size_t n = 0;
    for (const auto& [path, t] : params_) n += t.size();
    return n;
}

ModelParams ModelParams::clone(bool requires_grad) const {
    ModelParams out;
    for (const auto& [path, t] : params_) {
        out.add(path, Tensor::from(t.rows(), t.cols(), t.values(), requires_grad));
    }
    return out;
}

void ModelParams::zero_grad() {
    for (auto& [path, t] : params_) t.zero_grad();
}

void ModelParams::clear_grads() {
    for (auto& [path, t] : params_) t.clear_grad();
}

ParamSnapshot snapshot(const ModelParams& params) {
    ParamSnapshot snap;
    snap.entries.reserve(params.count());
    for (const auto& [path, t] : params.all()) {
        snap.entries.push_back({path, t.rows(), t.cols(), t.values()});
    }
    return snap;
}

void restore(ModelParams& params, const ParamSnapshot& snap) {
    if (snap.entries.size() != params.count()) {
        throw UsageError("restore: snapshot has " + std::to_string(snap.entries.size()) +
                         " parameters, target has " + std::to_string(params.count()));
    }
    for (const auto& e : snap.entries) {
        if (!params.contains(e.path)) {
            throw UsageError("restore: target has no parameter '" + e.path + "'");
        }
        Tensor& t = params.at(e.path);
        if (t.rows() != e.rows || t.cols() != e.cols) {
            throw ShapeError("restore: shape mismatch for '" + e.path + "': snapshot " +
                             std::to_string(e.rows) + "x" + std::to_string(e.cols) + ", target " +
                             t.shape_str());
        }
    }
    for (const auto& e : snap.entries) {
        params.at(e.path).values() = e.values;
    }
}

namespace {

constexpr char kMagic[8] = {'C', 'A', 'M', 'L', 'S', 'N', 'A', 'P'};
constexpr uint32_t kVersion = 1;

// The build targets little-endian hosts; the format is defined as
// little-endian on disk.
template <typename T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) {
        throw DataError("snapshot file truncated");
    }
    return v;
}

} // namespace

void save_snapshot(const ParamSnapshot& snap, const std::filesystem::path& file) {
    std::ofstream os(file, std::ios::binary | std::ios::trunc);
    if (!os) {
        throw DataError("cannot open '" + file.string() + "' for writing");
    }
    os.write(kMagic, sizeof(kMagic));
    write_pod<uint32_t>(os, kVersion);
    write_pod<uint64_t>(os, snap.entries.size());
    for (const auto& e : snap.entries) {
        write_pod<uint32_t>(os, static_cast<uint32_t>(e.path.size()));
        os.write(e.path.data(), static_cast<std::streamsize>(e.path.size()));
        write_pod<uint32_t>(os, 2); // dimensions
        write_pod<int64_t>(os, e.rows);
        write_pod<int64_t>(os, e.cols);
        os.write(reinterpret_cast<const char*>(e.values.data()),
                 static_cast<std::streamsize>(e.values.size() * sizeof(double)));
    }
    if (!os) {
        throw DataError("failed writing snapshot to '" + file.string() + "'");
    }
}

ParamSnapshot load_snapshot(const std::filesystem::path& file) {
    std::ifstream is(file, std::ios::binary);
    if (!is) {
        throw DataError("cannot open snapshot '" + file.string() + "'");
    }
    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw DataError("'" + file.string() + "' is not a parameter snapshot");
    }
    const uint32_t version = read_pod<uint32_t>(is);
    if (version != kVersion) {
        throw DataError("snapshot version " + std::to_string(version) + " unsupported");
    }
    const uint64_t count = read_pod<uint64_t>(is);
    ParamSnapshot snap;
    snap.entries.resize(count);
    for (uint64_t i = 0; i < count; ++i) {
        auto& e = snap.entries[i];
        const uint32_t len = read_pod<uint32_t>(is);
        e.path.resize(len);
        is.read(e.path.data(), len);
        const uint32_t ndim = read_pod<uint32_t>(is);
        if (ndim != 2) {
            throw DataError("snapshot entry '" + e.path + "' has " + std::to_string(ndim) +
                            " dimensions, expected 2");
        }
        e.rows = static_cast<int>(read_pod<int64_t>(is));
        e.cols = static_cast<int>(read_pod<int64_t>(is));
        e.values.resize(static_cast<size_t>(e.rows) * e.cols);
        is.read(reinterpret_cast<char*>(e.values.data()),
                static_cast<std::streamsize>(e.values.size() * sizeof(double)));
        if (!is) {
            throw DataError("snapshot file truncated in entry '" + e.path + "'");
        }
    }
    return snap;
}

double max_abs_diff(const ModelParams& a, const ModelParams& b) {
    if (a.count() != b.count()) {
        throw UsageError("max_abs_diff: parameter counts differ");
    }
    double mx = 0.0;
    auto ita = a.all().begin();
    auto itb = b.all().begin();
    for (; ita != a.all().end(); ++ita, ++itb) {
        if (ita->first != itb->first) {
            throw UsageError("max_abs_diff: path mismatch '" + ita->first + "' vs '" +
                             itb->first + "'");
        }
        const auto& va = ita->second.values();
        const auto& vb = itb->second.values();
        for (size_t i = 0; i < va.size(); ++i) {
            mx = std::max(mx, std::abs(va[i] - vb[i]));
        }
    }
    return mx;
}

} // namespace caml
