#include "caml/synth.hpp"

#include "caml/errors.hpp"

#include <json.hpp>

#include <fstream>
#include <set>
#include <sstream>

namespace caml {

// ---- corpus / equiv-set io (data.hpp) ----

void write_corpus_file(const std::filesystem::path& file, const std::vector<Sample>& samples,
                       const Vocab& src, const Vocab& tgt) {
    std::ofstream os(file, std::ios::trunc);
    if (!os) throw DataError("cannot open '" + file.string() + "' for writing");
    for (const auto& s : samples) {
        os << src.decode(s.x) << '\t' << tgt.decode(s.y) << '\n';
    }
    if (!os) throw DataError("failed writing '" + file.string() + "'");
}

std::vector<Sample> read_corpus_file(const std::filesystem::path& file, const Vocab& src,
                                     const Vocab& tgt) {
    std::ifstream is(file);
    if (!is) throw DataError("cannot open corpus file '" + file.string() + "'");
    std::vector<Sample> out;
    std::string line;
    size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos) {
            throw DataError(file.string() + ":" + std::to_string(lineno) + ": missing tab");
        }
        Sample s;
        std::istringstream xs(line.substr(0, tab)), ys(line.substr(tab + 1));
        std::string tok;
        while (xs >> tok) s.x.push_back(src.id_or_unk(tok));
        while (ys >> tok) s.y.push_back(tgt.id_or_unk(tok));
        if (s.x.empty() || s.y.empty()) {
            throw DataError(file.string() + ":" + std::to_string(lineno) + ": empty side");
        }
        out.push_back(std::move(s));
    }
    return out;
}

void write_equiv_file(const std::filesystem::path& file, const std::vector<EquivSet>& sets,
                      const Vocab& src, const Vocab& tgt, uint64_t cache_key) {
    std::ofstream os(file, std::ios::trunc);
    if (!os) throw DataError("cannot open '" + file.string() + "' for writing");
    nlohmann::json header;
    header["cache_key"] = cache_key;
    header["count"] = sets.size();
    os << header.dump() << '\n';
    for (size_t i = 0; i < sets.size(); ++i) {
        const auto& e = sets[i];
        nlohmann::json rec;
        rec["id"] = i;
        rec["x"] = src.decode(e.x);
        rec["y"] = tgt.decode(e.y);
        auto& xs = rec["xs"] = nlohmann::json::array();
        for (const auto& v : e.x_s) xs.push_back(src.decode(v));
        rec["seed"] = e.gen_seed;
        rec["weights"] = e.weights;
        os << rec.dump() << '\n';
    }
    if (!os) throw DataError("failed writing '" + file.string() + "'");
}

std::vector<EquivSet> read_equiv_file(const std::filesystem::path& file, const Vocab& src,
                                      const Vocab& tgt, uint64_t expected_cache_key) {
    std::ifstream is(file);
    if (!is) throw DataError("cannot open equiv-set file '" + file.string() + "'");
    std::string line;
    if (!std::getline(is, line)) throw DataError("'" + file.string() + "' is empty");
    std::vector<EquivSet> out;
    try {
        const auto header = nlohmann::json::parse(line);
        const uint64_t key = header.at("cache_key").get<uint64_t>();
        if (expected_cache_key != 0 && key != expected_cache_key) {
            throw DataError("equiv cache '" + file.string() + "' was built for a different " +
                            "corpus/config (cache key mismatch)");
        }
        auto encode_line = [](const Vocab& v, const std::string& s) {
            std::istringstream ss(s);
            std::vector<int> ids;
            std::string tok;
            while (ss >> tok) ids.push_back(v.id_or_unk(tok));
            return ids;
        };
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            const auto rec = nlohmann::json::parse(line);
            EquivSet e;
            e.x = encode_line(src, rec.at("x").get<std::string>());
            e.y = encode_line(tgt, rec.at("y").get<std::string>());
            for (const auto& v : rec.at("xs")) {
                e.x_s.push_back(encode_line(src, v.get<std::string>()));
            }
            e.gen_seed = rec.at("seed").get<uint64_t>();
            e.weights = rec.at("weights").get<std::vector<double>>();
            out.push_back(std::move(e));
        }
    } catch (const nlohmann::json::exception& ex) {
        throw DataError("malformed equiv-set file '" + file.string() + "': " + ex.what());
    }
    return out;
}

uint64_t corpus_hash(const std::vector<Sample>& samples) {
    uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](int v) {
        h ^= static_cast<uint64_t>(v) + 0x9e37;
        h *= 0x100000001b3ULL;
    };
    for (const auto& s : samples) {
        for (int id : s.x) mix(id);
        mix(-1);
        for (int id : s.y) mix(id);
        mix(-2);
    }
    return h;
}

// ---- synth spec ----

void SynthSpec::validate() const {
    if (n_concepts < 1 || synonyms_per_concept < 1) {
        throw ConfigError("synth: n_concepts and synonyms_per_concept must be >= 1");
    }
    if (len_min < 1 || len_max < len_min) {
        throw ConfigError("synth: sentence length range invalid");
    }
    if (swap_prob < 0.0 || swap_prob > 1.0) {
        throw ConfigError("synth: swap_prob must be in [0, 1]");
    }
    if (train_size < 1 || dev_size < 0 || test_size < 0) {
        throw ConfigError("synth: split sizes invalid");
    }
}

void SynthSpec::save(const std::filesystem::path& file) const {
    std::ofstream os(file, std::ios::trunc);
    if (!os) throw DataError("cannot open '" + file.string() + "' for writing");
    os << "n_concepts = " << n_concepts << "\n";
    os << "synonyms_per_concept = " << synonyms_per_concept << "\n";
    os << "len_min = " << len_min << "\n";
    os << "len_max = " << len_max << "\n";
    os << "swap_prob = " << swap_prob << "\n";
    os << "train_size = " << train_size << "\n";
    os << "dev_size = " << dev_size << "\n";
    os << "test_size = " << test_size << "\n";
    os << "seed = " << seed << "\n";
}

SynthSpec SynthSpec::load(const std::filesystem::path& file) {
    std::ifstream is(file);
    if (!is) throw DataError("cannot open synth spec '" + file.string() + "'");
    SynthSpec spec;
    std::string line;
    size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw DataError(file.string() + ":" + std::to_string(lineno) + ": expected key = value");
        }
        std::string key = line.substr(0, eq), val = line.substr(eq + 1);
        auto trim = [](std::string& s) {
            s.erase(0, s.find_first_not_of(" \t"));
            s.erase(s.find_last_not_of(" \t") + 1);
        };
        trim(key);
        trim(val);
        try {
            if (key == "n_concepts") spec.n_concepts = std::stoi(val);
            else if (key == "synonyms_per_concept") spec.synonyms_per_concept = std::stoi(val);
            else if (key == "len_min") spec.len_min = std::stoi(val);
            else if (key == "len_max") spec.len_max = std::stoi(val);
            else if (key == "swap_prob") spec.swap_prob = std::stod(val);
            else if (key == "train_size") spec.train_size = std::stoi(val);
            else if (key == "dev_size") spec.dev_size = std::stoi(val);
            else if (key == "test_size") spec.test_size = std::stoi(val);
            else if (key == "seed") spec.seed = std::stoull(val);
            else throw DataError(file.string() + ": unknown key '" + key + "'");
        } catch (const std::invalid_argument&) {
            throw DataError(file.string() + ": bad value for '" + key + "'");
        }
    }
    spec.validate();
    return spec;
}

// ---- synth task ----

SynthTask::SynthTask(SynthSpec spec) : spec_(spec) {
    spec_.validate();
    src_concept_.assign(Vocab::RESERVED, -1);
    for (int c = 0; c < spec_.n_concepts; ++c) {
        for (int k = 0; k < spec_.synonyms_per_concept; ++k) {
            src_.add("s" + std::to_string(c) + "_" + std::to_string(k));
            src_concept_.push_back(c);
        }
        tgt_.add("t" + std::to_string(c));
    }
}

std::vector<int> SynthTask::draw_concepts(Rng& rng) const {
    const int len = spec_.len_min + rng.uniform_int(spec_.len_max - spec_.len_min + 1);
    std::vector<int> concepts(len);
    for (int& c : concepts) c = rng.uniform_int(spec_.n_concepts);
    return concepts;
}

std::vector<int> SynthTask::render_source(std::span<const int> concepts, Rng& rng) const {
    std::vector<int> x(concepts.size());
    for (size_t i = 0; i < concepts.size(); ++i) {
        const int k = rng.uniform_int(spec_.synonyms_per_concept);
        x[i] = Vocab::RESERVED + concepts[i] * spec_.synonyms_per_concept + k;
    }
    // one left-to-right pass of non-overlapping adjacent swaps
    for (size_t i = 0; i + 1 < x.size();) {
        if (rng.uniform() < spec_.swap_prob) {
            std::swap(x[i], x[i + 1]);
            i += 2;
        } else {
            i += 1;
        }
    }
    return x;
}

std::vector<int> SynthTask::render_target(std::span<const int> concepts) const {
    std::vector<int> y(concepts.size());
    for (size_t i = 0; i < concepts.size(); ++i) {
        y[i] = Vocab::RESERVED + concepts[i];
    }
    return y;
}

std::optional<std::vector<int>> SynthTask::decode_concepts(std::span<const int> x) const {
    std::vector<int> concepts;
    concepts.reserve(x.size());
    for (int id : x) {
        if (id < 0 || id >= static_cast<int>(src_concept_.size()) || src_concept_[id] < 0) {
            return std::nullopt;
        }
        concepts.push_back(src_concept_[id]);
    }
    return concepts;
}

Corpus SynthTask::generate() const {
    Corpus corpus;
    std::set<std::pair<std::vector<int>, std::vector<int>>> seen;
    const int sizes[3] = {spec_.train_size, spec_.dev_size, spec_.test_size};
    std::vector<Sample>* splits[3] = {&corpus.train, &corpus.dev, &corpus.test};
    for (int split = 0; split < 3; ++split) {
        for (int i = 0; i < sizes[split]; ++i) {
            for (uint64_t attempt = 0;; ++attempt) {
                if (attempt > 1000) {
                    throw DataError("synth: could not draw a fresh sample; vocabulary capacity "
                                    "exceeded for the requested split sizes");
                }
                Rng rng(derive_seed(spec_.seed, "sample",
                                    (static_cast<uint64_t>(split) << 32) | uint64_t(i), attempt));
                const std::vector<int> concepts = draw_concepts(rng);
                Sample s;
                s.y = render_target(concepts);
                s.x = render_source(concepts, rng);
                if (!seen.insert({s.x, s.y}).second) continue;
                splits[split]->push_back(std::move(s));
                break;
            }
        }
    }
    // coverage: every concept appears in training
    std::vector<char> covered(spec_.n_concepts, 0);
    for (const auto& s : corpus.train) {
        for (int id : s.y) covered[id - Vocab::RESERVED] = 1;
    }
    for (int c = 0; c < spec_.n_concepts; ++c) {
        if (!covered[c]) {
            throw DataError("synth: concept " + std::to_string(c) +
                            " never appears in the training split; enlarge train_size");
        }
    }
    return corpus;
}

std::vector<std::vector<int>> SynthTask::oracle_variants(std::span<const int> x, int n,
                                                         uint64_t salt) const {
    if (n < 0) throw UsageError("oracle_variants: n must be >= 0");
    const auto concepts = decode_concepts(x);
    if (!concepts) {
        throw UsageError("oracle_variants: sentence is not decodable by this task");
    }
    std::vector<std::vector<int>> out;
    if (n == 0) return out;
    std::set<std::vector<int>> seen;
    seen.insert(std::vector<int>(x.begin(), x.end()));
    uint64_t xhash = 0xcbf29ce484222325ULL;
    for (int id : x) {
        xhash ^= static_cast<uint64_t>(id) + 1;
        xhash *= 0x100000001b3ULL;
    }
    Rng rng(derive_seed(spec_.seed, "variants", xhash, salt));
    const uint64_t max_attempts = 200 + 60ULL * static_cast<uint64_t>(n);
    for (uint64_t attempt = 0; static_cast<int>(out.size()) < n; ++attempt) {
        if (attempt >= max_attempts) {
            throw DataError("oracle_variants: could not draw " + std::to_string(n) +
                            " distinct variants (space too small)");
        }
        std::vector<int> v = render_source(*concepts, rng);
        if (seen.insert(v).second) {
            out.push_back(std::move(v));
        }
    }
    return out;
}

} // namespace caml
