#include "caml/vocab.hpp"

#include "caml/errors.hpp"

#include <sstream>

namespace caml {

Vocab::Vocab() {
    for (const char* t : {"<pad>", "<bos>", "<eos>", "<unk>", "<mask>"}) {
        int id = static_cast<int>(tokens_.size());
        tokens_.emplace_back(t);
        ids_.emplace(t, id);
    }
}

int Vocab::add(const std::string& token) {
    if (token.empty() || token.find(' ') != std::string::npos ||
        token.find('\t') != std::string::npos || token.find('\n') != std::string::npos) {
        throw UsageError("Vocab::add: token must be non-empty and whitespace-free");
    }
    auto [it, inserted] = ids_.emplace(token, static_cast<int>(tokens_.size()));
    if (!inserted) {
        throw UsageError("Vocab::add: duplicate token '" + token + "'");
    }
    tokens_.push_back(token);
    return it->second;
}

int Vocab::id_or_unk(const std::string& token) const {
    auto it = ids_.find(token);
    return it == ids_.end() ? UNK : it->second;
}

const std::string& Vocab::token(int id) const {
    if (id < 0 || id >= size()) {
        throw UsageError("Vocab::token: id " + std::to_string(id) + " out of range [0, " +
                         std::to_string(size()) + ")");
    }
    return tokens_[id];
}

std::string Vocab::serialize() const {
    std::string out;
    for (int i = RESERVED; i < size(); ++i) {
        if (!out.empty()) out += ' ';
        out += tokens_[i];
    }
    return out;
}

Vocab Vocab::parse(const std::string& line) {
    Vocab v;
    std::istringstream ss(line);
    std::string tok;
    while (ss >> tok) {
        v.add(tok);
    }
    return v;
}

uint64_t Vocab::hash() const {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& t : tokens_) {
        for (unsigned char c : t) {
            h ^= c;
            h *= 0x100000001b3ULL;
        }
        h ^= 0xff; // token separator
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::vector<int> Vocab::encode(const std::vector<std::string>& tokens) const {
    std::vector<int> out;
    out.reserve(tokens.size());
    for (const auto& t : tokens) out.push_back(id_or_unk(t));
    return out;
}

std::string Vocab::decode(const std::vector<int>& ids) const {
    std::string out;
    for (size_t i = 0; i < ids.size(); ++i) {
        if (i) out += ' ';
        out += token(ids[i]);
    }
    return out;
}

} // namespace caml
