#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace caml {

// Closed token vocabulary with fixed reserved ids.
class Vocab {
public:
    static constexpr int PAD = 0;
    static constexpr int BOS = 1;
    static constexpr int EOS = 2;
    static constexpr int UNK = 3;
    static constexpr int MASK = 4;
    static constexpr int RESERVED = 5;

    Vocab();

    // Adds a token; returns its id. Re-adding an existing token is an error.
    int add(const std::string& token);
    // Id of a token, UNK for out-of-vocabulary ones.
    int id_or_unk(const std::string& token) const;
    bool contains(const std::string& token) const { return ids_.count(token) > 0; }
    const std::string& token(int id) const;
    int size() const { return static_cast<int>(tokens_.size()); }

    static bool is_reserved(int id) { return id >= 0 && id < RESERVED; }

    // Content of the vocabulary as one line of space-separated non-reserved
    // tokens (reserved ids are implicit), and its inverse.
    std::string serialize() const;
    static Vocab parse(const std::string& line);

    uint64_t hash() const;

    std::vector<int> encode(const std::vector<std::string>& tokens) const;
    std::string decode(const std::vector<int>& ids) const;

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> ids_;
};

} // namespace caml
