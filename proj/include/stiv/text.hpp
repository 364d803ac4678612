#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace stiv {

inline constexpr int64_t kNullTokenId = 0;

// Closed caption vocabulary. Id 0 is the NULL token used for unconditional
// (dropped-text) passes; the rest covers every word the corpus can emit plus
// reserved slots so the table size stays fixed at 64.
inline const std::vector<std::string>& vocabulary() {
    static const std::vector<std::string> vocab = [] {
        std::vector<std::string> v = {
            "<null>", "a",    "the",    "video",  "image",  "of",     "red",    "green",
            "blue",   "square", "circle", "triangle", "moving", "drifting", "still",  "static",
            "left",   "right", "up",     "down",   "speed",  "0",      "1",      "2",
            "pixel",  "pixels", "per",   "frame",  "frames", "on",     "black",  "background",
            "small",  "object", "shape", "scene",  "one",    "two",    "slow",   "fast",
        };
        while (v.size() < 64) v.push_back("<reserved" + std::to_string(v.size()) + ">");
        return v;
    }();
    return vocab;
}

inline int64_t token_id(const std::string& word) {
    const auto& v = vocabulary();
    for (size_t i = 0; i < v.size(); ++i)
        if (v[i] == word) return static_cast<int64_t>(i);
    throw std::invalid_argument("token_id: unknown word '" + word + "'");
}

inline std::vector<int64_t> tokenize(const std::string& caption) {
    std::vector<int64_t> ids;
    std::istringstream ss(caption);
    std::string word;
    while (ss >> word) ids.push_back(token_id(word));
    if (ids.empty()) throw std::invalid_argument("tokenize: empty caption");
    return ids;
}

inline std::string detokenize(const std::vector<int64_t>& ids) {
    const auto& v = vocabulary();
    std::string out;
    for (size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= static_cast<int64_t>(v.size()))
            throw std::invalid_argument("detokenize: id out of range");
        if (i) out += ' ';
        out += v[static_cast<size_t>(ids[i])];
    }
    return out;
}

}  // namespace stiv
