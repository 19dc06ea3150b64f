#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "langneck/common.hpp"
#include "langneck/io.hpp"
#include "langneck/rng.hpp"

namespace langneck {

// Bijective token-string <-> token-id map with reserved specials.
class Vocabulary {
public:
    static constexpr std::size_t kPad = 0;
    static constexpr std::size_t kBos = 1;
    static constexpr std::size_t kUnk = 2;
    static constexpr std::size_t kNumSpecial = 3;

    explicit Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
        for (std::size_t i = 0; i < tokens_.size(); ++i) {
            if (!ids_.emplace(tokens_[i], i).second)
                throw ArgumentError("duplicate vocabulary token: " + tokens_[i]);
        }
    }

    std::size_t size() const { return tokens_.size(); }
    const std::string& token(std::size_t id) const {
        if (id >= tokens_.size()) throw IndexError("token id out of range");
        return tokens_[id];
    }
    std::size_t id(const std::string& token) const {
        auto it = ids_.find(token);
        return it == ids_.end() ? kUnk : it->second;
    }
    bool is_special(std::size_t id) const { return id < kNumSpecial; }

    std::uint64_t hash() const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (const auto& t : tokens_) {
            h = fnv1a(t, h);
            h = fnv1a_u64(t.size(), h);
        }
        return h;
    }
    std::uint16_t checksum16() const { return static_cast<std::uint16_t>(hash() & 0xffff); }

    // Vocabulary file: magic "LBVC", u16 version, u32 V, length-prefixed strings.
    std::string serialize() const {
        ByteWriter w;
        w.bytes("LBVC", 4);
        w.u16(1);
        w.u32(static_cast<std::uint32_t>(tokens_.size()));
        for (const auto& t : tokens_) w.str(t);
        return w.buffer();
    }
    void save(const std::string& path) const { write_file(path, serialize()); }

    static Vocabulary deserialize(std::string bytes) {
        ByteReader r(std::move(bytes));
        r.expect_magic("LBVC", "vocabulary");
        if (std::uint16_t ver = r.u16(); ver != 1)
            throw FormatError("vocabulary: unsupported version " + std::to_string(ver));
        std::uint32_t count = r.u32();
        std::vector<std::string> tokens;
        tokens.reserve(count);
        for (std::uint32_t i = 0; i < count; ++i) tokens.push_back(r.str());
        r.expect_end("vocabulary");
        return Vocabulary(std::move(tokens));
    }
    static Vocabulary load(const std::string& path) { return deserialize(read_file(path)); }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, std::size_t> ids_;
};

inline const std::array<std::string, 4>& shape_words() {
    static const std::array<std::string, 4> w = {"circle", "square", "triangle", "cross"};
    return w;
}
inline const std::array<std::string, 4>& color_words() {
    static const std::array<std::string, 4> w = {"red", "green", "blue", "yellow"};
    return w;
}
inline const std::array<std::string, 2>& size_words() {
    static const std::array<std::string, 2> w = {"small", "large"};
    return w;
}
inline const std::array<std::string, 4>& position_words() {
    static const std::array<std::string, 4> w = {"topleft", "topright", "bottomleft", "bottomright"};
    return w;
}

// Common English words with no relation to the scenes; they exist so the
// hard-token path has words it could, but should not, select.
inline const std::vector<std::string>& distractor_words() {
    static const std::vector<std::string> w = {
        "time",  "year",   "people", "way",    "day",     "man",    "thing",
        "woman", "life",   "child",  "world",  "school",  "state",  "family",
        "house", "group",  "country", "problem", "hand",  "part",   "place",
        "case",  "week",   "company", "system", "program", "question", "work",
        "number", "night", "point",  "home",   "water",   "room",   "mother",
        "area",  "money",  "story",  "fact",   "month",   "lot",    "book"};
    return w;
}

// Deterministic default vocabulary: 3 specials + 14 attribute words +
// 42 distractors = 59 tokens.
inline Vocabulary build_vocabulary() {
    std::vector<std::string> tokens = {"<pad>", "<bos>", "<unk>"};
    for (const auto& t : shape_words()) tokens.push_back(t);
    for (const auto& t : color_words()) tokens.push_back(t);
    for (const auto& t : size_words()) tokens.push_back(t);
    for (const auto& t : position_words()) tokens.push_back(t);
    for (const auto& t : distractor_words()) tokens.push_back(t);
    return Vocabulary(std::move(tokens));
}

}  // namespace langneck
