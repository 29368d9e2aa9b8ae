#pragma once

// Byte-level BPE tokenizer with a fixed, versioned vocabulary. The base
// alphabet is the 256 raw bytes, so any input round-trips exactly; the merge
// table on top of it is derived deterministically from the shipped word list.

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "moescope/common.hpp"
#include "moescope/tokenizer_vocab.hpp"

namespace moescope {

using TokenId = std::uint32_t;

class Tokenizer {
public:
    Tokenizer() {
        tokens_.reserve(512);
        for (int b = 0; b < 256; ++b) tokens_.push_back(std::string(1, static_cast<char>(b)));
        for (std::string_view word : vocab::kWordList) add_word(word);
        std::string digest;
        for (const auto& [pair, rank] : merge_ranks_) {
            digest += tokens_[pair.first];
            digest += '\x01';
            digest += tokens_[pair.second];
            digest += '\x02';
        }
        id_ = "bytebpe-v1:" + hex64(fnv1a64(digest));
    }

    std::size_t vocab_size() const { return tokens_.size(); }
    const std::string& id() const { return id_; }

    const std::string& token_text(TokenId id) const {
        if (id >= tokens_.size()) throw DataError("token id out of range: " + std::to_string(id));
        return tokens_[id];
    }

    // Byte-exact inverse of tokenize for any id sequence.
    std::string detokenize(const std::vector<TokenId>& ids) const {
        std::string out;
        for (TokenId id : ids) out += token_text(id);
        return out;
    }

    std::vector<TokenId> tokenize(std::string_view text) const {
        std::vector<TokenId> out;
        std::size_t pos = 0;
        while (pos < text.size()) {
            const std::size_t end = chunk_end(text, pos);
            encode_chunk(text.substr(pos, end - pos), out);
            pos = end;
        }
        return out;
    }

    // Byte offset of the first byte of each token; one extra entry for the
    // end offset. Used to map regex character spans onto token spans.
    std::vector<std::size_t> token_offsets(const std::vector<TokenId>& ids) const {
        std::vector<std::size_t> offs(ids.size() + 1);
        std::size_t pos = 0;
        for (std::size_t i = 0; i < ids.size(); ++i) {
            offs[i] = pos;
            pos += token_text(ids[i]).size();
        }
        offs[ids.size()] = pos;
        return offs;
    }

    // Single token id for a string, if it exists in the vocabulary.
    bool lookup(std::string_view s, TokenId& id) const {
        auto it = token_ids_.find(std::string(s));
        if (it == token_ids_.end()) return false;
        id = it->second;
        return true;
    }

private:
    enum class ByteClass { Space, Letter, Digit, Punct, OtherWs };

    static ByteClass classify(unsigned char b) {
        if (b == ' ') return ByteClass::Space;
        if (b == '\n' || b == '\t' || b == '\r' || b == '\f' || b == '\v') return ByteClass::OtherWs;
        if ((b >= 'a' && b <= 'z') || (b >= 'A' && b <= 'Z') || b >= 0x80) return ByteClass::Letter;
        if (b >= '0' && b <= '9') return ByteClass::Digit;
        return ByteClass::Punct;
    }

    // Chunks are " word"-style units: an optional single leading space glued
    // to the run that follows it. Merges never cross chunk boundaries.
    static std::size_t chunk_end(std::string_view text, std::size_t pos) {
        std::size_t i = pos;
        ByteClass c = classify(static_cast<unsigned char>(text[i]));
        if (c == ByteClass::OtherWs) {
            while (i < text.size() && classify(static_cast<unsigned char>(text[i])) == ByteClass::OtherWs) ++i;
            return i;
        }
        if (c == ByteClass::Space) {
            ++i;
            if (i >= text.size()) return i;
            c = classify(static_cast<unsigned char>(text[i]));
            if (c == ByteClass::Space || c == ByteClass::OtherWs) {
                while (i < text.size() && classify(static_cast<unsigned char>(text[i])) == ByteClass::Space) ++i;
                return i;
            }
        }
        while (i < text.size() && classify(static_cast<unsigned char>(text[i])) == c) ++i;
        return i;
    }

    void encode_chunk(std::string_view chunk, std::vector<TokenId>& out) const {
        std::vector<TokenId> parts(chunk.size());
        for (std::size_t i = 0; i < chunk.size(); ++i) {
            parts[i] = static_cast<TokenId>(static_cast<unsigned char>(chunk[i]));
        }
        while (parts.size() > 1) {
            int best_rank = -1;
            std::size_t best_at = 0;
            for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
                auto it = merge_ranks_.find({parts[i], parts[i + 1]});
                if (it != merge_ranks_.end() && (best_rank < 0 || it->second < best_rank)) {
                    best_rank = it->second;
                    best_at = i;
                }
            }
            if (best_rank < 0) break;
            const auto pair = std::make_pair(parts[best_at], parts[best_at + 1]);
            const TokenId merged = merged_ids_.at(pair);
            std::vector<TokenId> next;
            next.reserve(parts.size());
            for (std::size_t i = 0; i < parts.size();) {
                if (i + 1 < parts.size() && parts[i] == pair.first && parts[i + 1] == pair.second) {
                    next.push_back(merged);
                    i += 2;
                } else {
                    next.push_back(parts[i]);
                    ++i;
                }
            }
            parts.swap(next);
        }
        out.insert(out.end(), parts.begin(), parts.end());
    }

    // Adds merges until the word encodes as a single token. Merging the first
    // two tokens of the current segmentation converges and is insensitive to
    // interactions with merges added for earlier words.
    void add_word(std::string_view word) {
        for (int guard = 0; guard < 64; ++guard) {
            std::vector<TokenId> parts;
            encode_chunk(word, parts);
            if (parts.size() <= 1) return;
            const auto pair = std::make_pair(parts[0], parts[1]);
            if (merge_ranks_.count(pair)) {
                throw ConfigError("vocab build: stuck merging '" + std::string(word) + "'");
            }
            const std::string text = tokens_[pair.first] + tokens_[pair.second];
            TokenId id;
            auto it = token_ids_.find(text);
            if (it != token_ids_.end()) {
                id = it->second;
            } else {
                id = static_cast<TokenId>(tokens_.size());
                tokens_.push_back(text);
                token_ids_.emplace(text, id);
            }
            merge_ranks_.emplace(pair, static_cast<int>(merge_ranks_.size()));
            merged_ids_.emplace(pair, id);
        }
        throw ConfigError("vocab build: merge loop did not converge");
    }

    struct PairHash {
        std::size_t operator()(const std::pair<TokenId, TokenId>& p) const {
            return std::hash<std::uint64_t>()((static_cast<std::uint64_t>(p.first) << 32) | p.second);
        }
    };

    std::vector<std::string> tokens_;
    std::unordered_map<std::string, TokenId> token_ids_;
    std::map<std::pair<TokenId, TokenId>, int> merge_ranks_;
    std::unordered_map<std::pair<TokenId, TokenId>, TokenId, PairHash> merged_ids_;
    std::string id_;
};

// The process-wide tokenizer. The vocabulary is fixed, so sharing one
// immutable instance is safe.
inline const Tokenizer& shipped_tokenizer() {
    static const Tokenizer tok;
    return tok;
}

}  // namespace moescope
