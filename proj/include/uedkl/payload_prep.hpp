#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "uedkl/common.hpp"

namespace uedkl {

enum class TokenMode { words, bigram, trigram };

inline const char* to_string(TokenMode m) {
    switch (m) {
        case TokenMode::words: return "words";
        case TokenMode::bigram: return "bigram";
        case TokenMode::trigram: return "trigram";
    }
    return "?";
}

inline TokenMode token_mode_from_string(const std::string& s) {
    if (s == "words") return TokenMode::words;
    if (s == "bigram") return TokenMode::bigram;
    if (s == "trigram") return TokenMode::trigram;
    throw ConfigError("unknown tokenizer mode: " + s);
}

struct RawPayload {
    std::string text;
    std::string source_id;
};

struct TokenSequence {
    std::vector<std::string> tokens;
    TokenMode mode = TokenMode::words;
};

inline constexpr const char* kPadToken = "<pad>";
inline constexpr const char* kUnkToken = "<unk>";
inline constexpr int kPadIndex = 0;
inline constexpr int kUnkIndex = 1;

namespace prep_detail {

inline int hex_val(char c) {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    return -1;
}

// One pass of RFC 3986 percent-decoding; malformed sequences pass through.
inline std::string percent_decode_once(const std::string& s, bool* changed) {
    std::string out;
    out.reserve(s.size());
    for (size_t i = 0; i < s.size();) {
        if (s[i] == '%' && i + 2 < s.size()) {
            const int hi = hex_val(s[i + 1]);
            const int lo = hex_val(s[i + 2]);
            if (hi >= 0 && lo >= 0) {
                out.push_back(static_cast<char>(hi * 16 + lo));
                i += 3;
                if (changed) *changed = true;
                continue;
            }
        }
        out.push_back(s[i]);
        ++i;
    }
    return out;
}

// Appends the UTF-8 encoding of a code point; invalid points pass bytes
// through untouched via the caller.
inline void append_utf8(std::string& out, uint32_t cp) {
    if (cp < 0x80) {
        out.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
        out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else if (cp < 0x10000) {
        out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else {
        out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    }
}

// One pass over \xNN, \uNNNN, and the common HTML entities. Malformed
// sequences are copied verbatim.
inline std::string unescape_once(const std::string& s) {
    std::string out;
    out.reserve(s.size());
    for (size_t i = 0; i < s.size();) {
        const char c = s[i];
        if (c == '\\' && i + 1 < s.size()) {
            const char kind = s[i + 1];
            if (kind == 'x' && i + 3 < s.size()) {
                const int hi = hex_val(s[i + 2]), lo = hex_val(s[i + 3]);
                if (hi >= 0 && lo >= 0) {
                    out.push_back(static_cast<char>(hi * 16 + lo));
                    i += 4;
                    continue;
                }
            } else if (kind == 'u' && i + 5 < s.size()) {
                uint32_t cp = 0;
                bool ok = true;
                for (size_t k = 2; k < 6; ++k) {
                    const int v = hex_val(s[i + k]);
                    if (v < 0) {
                        ok = false;
                        break;
                    }
                    cp = cp * 16 + static_cast<uint32_t>(v);
                }
                if (ok) {
                    append_utf8(out, cp);
                    i += 6;
                    continue;
                }
            }
        } else if (c == '&') {
            struct Entity {
                const char* name;
                char value;
            };
            static constexpr Entity kEntities[] = {
                {"&lt;", '<'}, {"&gt;", '>'}, {"&amp;", '&'}, {"&quot;", '"'}};
            bool matched = false;
            for (const auto& e : kEntities) {
                const size_t n = std::string(e.name).size();
                if (s.compare(i, n, e.name) == 0) {
                    out.push_back(e.value);
                    i += n;
                    matched = true;
                    break;
                }
            }
            if (matched) continue;
            if (i + 2 < s.size() && s[i + 1] == '#') {
                size_t j = i + 2;
                uint32_t cp = 0;
                size_t digits = 0;
                while (j < s.size() && s[j] >= '0' && s[j] <= '9' && digits < 7) {
                    cp = cp * 10 + static_cast<uint32_t>(s[j] - '0');
                    ++j;
                    ++digits;
                }
                if (digits > 0 && j < s.size() && s[j] == ';') {
                    append_utf8(out, cp);
                    i = j + 1;
                    continue;
                }
            }
        }
        out.push_back(c);
        ++i;
    }
    return out;
}

inline bool is_ascii_alnum(unsigned char c) {
    return (c >= '0' && c <= '9') || (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z');
}

}  // namespace prep_detail

// Recovers escaped characters and lowercases: percent-encodings decoded up
// to two passes (stopping early at a fixpoint), then one pass over \xNN,
// \uNNNN, and HTML entities, then ASCII lowercasing. Malformed escapes pass
// through verbatim. Never throws on arbitrary bytes.
inline std::string normalize(const RawPayload& raw) {
    std::string s = raw.text;
    for (int pass = 0; pass < 2; ++pass) {
        bool changed = false;
        std::string next = prep_detail::percent_decode_once(s, &changed);
        s = std::move(next);
        if (!changed) break;
    }
    s = prep_detail::unescape_once(s);
    for (char& c : s)
        if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
    return s;
}

inline std::string normalize(const std::string& text) { return normalize(RawPayload{text, ""}); }

// Splits on ASCII punctuation (any ASCII byte that is not alphanumeric);
// non-ASCII bytes count as segment content. words mode emits the segments;
// bigram/trigram emit stride-1 character n-grams per segment, with segments
// shorter than n emitted whole. All-punctuation (or empty) input produces a
// single unknown-token placeholder so downstream stages always see at least
// one token.
inline TokenSequence tokenize(const std::string& clean, TokenMode mode) {
    std::vector<std::string> segments;
    std::string cur;
    for (unsigned char c : clean) {
        const bool content = c >= 0x80 || prep_detail::is_ascii_alnum(c);
        if (content) {
            cur.push_back(static_cast<char>(c));
        } else if (!cur.empty()) {
            segments.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) segments.push_back(std::move(cur));

    TokenSequence out;
    out.mode = mode;
    const size_t n = mode == TokenMode::bigram ? 2 : mode == TokenMode::trigram ? 3 : 0;
    for (const std::string& seg : segments) {
        if (mode == TokenMode::words || seg.size() < n) {
            out.tokens.push_back(seg);
        } else {
            for (size_t i = 0; i + n <= seg.size(); ++i) out.tokens.push_back(seg.substr(i, n));
        }
    }
    if (out.tokens.empty()) out.tokens.push_back(kUnkToken);
    return out;
}

class Vocabulary {
public:
    Vocabulary() {
        tokens_ = {kPadToken, kUnkToken};
        index_ = {{kPadToken, kPadIndex}, {kUnkToken, kUnkIndex}};
    }

    // Keeps the max_size-2 most frequent tokens after the two reserved slots;
    // ties broken lexicographically. Deterministic for identical corpora.
    static Vocabulary build(const std::vector<TokenSequence>& corpus, size_t max_size,
                            TokenMode mode) {
        if (max_size < 2) throw ConfigError("vocabulary max_size must be at least 2");
        std::unordered_map<std::string, uint64_t> counts;
        for (const TokenSequence& seq : corpus) {
            if (seq.mode != mode)
                throw ContractError("build_vocab: corpus mixes tokenizer modes");
            for (const std::string& tok : seq.tokens) {
                if (tok == kPadToken || tok == kUnkToken) continue;
                ++counts[tok];
            }
        }
        std::vector<std::pair<std::string, uint64_t>> ranked(counts.begin(), counts.end());
        std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
            if (a.second != b.second) return a.second > b.second;
            return a.first < b.first;
        });
        Vocabulary v;
        v.mode_ = mode;
        const size_t keep = std::min(ranked.size(), max_size - 2);
        for (size_t i = 0; i < keep; ++i) {
            v.index_[ranked[i].first] = static_cast<int>(v.tokens_.size());
            v.tokens_.push_back(ranked[i].first);
        }
        return v;
    }

    // Rebuilds from an index-ordered token list (checkpoint loading).
    static Vocabulary from_tokens(const std::vector<std::string>& tokens, TokenMode mode) {
        if (tokens.size() < 2 || tokens[0] != kPadToken || tokens[1] != kUnkToken)
            throw IoError("vocabulary token list must start with the reserved tokens");
        Vocabulary v;
        v.mode_ = mode;
        v.tokens_ = tokens;
        v.index_.clear();
        for (size_t i = 0; i < tokens.size(); ++i) v.index_[tokens[i]] = static_cast<int>(i);
        return v;
    }

    int lookup(const std::string& tok) const {
        auto it = index_.find(tok);
        return it == index_.end() ? kUnkIndex : it->second;
    }
    size_t size() const { return tokens_.size(); }
    const std::vector<std::string>& tokens() const { return tokens_; }
    TokenMode mode() const { return mode_; }

    bool operator==(const Vocabulary& o) const { return tokens_ == o.tokens_ && mode_ == o.mode_; }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;
    TokenMode mode_ = TokenMode::words;
};

struct Encoded {
    std::vector<int> indices;   // length exactly max_len
    std::vector<uint8_t> mask;  // 1 = real token, 0 = padding
};

inline Encoded encode(const TokenSequence& seq, const Vocabulary& vocab, int max_len) {
    if (max_len < 1) throw ConfigError("encode: max_len must be at least 1");
    Encoded out;
    out.indices.assign(static_cast<size_t>(max_len), kPadIndex);
    out.mask.assign(static_cast<size_t>(max_len), 0);
    const size_t n = std::min(seq.tokens.size(), static_cast<size_t>(max_len));
    for (size_t i = 0; i < n; ++i) {
        out.indices[i] = vocab.lookup(seq.tokens[i]);
        out.mask[i] = 1;
    }
    return out;
}

}  // namespace uedkl
