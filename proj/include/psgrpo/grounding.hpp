#pragma once

#include <cctype>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace psgrpo {

// Half-open character interval [begin, end) into the source text.
struct CharSpan {
    std::size_t begin = 0;
    std::size_t end = 0;
};

// Inclusive token interval [first, last].
struct TokenSpan {
    std::size_t first = 0;
    std::size_t last = 0;

    friend bool operator==(const TokenSpan&, const TokenSpan&) = default;
};

// A text together with its whitespace-delimited tokens and their exact
// character offsets. Offsets are strictly increasing and non-overlapping;
// the slices at the offsets, joined with the original separators, reproduce
// the text byte for byte.
struct TokenizedText {
    std::string text;
    std::vector<std::string> tokens;
    std::vector<CharSpan> offsets;

    std::size_t size() const { return tokens.size(); }
};

inline bool is_separator(char c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

// Deterministic whitespace tokenization. Punctuation stays attached to its
// word; empty input yields zero tokens.
inline TokenizedText tokenize(std::string_view text) {
    TokenizedText out;
    out.text.assign(text);
    std::size_t i = 0;
    const std::size_t n = text.size();
    while (i < n) {
        while (i < n && is_separator(text[i])) {
            ++i;
        }
        if (i >= n) {
            break;
        }
        const std::size_t start = i;
        while (i < n && !is_separator(text[i])) {
            ++i;
        }
        out.tokens.emplace_back(text.substr(start, i - start));
        out.offsets.push_back({start, i});
    }
    return out;
}

// Inverse of tokenize for single-space-separated text.
inline std::string detokenize(std::span<const std::string> tokens) {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i > 0) {
            out += ' ';
        }
        out += tokens[i];
    }
    return out;
}

enum class OccurrencePolicy {
    all,    // every occurrence of the flagged string is localized
    first,  // only the first occurrence
};

// Locates exact occurrences of `flagged` in the response text and maps each
// matched character range to the minimal inclusive token interval whose
// tokens intersect the range. A match that touches only separator characters
// produces no span; a flagged string with no exact match yields an empty
// result (callers count these, they are not errors).
inline std::vector<TokenSpan> locate_spans(const TokenizedText& response, std::string_view flagged,
                                           OccurrencePolicy policy = OccurrencePolicy::all) {
    if (flagged.empty()) {
        throw std::invalid_argument("locate_spans: flagged string must be non-empty");
    }
    std::vector<TokenSpan> spans;
    const std::string& text = response.text;
    std::size_t pos = text.find(flagged);
    while (pos != std::string::npos) {
        const std::size_t match_begin = pos;
        const std::size_t match_end = pos + flagged.size();
        // Minimal covering interval: first and last tokens intersecting the match.
        bool found = false;
        TokenSpan span{};
        for (std::size_t t = 0; t < response.offsets.size(); ++t) {
            const CharSpan& off = response.offsets[t];
            if (off.begin < match_end && off.end > match_begin) {
                if (!found) {
                    span.first = t;
                    found = true;
                }
                span.last = t;
            } else if (found && off.begin >= match_end) {
                break;
            }
        }
        if (found) {
            spans.push_back(span);
            if (policy == OccurrencePolicy::first) {
                break;
            }
        }
        pos = text.find(flagged, pos + 1);
    }
    return spans;
}

// Binary per-token penalty mask built as the union of the localized spans of
// all flagged substrings.
struct PenaltyMask {
    std::vector<std::uint8_t> bits;        // one per response token
    std::vector<TokenSpan> spans;          // localized spans, may overlap
    std::vector<std::string> source_flags; // the flag strings as given
    std::size_t unmatched_flags = 0;       // flags with no exact match

    std::size_t masked_count() const {
        std::size_t n = 0;
        for (auto b : bits) {
            n += b;
        }
        return n;
    }
};

inline PenaltyMask build_mask(const TokenizedText& response, std::span<const std::string> flags,
                              OccurrencePolicy policy = OccurrencePolicy::all) {
    PenaltyMask mask;
    mask.bits.assign(response.size(), 0);
    for (const std::string& flag : flags) {
        mask.source_flags.push_back(flag);
        if (flag.empty()) {
            ++mask.unmatched_flags;
            continue;
        }
        std::vector<TokenSpan> spans = locate_spans(response, flag, policy);
        if (spans.empty()) {
            ++mask.unmatched_flags;
            continue;
        }
        for (const TokenSpan& s : spans) {
            mask.spans.push_back(s);
            for (std::size_t t = s.first; t <= s.last; ++t) {
                mask.bits[t] = 1;
            }
        }
    }
    return mask;
}

}  // namespace psgrpo
