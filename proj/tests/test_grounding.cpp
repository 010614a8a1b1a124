#include <doctest.h>

#include <algorithm>
#include <string>
#include <vector>

#include "psgrpo/grounding.hpp"
#include "psgrpo/rng.hpp"

using namespace psgrpo;

namespace {

// Independent brute-force localization: every occurrence by scan, covering
// interval by checking intersection of each token against the match.
std::vector<TokenSpan> brute_force_spans(const TokenizedText& tt, const std::string& flagged) {
    std::vector<TokenSpan> out;
    for (std::size_t pos = 0; pos + flagged.size() <= tt.text.size(); ++pos) {
        if (tt.text.compare(pos, flagged.size(), flagged) != 0) {
            continue;
        }
        const std::size_t match_end = pos + flagged.size();
        std::vector<std::size_t> hit;
        for (std::size_t t = 0; t < tt.offsets.size(); ++t) {
            if (tt.offsets[t].begin < match_end && tt.offsets[t].end > pos) {
                hit.push_back(t);
            }
        }
        if (!hit.empty()) {
            out.push_back({hit.front(), hit.back()});
        }
    }
    return out;
}

}  // namespace

TEST_CASE("tokenize basics") {
    CHECK(tokenize("").size() == 0);

    const TokenizedText tt = tokenize("the mug");
    REQUIRE(tt.tokens.size() == 2);
    CHECK(tt.tokens[0] == "the");
    CHECK(tt.tokens[1] == "mug");
    CHECK(tt.offsets[0].begin == 0);
    CHECK(tt.offsets[0].end == 3);
    CHECK(tt.offsets[1].begin == 4);
    CHECK(tt.offsets[1].end == 7);
}

TEST_CASE("tokenize offsets slice back to the original text") {
    const TokenizedText tt = tokenize("  a  bb\tccc\nd ");
    REQUIRE(tt.tokens.size() == 4);
    for (std::size_t i = 0; i < tt.tokens.size(); ++i) {
        CHECK(tt.text.substr(tt.offsets[i].begin, tt.offsets[i].end - tt.offsets[i].begin) ==
              tt.tokens[i]);
    }
    // offsets strictly increasing and non-overlapping
    for (std::size_t i = 1; i < tt.offsets.size(); ++i) {
        CHECK(tt.offsets[i].begin >= tt.offsets[i - 1].end);
    }
}

TEST_CASE("detokenize round trip on single-space text") {
    SplitMix64 rng(7);
    const std::vector<std::string> pool = {"a", "bb", "ccc", "it's", "x,y", "z."};
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<std::string> words;
        const int n = 1 + static_cast<int>(rng.next_below(8));
        for (int i = 0; i < n; ++i) {
            words.push_back(pool[rng.next_below(pool.size())]);
        }
        const std::string text = detokenize(words);
        CHECK(detokenize(tokenize(text).tokens) == text);
    }
}

TEST_CASE("locate_spans: flag across token boundaries") {
    const TokenizedText tt = tokenize("The mug is on the brick near the wall.");
    const auto spans = locate_spans(tt, "on the brick");
    REQUIRE(spans.size() == 1);
    CHECK(spans[0].first == 3);
    CHECK(spans[0].last == 5);
}

TEST_CASE("locate_spans: absent flag yields empty list") {
    const TokenizedText tt = tokenize("The mug is on the brick");
    CHECK(locate_spans(tt, "zebra").empty());
}

TEST_CASE("locate_spans: all and first occurrence policies") {
    const TokenizedText tt = tokenize("the cat saw the dog");
    const auto all = locate_spans(tt, "the", OccurrencePolicy::all);
    REQUIRE(all.size() == 2);
    CHECK(all[0] == TokenSpan{0, 0});
    CHECK(all[1] == TokenSpan{3, 3});
    const auto first = locate_spans(tt, "the", OccurrencePolicy::first);
    REQUIRE(first.size() == 1);
    CHECK(first[0] == TokenSpan{0, 0});
}

TEST_CASE("locate_spans: empty flag rejected") {
    const TokenizedText tt = tokenize("a b");
    CHECK_THROWS_AS(locate_spans(tt, ""), std::invalid_argument);
}

TEST_CASE("locate_spans matches brute force on random inputs") {
    SplitMix64 rng(1234);
    const std::vector<std::string> pool = {"aa", "b", "ab", "ba", "aab"};
    for (int trial = 0; trial < 200; ++trial) {
        std::string text;
        const int n = 1 + static_cast<int>(rng.next_below(10));
        for (int i = 0; i < n; ++i) {
            if (i > 0) {
                text += std::string(1 + rng.next_below(2), ' ');
            }
            text += pool[rng.next_below(pool.size())];
        }
        const TokenizedText tt = tokenize(text);
        // random flagged substring of the text
        const std::size_t begin = rng.next_below(text.size());
        const std::size_t len = 1 + rng.next_below(text.size() - begin);
        const std::string flagged = text.substr(begin, len);
        if (flagged.find_first_not_of(' ') == std::string::npos) {
            continue;
        }
        CHECK(locate_spans(tt, flagged) == brute_force_spans(tt, flagged));
    }
}

TEST_CASE("build_mask: no flags means all-zero mask") {
    const TokenizedText tt = tokenize("a b c d");
    const PenaltyMask mask = build_mask(tt, {});
    CHECK(mask.bits == std::vector<std::uint8_t>{0, 0, 0, 0});
    CHECK(mask.masked_count() == 0);
    CHECK(mask.unmatched_flags == 0);
}

TEST_CASE("build_mask: union of spans and unmatched counting") {
    const TokenizedText tt = tokenize("t0 t1 t2 t3 t4 t5 t6 t7");
    const std::vector<std::string> flags = {"t3 t4 t5", "t7", "missing"};
    const PenaltyMask mask = build_mask(tt, flags);
    CHECK(mask.bits == std::vector<std::uint8_t>{0, 0, 0, 1, 1, 1, 0, 1});
    CHECK(mask.unmatched_flags == 1);
}

TEST_CASE("build_mask: overlapping flags form one union, idempotent") {
    const TokenizedText tt = tokenize("w0 w1 w2 w3 w4 w5 w6");
    const std::vector<std::string> flags = {"w2 w3 w4", "w3 w4 w5 w6"};
    const PenaltyMask mask = build_mask(tt, flags);
    CHECK(mask.bits == std::vector<std::uint8_t>{0, 0, 1, 1, 1, 1, 1});

    // re-union with the same flags changes nothing
    std::vector<std::string> twice = flags;
    twice.insert(twice.end(), flags.begin(), flags.end());
    CHECK(build_mask(tt, twice).bits == mask.bits);
}

TEST_CASE("build_mask is order-independent in its flags") {
    SplitMix64 rng(99);
    const TokenizedText tt = tokenize("alpha beta gamma delta epsilon zeta");
    std::vector<std::string> flags = {"beta gamma", "delta", "zeta", "gamma delta epsilon"};
    const PenaltyMask forward = build_mask(tt, flags);
    std::vector<std::string> reversed(flags.rbegin(), flags.rend());
    CHECK(build_mask(tt, reversed).bits == forward.bits);
}

TEST_CASE("coverage and minimality on random flag placements") {
    SplitMix64 rng(31337);
    for (int trial = 0; trial < 300; ++trial) {
        std::string text;
        const int n = 2 + static_cast<int>(rng.next_below(10));
        for (int i = 0; i < n; ++i) {
            if (i > 0) {
                text += std::string(1 + rng.next_below(3), ' ');
            }
            const int len = 1 + static_cast<int>(rng.next_below(5));
            for (int c = 0; c < len; ++c) {
                text += static_cast<char>('a' + rng.next_below(4));
            }
        }
        const TokenizedText tt = tokenize(text);
        const std::size_t begin = rng.next_below(text.size());
        const std::size_t len = 1 + rng.next_below(text.size() - begin);
        const std::string flagged = text.substr(begin, len);
        if (flagged.find_first_not_of(' ') == std::string::npos) {
            continue;
        }
        for (const TokenSpan& span : locate_spans(tt, flagged)) {
            // first and last tokens of the span must intersect some match
            bool first_used = false;
            bool last_used = false;
            for (std::size_t pos = 0; pos + flagged.size() <= text.size(); ++pos) {
                if (text.compare(pos, flagged.size(), flagged) != 0) {
                    continue;
                }
                const std::size_t end = pos + flagged.size();
                if (tt.offsets[span.first].begin < end && tt.offsets[span.first].end > pos) {
                    first_used = true;
                }
                if (tt.offsets[span.last].begin < end && tt.offsets[span.last].end > pos) {
                    last_used = true;
                }
            }
            CHECK(first_used);
            CHECK(last_used);
        }
    }
}
