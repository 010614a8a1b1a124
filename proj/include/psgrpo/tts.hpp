#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "psgrpo/env.hpp"
#include "psgrpo/grounding.hpp"
#include "psgrpo/policy.hpp"
#include "psgrpo/response.hpp"
#include "psgrpo/rng.hpp"
#include "psgrpo/verification.hpp"

namespace psgrpo {

enum class TtsStrategy { truncate, truncate_thinking, majority_vote };

inline std::string_view tts_strategy_name(TtsStrategy s) {
    switch (s) {
        case TtsStrategy::truncate: return "truncate";
        case TtsStrategy::truncate_thinking: return "truncate-thinking";
        case TtsStrategy::majority_vote: return "majority-vote";
    }
    return "?";
}

struct TtsConfig {
    int max_iterations = 4;  // generation passes, the first sample included
    TtsStrategy strategy = TtsStrategy::truncate;
    std::string thinking_template = "wait i need to reconsider this reasoning more carefully {}";
    int vote_samples = 4;
    int max_len = 16;
    double temperature = 1.0;

    void validate() const {
        if (max_iterations < 1) {
            throw std::invalid_argument("TtsConfig: max_iterations must be >= 1");
        }
        if (vote_samples < 1) {
            throw std::invalid_argument("TtsConfig: vote_samples must be >= 1");
        }
        std::size_t count = 0;
        for (std::size_t pos = thinking_template.find("{}"); pos != std::string::npos;
             pos = thinking_template.find("{}", pos + 2)) {
            ++count;
        }
        if (count != 1) {
            throw std::invalid_argument("TtsConfig: thinking_template needs exactly one {} placeholder");
        }
    }
};

// One generation pass of a refinement loop. truncation_point is the verified
// prefix length this response was continued from (absent for the initial
// sample and for fresh resamples); injected_text is the reflection prompt
// inserted before the continuation, when any.
struct TtsIteration {
    Response response;
    std::string verification_text;
    Verification verification;
    bool parse_failed = false;
    std::optional<std::size_t> truncation_point;
    std::string injected_text;
};

enum class StopReason { clean, cap_reached };

struct TtsTrace {
    std::vector<TtsIteration> iterations;
    Response final_response;
    StopReason stop_reason = StopReason::clean;
};

// A verifier consumes the task and response text and returns a rendered
// verification string (the think-then-answer format). Returning text rather
// than a structured value lets refinement loops see parse failures exactly as
// a policy model would.
using VerifierFn = std::function<std::string(const Task&, const std::string&)>;

inline VerifierFn make_oracle_verifier() {
    return [](const Task& task, const std::string& text) {
        return render_verification(oracle_verify(task.scene, text));
    };
}

inline VerifierFn make_noisy_verifier(double flip_probability, uint64_t seed) {
    return [flip_probability, seed](const Task& task, const std::string& text) {
        const uint64_t call_seed = derive_seed(seed, {fnv1a64(text.data(), text.size())});
        return render_verification(noisy_verify(task.scene, text, flip_probability, call_seed));
    };
}

// Tokens before the earliest located flag span. Returns nothing when no flag
// string has an exact match in the response, signalling the caller to fall
// back to a fresh resample.
inline std::optional<std::vector<int>> truncate_before_first_flag(const Response& response,
                                                                  const Verification& verification) {
    if (verification.flags.empty()) {
        throw std::invalid_argument("truncate_before_first_flag: verification has no flags");
    }
    const TokenizedText tt = tokenize(response.text);
    if (tt.size() != response.tokens.size()) {
        throw DimensionError("truncate_before_first_flag: response text/token misalignment");
    }
    std::optional<std::size_t> first_start;
    for (const std::string& flag : verification.flags) {
        if (flag.empty()) {
            continue;
        }
        for (const TokenSpan& span : locate_spans(tt, flag, OccurrencePolicy::all)) {
            if (!first_start.has_value() || span.first < *first_start) {
                first_start = span.first;
            }
        }
    }
    if (!first_start.has_value()) {
        return std::nullopt;
    }
    return std::vector<int>(response.tokens.begin(),
                            response.tokens.begin() + static_cast<long>(*first_start));
}

namespace detail {

// The oracle records its suggested fix as a trailing "correction: ..." line
// in the think field; refinement loops reuse the last such line.
inline std::optional<std::string> extract_correction(std::string_view think) {
    constexpr std::string_view marker = "correction: ";
    std::optional<std::string> found;
    std::size_t start = 0;
    while (start <= think.size()) {
        std::size_t end = think.find('\n', start);
        if (end == std::string_view::npos) {
            end = think.size();
        }
        const std::string_view line = think.substr(start, end - start);
        if (line.substr(0, marker.size()) == marker) {
            found = std::string(line.substr(marker.size()));
        }
        if (end == think.size()) {
            break;
        }
        start = end + 1;
    }
    return found;
}

inline std::string fill_template(const std::string& tmpl, std::string_view correction) {
    const std::size_t pos = tmpl.find("{}");
    std::string out = tmpl;
    out.replace(pos, 2, correction);
    return out;
}

inline bool fully_in_vocabulary(const Vocabulary& vocab, std::string_view text) {
    for (const std::string& word : tokenize(text).tokens) {
        if (!vocab.find(word).has_value()) {
            return false;
        }
    }
    return true;
}

inline TtsTrace run_refinement(const PolicyParams& params, const EnvBinding& binding, const Task& task,
                               const VerifierFn& verifier, const TtsConfig& config, uint64_t seed,
                               bool with_thinking) {
    config.validate();
    TtsTrace trace;
    std::optional<std::vector<int>> prefix;
    std::string injection;

    for (int iter = 0; iter < config.max_iterations; ++iter) {
        TtsIteration record;
        const uint64_t iter_seed = derive_seed(seed, {static_cast<uint64_t>(iter)});
        if (prefix.has_value()) {
            record.response = continue_response(params, binding, task, *prefix, injection,
                                                config.max_len, config.temperature, iter_seed);
            record.truncation_point = prefix->size();
            record.injected_text = injection;
        } else {
            record.response =
                sample_response(params, binding, task, config.max_len, config.temperature, iter_seed);
        }
        record.verification_text = verifier(task, record.response.text);
        try {
            record.verification = parse_verification(record.verification_text);
        } catch (const VerificationParseError&) {
            record.parse_failed = true;  // fail open: treated as no errors found
            record.verification = Verification{};
        }

        const bool clean = record.verification.is_correct();
        const Response response = record.response;
        const Verification verification = record.verification;
        trace.iterations.push_back(std::move(record));

        if (clean) {
            trace.stop_reason = StopReason::clean;
            trace.final_response = response;
            return trace;
        }
        if (iter + 1 == config.max_iterations) {
            trace.stop_reason = StopReason::cap_reached;
            trace.final_response = response;
            return trace;
        }

        prefix = truncate_before_first_flag(response, verification);
        injection.clear();
        if (prefix.has_value() && with_thinking) {
            const std::optional<std::string> correction = extract_correction(verification.think);
            if (correction.has_value()) {
                const std::string filled = fill_template(config.thinking_template, *correction);
                if (fully_in_vocabulary(binding.vocab, filled)) {
                    injection = filled;
                }
                // otherwise fall back to plain truncation for this iteration
            }
        }
    }
    return trace;  // unreachable: the loop always returns
}

}  // namespace detail

// Truncate-then-regenerate: verify, cut the response before the first flagged
// token, and resample the continuation, repeating until the verifier finds
// nothing or the iteration cap is reached.
inline TtsTrace run_truncate_regenerate(const PolicyParams& params, const EnvBinding& binding,
                                        const Task& task, const VerifierFn& verifier,
                                        const TtsConfig& config, uint64_t seed) {
    if (config.strategy != TtsStrategy::truncate) {
        throw std::invalid_argument("run_truncate_regenerate: config.strategy must be truncate");
    }
    return detail::run_refinement(params, binding, task, verifier, config, seed, false);
}

// As run_truncate_regenerate, but a reflection prompt built from the
// verifier's correction is inserted between the verified prefix and the
// regenerated continuation.
inline TtsTrace run_truncate_thinking(const PolicyParams& params, const EnvBinding& binding,
                                      const Task& task, const VerifierFn& verifier,
                                      const TtsConfig& config, uint64_t seed) {
    if (config.strategy != TtsStrategy::truncate_thinking) {
        throw std::invalid_argument("run_truncate_thinking: config.strategy must be truncate_thinking");
    }
    return detail::run_refinement(params, binding, task, verifier, config, seed, true);
}

// Plurality over the extracted answers, in sampling order. Unanswered
// samples do not vote; ties break toward the answer seen earliest; an
// entirely unanswered pool yields the empty string.
inline std::string plurality_answer(std::span<const std::optional<std::string>> answers) {
    struct Entry {
        std::string answer;
        int count = 0;
    };
    std::vector<Entry> tally;
    for (const std::optional<std::string>& answer : answers) {
        if (!answer.has_value()) {
            continue;
        }
        bool merged = false;
        for (Entry& e : tally) {
            if (e.answer == *answer) {
                ++e.count;
                merged = true;
                break;
            }
        }
        if (!merged) {
            tally.push_back({*answer, 1});
        }
    }
    std::string best;
    int best_count = 0;
    for (const Entry& e : tally) {  // insertion order implements the tie-break
        if (e.count > best_count) {
            best_count = e.count;
            best = e.answer;
        }
    }
    return best;
}

// Samples vote_samples responses on derived seeds and returns the plurality
// final answer.
inline std::string majority_vote(const PolicyParams& params, const EnvBinding& binding,
                                 const Task& task, int vote_samples, int max_len, double temperature,
                                 uint64_t seed) {
    if (vote_samples < 1) {
        throw std::invalid_argument("majority_vote: vote_samples must be >= 1");
    }
    std::vector<std::optional<std::string>> answers;
    answers.reserve(static_cast<std::size_t>(vote_samples));
    for (int s = 0; s < vote_samples; ++s) {
        const Response response = sample_response(params, binding, task, max_len, temperature,
                                                  derive_seed(seed, {static_cast<uint64_t>(s)}));
        answers.push_back(extract_final_answer(response.text));
    }
    return plurality_answer(answers);
}

}  // namespace psgrpo
