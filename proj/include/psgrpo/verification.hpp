#pragma once

#include <cctype>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace psgrpo {

// Structured verifier output: free-form analysis plus the exact response
// substrings judged erroneous. An empty flag list means the response was
// judged correct; is_correct is derived so the two can never disagree.
struct Verification {
    std::string think;
    std::vector<std::string> flags;

    bool is_correct() const { return flags.empty(); }

    friend bool operator==(const Verification&, const Verification&) = default;
};

class VerificationParseError : public std::runtime_error {
public:
    VerificationParseError(const std::string& what, std::string offending)
        : std::runtime_error(what + ": \"" + offending + "\""), offending_(std::move(offending)) {}

    const std::string& offending_text() const { return offending_; }

private:
    std::string offending_;
};

inline constexpr std::string_view kCorrectSentence = "The response is correct.";

namespace detail {

inline std::string escape_flag(std::string_view flag) {
    std::string out;
    out.reserve(flag.size() + 2);
    for (char c : flag) {
        if (c == '\\' || c == '"') {
            out += '\\';
        }
        out += c;
    }
    return out;
}

inline std::string_view trim(std::string_view s) {
    std::size_t b = 0;
    std::size_t e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) {
        ++b;
    }
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) {
        --e;
    }
    return s.substr(b, e - b);
}

// Parses a bracketed list of quoted strings. Accepts single or double quotes
// and an optional trailing comma; backslash escapes the next character.
inline std::vector<std::string> parse_flag_list(std::string_view body) {
    std::vector<std::string> flags;
    std::size_t i = 1;  // past '['
    const std::size_t n = body.size();
    auto skip_ws = [&] {
        while (i < n && std::isspace(static_cast<unsigned char>(body[i]))) {
            ++i;
        }
    };
    skip_ws();
    bool closed = false;
    while (i < n) {
        if (body[i] == ']') {
            ++i;
            closed = true;
            break;
        }
        const char quote = body[i];
        if (quote != '"' && quote != '\'') {
            throw VerificationParseError("expected quoted string in flag list", std::string(body));
        }
        ++i;
        std::string flag;
        bool terminated = false;
        while (i < n) {
            const char c = body[i];
            if (c == '\\') {
                if (i + 1 >= n) {
                    throw VerificationParseError("dangling escape in flag list", std::string(body));
                }
                flag += body[i + 1];
                i += 2;
            } else if (c == quote) {
                ++i;
                terminated = true;
                break;
            } else {
                flag += c;
                ++i;
            }
        }
        if (!terminated) {
            throw VerificationParseError("unterminated string in flag list", std::string(body));
        }
        if (flag.empty()) {
            throw VerificationParseError("empty flag string in list", std::string(body));
        }
        flags.push_back(std::move(flag));
        skip_ws();
        if (i < n && body[i] == ',') {
            ++i;
            skip_ws();
        } else if (i < n && body[i] == ']') {
            ++i;
            closed = true;
            break;
        } else {
            throw VerificationParseError("expected ',' or ']' in flag list", std::string(body));
        }
    }
    if (!closed) {
        throw VerificationParseError("unterminated flag list", std::string(body));
    }
    if (trim(body.substr(i)) != "") {
        throw VerificationParseError("trailing content after flag list", std::string(body));
    }
    return flags;
}

}  // namespace detail

// Renders the think-then-answer form: the analysis inside <think>...</think>
// followed by the decision inside <answer>...</answer>. The answer body is
// the literal correct-sentence when there are no flags, otherwise a bracketed
// list of double-quoted flag strings with backslash escaping. Byte-identical
// output for identical input.
inline std::string render_verification(const Verification& v) {
    std::string out;
    out += "<think>";
    out += v.think;
    out += "</think><answer>";
    if (v.flags.empty()) {
        out += kCorrectSentence;
    } else {
        out += '[';
        for (std::size_t i = 0; i < v.flags.size(); ++i) {
            if (i > 0) {
                out += ", ";
            }
            out += '"';
            out += detail::escape_flag(v.flags[i]);
            out += '"';
        }
        out += ']';
    }
    out += "</answer>";
    return out;
}

// Extracts the last <answer> block and parses its body as either the literal
// correct-sentence or a bracketed quoted-string list. The think field is the
// content of the first <think> block, empty when absent. Throws
// VerificationParseError when the answer block is missing, unclosed, or its
// body matches neither grammar.
inline Verification parse_verification(std::string_view text) {
    constexpr std::string_view answer_open = "<answer>";
    constexpr std::string_view answer_close = "</answer>";
    const std::size_t open_pos = text.rfind(answer_open);
    if (open_pos == std::string_view::npos) {
        throw VerificationParseError("missing <answer> block", std::string(text));
    }
    const std::size_t body_begin = open_pos + answer_open.size();
    const std::size_t close_pos = text.find(answer_close, body_begin);
    if (close_pos == std::string_view::npos) {
        throw VerificationParseError("unclosed <answer> block", std::string(text));
    }
    const std::string_view body = detail::trim(text.substr(body_begin, close_pos - body_begin));

    Verification v;
    constexpr std::string_view think_open = "<think>";
    constexpr std::string_view think_close = "</think>";
    const std::size_t t_open = text.find(think_open);
    if (t_open != std::string_view::npos) {
        const std::size_t t_begin = t_open + think_open.size();
        const std::size_t t_close = text.find(think_close, t_begin);
        if (t_close != std::string_view::npos) {
            v.think.assign(text.substr(t_begin, t_close - t_begin));
        }
    }

    if (body == kCorrectSentence) {
        return v;
    }
    if (!body.empty() && body.front() == '[') {
        v.flags = detail::parse_flag_list(body);
        return v;
    }
    throw VerificationParseError("answer body matches neither grammar", std::string(body));
}

}  // namespace psgrpo
