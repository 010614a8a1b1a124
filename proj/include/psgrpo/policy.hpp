#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "psgrpo/core_rl.hpp"
#include "psgrpo/encoding.hpp"
#include "psgrpo/grounding.hpp"
#include "psgrpo/response.hpp"
#include "psgrpo/rng.hpp"

namespace psgrpo {

// Row-major dense matrix of doubles.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

    double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
};

enum class ParamsRole { trainable, rollout_snapshot, reference };

// One-hidden-layer tanh network over [task features; one-hot context window]:
//   logits = output_weights * tanh(input_weights * x + input_bias) + output_bias.
// The pad index is excluded from the token distribution everywhere, so
// sampling, scoring and gradients all see the same renormalized softmax.
struct PolicyParams {
    int vocab_size = 0;
    int hidden_dim = 0;
    int feature_dim = 0;
    int context_len = 0;
    int pad_index = 0;
    ParamsRole role = ParamsRole::trainable;

    Matrix input_weights;              // hidden x in_dim
    std::vector<double> input_bias;    // hidden
    Matrix output_weights;             // vocab x hidden
    std::vector<double> output_bias;   // vocab

    int in_dim() const { return feature_dim + context_len * vocab_size; }

    void validate() const {
        if (vocab_size < 2 || hidden_dim < 1 || feature_dim < 1 || context_len < 1) {
            throw std::invalid_argument("PolicyParams: bad dimensions");
        }
        if (pad_index < 0 || pad_index >= vocab_size) {
            throw std::invalid_argument("PolicyParams: pad index out of range");
        }
        const std::size_t in = static_cast<std::size_t>(in_dim());
        if (input_weights.rows != static_cast<std::size_t>(hidden_dim) || input_weights.cols != in ||
            input_bias.size() != static_cast<std::size_t>(hidden_dim) ||
            output_weights.rows != static_cast<std::size_t>(vocab_size) ||
            output_weights.cols != static_cast<std::size_t>(hidden_dim) ||
            output_bias.size() != static_cast<std::size_t>(vocab_size)) {
            throw DimensionError("PolicyParams: tensor shapes inconsistent with dimensions");
        }
        for (double v : input_weights.data) {
            if (!std::isfinite(v)) {
                throw NumericError("PolicyParams: non-finite input weight");
            }
        }
        for (double v : output_weights.data) {
            if (!std::isfinite(v)) {
                throw NumericError("PolicyParams: non-finite output weight");
            }
        }
    }

    static PolicyParams zeros(int vocab, int hidden, int feature, int context, int pad = 0) {
        PolicyParams p;
        p.vocab_size = vocab;
        p.hidden_dim = hidden;
        p.feature_dim = feature;
        p.context_len = context;
        p.pad_index = pad;
        p.input_weights = Matrix(static_cast<std::size_t>(hidden), static_cast<std::size_t>(p.in_dim()));
        p.input_bias.assign(static_cast<std::size_t>(hidden), 0.0);
        p.output_weights = Matrix(static_cast<std::size_t>(vocab), static_cast<std::size_t>(hidden));
        p.output_bias.assign(static_cast<std::size_t>(vocab), 0.0);
        p.validate();
        return p;
    }

    static PolicyParams random_init(int vocab, int hidden, int feature, int context, uint64_t seed,
                                    double scale = 0.08, int pad = 0) {
        PolicyParams p = zeros(vocab, hidden, feature, context, pad);
        SplitMix64 rng(seed);
        auto fill = [&](std::vector<double>& v) {
            for (double& x : v) {
                x = scale * (2.0 * rng.next_double01() - 1.0);
            }
        };
        fill(p.input_weights.data);
        fill(p.output_weights.data);
        return p;
    }

    PolicyParams as_role(ParamsRole r) const {
        PolicyParams copy = *this;
        copy.role = r;
        return copy;
    }
};

namespace detail {

// Contribution of the dense feature block to the hidden pre-activation;
// constant per task, so it is computed once per rollout group.
inline std::vector<double> feature_preactivation(const PolicyParams& p,
                                                 std::span<const double> feats) {
    if (feats.size() != static_cast<std::size_t>(p.feature_dim)) {
        throw DimensionError("feature_preactivation: feature length mismatch");
    }
    std::vector<double> pre(static_cast<std::size_t>(p.hidden_dim), 0.0);
    for (std::size_t h = 0; h < pre.size(); ++h) {
        const double* row = &p.input_weights.data[h * p.input_weights.cols];
        double acc = 0.0;
        for (std::size_t f = 0; f < feats.size(); ++f) {
            acc += row[f] * feats[f];
        }
        pre[h] = acc;
    }
    return pre;
}

inline void check_context(const PolicyParams& p, std::span<const int> context) {
    if (context.size() != static_cast<std::size_t>(p.context_len)) {
        throw DimensionError("policy: context must hold exactly context_len token indices");
    }
    for (int t : context) {
        if (t < 0 || t >= p.vocab_size) {
            throw DimensionError("policy: context token index out of range");
        }
    }
}

// Hidden activation for one step given the cached feature pre-activation.
inline std::vector<double> hidden_activation(const PolicyParams& p,
                                             std::span<const double> feature_pre,
                                             std::span<const int> context) {
    check_context(p, context);
    std::vector<double> h(static_cast<std::size_t>(p.hidden_dim));
    for (std::size_t k = 0; k < h.size(); ++k) {
        const double* row = &p.input_weights.data[k * p.input_weights.cols];
        double acc = feature_pre[k] + p.input_bias[k];
        for (int c = 0; c < p.context_len; ++c) {
            acc += row[p.feature_dim + c * p.vocab_size + context[static_cast<std::size_t>(c)]];
        }
        h[k] = std::tanh(acc);
    }
    return h;
}

inline std::vector<double> logits_from_hidden(const PolicyParams& p, std::span<const double> h) {
    std::vector<double> logits(static_cast<std::size_t>(p.vocab_size));
    for (std::size_t v = 0; v < logits.size(); ++v) {
        const double* row = &p.output_weights.data[v * p.output_weights.cols];
        double acc = p.output_bias[v];
        for (std::size_t k = 0; k < h.size(); ++k) {
            acc += row[k] * h[k];
        }
        logits[v] = acc;
    }
    return logits;
}

// The last context_len tokens before position t, left-padded with pad.
inline std::vector<int> context_window(std::span<const int> tokens, std::size_t t, int context_len,
                                       int pad_index) {
    std::vector<int> ctx(static_cast<std::size_t>(context_len), pad_index);
    for (int c = 0; c < context_len; ++c) {
        const long src = static_cast<long>(t) - context_len + c;
        if (src >= 0) {
            ctx[static_cast<std::size_t>(c)] = tokens[static_cast<std::size_t>(src)];
        }
    }
    return ctx;
}

}  // namespace detail

inline std::vector<double> step_logits(const PolicyParams& params, std::span<const double> feats,
                                       std::span<const int> context_tokens) {
    params.validate();
    const std::vector<double> pre = detail::feature_preactivation(params, feats);
    const std::vector<double> h = detail::hidden_activation(params, pre, context_tokens);
    return detail::logits_from_hidden(params, h);
}

// Log-softmax over the vocabulary with the pad index excluded; the pad entry
// is -inf. Log-sum-exp stabilized, finite for all finite logits.
inline std::vector<double> log_softmax_masked(std::span<const double> logits, int pad_index) {
    double max_logit = -std::numeric_limits<double>::infinity();
    for (std::size_t v = 0; v < logits.size(); ++v) {
        if (static_cast<int>(v) != pad_index) {
            max_logit = std::max(max_logit, logits[v]);
        }
    }
    double sum = 0.0;
    for (std::size_t v = 0; v < logits.size(); ++v) {
        if (static_cast<int>(v) != pad_index) {
            sum += std::exp(logits[v] - max_logit);
        }
    }
    const double lse = max_logit + std::log(sum);
    std::vector<double> out(logits.size());
    for (std::size_t v = 0; v < logits.size(); ++v) {
        out[v] = static_cast<int>(v) == pad_index ? -std::numeric_limits<double>::infinity()
                                                  : logits[v] - lse;
    }
    return out;
}

// Teacher-forced log-probabilities of a token sequence under the policy.
inline std::vector<double> token_log_probs(const PolicyParams& params, std::span<const double> feats,
                                           std::span<const int> tokens) {
    const std::vector<double> feature_pre = detail::feature_preactivation(params, feats);
    std::vector<double> out;
    out.reserve(tokens.size());
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        const int tok = tokens[t];
        if (tok < 0 || tok >= params.vocab_size || tok == params.pad_index) {
            throw DimensionError("token_log_probs: token index invalid");
        }
        const std::vector<int> ctx =
            detail::context_window(tokens, t, params.context_len, params.pad_index);
        const std::vector<double> h = detail::hidden_activation(params, feature_pre, ctx);
        const std::vector<double> logits = detail::logits_from_hidden(params, h);
        const std::vector<double> logp = log_softmax_masked(logits, params.pad_index);
        out.push_back(logp[static_cast<std::size_t>(tok)]);
    }
    return out;
}

namespace detail {

// Categorical draw from softmax(logits / temperature) with pad excluded.
inline int sample_token(std::span<const double> logits, double temperature, int pad_index,
                        SplitMix64& rng) {
    double max_logit = -std::numeric_limits<double>::infinity();
    for (std::size_t v = 0; v < logits.size(); ++v) {
        if (static_cast<int>(v) != pad_index) {
            max_logit = std::max(max_logit, logits[v]);
        }
    }
    std::vector<double> weights(logits.size(), 0.0);
    double total = 0.0;
    for (std::size_t v = 0; v < logits.size(); ++v) {
        if (static_cast<int>(v) != pad_index) {
            weights[v] = std::exp((logits[v] - max_logit) / temperature);
            total += weights[v];
        }
    }
    const double u = rng.next_double01() * total;
    double acc = 0.0;
    int last_valid = 0;
    for (std::size_t v = 0; v < logits.size(); ++v) {
        if (static_cast<int>(v) == pad_index) {
            continue;
        }
        acc += weights[v];
        last_valid = static_cast<int>(v);
        if (u < acc) {
            return last_valid;
        }
    }
    return last_valid;
}

inline int greedy_token(std::span<const double> logits, int pad_index) {
    int best = -1;
    double best_logit = -std::numeric_limits<double>::infinity();
    for (std::size_t v = 0; v < logits.size(); ++v) {
        if (static_cast<int>(v) == pad_index) {
            continue;
        }
        if (logits[v] > best_logit) {
            best_logit = logits[v];
            best = static_cast<int>(v);
        }
    }
    return best;
}

}  // namespace detail

// Continues a response from a fixed token prefix, optionally inserting an
// injected text (which must tokenize fully into the vocabulary) before the
// sampled continuation. Sampling runs until the end token or until the total
// length reaches max_len; log-probabilities (at temperature 1) are recorded
// only for sampled tokens. Deterministic per seed.
inline Response continue_response(const PolicyParams& params, const EnvBinding& binding,
                                  const Task& task, std::span<const int> prefix_tokens,
                                  std::string_view injected_text, int max_len, double temperature,
                                  uint64_t seed) {
    if (max_len < 1) {
        throw std::invalid_argument("continue_response: max_len must be >= 1");
    }
    if (!(temperature > 0.0)) {
        throw std::invalid_argument("continue_response: temperature must be positive");
    }
    if (params.vocab_size != binding.vocab.size()) {
        throw DimensionError("continue_response: params/vocabulary size mismatch");
    }
    Response response;
    response.task_id = task.id;
    for (int tok : prefix_tokens) {
        if (tok < 0 || tok >= params.vocab_size || tok == params.pad_index) {
            throw VocabularyError("continue_response: invalid prefix token index");
        }
        response.tokens.push_back(tok);
    }
    if (!injected_text.empty()) {
        for (const std::string& word : tokenize(injected_text).tokens) {
            response.tokens.push_back(binding.vocab.require(word));
        }
    }

    const std::vector<double> feats = binding.layout.encode(task);
    const std::vector<double> feature_pre = detail::feature_preactivation(params, feats);
    SplitMix64 rng(seed);
    while (response.tokens.size() < static_cast<std::size_t>(max_len)) {
        const std::vector<int> ctx = detail::context_window(
            response.tokens, response.tokens.size(), params.context_len, params.pad_index);
        const std::vector<double> h = detail::hidden_activation(params, feature_pre, ctx);
        const std::vector<double> logits = detail::logits_from_hidden(params, h);
        const int tok = detail::sample_token(logits, temperature, params.pad_index, rng);
        if (tok == binding.vocab.eos_index()) {
            break;
        }
        const std::vector<double> logp = log_softmax_masked(logits, params.pad_index);
        response.tokens.push_back(tok);
        response.per_token_logp.push_back(logp[static_cast<std::size_t>(tok)]);
    }

    std::vector<std::string> words;
    words.reserve(response.tokens.size());
    for (int tok : response.tokens) {
        words.push_back(binding.vocab.word(tok));
    }
    response.text = detokenize(words);
    return response;
}

// Autoregressive sampling from an empty prefix.
inline Response sample_response(const PolicyParams& params, const EnvBinding& binding,
                                const Task& task, int max_len, double temperature, uint64_t seed) {
    return continue_response(params, binding, task, {}, "", max_len, temperature, seed);
}

// Deterministic argmax decoding; ties resolve to the lowest token index.
inline Response greedy_response(const PolicyParams& params, const EnvBinding& binding,
                                const Task& task, int max_len) {
    if (max_len < 1) {
        throw std::invalid_argument("greedy_response: max_len must be >= 1");
    }
    Response response;
    response.task_id = task.id;
    const std::vector<double> feats = binding.layout.encode(task);
    const std::vector<double> feature_pre = detail::feature_preactivation(params, feats);
    while (response.tokens.size() < static_cast<std::size_t>(max_len)) {
        const std::vector<int> ctx = detail::context_window(
            response.tokens, response.tokens.size(), params.context_len, params.pad_index);
        const std::vector<double> h = detail::hidden_activation(params, feature_pre, ctx);
        const std::vector<double> logits = detail::logits_from_hidden(params, h);
        const int tok = detail::greedy_token(logits, params.pad_index);
        if (tok == binding.vocab.eos_index()) {
            break;
        }
        const std::vector<double> logp = log_softmax_masked(logits, params.pad_index);
        response.tokens.push_back(tok);
        response.per_token_logp.push_back(logp[static_cast<std::size_t>(tok)]);
    }
    std::vector<std::string> words;
    for (int tok : response.tokens) {
        words.push_back(binding.vocab.word(tok));
    }
    response.text = detokenize(words);
    return response;
}

// Gradient container mirroring PolicyParams tensor shapes.
struct PolicyGradient {
    Matrix input_weights;
    std::vector<double> input_bias;
    Matrix output_weights;
    std::vector<double> output_bias;

    static PolicyGradient zeros_like(const PolicyParams& p) {
        PolicyGradient g;
        g.input_weights = Matrix(p.input_weights.rows, p.input_weights.cols);
        g.input_bias.assign(p.input_bias.size(), 0.0);
        g.output_weights = Matrix(p.output_weights.rows, p.output_weights.cols);
        g.output_bias.assign(p.output_bias.size(), 0.0);
        return g;
    }

    double max_abs() const {
        double m = 0.0;
        for (const auto* vec : {&input_weights.data, &input_bias, &output_weights.data, &output_bias}) {
            for (double v : *vec) {
                m = std::max(m, std::abs(v));
            }
        }
        return m;
    }

    bool all_finite() const {
        for (const auto* vec : {&input_weights.data, &input_bias, &output_weights.data, &output_bias}) {
            for (double v : *vec) {
                if (!std::isfinite(v)) {
                    return false;
                }
            }
        }
        return true;
    }
};

// One rollout group prepared for an update: the shared task features, the
// sampled responses with rewards, their advantage vectors, and the log-probs
// recorded under the rollout and reference policies.
struct RolloutBatchGroup {
    std::vector<double> task_features;
    RolloutGroup group;
    std::vector<AdvantageVector> advantages;
    std::vector<std::vector<double>> logp_old;
    std::vector<std::vector<double>> logp_ref;
};

// The surrogate objective of a batch: the mean of the per-group objectives,
// with logp_new recomputed from the given parameters.
inline double batch_objective(const PolicyParams& params,
                              std::span<const RolloutBatchGroup> batch, const TrainerConfig& config) {
    if (batch.empty()) {
        throw std::invalid_argument("batch_objective: empty batch");
    }
    double total = 0.0;
    for (const RolloutBatchGroup& item : batch) {
        std::vector<std::vector<double>> logp_new;
        logp_new.reserve(item.group.responses.size());
        for (const Response& r : item.group.responses) {
            logp_new.push_back(token_log_probs(params, item.task_features, r.tokens));
        }
        total += grpo_objective(item.group, item.advantages, logp_new, item.logp_old, item.logp_ref,
                                config)
                     .objective;
    }
    return total / static_cast<double>(batch.size());
}

// Analytic gradient of batch_objective with respect to the parameters.
// Clipping is handled as branch selection: tokens on the clipped branch with
// the ratio outside the trust region contribute zero surrogate gradient. The
// reduction order is fixed (groups, then responses, then tokens), so results
// are reproducible.
inline PolicyGradient objective_gradient(const PolicyParams& params,
                                         std::span<const RolloutBatchGroup> batch,
                                         const TrainerConfig& config) {
    params.validate();
    config.validate();
    if (batch.empty()) {
        throw std::invalid_argument("objective_gradient: empty batch");
    }
    PolicyGradient grad = PolicyGradient::zeros_like(params);
    const double batch_scale = 1.0 / static_cast<double>(batch.size());
    const double eps = config.clip_epsilon;
    const double beta = config.kl_coefficient;

    std::vector<double> dlogits(static_cast<std::size_t>(params.vocab_size));
    std::vector<double> dpre(static_cast<std::size_t>(params.hidden_dim));
    std::vector<double> dpre_task(static_cast<std::size_t>(params.hidden_dim));

    for (std::size_t gi = 0; gi < batch.size(); ++gi) {
        const RolloutBatchGroup& item = batch[gi];
        item.group.validate();
        const std::size_t g = item.group.responses.size();
        if (item.advantages.size() != g || item.logp_old.size() != g || item.logp_ref.size() != g) {
            throw DimensionError("objective_gradient: group size mismatch in batch item " +
                                 std::to_string(gi));
        }
        const std::vector<double> feature_pre =
            detail::feature_preactivation(params, item.task_features);
        const double group_scale = batch_scale / static_cast<double>(g);
        std::fill(dpre_task.begin(), dpre_task.end(), 0.0);

        for (std::size_t i = 0; i < g; ++i) {
            const Response& resp = item.group.responses[i];
            const std::size_t len = resp.length();
            if (item.advantages[i].token_advantages.size() != len || item.logp_old[i].size() != len ||
                item.logp_ref[i].size() != len) {
                throw DimensionError("objective_gradient: per-token length mismatch in response " +
                                     std::to_string(i));
            }
            const double token_scale =
                config.token_aggregation == TokenAggregation::token_mean && len > 0
                    ? group_scale / static_cast<double>(len)
                    : group_scale;

            for (std::size_t t = 0; t < len; ++t) {
                const int tok = resp.tokens[t];
                const std::vector<int> ctx =
                    detail::context_window(resp.tokens, t, params.context_len, params.pad_index);
                const std::vector<double> h = detail::hidden_activation(params, feature_pre, ctx);
                const std::vector<double> logits = detail::logits_from_hidden(params, h);
                const std::vector<double> logp = log_softmax_masked(logits, params.pad_index);
                const double lp_new = logp[static_cast<std::size_t>(tok)];
                if (!std::isfinite(lp_new)) {
                    throw NumericError("objective_gradient: non-finite log-probability at response " +
                                       std::to_string(i) + " token " + std::to_string(t));
                }

                const double ratio = std::exp(lp_new - item.logp_old[i][t]);
                const double adv = item.advantages[i].token_advantages[t];
                const double unclipped = ratio * adv;
                const double clipped = std::clamp(ratio, 1.0 - eps, 1.0 + eps) * adv;
                double coeff = unclipped <= clipped ? ratio * adv : 0.0;

                const double delta = item.logp_ref[i][t] - lp_new;
                coeff += beta * (std::exp(delta) - 1.0);

                const double w = token_scale * coeff;
                if (w == 0.0) {
                    continue;
                }

                // d logp[tok] / d logits = onehot(tok) - softmax (pad entry zero)
                for (int v = 0; v < params.vocab_size; ++v) {
                    const double p =
                        v == params.pad_index ? 0.0 : std::exp(logp[static_cast<std::size_t>(v)]);
                    dlogits[static_cast<std::size_t>(v)] = w * ((v == tok ? 1.0 : 0.0) - p);
                }

                for (int v = 0; v < params.vocab_size; ++v) {
                    const double dv = dlogits[static_cast<std::size_t>(v)];
                    if (dv == 0.0) {
                        continue;
                    }
                    grad.output_bias[static_cast<std::size_t>(v)] += dv;
                    double* grow = &grad.output_weights.data[static_cast<std::size_t>(v) *
                                                             grad.output_weights.cols];
                    for (int k = 0; k < params.hidden_dim; ++k) {
                        grow[k] += dv * h[static_cast<std::size_t>(k)];
                    }
                }

                for (int k = 0; k < params.hidden_dim; ++k) {
                    double acc = 0.0;
                    for (int v = 0; v < params.vocab_size; ++v) {
                        acc += params.output_weights.at(static_cast<std::size_t>(v),
                                                        static_cast<std::size_t>(k)) *
                               dlogits[static_cast<std::size_t>(v)];
                    }
                    const double hk = h[static_cast<std::size_t>(k)];
                    dpre[static_cast<std::size_t>(k)] = acc * (1.0 - hk * hk);
                }

                for (int k = 0; k < params.hidden_dim; ++k) {
                    const double d = dpre[static_cast<std::size_t>(k)];
                    if (d == 0.0) {
                        continue;
                    }
                    grad.input_bias[static_cast<std::size_t>(k)] += d;
                    dpre_task[static_cast<std::size_t>(k)] += d;
                    double* irow =
                        &grad.input_weights.data[static_cast<std::size_t>(k) * grad.input_weights.cols];
                    for (int c = 0; c < params.context_len; ++c) {
                        irow[params.feature_dim + c * params.vocab_size +
                             ctx[static_cast<std::size_t>(c)]] += d;
                    }
                }
            }
        }

        // Feature block accumulated once per group: the features are shared.
        for (int k = 0; k < params.hidden_dim; ++k) {
            const double d = dpre_task[static_cast<std::size_t>(k)];
            if (d == 0.0) {
                continue;
            }
            double* irow =
                &grad.input_weights.data[static_cast<std::size_t>(k) * grad.input_weights.cols];
            for (std::size_t f = 0; f < item.task_features.size(); ++f) {
                irow[f] += d * item.task_features[f];
            }
        }
    }

    if (!grad.all_finite()) {
        throw NumericError("objective_gradient: non-finite gradient");
    }
    return grad;
}

// A token sequence paired with the task features it conditions on.
struct SequenceExample {
    std::vector<double> features;
    std::vector<int> tokens;
};

// Mean per-token log-likelihood of the examples under the policy.
inline double mean_log_likelihood(const PolicyParams& params,
                                  std::span<const SequenceExample> examples) {
    double total = 0.0;
    std::size_t count = 0;
    for (const SequenceExample& ex : examples) {
        for (double lp : token_log_probs(params, ex.features, ex.tokens)) {
            total += lp;
        }
        count += ex.tokens.size();
    }
    if (count == 0) {
        throw std::invalid_argument("mean_log_likelihood: no tokens");
    }
    return total / static_cast<double>(count);
}

// Gradient of mean_log_likelihood; drives supervised imitation of template
// demonstrations.
inline PolicyGradient log_likelihood_gradient(const PolicyParams& params,
                                              std::span<const SequenceExample> examples) {
    params.validate();
    std::size_t count = 0;
    for (const SequenceExample& ex : examples) {
        count += ex.tokens.size();
    }
    if (count == 0) {
        throw std::invalid_argument("log_likelihood_gradient: no tokens");
    }
    const double w = 1.0 / static_cast<double>(count);

    PolicyGradient grad = PolicyGradient::zeros_like(params);
    std::vector<double> dlogits(static_cast<std::size_t>(params.vocab_size));
    std::vector<double> dpre(static_cast<std::size_t>(params.hidden_dim));
    std::vector<double> dpre_seq(static_cast<std::size_t>(params.hidden_dim));

    for (const SequenceExample& ex : examples) {
        const std::vector<double> feature_pre = detail::feature_preactivation(params, ex.features);
        std::fill(dpre_seq.begin(), dpre_seq.end(), 0.0);
        for (std::size_t t = 0; t < ex.tokens.size(); ++t) {
            const int tok = ex.tokens[t];
            if (tok < 0 || tok >= params.vocab_size || tok == params.pad_index) {
                throw DimensionError("log_likelihood_gradient: token index invalid");
            }
            const std::vector<int> ctx =
                detail::context_window(ex.tokens, t, params.context_len, params.pad_index);
            const std::vector<double> h = detail::hidden_activation(params, feature_pre, ctx);
            const std::vector<double> logits = detail::logits_from_hidden(params, h);
            const std::vector<double> logp = log_softmax_masked(logits, params.pad_index);

            for (int v = 0; v < params.vocab_size; ++v) {
                const double p =
                    v == params.pad_index ? 0.0 : std::exp(logp[static_cast<std::size_t>(v)]);
                dlogits[static_cast<std::size_t>(v)] = w * ((v == tok ? 1.0 : 0.0) - p);
            }
            for (int v = 0; v < params.vocab_size; ++v) {
                const double dv = dlogits[static_cast<std::size_t>(v)];
                grad.output_bias[static_cast<std::size_t>(v)] += dv;
                double* grow =
                    &grad.output_weights.data[static_cast<std::size_t>(v) * grad.output_weights.cols];
                for (int k = 0; k < params.hidden_dim; ++k) {
                    grow[k] += dv * h[static_cast<std::size_t>(k)];
                }
            }
            for (int k = 0; k < params.hidden_dim; ++k) {
                double acc = 0.0;
                for (int v = 0; v < params.vocab_size; ++v) {
                    acc += params.output_weights.at(static_cast<std::size_t>(v),
                                                    static_cast<std::size_t>(k)) *
                           dlogits[static_cast<std::size_t>(v)];
                }
                const double hk = h[static_cast<std::size_t>(k)];
                dpre[static_cast<std::size_t>(k)] = acc * (1.0 - hk * hk);
            }
            for (int k = 0; k < params.hidden_dim; ++k) {
                const double d = dpre[static_cast<std::size_t>(k)];
                if (d == 0.0) {
                    continue;
                }
                grad.input_bias[static_cast<std::size_t>(k)] += d;
                dpre_seq[static_cast<std::size_t>(k)] += d;
                double* irow =
                    &grad.input_weights.data[static_cast<std::size_t>(k) * grad.input_weights.cols];
                for (int c = 0; c < params.context_len; ++c) {
                    irow[params.feature_dim + c * params.vocab_size +
                         ctx[static_cast<std::size_t>(c)]] += d;
                }
            }
        }
        for (int k = 0; k < params.hidden_dim; ++k) {
            const double d = dpre_seq[static_cast<std::size_t>(k)];
            if (d == 0.0) {
                continue;
            }
            double* irow =
                &grad.input_weights.data[static_cast<std::size_t>(k) * grad.input_weights.cols];
            for (std::size_t f = 0; f < ex.features.size(); ++f) {
                irow[f] += d * ex.features[f];
            }
        }
    }
    if (!grad.all_finite()) {
        throw NumericError("log_likelihood_gradient: non-finite gradient");
    }
    return grad;
}

enum class OptimizerKind { adam, sgd };

// Adaptive-moment state; decay constants 0.9/0.999 with bias correction.
struct AdamState {
    std::int64_t step = 0;
    PolicyGradient first_moment;
    PolicyGradient second_moment;

    static AdamState zeros_like(const PolicyParams& p) {
        AdamState s;
        s.first_moment = PolicyGradient::zeros_like(p);
        s.second_moment = PolicyGradient::zeros_like(p);
        return s;
    }
};

namespace detail {

inline void adam_update(std::vector<double>& param, const std::vector<double>& grad,
                        std::vector<double>& m, std::vector<double>& v, double lr, double bc1,
                        double bc2) {
    constexpr double kBeta1 = 0.9;
    constexpr double kBeta2 = 0.999;
    constexpr double kEps = 1e-8;
    for (std::size_t i = 0; i < param.size(); ++i) {
        m[i] = kBeta1 * m[i] + (1.0 - kBeta1) * grad[i];
        v[i] = kBeta2 * v[i] + (1.0 - kBeta2) * grad[i] * grad[i];
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        param[i] += lr * mhat / (std::sqrt(vhat) + kEps);
    }
}

inline void sgd_update(std::vector<double>& param, const std::vector<double>& grad, double lr) {
    for (std::size_t i = 0; i < param.size(); ++i) {
        param[i] += lr * grad[i];
    }
}

}  // namespace detail

// Ascent step on the objective. Only trainable parameters may be stepped;
// rollout snapshots and the reference policy stay frozen.
inline void optimizer_step(PolicyParams& params, const PolicyGradient& gradient, double learning_rate,
                           AdamState& state, OptimizerKind kind = OptimizerKind::adam) {
    if (params.role != ParamsRole::trainable) {
        throw std::invalid_argument("optimizer_step: parameters are a frozen snapshot");
    }
    if (gradient.input_weights.rows != params.input_weights.rows ||
        gradient.input_weights.cols != params.input_weights.cols ||
        gradient.output_weights.rows != params.output_weights.rows ||
        gradient.output_weights.cols != params.output_weights.cols) {
        throw DimensionError("optimizer_step: gradient/parameter shape mismatch");
    }
    if (kind == OptimizerKind::sgd) {
        detail::sgd_update(params.input_weights.data, gradient.input_weights.data, learning_rate);
        detail::sgd_update(params.input_bias, gradient.input_bias, learning_rate);
        detail::sgd_update(params.output_weights.data, gradient.output_weights.data, learning_rate);
        detail::sgd_update(params.output_bias, gradient.output_bias, learning_rate);
        return;
    }
    state.step += 1;
    const double bc1 = 1.0 - std::pow(0.9, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(0.999, static_cast<double>(state.step));
    detail::adam_update(params.input_weights.data, gradient.input_weights.data,
                        state.first_moment.input_weights.data, state.second_moment.input_weights.data,
                        learning_rate, bc1, bc2);
    detail::adam_update(params.input_bias, gradient.input_bias, state.first_moment.input_bias,
                        state.second_moment.input_bias, learning_rate, bc1, bc2);
    detail::adam_update(params.output_weights.data, gradient.output_weights.data,
                        state.first_moment.output_weights.data,
                        state.second_moment.output_weights.data, learning_rate, bc1, bc2);
    detail::adam_update(params.output_bias, gradient.output_bias, state.first_moment.output_bias,
                        state.second_moment.output_bias, learning_rate, bc1, bc2);
}

}  // namespace psgrpo
