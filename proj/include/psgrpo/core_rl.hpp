#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "psgrpo/grounding.hpp"
#include "psgrpo/response.hpp"

namespace psgrpo {

class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class TokenAggregation {
    token_sum,   // sum over tokens inside each response, average over the group
    token_mean,  // per-response token mean, average over the group
};

struct TrainerConfig {
    int group_size = 8;
    double clip_epsilon = 0.2;
    double kl_coefficient = 0.01;
    double penalty_alpha = 0.1;
    double std_floor = 1e-8;
    double learning_rate = 0.02;
    TokenAggregation token_aggregation = TokenAggregation::token_sum;

    void validate() const {
        if (group_size < 2) {
            throw std::invalid_argument("TrainerConfig: group_size must be >= 2");
        }
        if (!(clip_epsilon > 0.0 && clip_epsilon < 1.0)) {
            throw std::invalid_argument("TrainerConfig: clip_epsilon must be in (0,1)");
        }
        if (!(kl_coefficient >= 0.0)) {
            throw std::invalid_argument("TrainerConfig: kl_coefficient must be >= 0");
        }
        if (!(penalty_alpha >= 0.0 && penalty_alpha <= 1.0)) {
            throw std::invalid_argument("TrainerConfig: penalty_alpha must be in [0,1]");
        }
        if (!(std_floor > 0.0)) {
            throw std::invalid_argument("TrainerConfig: std_floor must be positive");
        }
        if (!(learning_rate > 0.0)) {
            throw std::invalid_argument("TrainerConfig: learning_rate must be positive");
        }
    }
};

enum class GroupKind {
    perception,  // token-level penalties apply
    general,     // sequence-level advantages only
};

// A group of rollouts for one prompt with their scalar outcome rewards.
struct RolloutGroup {
    std::vector<Response> responses;
    std::vector<double> rewards;
    GroupKind task_kind = GroupKind::perception;

    void validate() const {
        if (responses.size() < 2) {
            throw std::invalid_argument("RolloutGroup: group size must be >= 2");
        }
        if (responses.size() != rewards.size()) {
            throw DimensionError("RolloutGroup: responses/rewards size mismatch");
        }
        for (double r : rewards) {
            if (!std::isfinite(r)) {
                throw NumericError("RolloutGroup: non-finite reward");
            }
        }
    }
};

// Sequence-level advantage plus its per-token re-allocation.
struct AdvantageVector {
    double sequence_advantage = 0.0;
    std::vector<double> token_advantages;
};

// Per-token pieces of the surrogate objective for one group, plus the scalar.
struct SurrogateTerms {
    std::vector<std::vector<double>> ratios;
    std::vector<std::vector<double>> clipped_term;
    std::vector<std::vector<double>> kl_term;
    double objective = 0.0;
};

// Group-relative advantages: each reward normalized against the group mean
// and population standard deviation (divide by G). Groups whose std falls
// below std_floor get all-zero advantages instead of a near-division-by-zero.
inline std::vector<double> group_advantages(std::span<const double> rewards, double std_floor = 1e-8) {
    const std::size_t g = rewards.size();
    if (g < 2) {
        throw std::invalid_argument("group_advantages: group size must be >= 2");
    }
    for (double r : rewards) {
        if (!std::isfinite(r)) {
            throw NumericError("group_advantages: non-finite reward");
        }
    }
    double mean = 0.0;
    for (double r : rewards) {
        mean += r;
    }
    mean /= static_cast<double>(g);
    double var = 0.0;
    for (double r : rewards) {
        const double d = r - mean;
        var += d * d;
    }
    var /= static_cast<double>(g);
    const double std = std::sqrt(var);
    if (std < std_floor) {
        return std::vector<double>(g, 0.0);
    }
    std::vector<double> out(g);
    for (std::size_t i = 0; i < g; ++i) {
        out[i] = (rewards[i] - mean) / std;
    }
    return out;
}

// Token-level advantage re-allocation. Masked tokens are down-weighted when
// the sequence advantage is positive and penalized harder when it is
// negative; unmasked tokens keep the sequence advantage exactly. Computed in
// the sign-split form so the positive/negative cases hold to the last bit:
//   adv > 0: adv * (1 - alpha);  adv < 0: adv * (1 + alpha);  adv == 0: adv.
inline std::vector<double> rescale_token_advantages(double sequence_advantage, const PenaltyMask& mask,
                                                    double alpha) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) {
        throw std::invalid_argument("rescale_token_advantages: alpha must be in [0,1]");
    }
    if (!std::isfinite(sequence_advantage)) {
        throw NumericError("rescale_token_advantages: non-finite advantage");
    }
    const double masked_value = sequence_advantage > 0.0   ? sequence_advantage * (1.0 - alpha)
                                : sequence_advantage < 0.0 ? sequence_advantage * (1.0 + alpha)
                                                           : sequence_advantage;
    std::vector<double> out(mask.bits.size());
    for (std::size_t t = 0; t < mask.bits.size(); ++t) {
        out[t] = mask.bits[t] ? masked_value : sequence_advantage;
    }
    return out;
}

// Builds the advantage vector for one response of known token length. The
// mask, when present, must match the length.
inline AdvantageVector make_advantage_vector(double sequence_advantage, std::size_t token_count,
                                             const PenaltyMask* mask, double alpha) {
    AdvantageVector av;
    av.sequence_advantage = sequence_advantage;
    if (mask != nullptr) {
        if (mask->bits.size() != token_count) {
            throw DimensionError("make_advantage_vector: mask/length mismatch");
        }
        av.token_advantages = rescale_token_advantages(sequence_advantage, *mask, alpha);
    } else {
        av.token_advantages.assign(token_count, sequence_advantage);
    }
    return av;
}

// Per-token probability ratios exp(logp_new - logp_old).
inline std::vector<double> importance_ratios(std::span<const double> logp_new,
                                             std::span<const double> logp_old) {
    if (logp_new.size() != logp_old.size()) {
        throw DimensionError("importance_ratios: length mismatch");
    }
    std::vector<double> out(logp_new.size());
    for (std::size_t t = 0; t < logp_new.size(); ++t) {
        if (!std::isfinite(logp_new[t]) || !std::isfinite(logp_old[t])) {
            throw NumericError("importance_ratios: non-finite log-probability");
        }
        out[t] = std::exp(logp_new[t] - logp_old[t]);
    }
    return out;
}

// min(r * adv, clamp(r, 1-eps, 1+eps) * adv), with the token-level advantage
// used in both branches.
inline std::vector<double> clipped_surrogate(std::span<const double> ratios,
                                             std::span<const double> token_advantages, double epsilon) {
    if (ratios.size() != token_advantages.size()) {
        throw DimensionError("clipped_surrogate: length mismatch");
    }
    if (!(epsilon > 0.0 && epsilon < 1.0)) {
        throw std::invalid_argument("clipped_surrogate: epsilon must be in (0,1)");
    }
    std::vector<double> out(ratios.size());
    for (std::size_t t = 0; t < ratios.size(); ++t) {
        const double r = ratios[t];
        const double a = token_advantages[t];
        const double clamped = std::clamp(r, 1.0 - epsilon, 1.0 + epsilon);
        out[t] = std::min(r * a, clamped * a);
    }
    return out;
}

// Per-token nonnegative KL estimate exp(d) - d - 1 with d = logp_ref - logp_new.
// Zero exactly when the two log-probabilities agree.
inline std::vector<double> kl_penalty(std::span<const double> logp_new,
                                      std::span<const double> logp_ref) {
    if (logp_new.size() != logp_ref.size()) {
        throw DimensionError("kl_penalty: length mismatch");
    }
    std::vector<double> out(logp_new.size());
    for (std::size_t t = 0; t < logp_new.size(); ++t) {
        if (!std::isfinite(logp_new[t]) || !std::isfinite(logp_ref[t])) {
            throw NumericError("kl_penalty: non-finite log-probability");
        }
        const double d = logp_ref[t] - logp_new[t];
        out[t] = std::exp(d) - d - 1.0;
    }
    return out;
}

// The clipped surrogate objective over one rollout group:
//   (1/G) sum_i agg_t [ min(r A', clip(r) A') ] - beta (1/G) sum_i agg_t [ kl ]
// where agg is a plain token sum under token_sum and a per-response mean
// under token_mean.
inline SurrogateTerms grpo_objective(const RolloutGroup& group,
                                     const std::vector<AdvantageVector>& advantages,
                                     const std::vector<std::vector<double>>& logp_new,
                                     const std::vector<std::vector<double>>& logp_old,
                                     const std::vector<std::vector<double>>& logp_ref,
                                     const TrainerConfig& config) {
    group.validate();
    config.validate();
    const std::size_t g = group.responses.size();
    if (advantages.size() != g || logp_new.size() != g || logp_old.size() != g || logp_ref.size() != g) {
        throw DimensionError("grpo_objective: group size mismatch across inputs");
    }

    SurrogateTerms terms;
    terms.ratios.resize(g);
    terms.clipped_term.resize(g);
    terms.kl_term.resize(g);

    double surrogate_total = 0.0;
    double kl_total = 0.0;
    for (std::size_t i = 0; i < g; ++i) {
        const std::size_t len = group.responses[i].length();
        if (advantages[i].token_advantages.size() != len || logp_new[i].size() != len ||
            logp_old[i].size() != len || logp_ref[i].size() != len) {
            throw DimensionError("grpo_objective: per-token length mismatch in response " +
                                 std::to_string(i));
        }
        terms.ratios[i] = importance_ratios(logp_new[i], logp_old[i]);
        terms.clipped_term[i] =
            clipped_surrogate(terms.ratios[i], advantages[i].token_advantages, config.clip_epsilon);
        terms.kl_term[i] = kl_penalty(logp_new[i], logp_ref[i]);

        double surrogate_i = 0.0;
        double kl_i = 0.0;
        for (std::size_t t = 0; t < len; ++t) {
            surrogate_i += terms.clipped_term[i][t];
            kl_i += terms.kl_term[i][t];
        }
        if (config.token_aggregation == TokenAggregation::token_mean && len > 0) {
            surrogate_i /= static_cast<double>(len);
            kl_i /= static_cast<double>(len);
        }
        surrogate_total += surrogate_i;
        kl_total += kl_i;
    }
    terms.objective = surrogate_total / static_cast<double>(g) -
                      config.kl_coefficient * (kl_total / static_cast<double>(g));
    if (!std::isfinite(terms.objective)) {
        throw NumericError("grpo_objective: non-finite objective");
    }
    return terms;
}

}  // namespace psgrpo
