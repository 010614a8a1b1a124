#pragma once

#include <string>
#include <vector>

namespace psgrpo {

// One generated rollout: vocabulary indices, their text rendering, and the
// log-probabilities recorded under the generating policy. For responses
// continued from a fixed prefix, log-probabilities cover only the sampled
// tail (tokens.size() - per_token_logp.size() gives the fixed prefix length).
struct Response {
    std::vector<int> tokens;
    std::string text;
    std::vector<double> per_token_logp;
    std::string task_id;

    std::size_t length() const { return tokens.size(); }
};

}  // namespace psgrpo
