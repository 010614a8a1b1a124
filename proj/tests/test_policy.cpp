#include <doctest.h>

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "psgrpo/encoding.hpp"
#include "psgrpo/env.hpp"
#include "psgrpo/policy.hpp"
#include "psgrpo/rng.hpp"

using namespace psgrpo;

namespace {

Task simple_task() {
    Scene scene;
    scene.grid_extent = 4;
    scene.objects = {{"mug", Color::red, ObjectSize::small, 1, 1},
                     {"brick", Color::green, ObjectSize::large, 3, 2}};
    Task task;
    task.id = "t0";
    task.scene = scene;
    task.kind = TaskKind::attribute;
    task.query = "what color is the mug";
    task.gold_answer = "red";
    task.subject_name = "mug";
    return task;
}

// Central finite differences of a scalar function over every parameter entry.
PolicyGradient numeric_gradient(PolicyParams params,
                                const std::function<double(const PolicyParams&)>& f, double h) {
    PolicyGradient g = PolicyGradient::zeros_like(params);
    auto probe = [&](std::vector<double>& tensor, std::vector<double>& out) {
        for (std::size_t i = 0; i < tensor.size(); ++i) {
            const double saved = tensor[i];
            tensor[i] = saved + h;
            const double up = f(params);
            tensor[i] = saved - h;
            const double down = f(params);
            tensor[i] = saved;
            out[i] = (up - down) / (2.0 * h);
        }
    };
    probe(params.input_weights.data, g.input_weights.data);
    probe(params.input_bias, g.input_bias);
    probe(params.output_weights.data, g.output_weights.data);
    probe(params.output_bias, g.output_bias);
    return g;
}

double max_rel_error(const PolicyGradient& a, const PolicyGradient& n, double floor) {
    double worst = 0.0;
    auto scan = [&](const std::vector<double>& x, const std::vector<double>& y) {
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double denom = std::max({floor, std::abs(x[i]), std::abs(y[i])});
            worst = std::max(worst, std::abs(x[i] - y[i]) / denom);
        }
    };
    scan(a.input_weights.data, n.input_weights.data);
    scan(a.input_bias, n.input_bias);
    scan(a.output_weights.data, n.output_weights.data);
    scan(a.output_bias, n.output_bias);
    return worst;
}

// Random tiny instance for gradient checking. Log-probs for the old and
// reference policies come from independently perturbed parameter sets, so
// ratios differ from one and both clip branches get exercised.
struct TinyInstance {
    PolicyParams params;
    std::vector<RolloutBatchGroup> batch;
    TrainerConfig config;
};

TinyInstance make_tiny_instance(uint64_t seed, double alpha) {
    SplitMix64 rng(seed);
    const int vocab = 4 + static_cast<int>(rng.next_below(9));   // <= 12
    const int hidden = 2 + static_cast<int>(rng.next_below(7));  // <= 8
    const int feats = 2 + static_cast<int>(rng.next_below(5));
    const int context = 1 + static_cast<int>(rng.next_below(3));
    const int pad = 0;

    TinyInstance inst;
    inst.params = PolicyParams::random_init(vocab, hidden, feats, context, rng.next(), 0.4, pad);
    const PolicyParams old_params =
        PolicyParams::random_init(vocab, hidden, feats, context, rng.next(), 0.4, pad);
    const PolicyParams ref_params =
        PolicyParams::random_init(vocab, hidden, feats, context, rng.next(), 0.4, pad);

    inst.config.group_size = 2 + static_cast<int>(rng.next_below(2));
    inst.config.clip_epsilon = 0.2;
    inst.config.kl_coefficient = 0.01;
    inst.config.penalty_alpha = alpha;
    inst.config.token_aggregation =
        rng.next_below(2) == 0 ? TokenAggregation::token_sum : TokenAggregation::token_mean;

    const int n_groups = 1 + static_cast<int>(rng.next_below(2));
    for (int gi = 0; gi < n_groups; ++gi) {
        RolloutBatchGroup item;
        item.task_features.resize(static_cast<std::size_t>(feats));
        for (double& f : item.task_features) {
            f = rng.next_double01();
        }
        std::vector<double> rewards;
        for (int i = 0; i < inst.config.group_size; ++i) {
            Response r;
            const std::size_t len = 1 + rng.next_below(5);
            for (std::size_t t = 0; t < len; ++t) {
                int tok = static_cast<int>(rng.next_below(static_cast<uint64_t>(vocab)));
                if (tok == pad) {
                    tok = 1;
                }
                r.tokens.push_back(tok);
            }
            rewards.push_back(static_cast<double>(rng.next_below(2)));
            item.logp_old.push_back(token_log_probs(old_params, item.task_features, r.tokens));
            item.logp_ref.push_back(token_log_probs(ref_params, item.task_features, r.tokens));
            item.group.responses.push_back(std::move(r));
        }
        item.group.rewards = rewards;
        const std::vector<double> advs = group_advantages(rewards, inst.config.std_floor);
        for (int i = 0; i < inst.config.group_size; ++i) {
            const std::size_t len = item.group.responses[static_cast<std::size_t>(i)].length();
            PenaltyMask mask;
            mask.bits.resize(len);
            for (auto& b : mask.bits) {
                b = static_cast<std::uint8_t>(rng.next_below(2));
            }
            item.advantages.push_back(
                make_advantage_vector(advs[static_cast<std::size_t>(i)], len, &mask, alpha));
        }
        inst.batch.push_back(std::move(item));
    }
    return inst;
}

bool near_clip_boundary(const TinyInstance& inst, double margin) {
    for (const RolloutBatchGroup& item : inst.batch) {
        for (std::size_t i = 0; i < item.group.responses.size(); ++i) {
            const std::vector<double> lp_new = token_log_probs(
                inst.params, item.task_features, item.group.responses[i].tokens);
            for (std::size_t t = 0; t < lp_new.size(); ++t) {
                const double r = std::exp(lp_new[t] - item.logp_old[i][t]);
                if (std::abs(r - (1.0 - inst.config.clip_epsilon)) < margin ||
                    std::abs(r - (1.0 + inst.config.clip_epsilon)) < margin) {
                    return true;
                }
            }
        }
    }
    return false;
}

}  // namespace

TEST_CASE("step_logits: zero parameters give the uniform policy") {
    const PolicyParams p = PolicyParams::zeros(6, 3, 4, 2);
    const std::vector<double> feats = {0.5, 0.1, 0.0, 1.0};
    const std::vector<int> ctx = {0, 0};
    const std::vector<double> logits = step_logits(p, feats, ctx);
    for (double l : logits) {
        CHECK(l == 0.0);
    }
}

TEST_CASE("log_softmax_masked: normalization and finiteness") {
    SplitMix64 rng(3);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> logits(5);
        for (double& l : logits) {
            l = 200.0 * rng.next_double01() - 100.0;
        }
        const std::vector<double> logp = log_softmax_masked(logits, 0);
        double sum = 0.0;
        for (std::size_t v = 1; v < logp.size(); ++v) {
            CHECK(std::isfinite(logp[v]));
            sum += std::exp(logp[v]);
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(std::isinf(logp[0]));
    }
}

TEST_CASE("step_logits: output bias perturbation shifts exactly one logit") {
    PolicyParams p = PolicyParams::random_init(6, 3, 4, 2, 99);
    const std::vector<double> feats = {0.5, 0.1, 0.0, 1.0};
    const std::vector<int> ctx = {2, 3};
    const std::vector<double> before = step_logits(p, feats, ctx);
    p.output_bias[4] += 0.125;
    const std::vector<double> after = step_logits(p, feats, ctx);
    for (std::size_t v = 0; v < before.size(); ++v) {
        if (v == 4) {
            CHECK(after[v] == doctest::Approx(before[v] + 0.125).epsilon(1e-15));
        } else {
            CHECK(after[v] == before[v]);
        }
    }
}

TEST_CASE("features: deterministic, fixed dimension, localized color change") {
    const Task task = simple_task();
    const std::vector<double> f1 = features(task);
    const std::vector<double> f2 = features(task);
    CHECK(f1 == f2);
    CHECK(static_cast<int>(f1.size()) == FeatureLayout::feature_dim());

    Task changed = task;
    changed.scene.objects[0].color = Color::blue;
    const std::vector<double> f3 = features(changed);
    const int slot = FeatureLayout::name_slot("mug");
    const int base = slot * FeatureLayout::kObjectBlock;
    int diffs = 0;
    for (std::size_t i = 0; i < f1.size(); ++i) {
        if (f1[i] != f3[i]) {
            ++diffs;
            const int idx = static_cast<int>(i);
            CHECK(idx >= base + 1);
            CHECK(idx < base + 1 + FeatureLayout::kColorCount);
        }
    }
    CHECK(diffs == 2);  // old color off, new color on
}

TEST_CASE("sampling: deterministic per seed, stored logp self-consistent") {
    const EnvBinding binding = EnvBinding::environment_default();
    const Task task = simple_task();
    const PolicyParams p = PolicyParams::random_init(binding.vocab.size(), 8,
                                                     FeatureLayout::feature_dim(), 4, 7, 0.3);
    const Response a = sample_response(p, binding, task, 12, 1.0, 42);
    const Response b = sample_response(p, binding, task, 12, 1.0, 42);
    CHECK(a.tokens == b.tokens);
    CHECK(a.text == b.text);
    CHECK(a.per_token_logp == b.per_token_logp);

    const std::vector<double> recomputed = token_log_probs(p, features(task), a.tokens);
    REQUIRE(recomputed.size() == a.per_token_logp.size());
    for (std::size_t t = 0; t < recomputed.size(); ++t) {
        CHECK(a.per_token_logp[t] == doctest::Approx(recomputed[t]).epsilon(1e-12));
        CHECK(a.per_token_logp[t] <= 0.0);
    }
}

TEST_CASE("sampling: near-zero temperature matches greedy decoding") {
    const EnvBinding binding = EnvBinding::environment_default();
    const Task task = simple_task();
    for (uint64_t s = 0; s < 5; ++s) {
        const PolicyParams p = PolicyParams::random_init(binding.vocab.size(), 8,
                                                         FeatureLayout::feature_dim(), 4, s, 0.5);
        const Response greedy = greedy_response(p, binding, task, 10);
        const Response cold = sample_response(p, binding, task, 10, 1e-6, s + 100);
        CHECK(greedy.tokens == cold.tokens);
    }
}

TEST_CASE("sampling never emits pad or end tokens into the text") {
    const EnvBinding binding = EnvBinding::environment_default();
    const Task task = simple_task();
    const PolicyParams p = PolicyParams::zeros(binding.vocab.size(), 4,
                                               FeatureLayout::feature_dim(), 4);
    for (uint64_t s = 0; s < 30; ++s) {
        const Response r = sample_response(p, binding, task, 8, 1.0, s);
        for (int tok : r.tokens) {
            CHECK(tok != binding.vocab.pad_index());
            CHECK(tok != binding.vocab.eos_index());
        }
        CHECK(r.text == detokenize(tokenize(r.text).tokens));
    }
}

TEST_CASE("continue_response: degenerate call equals sample_response") {
    const EnvBinding binding = EnvBinding::environment_default();
    const Task task = simple_task();
    const PolicyParams p = PolicyParams::random_init(binding.vocab.size(), 8,
                                                     FeatureLayout::feature_dim(), 4, 5, 0.3);
    const Response direct = sample_response(p, binding, task, 12, 1.0, 77);
    const Response via_continue = continue_response(p, binding, task, {}, "", 12, 1.0, 77);
    CHECK(direct.tokens == via_continue.tokens);
    CHECK(direct.per_token_logp == via_continue.per_token_logp);
}

TEST_CASE("continue_response: prefix preserved, injection verbatim, OOV rejected") {
    const EnvBinding binding = EnvBinding::environment_default();
    const Task task = simple_task();
    const PolicyParams p = PolicyParams::random_init(binding.vocab.size(), 8,
                                                     FeatureLayout::feature_dim(), 4, 5, 0.3);
    const std::vector<int> prefix = {binding.vocab.require("the"), binding.vocab.require("mug"),
                                     binding.vocab.require("is")};
    const std::string injection = "wait i need to reconsider this reasoning more carefully";
    const Response r = continue_response(p, binding, task, prefix, injection, 24, 1.0, 9);
    REQUIRE(r.tokens.size() >= prefix.size());
    for (std::size_t i = 0; i < prefix.size(); ++i) {
        CHECK(r.tokens[i] == prefix[i]);
    }
    CHECK(r.text.rfind("the mug is wait i need to reconsider this reasoning more carefully", 0) == 0);
    CHECK(r.per_token_logp.size() == r.tokens.size() - prefix.size() - tokenize(injection).size());

    CHECK_THROWS_AS(continue_response(p, binding, task, prefix, "not in vocab zzz", 24, 1.0, 9),
                    VocabularyError);
}

TEST_CASE("log_likelihood_gradient matches finite differences") {
    for (uint64_t seed = 1; seed <= 5; ++seed) {
        SplitMix64 rng(seed);
        const int vocab = 5 + static_cast<int>(rng.next_below(4));
        const int hidden = 2 + static_cast<int>(rng.next_below(4));
        const int feats = 3;
        PolicyParams p = PolicyParams::random_init(vocab, hidden, feats, 2, rng.next(), 0.4);
        std::vector<SequenceExample> examples;
        for (int e = 0; e < 3; ++e) {
            SequenceExample ex;
            ex.features = {rng.next_double01(), rng.next_double01(), rng.next_double01()};
            const std::size_t len = 1 + rng.next_below(4);
            for (std::size_t t = 0; t < len; ++t) {
                ex.tokens.push_back(1 + static_cast<int>(rng.next_below(
                                            static_cast<uint64_t>(vocab - 1))));
            }
            examples.push_back(std::move(ex));
        }
        const PolicyGradient analytic = log_likelihood_gradient(p, examples);
        const PolicyGradient numeric = numeric_gradient(
            p, [&](const PolicyParams& q) { return mean_log_likelihood(q, examples); }, 1e-5);
        CHECK(max_rel_error(analytic, numeric, 1e-4) < 1e-4);
    }
}

TEST_CASE("objective_gradient: zero advantages with zero KL weight give a zero gradient") {
    TinyInstance inst = make_tiny_instance(12345, 0.0);
    inst.config.kl_coefficient = 0.0;
    for (RolloutBatchGroup& item : inst.batch) {
        for (AdvantageVector& av : item.advantages) {
            av.sequence_advantage = 0.0;
            std::fill(av.token_advantages.begin(), av.token_advantages.end(), 0.0);
        }
    }
    const PolicyGradient g = objective_gradient(inst.params, inst.batch, inst.config);
    CHECK(g.max_abs() == 0.0);
}

TEST_CASE("objective_gradient matches central finite differences on tiny instances") {
    int checked = 0;
    uint64_t seed = 1000;
    while (checked < 20) {
        ++seed;
        TinyInstance inst = make_tiny_instance(seed, 0.1);
        if (near_clip_boundary(inst, 1e-4)) {
            continue;  // finite differences straddle the clip kink there
        }
        const PolicyGradient analytic = objective_gradient(inst.params, inst.batch, inst.config);
        const PolicyGradient numeric = numeric_gradient(
            inst.params,
            [&](const PolicyParams& q) { return batch_objective(q, inst.batch, inst.config); },
            1e-5);
        const double err = max_rel_error(analytic, numeric, 1e-4);
        CAPTURE(seed);
        CHECK(err < 1e-4);
        ++checked;
    }
    CHECK(checked == 20);
}

TEST_CASE("objective_gradient: all-zero masks make alpha irrelevant, bitwise") {
    TinyInstance inst = make_tiny_instance(777, 0.0);
    for (RolloutBatchGroup& item : inst.batch) {
        for (std::size_t i = 0; i < item.advantages.size(); ++i) {
            const double seq = item.advantages[i].sequence_advantage;
            item.advantages[i] =
                make_advantage_vector(seq, item.group.responses[i].length(), nullptr, 0.0);
        }
    }
    TrainerConfig with_alpha = inst.config;
    with_alpha.penalty_alpha = 0.3;
    const PolicyGradient g0 = objective_gradient(inst.params, inst.batch, inst.config);
    const PolicyGradient g1 = objective_gradient(inst.params, inst.batch, with_alpha);
    CHECK(g0.input_weights.data == g1.input_weights.data);
    CHECK(g0.output_weights.data == g1.output_weights.data);
    CHECK(g0.input_bias == g1.input_bias);
    CHECK(g0.output_bias == g1.output_bias);
}

TEST_CASE("objective_gradient: alpha-induced gradient change is the masked tokens' term") {
    // The difference between the alpha>0 and alpha=0 gradients must equal the
    // finite-difference gradient of the objective difference, which only the
    // masked tokens' advantages enter.
    uint64_t seed = 31000;
    int checked = 0;
    while (checked < 3) {
        ++seed;
        TinyInstance inst0 = make_tiny_instance(seed, 0.0);
        if (near_clip_boundary(inst0, 1e-4)) {
            continue;
        }
        TinyInstance inst1 = make_tiny_instance(seed, 0.25);  // same draws, different alpha
        const PolicyGradient g0 = objective_gradient(inst0.params, inst0.batch, inst0.config);
        const PolicyGradient g1 = objective_gradient(inst1.params, inst1.batch, inst1.config);
        PolicyGradient diff = PolicyGradient::zeros_like(inst0.params);
        auto sub = [](const std::vector<double>& a, const std::vector<double>& b,
                      std::vector<double>& out) {
            for (std::size_t i = 0; i < a.size(); ++i) {
                out[i] = a[i] - b[i];
            }
        };
        sub(g1.input_weights.data, g0.input_weights.data, diff.input_weights.data);
        sub(g1.input_bias, g0.input_bias, diff.input_bias);
        sub(g1.output_weights.data, g0.output_weights.data, diff.output_weights.data);
        sub(g1.output_bias, g0.output_bias, diff.output_bias);

        const PolicyGradient numeric = numeric_gradient(
            inst0.params,
            [&](const PolicyParams& q) {
                return batch_objective(q, inst1.batch, inst1.config) -
                       batch_objective(q, inst0.batch, inst0.config);
            },
            1e-5);
        CHECK(max_rel_error(diff, numeric, 1e-4) < 2e-4);
        ++checked;
    }
}

TEST_CASE("optimizer_step: fixed points and determinism") {
    PolicyParams p = PolicyParams::random_init(6, 3, 4, 2, 1);
    const PolicyParams original = p;
    AdamState state = AdamState::zeros_like(p);
    const PolicyGradient zero = PolicyGradient::zeros_like(p);

    optimizer_step(p, zero, 0.1, state);
    CHECK(p.input_weights.data == original.input_weights.data);
    CHECK(p.output_weights.data == original.output_weights.data);

    PolicyGradient g = PolicyGradient::zeros_like(p);
    g.output_bias[2] = 1.0;
    AdamState s2 = AdamState::zeros_like(p);
    PolicyParams q = original;
    optimizer_step(q, g, 0.0, s2);
    CHECK(q.output_bias == original.output_bias);

    // two replays of the same two steps agree exactly
    PolicyParams r1 = original;
    PolicyParams r2 = original;
    AdamState st1 = AdamState::zeros_like(p);
    AdamState st2 = AdamState::zeros_like(p);
    for (int step = 0; step < 2; ++step) {
        optimizer_step(r1, g, 0.05, st1);
        optimizer_step(r2, g, 0.05, st2);
    }
    CHECK(r1.output_bias == r2.output_bias);
    CHECK(r1.output_bias != original.output_bias);

    // plain gradient-ascent mode
    PolicyParams s = original;
    AdamState unused = AdamState::zeros_like(p);
    optimizer_step(s, g, 0.5, unused, OptimizerKind::sgd);
    CHECK(s.output_bias[2] == doctest::Approx(original.output_bias[2] + 0.5).epsilon(1e-15));
}

TEST_CASE("optimizer_step: frozen snapshots refuse updates") {
    PolicyParams p = PolicyParams::random_init(6, 3, 4, 2, 1);
    AdamState state = AdamState::zeros_like(p);
    const PolicyGradient g = PolicyGradient::zeros_like(p);
    PolicyParams ref = p.as_role(ParamsRole::reference);
    CHECK_THROWS_AS(optimizer_step(ref, g, 0.1, state), std::invalid_argument);
    PolicyParams old = p.as_role(ParamsRole::rollout_snapshot);
    CHECK_THROWS_AS(optimizer_step(old, g, 0.1, state), std::invalid_argument);
}

TEST_CASE("vocabulary: environment default covers templates and rejects bad words") {
    const Vocabulary vocab = Vocabulary::environment_default();
    for (const char* w : {"the", "is", "of", "answer:", "red", "left", "mug", "two", "wait",
                          "carefully"}) {
        CAPTURE(w);
        CHECK(vocab.find(w).has_value());
    }
    CHECK(vocab.word(vocab.pad_index()) == "<pad>");
    CHECK(vocab.word(vocab.eos_index()) == "<eos>");
    CHECK_THROWS_AS(Vocabulary({"a", "b c"}, 0, 1), VocabularyError);
    CHECK_THROWS_AS(Vocabulary({"a", "a"}, 0, 1), VocabularyError);
}
