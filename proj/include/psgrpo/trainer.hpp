#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "psgrpo/core_rl.hpp"
#include "psgrpo/encoding.hpp"
#include "psgrpo/env.hpp"
#include "psgrpo/io.hpp"
#include "psgrpo/policy.hpp"
#include "psgrpo/rng.hpp"
#include "psgrpo/tts.hpp"

namespace psgrpo {

enum class PrmMode { oracle, noisy, off };
enum class DecodeMode { greedy, sample };

inline std::string_view prm_mode_name(PrmMode m) {
    switch (m) {
        case PrmMode::oracle: return "oracle";
        case PrmMode::noisy: return "noisy";
        case PrmMode::off: return "off";
    }
    return "?";
}

inline PrmMode prm_mode_from_name(std::string_view name) {
    if (name == "oracle") {
        return PrmMode::oracle;
    }
    if (name == "noisy") {
        return PrmMode::noisy;
    }
    if (name == "off") {
        return PrmMode::off;
    }
    throw std::invalid_argument("prm_mode: unknown value \"" + std::string(name) + "\"");
}

// Demonstration content for the supervised warm-up that stands in for a
// pretrained backbone. format_only keeps claim and answer content random
// (so outcome learning is left entirely to RL); gold emits scene-consistent
// claims and correct answers.
enum class DemoContent { format_only, gold };

struct PretrainConfig {
    int steps = 300;
    int batch = 16;
    double learning_rate = 0.01;
    DemoContent content = DemoContent::format_only;
};

struct TrainRunConfig {
    TrainerConfig trainer;
    int tasks_per_update = 4;
    double perception_fraction = 0.8;  // attribute+spatial share, split evenly
    int scene_objects = 4;
    int grid_extent = 4;
    int total_updates = 400;
    int max_len = 16;
    double temperature = 1.0;
    uint64_t seed = 1;
    PrmMode prm_mode = PrmMode::oracle;
    double noise_p = 0.2;  // flip probability when prm_mode == noisy
    int hidden_dim = 32;
    PretrainConfig pretrain;
    std::string metrics_path;     // stem: writes <stem>.jsonl and <stem>.csv; empty disables
    std::string checkpoint_path;  // full file path; empty disables

    void validate() const {
        trainer.validate();
        if (tasks_per_update < 1) {
            throw std::invalid_argument("TrainRunConfig: tasks_per_update must be >= 1");
        }
        if (!(perception_fraction >= 0.0 && perception_fraction <= 1.0)) {
            throw std::invalid_argument("TrainRunConfig: perception_fraction must be in [0,1]");
        }
        if (total_updates < 1) {
            throw std::invalid_argument("TrainRunConfig: total_updates must be >= 1");
        }
        if (max_len < 1 || !(temperature > 0.0)) {
            throw std::invalid_argument("TrainRunConfig: bad rollout settings");
        }
        if (prm_mode == PrmMode::noisy && !(noise_p >= 0.0 && noise_p <= 1.0)) {
            throw std::invalid_argument("TrainRunConfig: noise_p must be in [0,1]");
        }
        if (hidden_dim < 1 || pretrain.steps < 0 || pretrain.batch < 1 ||
            !(pretrain.learning_rate > 0.0)) {
            throw std::invalid_argument("TrainRunConfig: bad policy/pretrain settings");
        }
    }
};

struct MetricsRecord {
    int update_index = 0;
    double mean_reward = 0.0;
    double hallucination_rate = 0.0;    // share of rollouts with >= 1 flagged claim
    double mean_kl = 0.0;
    double masked_token_fraction = 0.0; // share of rollout tokens inside flagged spans
    double objective_value = 0.0;
};

struct TrainResult {
    PolicyParams params;
    EnvBinding binding = EnvBinding::environment_default();
    std::vector<MetricsRecord> metrics;
    bool diverged = false;
};

namespace seed_role {
inline constexpr uint64_t init = 1;
inline constexpr uint64_t pretrain_task = 2;
inline constexpr uint64_t pretrain_demo = 3;
inline constexpr uint64_t train_task = 4;
inline constexpr uint64_t rollout = 5;
inline constexpr uint64_t noise = 6;
inline constexpr uint64_t eval_task = 7;
inline constexpr uint64_t eval_decode = 8;
inline constexpr uint64_t sft_task = 9;
inline constexpr uint64_t sft_rollout = 10;
inline constexpr uint64_t scene_gen = 11;
inline constexpr uint64_t tts_run = 12;
}  // namespace seed_role

namespace detail {

inline TaskKind draw_task_kind(SplitMix64& rng, double perception_fraction) {
    if (rng.next_double01() < perception_fraction) {
        return rng.next_below(2) == 0 ? TaskKind::attribute : TaskKind::spatial;
    }
    return TaskKind::general;
}

inline Task make_random_task(uint64_t master, uint64_t role, uint64_t a, uint64_t b,
                             double perception_fraction, int scene_objects, int grid_extent) {
    SplitMix64 kind_rng(derive_seed(master, {role, a, b, 0}));
    const TaskKind kind = draw_task_kind(kind_rng, perception_fraction);
    const Scene scene = generate_scene(derive_seed(master, {role, a, b, 1}), scene_objects, grid_extent);
    return generate_task(scene, kind, derive_seed(master, {role, a, b, 2}));
}

}  // namespace detail

// Deterministic task set for evaluation and data generation.
inline std::vector<Task> generate_task_set(uint64_t seed, int count, double perception_fraction,
                                           int scene_objects, int grid_extent) {
    if (count < 1) {
        throw std::invalid_argument("generate_task_set: count must be >= 1");
    }
    std::vector<Task> tasks;
    tasks.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        Task t = detail::make_random_task(seed, seed_role::eval_task, static_cast<uint64_t>(i), 0,
                                          perception_fraction, scene_objects, grid_extent);
        t.id = "task-" + std::to_string(i);
        tasks.push_back(std::move(t));
    }
    return tasks;
}

namespace detail {

// Template demonstration for the supervised warm-up. Responses follow
//   attribute: the <d> is <c> the <s> is <c'> answer: <c'>
//   spatial:   the <d> is <c> the <s> is <rel...> the <o> answer: <rel>
//   general:   the <d> is <c> answer: <count>
// ending in the end token. Under format_only the claim colors, in-axis
// relation and count are uniform draws, and the final answer restates the
// claim about the queried subject.
inline SequenceExample make_demo(const EnvBinding& binding, const Task& task, SplitMix64& rng,
                                 DemoContent content) {
    const Vocabulary& vocab = binding.vocab;
    std::vector<int> toks;
    auto push_word = [&](std::string_view w) { toks.push_back(vocab.require(w)); };

    auto random_color = [&]() { return kColorNames[rng.next_below(kColorNames.size())]; };
    auto object_color = [&](std::string_view name) {
        const SceneObject* o = task.scene.find(name);
        if (o == nullptr) {
            throw TaskError("make_demo: task subject missing from scene");
        }
        return color_name(o->color);
    };

    // Distractor claim about some object other than the queried subject.
    std::vector<const SceneObject*> others;
    for (const SceneObject& o : task.scene.objects) {
        if (o.name != task.subject_name) {
            others.push_back(&o);
        }
    }
    if (others.empty()) {
        throw TaskError("make_demo: scene too small for a distractor");
    }
    const SceneObject* d = others[rng.next_below(others.size())];
    push_word("the");
    push_word(d->name);
    push_word("is");
    push_word(content == DemoContent::gold ? color_name(d->color) : random_color());

    switch (task.kind) {
        case TaskKind::attribute: {
            const std::string_view claim_color =
                content == DemoContent::gold ? object_color(task.subject_name) : random_color();
            push_word("the");
            push_word(task.subject_name);
            push_word("is");
            push_word(claim_color);
            push_word("answer:");
            push_word(claim_color);
            break;
        }
        case TaskKind::spatial: {
            std::string_view rel;
            if (content == DemoContent::gold) {
                rel = task.gold_answer;
            } else if (task.axis == QueryAxis::horizontal) {
                rel = rng.next_below(2) == 0 ? "left" : "right";
            } else {
                rel = rng.next_below(2) == 0 ? "above" : "below";
            }
            push_word("the");
            push_word(task.subject_name);
            push_word("is");
            push_word(rel);
            if (rel == "left" || rel == "right") {
                push_word("of");
            }
            push_word("the");
            push_word(task.object_name);
            push_word("answer:");
            push_word(rel);
            break;
        }
        case TaskKind::general: {
            const std::string_view count_word =
                content == DemoContent::gold ? task.gold_answer
                                             : kCountWords[rng.next_below(kCountWords.size())];
            push_word("answer:");
            push_word(count_word);
            break;
        }
    }
    toks.push_back(vocab.eos_index());
    return SequenceExample{binding.layout.encode(task), std::move(toks)};
}

}  // namespace detail

// Supervised warm-up on template demonstrations; the returned parameters are
// the run's initial policy (and reference snapshot source).
inline PolicyParams pretrain_policy(PolicyParams params, const EnvBinding& binding,
                                    const TrainRunConfig& config) {
    AdamState state = AdamState::zeros_like(params);
    for (int step = 0; step < config.pretrain.steps; ++step) {
        std::vector<SequenceExample> demos;
        demos.reserve(static_cast<std::size_t>(config.pretrain.batch));
        for (int b = 0; b < config.pretrain.batch; ++b) {
            const Task task = detail::make_random_task(
                config.seed, seed_role::pretrain_task, static_cast<uint64_t>(step),
                static_cast<uint64_t>(b), config.perception_fraction, config.scene_objects,
                config.grid_extent);
            SplitMix64 demo_rng(derive_seed(config.seed, {seed_role::pretrain_demo,
                                                          static_cast<uint64_t>(step),
                                                          static_cast<uint64_t>(b)}));
            demos.push_back(detail::make_demo(binding, task, demo_rng, config.pretrain.content));
        }
        const PolicyGradient grad = log_likelihood_gradient(params, demos);
        optimizer_step(params, grad, config.pretrain.learning_rate, state);
    }
    return params;
}

namespace detail {

inline std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace detail

inline ojson metrics_record_to_json(const MetricsRecord& m) {
    return ojson{{"update", m.update_index},
                 {"mean_reward", m.mean_reward},
                 {"hallucination_rate", m.hallucination_rate},
                 {"mean_kl", m.mean_kl},
                 {"masked_token_fraction", m.masked_token_fraction},
                 {"objective", m.objective_value}};
}

inline void write_metrics_jsonl(const std::string& path, std::span<const MetricsRecord> metrics) {
    std::ofstream out(path);
    if (!out) {
        throw IoError("write_metrics_jsonl: cannot open " + path);
    }
    for (const MetricsRecord& m : metrics) {
        out << metrics_record_to_json(m).dump() << '\n';
    }
    if (!out) {
        throw IoError("write_metrics_jsonl: write failed for " + path);
    }
}

inline void write_metrics_csv(const std::string& path, std::span<const MetricsRecord> metrics) {
    std::ofstream out(path);
    if (!out) {
        throw IoError("write_metrics_csv: cannot open " + path);
    }
    out << "update,mean_reward,hallucination_rate,mean_kl,masked_token_fraction,objective\n";
    for (const MetricsRecord& m : metrics) {
        out << m.update_index << ',' << detail::format_double(m.mean_reward) << ','
            << detail::format_double(m.hallucination_rate) << ','
            << detail::format_double(m.mean_kl) << ','
            << detail::format_double(m.masked_token_fraction) << ','
            << detail::format_double(m.objective_value) << '\n';
    }
    if (!out) {
        throw IoError("write_metrics_csv: write failed for " + path);
    }
}

// Process-supervised GRPO training. Each update draws fresh tasks, rolls out
// a group per task under the rollout snapshot, normalizes rewards within the
// group, rescales token advantages on flagged spans for perception tasks
// (general tasks keep sequence-level advantages untouched), then takes one
// ascent step and refreshes the snapshot.
//
// The hallucination_rate and masked_token_fraction metrics always come from
// the exact oracle verifier over the actual rollouts, independent of the
// reward and of prm_mode, so reward and flag rate can diverge.
inline TrainResult train(const TrainRunConfig& config) {
    config.validate();
    TrainResult result;
    result.binding = EnvBinding::environment_default();
    const EnvBinding& binding = result.binding;
    const int vocab_size = binding.vocab.size();
    constexpr int kContextLen = 4;

    PolicyParams params =
        PolicyParams::random_init(vocab_size, config.hidden_dim, FeatureLayout::feature_dim(),
                                  kContextLen, derive_seed(config.seed, {seed_role::init}), 0.08,
                                  binding.vocab.pad_index());
    params = pretrain_policy(std::move(params), binding, config);
    const PolicyParams reference = params.as_role(ParamsRole::reference);
    AdamState adam = AdamState::zeros_like(params);
    PolicyParams last_good = params;

    const TrainerConfig& tc = config.trainer;
    const int group_size = tc.group_size;

    for (int u = 0; u < config.total_updates; ++u) {
        const PolicyParams rollout_policy = params.as_role(ParamsRole::rollout_snapshot);
        std::vector<RolloutBatchGroup> batch;
        batch.reserve(static_cast<std::size_t>(config.tasks_per_update));

        double reward_sum = 0.0;
        int response_count = 0;
        int flagged_responses = 0;
        std::size_t masked_tokens = 0;
        std::size_t total_tokens = 0;

        bool failed = false;
        try {
            for (int b = 0; b < config.tasks_per_update; ++b) {
                Task task = detail::make_random_task(config.seed, seed_role::train_task,
                                                     static_cast<uint64_t>(u),
                                                     static_cast<uint64_t>(b),
                                                     config.perception_fraction,
                                                     config.scene_objects, config.grid_extent);
                task.id = "u" + std::to_string(u) + "." + std::to_string(b);
                const bool perception = task.kind != TaskKind::general;

                RolloutBatchGroup item;
                item.task_features = binding.layout.encode(task);
                item.group.task_kind = perception ? GroupKind::perception : GroupKind::general;

                for (int i = 0; i < group_size; ++i) {
                    Response r = sample_response(
                        rollout_policy, binding, task, config.max_len, config.temperature,
                        derive_seed(config.seed, {seed_role::rollout, static_cast<uint64_t>(u),
                                                  static_cast<uint64_t>(b),
                                                  static_cast<uint64_t>(i)}));
                    item.group.rewards.push_back(outcome_reward(r.text, task));
                    item.group.responses.push_back(std::move(r));
                }
                const std::vector<double> advantages =
                    group_advantages(item.group.rewards, tc.std_floor);

                for (int i = 0; i < group_size; ++i) {
                    const Response& r = item.group.responses[static_cast<std::size_t>(i)];
                    reward_sum += item.group.rewards[static_cast<std::size_t>(i)];
                    ++response_count;
                    total_tokens += r.length();

                    // Monitoring is oracle-exact regardless of the training verifier.
                    const Verification monitor = oracle_verify(task.scene, r.text);
                    PenaltyMask oracle_mask;
                    if (!monitor.flags.empty()) {
                        ++flagged_responses;
                        oracle_mask = build_mask(tokenize(r.text), monitor.flags);
                        masked_tokens += oracle_mask.masked_count();
                    }

                    const PenaltyMask* mask_ptr = nullptr;
                    PenaltyMask train_mask;
                    if (perception && config.prm_mode != PrmMode::off) {
                        if (config.prm_mode == PrmMode::oracle) {
                            if (!monitor.flags.empty()) {
                                train_mask = oracle_mask;
                                mask_ptr = &train_mask;
                            }
                        } else {
                            const Verification noisy = noisy_verify(
                                task.scene, r.text, config.noise_p,
                                derive_seed(config.seed, {seed_role::noise, static_cast<uint64_t>(u),
                                                          static_cast<uint64_t>(b),
                                                          static_cast<uint64_t>(i)}));
                            if (!noisy.flags.empty()) {
                                train_mask = build_mask(tokenize(r.text), noisy.flags);
                                mask_ptr = &train_mask;
                            }
                        }
                    }
                    item.advantages.push_back(make_advantage_vector(
                        advantages[static_cast<std::size_t>(i)], r.length(), mask_ptr,
                        tc.penalty_alpha));
                    item.logp_old.push_back(r.per_token_logp);
                    item.logp_ref.push_back(token_log_probs(reference, item.task_features, r.tokens));
                }
                batch.push_back(std::move(item));
            }

            // Objective and KL reported at the rollout snapshot (ratios are 1).
            double objective_sum = 0.0;
            double kl_sum = 0.0;
            std::size_t kl_count = 0;
            for (const RolloutBatchGroup& item : batch) {
                const SurrogateTerms terms = grpo_objective(item.group, item.advantages,
                                                            item.logp_old, item.logp_old,
                                                            item.logp_ref, tc);
                objective_sum += terms.objective;
                for (const std::vector<double>& row : terms.kl_term) {
                    for (double v : row) {
                        kl_sum += v;
                        ++kl_count;
                    }
                }
            }
            const double objective = objective_sum / static_cast<double>(batch.size());
            if (!std::isfinite(objective) || std::abs(objective) > 1e6) {
                throw NumericError("train: objective diverged at update " + std::to_string(u));
            }

            const PolicyGradient grad = objective_gradient(params, batch, tc);
            optimizer_step(params, grad, tc.learning_rate, adam);
            params.validate();

            MetricsRecord m;
            m.update_index = u;
            m.mean_reward = reward_sum / static_cast<double>(response_count);
            m.hallucination_rate =
                static_cast<double>(flagged_responses) / static_cast<double>(response_count);
            m.mean_kl = kl_count > 0 ? kl_sum / static_cast<double>(kl_count) : 0.0;
            m.masked_token_fraction =
                total_tokens > 0
                    ? static_cast<double>(masked_tokens) / static_cast<double>(total_tokens)
                    : 0.0;
            m.objective_value = objective;
            result.metrics.push_back(m);
            last_good = params;
        } catch (const NumericError&) {
            failed = true;
        }
        if (failed) {
            result.diverged = true;
            result.params = last_good;
            break;
        }
    }
    if (!result.diverged) {
        result.params = params;
    }

    if (!config.metrics_path.empty()) {
        write_metrics_jsonl(config.metrics_path + ".jsonl", result.metrics);
        write_metrics_csv(config.metrics_path + ".csv", result.metrics);
    }
    if (!config.checkpoint_path.empty()) {
        save_checkpoint(config.checkpoint_path, result.params, binding);
    }
    return result;
}

struct KindStats {
    int count = 0;
    double accuracy = 0.0;
    double hallucination_rate = 0.0;
};

struct EvalReport {
    int task_count = 0;
    double accuracy = 0.0;
    double hallucination_rate = 0.0;
    KindStats attribute;
    KindStats spatial;
    KindStats general;
};

// Deterministic evaluation: greedy decoding by default, accuracy from the
// outcome reward, hallucination rate from the oracle verifier.
inline EvalReport evaluate(const PolicyParams& params, const EnvBinding& binding,
                           std::span<const Task> tasks, DecodeMode decode = DecodeMode::greedy,
                           int max_len = 16, double temperature = 1.0, uint64_t seed = 0) {
    if (tasks.empty()) {
        throw std::invalid_argument("evaluate: empty task set");
    }
    if (params.vocab_size != binding.vocab.size() ||
        params.feature_dim != FeatureLayout::feature_dim()) {
        throw CompatibilityError("evaluate: checkpoint incompatible with environment binding");
    }
    EvalReport report;
    double reward_sum = 0.0;
    int flagged = 0;
    struct Acc {
        int n = 0;
        double reward = 0.0;
        int flagged = 0;
    } acc_attr, acc_spatial, acc_general;

    for (std::size_t i = 0; i < tasks.size(); ++i) {
        const Task& task = tasks[i];
        const Response response =
            decode == DecodeMode::greedy
                ? greedy_response(params, binding, task, max_len)
                : sample_response(params, binding, task, max_len, temperature,
                                  derive_seed(seed, {seed_role::eval_decode, i}));
        const double reward = outcome_reward(response.text, task);
        const bool has_flags = !oracle_verify(task.scene, response.text).flags.empty();
        reward_sum += reward;
        flagged += has_flags ? 1 : 0;
        Acc& acc = task.kind == TaskKind::attribute ? acc_attr
                   : task.kind == TaskKind::spatial ? acc_spatial
                                                    : acc_general;
        acc.n += 1;
        acc.reward += reward;
        acc.flagged += has_flags ? 1 : 0;
    }
    const double n = static_cast<double>(tasks.size());
    report.task_count = static_cast<int>(tasks.size());
    report.accuracy = reward_sum / n;
    report.hallucination_rate = static_cast<double>(flagged) / n;
    auto to_stats = [](const Acc& a) {
        KindStats s;
        s.count = a.n;
        if (a.n > 0) {
            s.accuracy = a.reward / a.n;
            s.hallucination_rate = static_cast<double>(a.flagged) / a.n;
        }
        return s;
    };
    report.attribute = to_stats(acc_attr);
    report.spatial = to_stats(acc_spatial);
    report.general = to_stats(acc_general);
    return report;
}

inline ojson eval_report_to_json(const EvalReport& r) {
    auto kind = [](const KindStats& s) {
        return ojson{{"count", s.count},
                     {"accuracy", s.accuracy},
                     {"hallucination_rate", s.hallucination_rate}};
    };
    return ojson{{"task_count", r.task_count},
                 {"accuracy", r.accuracy},
                 {"hallucination_rate", r.hallucination_rate},
                 {"attribute", kind(r.attribute)},
                 {"spatial", kind(r.spatial)},
                 {"general", kind(r.general)}};
}

struct SweepCell {
    double alpha = 0.0;
    uint64_t seed = 0;
    double accuracy = 0.0;
    double hallucination_rate = 0.0;
    bool ok = false;
    std::string error;
};

// Train+evaluate over the cartesian product of alphas and seeds. Failed
// cells carry their error and the sweep continues.
inline std::vector<SweepCell> sweep_alpha(const TrainRunConfig& base, std::span<const double> alphas,
                                          std::span<const uint64_t> seeds, int eval_task_count = 200) {
    if (alphas.empty() || seeds.empty()) {
        throw std::invalid_argument("sweep_alpha: alphas and seeds must be non-empty");
    }
    std::vector<SweepCell> cells;
    for (double alpha : alphas) {
        for (uint64_t seed : seeds) {
            SweepCell cell;
            cell.alpha = alpha;
            cell.seed = seed;
            try {
                TrainRunConfig cfg = base;
                cfg.trainer.penalty_alpha = alpha;
                cfg.seed = seed;
                cfg.metrics_path.clear();
                cfg.checkpoint_path.clear();
                const TrainResult run = train(cfg);
                if (run.diverged) {
                    throw NumericError("training diverged");
                }
                const std::vector<Task> tasks = generate_task_set(
                    derive_seed(seed, {seed_role::eval_task}), eval_task_count,
                    base.perception_fraction, base.scene_objects, base.grid_extent);
                const EvalReport report =
                    evaluate(run.params, run.binding, tasks, DecodeMode::greedy, base.max_len);
                cell.accuracy = report.accuracy;
                cell.hallucination_rate = report.hallucination_rate;
                cell.ok = true;
            } catch (const std::exception& e) {
                cell.error = e.what();
            }
            cells.push_back(std::move(cell));
        }
    }
    return cells;
}

inline void write_sweep_csv(const std::string& path, std::span<const SweepCell> cells) {
    std::ofstream out(path);
    if (!out) {
        throw IoError("write_sweep_csv: cannot open " + path);
    }
    out << "alpha,seed,accuracy,hallucination_rate,status\n";
    for (const SweepCell& c : cells) {
        out << detail::format_double(c.alpha) << ',' << c.seed << ','
            << detail::format_double(c.accuracy) << ',' << detail::format_double(c.hallucination_rate)
            << ',' << (c.ok ? "ok" : "failed") << '\n';
    }
    if (!out) {
        throw IoError("write_sweep_csv: write failed for " + path);
    }
}

struct SftConfig {
    int task_count = 10;
    int rollouts_per_task = 3;  // matches the dataset construction setting
    double perception_fraction = 0.8;
    int scene_objects = 4;
    int grid_extent = 4;
    int max_len = 16;
    double temperature = 1.0;
    uint64_t seed = 1;
    int hidden_dim = 32;
    std::optional<PolicyParams> policy;  // absent: fresh untrained policy

    void validate() const {
        if (task_count < 1 || rollouts_per_task < 1) {
            throw std::invalid_argument("SftConfig: counts must be >= 1");
        }
        if (!(perception_fraction >= 0.0 && perception_fraction <= 1.0)) {
            throw std::invalid_argument("SftConfig: perception_fraction must be in [0,1]");
        }
        if (max_len < 1 || !(temperature > 0.0) || hidden_dim < 1) {
            throw std::invalid_argument("SftConfig: bad rollout settings");
        }
    }
};

// Verification-dataset generation: perception-weighted task selection,
// rollouts from an untrained (or given) policy, exact-oracle annotation in
// the structured verification format, and line-delimited emission. Returns
// the record count.
inline std::size_t generate_sft_dataset(const SftConfig& config, const std::string& out_path) {
    config.validate();
    const EnvBinding binding = EnvBinding::environment_default();
    PolicyParams policy =
        config.policy.has_value()
            ? *config.policy
            : PolicyParams::random_init(binding.vocab.size(), config.hidden_dim,
                                        FeatureLayout::feature_dim(), 4,
                                        derive_seed(config.seed, {seed_role::init}), 0.08,
                                        binding.vocab.pad_index());
    if (policy.vocab_size != binding.vocab.size()) {
        throw CompatibilityError("generate_sft_dataset: policy/vocabulary size mismatch");
    }

    std::ofstream out(out_path);
    if (!out) {
        throw IoError("generate_sft_dataset: cannot open " + out_path);
    }
    std::size_t count = 0;
    for (int i = 0; i < config.task_count; ++i) {
        Task task = detail::make_random_task(config.seed, seed_role::sft_task,
                                             static_cast<uint64_t>(i), 0, config.perception_fraction,
                                             config.scene_objects, config.grid_extent);
        task.id = "sft-" + std::to_string(i);
        for (int j = 0; j < config.rollouts_per_task; ++j) {
            const Response response = sample_response(
                policy, binding, task, config.max_len, config.temperature,
                derive_seed(config.seed, {seed_role::sft_rollout, static_cast<uint64_t>(i),
                                          static_cast<uint64_t>(j)}));
            const Verification verification = oracle_verify(task.scene, response.text);
            ojson record{{"scene", scene_to_json(task.scene)},
                         {"query", task.query},
                         {"response_text", response.text},
                         {"verification_text", render_verification(verification)}};
            out << record.dump() << '\n';
            ++count;
        }
    }
    if (!out) {
        throw IoError("generate_sft_dataset: write failed for " + out_path);
    }
    return count;
}

// Flat-key JSON config for CLI runs; absent keys keep defaults, unknown keys
// are rejected.
inline TrainRunConfig train_run_config_from_json(const ojson& j) {
    TrainRunConfig cfg;
    for (const auto& [key, value] : j.items()) {
        if (key == "group_size") {
            cfg.trainer.group_size = value.get<int>();
        } else if (key == "clip_epsilon") {
            cfg.trainer.clip_epsilon = value.get<double>();
        } else if (key == "kl_coefficient") {
            cfg.trainer.kl_coefficient = value.get<double>();
        } else if (key == "penalty_alpha") {
            cfg.trainer.penalty_alpha = value.get<double>();
        } else if (key == "std_floor") {
            cfg.trainer.std_floor = value.get<double>();
        } else if (key == "learning_rate") {
            cfg.trainer.learning_rate = value.get<double>();
        } else if (key == "token_aggregation") {
            const std::string name = value.get<std::string>();
            if (name == "token_sum") {
                cfg.trainer.token_aggregation = TokenAggregation::token_sum;
            } else if (name == "token_mean") {
                cfg.trainer.token_aggregation = TokenAggregation::token_mean;
            } else {
                throw std::invalid_argument("config: unknown token_aggregation \"" + name + "\"");
            }
        } else if (key == "tasks_per_update") {
            cfg.tasks_per_update = value.get<int>();
        } else if (key == "perception_fraction") {
            cfg.perception_fraction = value.get<double>();
        } else if (key == "scene_objects") {
            cfg.scene_objects = value.get<int>();
        } else if (key == "grid_extent") {
            cfg.grid_extent = value.get<int>();
        } else if (key == "total_updates") {
            cfg.total_updates = value.get<int>();
        } else if (key == "max_len") {
            cfg.max_len = value.get<int>();
        } else if (key == "temperature") {
            cfg.temperature = value.get<double>();
        } else if (key == "seed") {
            cfg.seed = value.get<uint64_t>();
        } else if (key == "prm_mode") {
            cfg.prm_mode = prm_mode_from_name(value.get<std::string>());
        } else if (key == "noise_p") {
            cfg.noise_p = value.get<double>();
        } else if (key == "hidden_dim") {
            cfg.hidden_dim = value.get<int>();
        } else if (key == "pretrain_steps") {
            cfg.pretrain.steps = value.get<int>();
        } else if (key == "pretrain_batch") {
            cfg.pretrain.batch = value.get<int>();
        } else if (key == "pretrain_lr") {
            cfg.pretrain.learning_rate = value.get<double>();
        } else if (key == "pretrain_content") {
            const std::string name = value.get<std::string>();
            if (name == "format_only") {
                cfg.pretrain.content = DemoContent::format_only;
            } else if (name == "gold") {
                cfg.pretrain.content = DemoContent::gold;
            } else {
                throw std::invalid_argument("config: unknown pretrain_content \"" + name + "\"");
            }
        } else if (key == "metrics_path") {
            cfg.metrics_path = value.get<std::string>();
        } else if (key == "checkpoint_path") {
            cfg.checkpoint_path = value.get<std::string>();
        } else {
            throw std::invalid_argument("config: unknown key \"" + key + "\"");
        }
    }
    cfg.validate();
    return cfg;
}

}  // namespace psgrpo
