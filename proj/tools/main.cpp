// Command-line front end: dataset generation, training, evaluation,
// test-time refinement and the alpha sweep.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "psgrpo/io.hpp"
#include "psgrpo/trainer.hpp"
#include "psgrpo/tts.hpp"

namespace {

// Exit codes by diagnostic category.
constexpr int kExitOk = 0;
constexpr int kExitConfig = 3;
constexpr int kExitIo = 4;
constexpr int kExitRuntime = 5;

psgrpo::TrainRunConfig load_train_config(const std::string& config_path) {
    if (config_path.empty()) {
        return psgrpo::TrainRunConfig{};
    }
    std::ifstream in(config_path);
    if (!in) {
        throw psgrpo::IoError("cannot open config " + config_path);
    }
    psgrpo::ojson j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw psgrpo::IoError("invalid JSON in " + config_path + ": " + e.what());
    }
    return psgrpo::train_run_config_from_json(j);
}

std::vector<double> parse_double_list(const std::string& csv) {
    std::vector<double> out;
    std::size_t start = 0;
    while (start <= csv.size()) {
        std::size_t end = csv.find(',', start);
        if (end == std::string::npos) {
            end = csv.size();
        }
        const std::string item = csv.substr(start, end - start);
        if (!item.empty()) {
            out.push_back(std::stod(item));
        }
        start = end + 1;
    }
    return out;
}

std::vector<uint64_t> parse_seed_list(const std::string& csv) {
    std::vector<uint64_t> out;
    std::size_t start = 0;
    while (start <= csv.size()) {
        std::size_t end = csv.find(',', start);
        if (end == std::string::npos) {
            end = csv.size();
        }
        const std::string item = csv.substr(start, end - start);
        if (!item.empty()) {
            out.push_back(std::stoull(item));
        }
        start = end + 1;
    }
    return out;
}

int run_gen_scenes(int count, int objects, int extent, uint64_t seed, const std::string& out_path) {
    std::ofstream out(out_path);
    if (!out) {
        throw psgrpo::IoError("cannot open " + out_path);
    }
    for (int i = 0; i < count; ++i) {
        const psgrpo::Scene scene = psgrpo::generate_scene(
            psgrpo::derive_seed(seed, {psgrpo::seed_role::scene_gen, static_cast<uint64_t>(i)}),
            objects, extent);
        out << psgrpo::scene_to_json(scene).dump() << '\n';
    }
    std::cout << "wrote " << count << " scenes to " << out_path << "\n";
    return kExitOk;
}

int run_gen_sft(psgrpo::SftConfig cfg, const std::string& checkpoint_path,
                const std::string& out_path) {
    if (!checkpoint_path.empty()) {
        cfg.policy = psgrpo::load_checkpoint(checkpoint_path).params;
    }
    const std::size_t n = psgrpo::generate_sft_dataset(cfg, out_path);
    std::cout << "wrote " << n << " records to " << out_path << "\n";
    return kExitOk;
}

int run_train(psgrpo::TrainRunConfig cfg, const std::string& out_dir) {
    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        cfg.metrics_path = (std::filesystem::path(out_dir) / "metrics").string();
        cfg.checkpoint_path = (std::filesystem::path(out_dir) / "checkpoint.json").string();
    }
    const psgrpo::TrainResult result = psgrpo::train(cfg);
    if (!result.metrics.empty()) {
        const psgrpo::MetricsRecord& last = result.metrics.back();
        std::cout << "updates: " << result.metrics.size() << "\n"
                  << "final mean_reward: " << last.mean_reward << "\n"
                  << "final hallucination_rate: " << last.hallucination_rate << "\n";
    }
    if (result.diverged) {
        std::cerr << "error (numeric): training diverged, last good checkpoint kept\n";
        return kExitRuntime;
    }
    return kExitOk;
}

int run_eval(const std::string& checkpoint_path, int task_count, double perception_fraction,
             int scene_objects, int grid_extent, uint64_t seed, const std::string& decode,
             int max_len, const std::string& out_path) {
    const psgrpo::Checkpoint ckpt = psgrpo::load_checkpoint(checkpoint_path);
    const std::vector<psgrpo::Task> tasks = psgrpo::generate_task_set(
        psgrpo::derive_seed(seed, {psgrpo::seed_role::eval_task}), task_count, perception_fraction,
        scene_objects, grid_extent);
    const psgrpo::DecodeMode mode =
        decode == "sample" ? psgrpo::DecodeMode::sample : psgrpo::DecodeMode::greedy;
    const psgrpo::EvalReport report =
        psgrpo::evaluate(ckpt.params, ckpt.binding, tasks, mode, max_len, 1.0, seed);
    const psgrpo::ojson j = psgrpo::eval_report_to_json(report);
    std::cout << j.dump(2) << "\n";
    if (!out_path.empty()) {
        std::ofstream out(out_path);
        if (!out) {
            throw psgrpo::IoError("cannot open " + out_path);
        }
        out << j.dump() << '\n';
    }
    return kExitOk;
}

int run_tts(const std::string& checkpoint_path, const std::string& strategy, int k, int vote_samples,
            int task_count, double perception_fraction, int scene_objects, int grid_extent,
            uint64_t seed, const std::string& verifier_kind, double noise_p, int max_len,
            const std::string& out_path) {
    const psgrpo::Checkpoint ckpt = psgrpo::load_checkpoint(checkpoint_path);
    const std::vector<psgrpo::Task> tasks = psgrpo::generate_task_set(
        psgrpo::derive_seed(seed, {psgrpo::seed_role::eval_task}), task_count, perception_fraction,
        scene_objects, grid_extent);

    psgrpo::TtsConfig cfg;
    cfg.max_iterations = k;
    cfg.vote_samples = vote_samples;
    cfg.max_len = max_len;
    if (strategy == "truncate") {
        cfg.strategy = psgrpo::TtsStrategy::truncate;
    } else if (strategy == "truncate-thinking") {
        cfg.strategy = psgrpo::TtsStrategy::truncate_thinking;
    } else if (strategy == "majority-vote") {
        cfg.strategy = psgrpo::TtsStrategy::majority_vote;
    } else {
        throw std::invalid_argument("unknown strategy \"" + strategy + "\"");
    }
    const psgrpo::VerifierFn verifier =
        verifier_kind == "noisy"
            ? psgrpo::make_noisy_verifier(noise_p, psgrpo::derive_seed(seed, {psgrpo::seed_role::noise}))
            : psgrpo::make_oracle_verifier();

    std::ofstream trace_out;
    if (!out_path.empty() && cfg.strategy != psgrpo::TtsStrategy::majority_vote) {
        trace_out.open(out_path);
        if (!trace_out) {
            throw psgrpo::IoError("cannot open " + out_path);
        }
    }

    double reward_sum = 0.0;
    std::size_t iterations_total = 0;
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        const psgrpo::Task& task = tasks[i];
        const uint64_t run_seed = psgrpo::derive_seed(seed, {psgrpo::seed_role::tts_run, i});
        if (cfg.strategy == psgrpo::TtsStrategy::majority_vote) {
            const std::string answer = psgrpo::majority_vote(ckpt.params, ckpt.binding, task,
                                                             cfg.vote_samples, cfg.max_len,
                                                             cfg.temperature, run_seed);
            reward_sum += psgrpo::equals_case_insensitive(answer, task.gold_answer) ? 1.0 : 0.0;
            iterations_total += static_cast<std::size_t>(cfg.vote_samples);
            continue;
        }
        const psgrpo::TtsTrace trace =
            cfg.strategy == psgrpo::TtsStrategy::truncate
                ? psgrpo::run_truncate_regenerate(ckpt.params, ckpt.binding, task, verifier, cfg,
                                                  run_seed)
                : psgrpo::run_truncate_thinking(ckpt.params, ckpt.binding, task, verifier, cfg,
                                                run_seed);
        reward_sum += psgrpo::outcome_reward(trace.final_response.text, task);
        iterations_total += trace.iterations.size();
        if (trace_out.is_open()) {
            for (const psgrpo::ojson& rec : psgrpo::tts_trace_records(task.id, trace)) {
                trace_out << rec.dump() << '\n';
            }
        }
    }
    const psgrpo::ojson summary{{"strategy", strategy},
                                {"tasks", tasks.size()},
                                {"accuracy", reward_sum / static_cast<double>(tasks.size())},
                                {"mean_generations",
                                 static_cast<double>(iterations_total) /
                                     static_cast<double>(tasks.size())}};
    std::cout << summary.dump(2) << "\n";
    return kExitOk;
}

int run_sweep(psgrpo::TrainRunConfig base, const std::string& alphas_csv, const std::string& seeds_csv,
              int eval_tasks, const std::string& out_stem) {
    const std::vector<double> alphas = parse_double_list(alphas_csv);
    const std::vector<uint64_t> seeds = parse_seed_list(seeds_csv);
    const std::vector<psgrpo::SweepCell> cells = psgrpo::sweep_alpha(base, alphas, seeds, eval_tasks);
    if (!out_stem.empty()) {
        psgrpo::write_sweep_csv(out_stem + ".csv", cells);
        std::ofstream out(out_stem + ".jsonl");
        if (!out) {
            throw psgrpo::IoError("cannot open " + out_stem + ".jsonl");
        }
        for (const psgrpo::SweepCell& c : cells) {
            psgrpo::ojson j{{"alpha", c.alpha},
                            {"seed", c.seed},
                            {"accuracy", c.accuracy},
                            {"hallucination_rate", c.hallucination_rate},
                            {"status", c.ok ? "ok" : "failed"}};
            if (!c.ok) {
                j["error"] = c.error;
            }
            out << j.dump() << '\n';
        }
    }
    for (const psgrpo::SweepCell& c : cells) {
        std::cout << "alpha=" << c.alpha << " seed=" << c.seed;
        if (c.ok) {
            std::cout << " accuracy=" << c.accuracy << " hallucination_rate=" << c.hallucination_rate;
        } else {
            std::cout << " FAILED: " << c.error;
        }
        std::cout << "\n";
    }
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"process-supervised GRPO on a synthetic perception environment"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_path;
    uint64_t seed = 1;
    bool seed_set = false;
    std::string out;
    app.add_option("--config", config_path, "JSON config file")->configurable(false);
    app.add_option("--seed", seed, "master seed override")->each([&](const std::string&) {
        seed_set = true;
    });
    app.add_option("--out", out, "output path (meaning depends on the subcommand)");

    // gen-scenes
    auto* gen_scenes = app.add_subcommand("gen-scenes", "emit random scenes as JSONL");
    int gs_count = 10;
    int gs_objects = 4;
    int gs_extent = 4;
    gen_scenes->add_option("--count", gs_count, "number of scenes");
    gen_scenes->add_option("--objects", gs_objects, "objects per scene");
    gen_scenes->add_option("--extent", gs_extent, "grid extent");

    // gen-sft
    auto* gen_sft = app.add_subcommand("gen-sft", "emit verification SFT records as JSONL");
    psgrpo::SftConfig sft_cfg;
    std::string sft_checkpoint;
    gen_sft->add_option("--tasks", sft_cfg.task_count, "number of tasks");
    gen_sft->add_option("--rollouts", sft_cfg.rollouts_per_task, "rollouts per task");
    gen_sft->add_option("--perception-fraction", sft_cfg.perception_fraction,
                        "share of perception tasks");
    gen_sft->add_option("--objects", sft_cfg.scene_objects, "objects per scene");
    gen_sft->add_option("--extent", sft_cfg.grid_extent, "grid extent");
    gen_sft->add_option("--max-len", sft_cfg.max_len, "rollout token cap");
    gen_sft->add_option("--checkpoint", sft_checkpoint, "policy checkpoint (default: untrained)");

    // train
    auto* train_cmd = app.add_subcommand("train", "run process-supervised GRPO training");

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on generated tasks");
    std::string eval_checkpoint;
    int eval_tasks = 200;
    double eval_fraction = 0.8;
    int eval_objects = 4;
    int eval_extent = 4;
    int eval_max_len = 16;
    std::string eval_decode = "greedy";
    eval_cmd->add_option("--checkpoint", eval_checkpoint, "checkpoint path")->required();
    eval_cmd->add_option("--tasks", eval_tasks, "number of tasks");
    eval_cmd->add_option("--perception-fraction", eval_fraction, "share of perception tasks");
    eval_cmd->add_option("--objects", eval_objects, "objects per scene");
    eval_cmd->add_option("--extent", eval_extent, "grid extent");
    eval_cmd->add_option("--max-len", eval_max_len, "decode token cap");
    eval_cmd->add_option("--decode", eval_decode, "greedy or sample");

    // tts
    auto* tts_cmd = app.add_subcommand("tts", "test-time refinement over a task set");
    std::string tts_checkpoint;
    std::string tts_strategy = "truncate";
    int tts_k = 4;
    int tts_votes = 4;
    int tts_tasks = 50;
    double tts_fraction = 0.8;
    int tts_objects = 4;
    int tts_extent = 4;
    int tts_max_len = 16;
    std::string tts_verifier = "oracle";
    double tts_noise = 0.2;
    tts_cmd->add_option("--checkpoint", tts_checkpoint, "checkpoint path")->required();
    tts_cmd->add_option("--strategy", tts_strategy, "truncate, truncate-thinking or majority-vote");
    tts_cmd->add_option("--k", tts_k, "iteration cap");
    tts_cmd->add_option("--samples", tts_votes, "majority-vote sample count");
    tts_cmd->add_option("--tasks", tts_tasks, "number of tasks");
    tts_cmd->add_option("--perception-fraction", tts_fraction, "share of perception tasks");
    tts_cmd->add_option("--objects", tts_objects, "objects per scene");
    tts_cmd->add_option("--extent", tts_extent, "grid extent");
    tts_cmd->add_option("--max-len", tts_max_len, "decode token cap");
    tts_cmd->add_option("--verifier", tts_verifier, "oracle or noisy");
    tts_cmd->add_option("--noise-p", tts_noise, "flip probability for the noisy verifier");

    // sweep-alpha
    auto* sweep_cmd = app.add_subcommand("sweep-alpha", "train+eval across penalty strengths");
    std::string sweep_alphas = "0.0,0.03,0.1,0.3";
    std::string sweep_seeds = "1";
    int sweep_eval_tasks = 200;
    sweep_cmd->add_option("--alphas", sweep_alphas, "comma-separated penalty strengths");
    sweep_cmd->add_option("--seeds", sweep_seeds, "comma-separated seeds");
    sweep_cmd->add_option("--eval-tasks", sweep_eval_tasks, "held-out task count per cell");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen_scenes->parsed()) {
            return run_gen_scenes(gs_count, gs_objects, gs_extent, seed,
                                  out.empty() ? "scenes.jsonl" : out);
        }
        if (gen_sft->parsed()) {
            if (seed_set) {
                sft_cfg.seed = seed;
            }
            return run_gen_sft(sft_cfg, sft_checkpoint, out.empty() ? "sft.jsonl" : out);
        }
        if (train_cmd->parsed()) {
            psgrpo::TrainRunConfig cfg = load_train_config(config_path);
            if (seed_set) {
                cfg.seed = seed;
            }
            return run_train(cfg, out);
        }
        if (eval_cmd->parsed()) {
            return run_eval(eval_checkpoint, eval_tasks, eval_fraction, eval_objects, eval_extent,
                            seed, eval_decode, eval_max_len, out);
        }
        if (tts_cmd->parsed()) {
            return run_tts(tts_checkpoint, tts_strategy, tts_k, tts_votes, tts_tasks, tts_fraction,
                           tts_objects, tts_extent, seed, tts_verifier, tts_noise, tts_max_len, out);
        }
        if (sweep_cmd->parsed()) {
            psgrpo::TrainRunConfig cfg = load_train_config(config_path);
            return run_sweep(cfg, sweep_alphas, sweep_seeds, sweep_eval_tasks,
                             out.empty() ? "sweep" : out);
        }
    } catch (const psgrpo::IoError& e) {
        std::cerr << "error (io): " << e.what() << "\n";
        return kExitIo;
    } catch (const psgrpo::CompatibilityError& e) {
        std::cerr << "error (compatibility): " << e.what() << "\n";
        return kExitConfig;
    } catch (const psgrpo::NumericError& e) {
        std::cerr << "error (numeric): " << e.what() << "\n";
        return kExitRuntime;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error (config): " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return kExitOk;
}
