#pragma once

#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "psgrpo/encoding.hpp"
#include "psgrpo/env.hpp"
#include "psgrpo/policy.hpp"
#include "psgrpo/tts.hpp"

namespace psgrpo {

using ojson = nlohmann::ordered_json;

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class CompatibilityError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr int kCheckpointVersion = 1;
inline constexpr std::string_view kCheckpointFormat = "psgrpo-checkpoint";

namespace io_detail {

template <typename Enum, std::size_t N>
Enum enum_from_name(std::string_view name, const std::array<std::string_view, N>& names,
                    const char* what) {
    for (std::size_t i = 0; i < N; ++i) {
        if (names[i] == name) {
            return static_cast<Enum>(i);
        }
    }
    throw IoError(std::string(what) + ": unknown value \"" + std::string(name) + "\"");
}

}  // namespace io_detail

inline ojson scene_to_json(const Scene& scene) {
    ojson objects = ojson::array();
    for (const SceneObject& o : scene.objects) {
        objects.push_back(ojson{{"name", o.name},
                                {"color", std::string(color_name(o.color))},
                                {"size", std::string(size_name(o.size))},
                                {"x", o.x},
                                {"y", o.y}});
    }
    return ojson{{"grid_extent", scene.grid_extent}, {"objects", std::move(objects)}};
}

inline Scene scene_from_json(const ojson& j) {
    Scene scene;
    scene.grid_extent = j.at("grid_extent").get<int>();
    for (const ojson& jo : j.at("objects")) {
        SceneObject o;
        o.name = jo.at("name").get<std::string>();
        o.color = io_detail::enum_from_name<Color>(jo.at("color").get<std::string>(), kColorNames,
                                                   "scene color");
        o.size = io_detail::enum_from_name<ObjectSize>(jo.at("size").get<std::string>(), kSizeNames,
                                                       "scene size");
        o.x = jo.at("x").get<int>();
        o.y = jo.at("y").get<int>();
        scene.objects.push_back(std::move(o));
    }
    scene.validate();
    return scene;
}

inline std::string_view axis_name(QueryAxis axis) {
    switch (axis) {
        case QueryAxis::none: return "none";
        case QueryAxis::horizontal: return "horizontal";
        case QueryAxis::vertical: return "vertical";
    }
    return "?";
}

inline QueryAxis axis_from_name(std::string_view name) {
    if (name == "none") {
        return QueryAxis::none;
    }
    if (name == "horizontal") {
        return QueryAxis::horizontal;
    }
    if (name == "vertical") {
        return QueryAxis::vertical;
    }
    throw IoError("task axis: unknown value \"" + std::string(name) + "\"");
}

inline TaskKind task_kind_from_name(std::string_view name) {
    if (name == "attribute") {
        return TaskKind::attribute;
    }
    if (name == "spatial") {
        return TaskKind::spatial;
    }
    if (name == "general") {
        return TaskKind::general;
    }
    throw IoError("task kind: unknown value \"" + std::string(name) + "\"");
}

inline ojson task_to_json(const Task& task) {
    return ojson{{"id", task.id},
                 {"scene", scene_to_json(task.scene)},
                 {"query", task.query},
                 {"kind", std::string(task_kind_name(task.kind))},
                 {"gold_answer", task.gold_answer},
                 {"subject", task.subject_name},
                 {"object", task.object_name},
                 {"axis", std::string(axis_name(task.axis))}};
}

inline Task task_from_json(const ojson& j) {
    Task task;
    task.id = j.at("id").get<std::string>();
    task.scene = scene_from_json(j.at("scene"));
    task.query = j.at("query").get<std::string>();
    task.kind = task_kind_from_name(j.at("kind").get<std::string>());
    task.gold_answer = j.at("gold_answer").get<std::string>();
    task.subject_name = j.at("subject").get<std::string>();
    task.object_name = j.at("object").get<std::string>();
    task.axis = axis_from_name(j.at("axis").get<std::string>());
    return task;
}

inline std::string_view params_role_name(ParamsRole role) {
    switch (role) {
        case ParamsRole::trainable: return "trainable";
        case ParamsRole::rollout_snapshot: return "rollout_snapshot";
        case ParamsRole::reference: return "reference";
    }
    return "?";
}

inline ParamsRole params_role_from_name(std::string_view name) {
    if (name == "trainable") {
        return ParamsRole::trainable;
    }
    if (name == "rollout_snapshot") {
        return ParamsRole::rollout_snapshot;
    }
    if (name == "reference") {
        return ParamsRole::reference;
    }
    throw IoError("params role: unknown value \"" + std::string(name) + "\"");
}

struct Checkpoint {
    PolicyParams params;
    EnvBinding binding;
};

// Versioned textual checkpoint: dimensions, vocabulary, feature layout tag
// and all parameter tensors. Doubles serialize with shortest round-trip
// formatting, so save/load reproduces values exactly.
inline ojson checkpoint_to_json(const PolicyParams& params, const EnvBinding& binding) {
    params.validate();
    if (params.vocab_size != binding.vocab.size()) {
        throw CompatibilityError("checkpoint_to_json: params/vocabulary size mismatch");
    }
    ojson j;
    j["format"] = std::string(kCheckpointFormat);
    j["version"] = kCheckpointVersion;
    j["role"] = std::string(params_role_name(params.role));
    j["dims"] = ojson{{"vocab", params.vocab_size},
                      {"hidden", params.hidden_dim},
                      {"features", params.feature_dim},
                      {"context", params.context_len},
                      {"pad_index", params.pad_index}};
    j["vocabulary"] = ojson{{"words", binding.vocab.words()},
                            {"pad_index", binding.vocab.pad_index()},
                            {"eos_index", binding.vocab.eos_index()}};
    j["feature_layout"] = binding.layout.version;
    j["input_weights"] = params.input_weights.data;
    j["input_bias"] = params.input_bias;
    j["output_weights"] = params.output_weights.data;
    j["output_bias"] = params.output_bias;
    return j;
}

inline Checkpoint checkpoint_from_json(const ojson& j) {
    if (j.at("format").get<std::string>() != kCheckpointFormat) {
        throw CompatibilityError("checkpoint: unrecognized format tag");
    }
    if (j.at("version").get<int>() != kCheckpointVersion) {
        throw CompatibilityError("checkpoint: unsupported version");
    }
    const ojson& jv = j.at("vocabulary");
    Vocabulary vocab(jv.at("words").get<std::vector<std::string>>(), jv.at("pad_index").get<int>(),
                     jv.at("eos_index").get<int>());
    FeatureLayout layout;
    if (j.at("feature_layout").get<std::string>() != layout.version) {
        throw CompatibilityError("checkpoint: unknown feature layout \"" +
                                 j.at("feature_layout").get<std::string>() + "\"");
    }
    const ojson& jd = j.at("dims");
    PolicyParams p = PolicyParams::zeros(jd.at("vocab").get<int>(), jd.at("hidden").get<int>(),
                                         jd.at("features").get<int>(), jd.at("context").get<int>(),
                                         jd.at("pad_index").get<int>());
    p.role = params_role_from_name(j.at("role").get<std::string>());
    if (p.vocab_size != vocab.size()) {
        throw CompatibilityError("checkpoint: dims/vocabulary size mismatch");
    }
    if (p.feature_dim != FeatureLayout::feature_dim()) {
        throw CompatibilityError("checkpoint: feature dimension does not match layout");
    }
    auto load_vector = [&](const char* key, std::vector<double>& dst) {
        std::vector<double> v = j.at(key).get<std::vector<double>>();
        if (v.size() != dst.size()) {
            throw CompatibilityError(std::string("checkpoint: tensor size mismatch for ") + key);
        }
        dst = std::move(v);
    };
    load_vector("input_weights", p.input_weights.data);
    load_vector("input_bias", p.input_bias);
    load_vector("output_weights", p.output_weights.data);
    load_vector("output_bias", p.output_bias);
    p.validate();
    return Checkpoint{std::move(p), EnvBinding{std::move(vocab), layout}};
}

inline void save_checkpoint(const std::string& path, const PolicyParams& params,
                            const EnvBinding& binding) {
    std::ofstream out(path);
    if (!out) {
        throw IoError("save_checkpoint: cannot open " + path);
    }
    out << checkpoint_to_json(params, binding).dump() << '\n';
    if (!out) {
        throw IoError("save_checkpoint: write failed for " + path);
    }
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("load_checkpoint: cannot open " + path);
    }
    ojson j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw IoError("load_checkpoint: invalid JSON in " + path + ": " + e.what());
    }
    return checkpoint_from_json(j);
}

inline std::string_view stop_reason_name(StopReason r) {
    return r == StopReason::clean ? "clean" : "cap_reached";
}

// One line-delimited record per refinement iteration.
inline std::vector<ojson> tts_trace_records(const std::string& task_id, const TtsTrace& trace) {
    std::vector<ojson> records;
    for (std::size_t i = 0; i < trace.iterations.size(); ++i) {
        const TtsIteration& it = trace.iterations[i];
        ojson rec;
        rec["task_id"] = task_id;
        rec["iteration"] = i + 1;
        rec["response_text"] = it.response.text;
        rec["verification_text"] = it.verification_text;
        rec["parse_failed"] = it.parse_failed;
        if (it.truncation_point.has_value()) {
            rec["truncation_point"] = *it.truncation_point;
        } else {
            rec["truncation_point"] = nullptr;
        }
        rec["injected_text"] = it.injected_text;
        const bool final = i + 1 == trace.iterations.size();
        rec["final"] = final;
        if (final) {
            rec["stop_reason"] = std::string(stop_reason_name(trace.stop_reason));
        }
        records.push_back(std::move(rec));
    }
    return records;
}

}  // namespace psgrpo
