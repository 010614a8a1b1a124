#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "psgrpo/grounding.hpp"
#include "psgrpo/rng.hpp"
#include "psgrpo/verification.hpp"

namespace psgrpo {

class CapacityError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class TaskError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

enum class Color { red, green, blue, yellow };
enum class ObjectSize { small, medium, large };

inline constexpr std::array<std::string_view, 4> kColorNames = {"red", "green", "blue", "yellow"};
inline constexpr std::array<std::string_view, 3> kSizeNames = {"small", "medium", "large"};
inline constexpr std::array<std::string_view, 8> kObjectNames = {"mug", "brick", "ball", "box",
                                                                 "cat", "dog",   "car",  "tree"};
// Count words indexed by object count (2..8 supported).
inline constexpr std::array<std::string_view, 7> kCountWords = {"two", "three", "four", "five",
                                                                "six", "seven", "eight"};

inline std::string_view color_name(Color c) { return kColorNames[static_cast<int>(c)]; }
inline std::string_view size_name(ObjectSize s) { return kSizeNames[static_cast<int>(s)]; }

inline std::optional<Color> color_from_name(std::string_view name) {
    for (std::size_t i = 0; i < kColorNames.size(); ++i) {
        if (kColorNames[i] == name) {
            return static_cast<Color>(i);
        }
    }
    return std::nullopt;
}

// One object placed on the grid. The coordinate system has x increasing to
// the right and y increasing downward, so "above" means smaller y.
struct SceneObject {
    std::string name;
    Color color = Color::red;
    ObjectSize size = ObjectSize::small;
    int x = 0;
    int y = 0;
};

struct Scene {
    std::vector<SceneObject> objects;
    int grid_extent = 0;

    const SceneObject* find(std::string_view name) const {
        for (const SceneObject& o : objects) {
            if (o.name == name) {
                return &o;
            }
        }
        return nullptr;
    }

    void validate() const {
        if (grid_extent < 2) {
            throw std::invalid_argument("Scene: grid_extent must be >= 2");
        }
        for (std::size_t i = 0; i < objects.size(); ++i) {
            const SceneObject& o = objects[i];
            if (o.x < 0 || o.x >= grid_extent || o.y < 0 || o.y >= grid_extent) {
                throw std::invalid_argument("Scene: object position outside grid");
            }
            for (std::size_t j = i + 1; j < objects.size(); ++j) {
                if (o.name == objects[j].name) {
                    throw std::invalid_argument("Scene: duplicate object name " + o.name);
                }
            }
        }
    }
};

enum class TaskKind { attribute, spatial, general };

inline std::string_view task_kind_name(TaskKind k) {
    switch (k) {
        case TaskKind::attribute: return "attribute";
        case TaskKind::spatial: return "spatial";
        case TaskKind::general: return "general";
    }
    return "?";
}

enum class QueryAxis { none, horizontal, vertical };

// A query over a scene with its verifiable gold answer. subject/object/axis
// hold the structured form of the query so downstream feature encoding never
// parses the query text.
struct Task {
    std::string id;
    Scene scene;
    std::string query;
    TaskKind kind = TaskKind::attribute;
    std::string gold_answer;
    std::string subject_name;  // queried object (attribute, spatial)
    std::string object_name;   // second object (spatial only)
    QueryAxis axis = QueryAxis::none;
};

// Deterministic scene generation: distinct names from the fixed pool,
// distinct uniformly drawn grid cells, uniform colors and sizes.
inline Scene generate_scene(uint64_t seed, int n_objects, int grid_extent) {
    if (n_objects < 2) {
        throw std::invalid_argument("generate_scene: n_objects must be >= 2");
    }
    if (grid_extent < 2) {
        throw std::invalid_argument("generate_scene: grid_extent must be >= 2");
    }
    const long cells = static_cast<long>(grid_extent) * grid_extent;
    if (n_objects > cells) {
        throw CapacityError("generate_scene: more objects than grid cells");
    }
    if (n_objects > static_cast<int>(kObjectNames.size())) {
        throw CapacityError("generate_scene: more objects than distinct names");
    }
    SplitMix64 rng(seed);

    // Partial Fisher-Yates over the name pool.
    std::array<int, kObjectNames.size()> name_idx{};
    for (std::size_t i = 0; i < name_idx.size(); ++i) {
        name_idx[i] = static_cast<int>(i);
    }
    for (int i = 0; i < n_objects; ++i) {
        const int j = i + static_cast<int>(rng.next_below(name_idx.size() - i));
        std::swap(name_idx[i], name_idx[j]);
    }

    // Distinct cells by rejection; cheap at these sizes.
    std::vector<int> taken;
    Scene scene;
    scene.grid_extent = grid_extent;
    for (int i = 0; i < n_objects; ++i) {
        int cell = 0;
        for (;;) {
            cell = static_cast<int>(rng.next_below(static_cast<uint64_t>(cells)));
            if (std::find(taken.begin(), taken.end(), cell) == taken.end()) {
                break;
            }
        }
        taken.push_back(cell);
        SceneObject obj;
        obj.name = std::string(kObjectNames[static_cast<std::size_t>(name_idx[i])]);
        obj.color = static_cast<Color>(rng.next_below(kColorNames.size()));
        obj.size = static_cast<ObjectSize>(rng.next_below(kSizeNames.size()));
        obj.x = cell % grid_extent;
        obj.y = cell / grid_extent;
        scene.objects.push_back(std::move(obj));
    }
    return scene;
}

// Evaluates a spatial predicate on the claimed axis; strict comparisons, so
// ties on the axis make both directions false.
inline bool relation_holds(const SceneObject& a, const SceneObject& b, std::string_view relation) {
    if (relation == "left") {
        return a.x < b.x;
    }
    if (relation == "right") {
        return a.x > b.x;
    }
    if (relation == "above") {
        return a.y < b.y;
    }
    if (relation == "below") {
        return a.y > b.y;
    }
    throw std::invalid_argument("relation_holds: unknown relation");
}

// Deterministic task generation from scene facts. Spatial tasks only ever
// ask about axes where the two objects differ strictly, so gold answers are
// never ambiguous.
inline Task generate_task(const Scene& scene, TaskKind kind, uint64_t seed) {
    scene.validate();
    SplitMix64 rng(seed);
    Task task;
    task.scene = scene;
    task.kind = kind;
    task.id = std::string(task_kind_name(kind)) + "-" + std::to_string(seed);

    switch (kind) {
        case TaskKind::attribute: {
            const std::size_t i = rng.next_below(scene.objects.size());
            const SceneObject& obj = scene.objects[i];
            task.subject_name = obj.name;
            task.query = "what color is the " + obj.name;
            task.gold_answer = std::string(color_name(obj.color));
            break;
        }
        case TaskKind::spatial: {
            if (scene.objects.size() < 2) {
                throw TaskError("generate_task: spatial task needs >= 2 objects");
            }
            const SceneObject* a = nullptr;
            const SceneObject* b = nullptr;
            QueryAxis axis = QueryAxis::none;
            for (;;) {
                const std::size_t i = rng.next_below(scene.objects.size());
                std::size_t j = rng.next_below(scene.objects.size() - 1);
                if (j >= i) {
                    ++j;
                }
                a = &scene.objects[i];
                b = &scene.objects[j];
                const bool x_ok = a->x != b->x;
                const bool y_ok = a->y != b->y;
                if (!x_ok && !y_ok) {
                    continue;  // cannot happen with distinct cells, kept for safety
                }
                if (x_ok && y_ok) {
                    axis = rng.next_below(2) == 0 ? QueryAxis::horizontal : QueryAxis::vertical;
                } else {
                    axis = x_ok ? QueryAxis::horizontal : QueryAxis::vertical;
                }
                break;
            }
            task.subject_name = a->name;
            task.object_name = b->name;
            task.axis = axis;
            if (axis == QueryAxis::horizontal) {
                task.query = "is the " + a->name + " left or right of the " + b->name;
                task.gold_answer = a->x < b->x ? "left" : "right";
            } else {
                task.query = "is the " + a->name + " above or below the " + b->name;
                task.gold_answer = a->y < b->y ? "above" : "below";
            }
            break;
        }
        case TaskKind::general: {
            const std::size_t count = scene.objects.size();
            if (count < 2 || count > 8) {
                throw TaskError("generate_task: general task needs 2..8 objects");
            }
            task.query = "how many objects are in the scene";
            task.gold_answer = std::string(kCountWords[count - 2]);
            break;
        }
    }
    return task;
}

enum class Predicate { has_color, left_of, right_of, above, below };

inline std::string_view predicate_name(Predicate p) {
    switch (p) {
        case Predicate::has_color: return "has_color";
        case Predicate::left_of: return "left_of";
        case Predicate::right_of: return "right_of";
        case Predicate::above: return "above";
        case Predicate::below: return "below";
    }
    return "?";
}

// A perceptual statement extracted from a response, with the exact source
// slice it came from.
struct Claim {
    std::string subject;
    Predicate predicate = Predicate::has_color;
    std::string object_or_value;  // color word or second object name
    std::string source_substring;
    std::size_t source_begin = 0;
    std::size_t source_end = 0;  // half-open character range
};

namespace detail {

inline bool is_relation_word(std::string_view w) {
    return w == "left" || w == "right" || w == "above" || w == "below";
}

}  // namespace detail

// Scans for the closed claim templates
//   "the <name> is <color>"
//   "the <name> is left|right of the <name>"
//   "the <name> is above|below the <name>"
// and returns each match with its exact source substring. The scan advances
// one token at a time, so claims sharing tokens are all reported.
inline std::vector<Claim> extract_claims(std::string_view response_text) {
    const TokenizedText tt = tokenize(response_text);
    const auto& tok = tt.tokens;
    const auto& off = tt.offsets;
    const std::size_t n = tok.size();
    std::vector<Claim> claims;

    auto slice = [&](std::size_t first, std::size_t last) {
        return std::string(response_text.substr(off[first].begin, off[last].end - off[first].begin));
    };

    for (std::size_t i = 0; i + 3 < n; ++i) {
        if (tok[i] != "the" || tok[i + 2] != "is") {
            continue;
        }
        const std::string& subject = tok[i + 1];
        const std::string& head = tok[i + 3];
        if (color_from_name(head).has_value()) {
            Claim c;
            c.subject = subject;
            c.predicate = Predicate::has_color;
            c.object_or_value = head;
            c.source_begin = off[i].begin;
            c.source_end = off[i + 3].end;
            c.source_substring = slice(i, i + 3);
            claims.push_back(std::move(c));
        } else if ((head == "left" || head == "right") && i + 6 < n && tok[i + 4] == "of" &&
                   tok[i + 5] == "the") {
            Claim c;
            c.subject = subject;
            c.predicate = head == "left" ? Predicate::left_of : Predicate::right_of;
            c.object_or_value = tok[i + 6];
            c.source_begin = off[i].begin;
            c.source_end = off[i + 6].end;
            c.source_substring = slice(i, i + 6);
            claims.push_back(std::move(c));
        } else if ((head == "above" || head == "below") && i + 5 < n && tok[i + 4] == "the") {
            Claim c;
            c.subject = subject;
            c.predicate = head == "above" ? Predicate::above : Predicate::below;
            c.object_or_value = tok[i + 5];
            c.source_begin = off[i].begin;
            c.source_end = off[i + 5].end;
            c.source_substring = slice(i, i + 5);
            claims.push_back(std::move(c));
        }
    }
    return claims;
}

namespace detail {

inline std::string relation_surface(Predicate p, std::string_view a, std::string_view b) {
    std::string rel;
    switch (p) {
        case Predicate::left_of: rel = "left of"; break;
        case Predicate::right_of: rel = "right of"; break;
        case Predicate::above: rel = "above"; break;
        case Predicate::below: rel = "below"; break;
        default: throw std::invalid_argument("relation_surface: not a spatial predicate");
    }
    return "the " + std::string(a) + " is " + rel + " the " + std::string(b);
}

// The true statement to offer as a correction for a contradicted claim, or
// nothing when the claim refers to objects that do not exist.
inline std::optional<std::string> truth_statement(const Scene& scene, const Claim& claim) {
    const SceneObject* a = scene.find(claim.subject);
    if (a == nullptr) {
        return std::nullopt;
    }
    if (claim.predicate == Predicate::has_color) {
        return "the " + claim.subject + " is " + std::string(color_name(a->color));
    }
    const SceneObject* b = scene.find(claim.object_or_value);
    if (b == nullptr) {
        return std::nullopt;
    }
    const bool x_axis = claim.predicate == Predicate::left_of || claim.predicate == Predicate::right_of;
    if (x_axis && a->x != b->x) {
        return relation_surface(a->x < b->x ? Predicate::left_of : Predicate::right_of, a->name, b->name);
    }
    if (!x_axis && a->y != b->y) {
        return relation_surface(a->y < b->y ? Predicate::above : Predicate::below, a->name, b->name);
    }
    // Tie on the claimed axis: fall back to the other axis, strict by
    // distinct-cell construction.
    if (a->x != b->x) {
        return relation_surface(a->x < b->x ? Predicate::left_of : Predicate::right_of, a->name, b->name);
    }
    if (a->y != b->y) {
        return relation_surface(a->y < b->y ? Predicate::above : Predicate::below, a->name, b->name);
    }
    return std::nullopt;
}

inline bool claim_consistent(const Scene& scene, const Claim& claim) {
    const SceneObject* a = scene.find(claim.subject);
    if (a == nullptr) {
        return false;  // hallucinated referent
    }
    switch (claim.predicate) {
        case Predicate::has_color: return color_name(a->color) == claim.object_or_value;
        case Predicate::left_of:
        case Predicate::right_of:
        case Predicate::above:
        case Predicate::below: {
            const SceneObject* b = scene.find(claim.object_or_value);
            if (b == nullptr) {
                return false;
            }
            switch (claim.predicate) {
                case Predicate::left_of: return a->x < b->x;
                case Predicate::right_of: return a->x > b->x;
                case Predicate::above: return a->y < b->y;
                case Predicate::below: return a->y > b->y;
                default: return false;
            }
        }
    }
    return false;
}

}  // namespace detail

// Checks every extracted claim against the scene facts and flags the exact
// source substrings of the contradicted ones. Unknown object names count as
// contradictions. The think field records one judgment line per claim and,
// when anything was flagged, a final "correction: <true statement>" line that
// downstream refinement loops may reuse.
inline Verification oracle_verify(const Scene& scene, std::string_view response_text) {
    scene.validate();
    Verification v;
    std::optional<std::string> correction;
    const std::vector<Claim> claims = extract_claims(response_text);
    for (const Claim& claim : claims) {
        const bool ok = detail::claim_consistent(scene, claim);
        if (!v.think.empty()) {
            v.think += '\n';
        }
        v.think += "claim '" + claim.source_substring + "' -> ";
        if (ok) {
            v.think += "consistent";
        } else {
            const std::optional<std::string> truth = detail::truth_statement(scene, claim);
            if (scene.find(claim.subject) == nullptr) {
                v.think += "contradicted; no " + claim.subject + " in the scene";
            } else if (truth.has_value()) {
                v.think += "contradicted; in the scene " + *truth;
            } else {
                v.think += "contradicted; no " + claim.object_or_value + " in the scene";
            }
            if (!correction.has_value()) {
                if (truth.has_value()) {
                    correction = truth;
                } else if (!scene.objects.empty()) {
                    const SceneObject& o = scene.objects.front();
                    correction = "the " + o.name + " is " + std::string(color_name(o.color));
                }
            }
            v.flags.push_back(claim.source_substring);
        }
    }
    if (!v.flags.empty() && correction.has_value()) {
        if (!v.think.empty()) {
            v.think += '\n';
        }
        v.think += "correction: " + *correction;
    }
    return v;
}

// Oracle verification degraded by independent noise: each flag is dropped
// with probability flip_probability and each consistent claim is flagged
// with the same probability. Deterministic per seed.
inline Verification noisy_verify(const Scene& scene, std::string_view response_text,
                                 double flip_probability, uint64_t seed) {
    if (!(flip_probability >= 0.0 && flip_probability <= 1.0)) {
        throw std::invalid_argument("noisy_verify: flip_probability must be in [0,1]");
    }
    const Verification oracle = oracle_verify(scene, response_text);
    if (flip_probability == 0.0) {
        return oracle;
    }
    SplitMix64 rng(seed);
    Verification v;
    v.think = oracle.think;
    for (const std::string& flag : oracle.flags) {
        if (rng.next_double01() >= flip_probability) {
            v.flags.push_back(flag);
        }
    }
    for (const Claim& claim : extract_claims(response_text)) {
        const bool flagged_by_oracle =
            std::find(oracle.flags.begin(), oracle.flags.end(), claim.source_substring) !=
            oracle.flags.end();
        if (!flagged_by_oracle && rng.next_double01() < flip_probability) {
            v.flags.push_back(claim.source_substring);
        }
    }
    return v;
}

// The final answer is the token following the last "answer:" marker.
inline std::optional<std::string> extract_final_answer(std::string_view response_text) {
    const TokenizedText tt = tokenize(response_text);
    for (std::size_t i = tt.tokens.size(); i-- > 0;) {
        if (tt.tokens[i] == "answer:" && i + 1 < tt.tokens.size()) {
            return tt.tokens[i + 1];
        }
    }
    return std::nullopt;
}

inline bool equals_case_insensitive(std::string_view a, std::string_view b) {
    if (a.size() != b.size()) {
        return false;
    }
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (std::tolower(static_cast<unsigned char>(a[i])) !=
            std::tolower(static_cast<unsigned char>(b[i]))) {
            return false;
        }
    }
    return true;
}

// Binary verifiable reward: 1.0 when the extracted final answer matches the
// gold answer case-insensitively, else 0.0.
inline double outcome_reward(std::string_view response_text, const Task& task) {
    const std::optional<std::string> answer = extract_final_answer(response_text);
    if (!answer.has_value()) {
        return 0.0;
    }
    return equals_case_insensitive(*answer, task.gold_answer) ? 1.0 : 0.0;
}

}  // namespace psgrpo
