#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "psgrpo/env.hpp"

namespace psgrpo {

class VocabularyError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Closed word vocabulary for the template policy. Words never contain
// whitespace, so the whitespace tokenizer recovers exactly one token per
// generated word and penalty masks align with policy token indices.
class Vocabulary {
public:
    Vocabulary(std::vector<std::string> words, int pad_index, int eos_index)
        : words_(std::move(words)), pad_index_(pad_index), eos_index_(eos_index) {
        for (int i = 0; i < static_cast<int>(words_.size()); ++i) {
            if (words_[i].empty()) {
                throw VocabularyError("Vocabulary: empty word");
            }
            for (char c : words_[i]) {
                if (is_separator(c)) {
                    throw VocabularyError("Vocabulary: word contains whitespace: " + words_[i]);
                }
            }
            if (!index_.emplace(words_[i], i).second) {
                throw VocabularyError("Vocabulary: duplicate word " + words_[i]);
            }
        }
        if (pad_index_ < 0 || pad_index_ >= size() || eos_index_ < 0 || eos_index_ >= size() ||
            pad_index_ == eos_index_) {
            throw VocabularyError("Vocabulary: bad pad/eos indices");
        }
    }

    int size() const { return static_cast<int>(words_.size()); }
    int pad_index() const { return pad_index_; }
    int eos_index() const { return eos_index_; }

    const std::string& word(int index) const {
        if (index < 0 || index >= size()) {
            throw VocabularyError("Vocabulary: index out of range");
        }
        return words_[static_cast<std::size_t>(index)];
    }

    const std::vector<std::string>& words() const { return words_; }

    std::optional<int> find(std::string_view w) const {
        auto it = index_.find(std::string(w));
        if (it == index_.end()) {
            return std::nullopt;
        }
        return it->second;
    }

    int require(std::string_view w) const {
        const std::optional<int> idx = find(w);
        if (!idx.has_value()) {
            throw VocabularyError("Vocabulary: out-of-vocabulary word \"" + std::string(w) + "\"");
        }
        return *idx;
    }

    // All words the environment's templates, answers, and reflection prompt
    // can produce.
    static Vocabulary environment_default() {
        std::vector<std::string> words = {"<pad>", "<eos>", "the", "is", "of", "answer:"};
        for (auto w : kColorNames) {
            words.emplace_back(w);
        }
        for (auto w : {"left", "right", "above", "below"}) {
            words.emplace_back(w);
        }
        for (auto w : kObjectNames) {
            words.emplace_back(w);
        }
        for (auto w : kCountWords) {
            words.emplace_back(w);
        }
        for (auto w : {"wait", "i", "need", "to", "reconsider", "this", "reasoning", "more",
                       "carefully"}) {
            words.emplace_back(w);
        }
        return Vocabulary(std::move(words), 0, 1);
    }

private:
    std::vector<std::string> words_;
    std::unordered_map<std::string, int> index_;
    int pad_index_;
    int eos_index_;
};

// Deterministic one-hot encoding of scene facts and the structured query.
// Per name slot: presence bit, color one-hot, x one-hot, y one-hot; then
// query kind, subject, object and axis one-hots. Grid extents up to
// kMaxGridExtent are representable.
struct FeatureLayout {
    static constexpr int kMaxGridExtent = 8;
    static constexpr int kNameCount = static_cast<int>(kObjectNames.size());
    static constexpr int kColorCount = static_cast<int>(kColorNames.size());
    static constexpr int kObjectBlock = 1 + kColorCount + 2 * kMaxGridExtent;
    static constexpr int kQueryBlock = 3 + 2 * kNameCount + 2;

    std::string version = "grid-onehot-v1";

    static constexpr int feature_dim() { return kNameCount * kObjectBlock + kQueryBlock; }

    static int name_slot(std::string_view name) {
        for (int i = 0; i < kNameCount; ++i) {
            if (kObjectNames[static_cast<std::size_t>(i)] == name) {
                return i;
            }
        }
        throw std::invalid_argument("FeatureLayout: unknown object name \"" + std::string(name) + "\"");
    }

    std::vector<double> encode(const Task& task) const {
        task.scene.validate();
        if (task.scene.grid_extent > kMaxGridExtent) {
            throw std::invalid_argument("FeatureLayout: grid extent exceeds encodable maximum");
        }
        std::vector<double> f(feature_dim(), 0.0);
        for (const SceneObject& obj : task.scene.objects) {
            const int slot = name_slot(obj.name);
            const int base = slot * kObjectBlock;
            f[base] = 1.0;
            f[base + 1 + static_cast<int>(obj.color)] = 1.0;
            f[base + 1 + kColorCount + obj.x] = 1.0;
            f[base + 1 + kColorCount + kMaxGridExtent + obj.y] = 1.0;
        }
        const int q = kNameCount * kObjectBlock;
        f[q + static_cast<int>(task.kind)] = 1.0;
        if (!task.subject_name.empty()) {
            f[q + 3 + name_slot(task.subject_name)] = 1.0;
        }
        if (!task.object_name.empty()) {
            f[q + 3 + kNameCount + name_slot(task.object_name)] = 1.0;
        }
        if (task.axis == QueryAxis::horizontal) {
            f[q + 3 + 2 * kNameCount] = 1.0;
        } else if (task.axis == QueryAxis::vertical) {
            f[q + 3 + 2 * kNameCount + 1] = 1.0;
        }
        return f;
    }
};

inline std::vector<double> features(const Task& task) { return FeatureLayout{}.encode(task); }

// The vocabulary and feature layout a policy was built against.
struct EnvBinding {
    Vocabulary vocab;
    FeatureLayout layout;

    static EnvBinding environment_default() {
        return EnvBinding{Vocabulary::environment_default(), FeatureLayout{}};
    }
};

}  // namespace psgrpo
