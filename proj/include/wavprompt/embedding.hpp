#pragma once

#include "wavprompt/autograd.hpp"

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace wavprompt {

enum class Source : std::uint8_t { audio, text };

inline const char * to_string(Source s) { return s == Source::audio ? "audio" : "text"; }

// Rows of `vectors` are positions; `sources` tags each row.
struct EmbeddingSequence {
    ad::Matrix<float> vectors;
    std::vector<Source> sources;

    EmbeddingSequence() = default;
    EmbeddingSequence(ad::Matrix<float> v, Source tag)
        : vectors(std::move(v)), sources(static_cast<size_t>(vectors.rows()), tag) {}

    size_t size() const { return sources.size(); }
    bool empty() const { return sources.empty(); }
    ad::Index dim() const { return vectors.cols(); }

    size_t count(Source tag) const {
        size_t n = 0;
        for (Source s : sources) {
            n += s == tag ? 1 : 0;
        }
        return n;
    }

    void append(const EmbeddingSequence & other) {
        if (other.empty()) {
            return;
        }
        if (empty()) {
            *this = other;
            return;
        }
        if (other.dim() != dim()) {
            throw std::invalid_argument("EmbeddingSequence: dimension mismatch (" + std::to_string(other.dim()) +
                                        " vs " + std::to_string(dim()) + ")");
        }
        const ad::Index n = vectors.rows();
        vectors.conservativeResize(n + other.vectors.rows(), Eigen::NoChange);
        vectors.bottomRows(other.vectors.rows()) = other.vectors;
        sources.insert(sources.end(), other.sources.begin(), other.sources.end());
    }
};

inline EmbeddingSequence concat(std::initializer_list<const EmbeddingSequence *> parts) {
    EmbeddingSequence out;
    for (const auto * p : parts) {
        out.append(*p);
    }
    return out;
}

}  // namespace wavprompt
