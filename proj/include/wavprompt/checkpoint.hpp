#pragma once

// Versioned binary container shared by language-model and encoder
// checkpoints: an 8-byte magic, a format version, a JSON header describing
// the configuration and tensor table, then raw little-endian float32 data.

#include "wavprompt/nn.hpp"
#include "wavprompt/types.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace wavprompt {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// SHA-256 (hex) over parameter names, shapes and raw values, in list order.
std::string hash_parameters(const nn::ConstParamList<float> & params);

struct Checkpoint {
    std::string kind;     // "lm" or "encoder"
    nlohmann::json meta;  // configuration, vocabulary, provenance
    std::vector<std::string> names;
    std::vector<ad::Matrix<float>> tensors;
    std::string hash;

    // Captures the current values of `params`.
    static Checkpoint capture(std::string kind, nlohmann::json meta, const nn::ConstParamList<float> & params);

    // Copies tensors into `params`, matching by name and shape.
    void restore(const nn::ParamList<float> & params) const;

    void save(const std::filesystem::path & path) const;

    // Verifies the stored hash against the loaded tensors.
    static Checkpoint load(const std::filesystem::path & path);
};

}  // namespace wavprompt
