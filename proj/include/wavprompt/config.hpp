#pragma once

// The run configuration: one JSON tree with a section per pipeline stage,
// loaded from a file and patched with dotted key=value overrides.

#include "wavprompt/acoustic.hpp"
#include "wavprompt/corpus.hpp"
#include "wavprompt/evalharness.hpp"
#include "wavprompt/langmodel.hpp"
#include "wavprompt/pretrain.hpp"
#include "wavprompt/text_corpus.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace wavprompt {

class RunConfig {
  public:
    // Every section at its default.
    static RunConfig defaults();

    // Deep-merges `patch`; keys absent from the tree raise ConfigError naming the path.
    void merge(const nlohmann::json & patch);
    void merge_file(const std::filesystem::path & path);

    // "a.b.c=value"; value is parsed as JSON when possible, else taken as a string.
    void set(const std::string & assignment);

    const nlohmann::json & tree() const { return tree_; }

    std::uint64_t seed() const;
    CorpusSpec corpus() const;
    TextCorpusConfig text() const;
    LMConfig lm(size_t vocab_size) const;
    LMTrainConfig lm_train() const;
    EncoderConfig encoder(const GridPoint & p, int lm_dim) const;
    PretrainConfig pretrain(const GridPoint & p) const;
    std::vector<GridPoint> pretrain_grid() const;
    EvalConfig eval() const;

    // Cross-section checks; throws ConfigError.
    void validate() const;

  private:
    nlohmann::json tree_;
};

// Markdown page listing every key with its default and meaning.
std::string config_reference();

}  // namespace wavprompt
