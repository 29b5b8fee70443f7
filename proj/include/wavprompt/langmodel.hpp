#pragma once

// Small GPT-style decoder. Token embeddings carry no position; learned
// absolute positions are added at the decoder input, to audio and text rows
// alike.

#include "wavprompt/checkpoint.hpp"
#include "wavprompt/embedding.hpp"
#include "wavprompt/nn.hpp"
#include "wavprompt/train_log.hpp"
#include "wavprompt/types.hpp"
#include "wavprompt/vocab.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <vector>

namespace wavprompt {

struct LMConfig {
    int vocab_size = 0;
    int embed_dim = 128;
    int layers = 4;
    int heads = 4;
    int ff_dim = 512;
    int max_context = 512;
    double dropout = 0.0;

    void validate() const;
    nlohmann::json to_json() const;
    static LMConfig from_json(const nlohmann::json & j);
};

class LanguageModel {
  public:
    // Key/value cache for incremental decoding.
    struct State {
        std::vector<ad::Matrix<float>> keys;
        std::vector<ad::Matrix<float>> values;
        ad::Index length = 0;
        Eigen::RowVectorXf last;  // log-probabilities after the final position
    };

    LanguageModel() = default;
    LanguageModel(const LMConfig & cfg, std::uint64_t seed);

    const LMConfig & config() const { return cfg_; }
    ad::Index dim() const { return cfg_.embed_dim; }

    // Content embeddings only (position is added inside the decoder).
    EmbeddingSequence embed_text(const TokenSequence & tokens) const;
    // Mean L2 norm of the token embedding rows.
    double mean_token_norm() const;

    State start() const;

    // Appends rows to the cache; returns log-probabilities (rows x vocab)
    // for the next token after each appended row.
    ad::Matrix<float> extend(State & state, const ad::Matrix<float> & embeddings) const;

    // Log-probabilities at every position of `prefix`.
    ad::Matrix<float> logprobs(const EmbeddingSequence & prefix) const;

    Eigen::RowVectorXf next_token_logprobs(const EmbeddingSequence & prefix) const;

    // log p(target | prefix), teacher forced.
    double sequence_logprob(const EmbeddingSequence & prefix, const TokenSequence & target) const;

    // Same, continuing from a cached state that already holds the prefix.
    double sequence_logprob(const State & state, const TokenSequence & target) const;

    // Differentiable forward: embeddings (n x d) -> logits (n x vocab).
    // With track == false no parameter gradients are accumulated, while
    // gradients still flow into `embeddings`.
    ad::Var forward(ad::Tape<float> & tape, ad::Var embeddings, bool track, std::mt19937_64 * dropout_rng = nullptr) const;

    // Token-embedding lookup on the tape (gradient flows into the table when tracked).
    ad::Var embed_tokens(ad::Tape<float> & tape, const TokenSequence & tokens, bool track) const;

    void zero_output_head();

    nn::ParamList<float> params();
    nn::ConstParamList<float> params() const;
    size_t parameter_count() const;
    std::string hash() const;

    void save(const std::filesystem::path & path, const Vocabulary & vocab) const;
    // Loads a checkpoint; the vocabulary stored in it is returned through `vocab`.
    static LanguageModel load(const std::filesystem::path & path, Vocabulary * vocab = nullptr);

  private:
    void check_tokens(const TokenSequence & tokens) const;

    template <typename F>
    void for_each_param(F && f) const;

    LMConfig cfg_;
    ad::Parameter<float> token_embedding_;     // vocab x d
    ad::Parameter<float> position_embedding_;  // context x d
    std::vector<nn::TransformerBlock<float>> blocks_;
    nn::LayerNorm<float> ln_f_;
    nn::Linear<float> head_;
};

struct LMTrainConfig {
    long steps = 12000;
    int batch_size = 16;
    double learning_rate = 1e-3;
    double warmup_fraction = 0.05;
    double weight_decay = 0.01;
    double clip_norm = 1.0;
    double heldout_fraction = 0.02;
    long log_every = 100;

    nlohmann::json to_json() const;
    static LMTrainConfig from_json(const nlohmann::json & j);
};

struct LMTrainResult {
    LanguageModel model;
    std::vector<TrainRecord> records;
    double initial_loss = 0.0;  // mean per-token loss of the first batch, before any update
};

// Next-token training on every position of every sequence. Deterministic
// given `seed`. Throws DivergenceError when the loss turns non-finite.
LMTrainResult train_lm(const std::vector<TokenSequence> & corpus, const LMConfig & cfg, const LMTrainConfig & tcfg,
                       std::uint64_t seed, const std::function<void(const TrainRecord &)> & on_record = {});

// Mean per-token next-token loss over `sequences`.
double lm_loss(const LanguageModel & lm, const std::vector<TokenSequence> & sequences);

}  // namespace wavprompt
