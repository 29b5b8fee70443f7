#pragma once

// Trains the audio encoder through the frozen language model: the LM sees
// encode_audio(x) followed by a fixed text prompt and must continue with the
// transcript (or, in multitask mode, the sound class name) and <eoa>.

#include "wavprompt/acoustic.hpp"
#include "wavprompt/corpus.hpp"
#include "wavprompt/langmodel.hpp"
#include "wavprompt/train_log.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace wavprompt {

struct PretrainConfig {
    std::string resource = "100pct";
    int batch_size = 8;
    long steps = 5000;
    double learning_rate = 3e-4;
    double warmup_fraction = 0.05;
    double weight_decay = 0.0;
    double clip_norm = 1.0;
    std::string asr_prompt = "what did the speaker say ?";
    std::string sound_prompt = "what sound is this ?";
    bool multitask = false;  // alternate ASR and sound batches 1:1
    int context_blocks = 3;  // each example is preceded by U{0..context_blocks} solved examples of the same kind
    std::uint64_t seed = 0;
    int heldout_utterances = 64;  // test-split utterances used for the held-out loss
    long log_every = 100;
    long checkpoint_every = 1000;  // 0 disables periodic checkpoints

    void validate(const Vocabulary & vocab) const;
    nlohmann::json to_json() const;
    static PretrainConfig from_json(const nlohmann::json & j);
};

struct TrainingPrefix {
    EmbeddingSequence prefix;  // audio then prompt
    TokenSequence target;      // answer then <eoa>
};

// Throws ContextOverflowError when prefix and target do not fit the LM context.
TrainingPrefix build_training_prefix(const EmbeddingSequence & audio, const TokenSequence & prompt,
                                     const TokenSequence & answer, const LanguageModel & lm);

TrainingPrefix build_training_prefix(const Utterance & utt, const TokenSequence & prompt,
                                     const TokenSequence & answer, const AudioEncoder & encoder,
                                     const LanguageModel & lm);

struct PretrainExample {
    const Waveform * audio = nullptr;
    TokenSequence prompt;
    TokenSequence answer;  // without <eoa>
};

// -(1/T) * sum_i sequence_logprob(prefix_i, target_i), T = total target tokens.
double asr_loss(const std::vector<PretrainExample> & batch, const AudioEncoder & encoder, const LanguageModel & lm);

// Taped version of asr_loss. Accumulates encoder gradients scaled by
// `loss_scale` and returns (summed nats, target tokens).
std::pair<double, size_t> accumulate_asr_gradients(const PretrainExample & ex, const AudioEncoder & encoder,
                                                   const LanguageModel & lm, float loss_scale);

// Same over a chain of examples laid out as one sequence,
// audio_1 prompt_1 answer_1 <eoa> ... audio_k prompt_k answer_k <eoa>,
// with every answer and <eoa> in the loss.
std::pair<double, size_t> accumulate_chain_gradients(const std::vector<const PretrainExample *> & chain,
                                                     const AudioEncoder & encoder, const LanguageModel & lm,
                                                     float loss_scale);

// Positions a chain occupies in the LM context.
size_t chain_length(const std::vector<const PretrainExample *> & chain, const EncoderConfig & enc);

struct PretrainResult {
    AudioEncoder encoder;
    std::vector<TrainRecord> records;
    size_t skipped_overflow = 0;
    std::string lm_hash;
};

struct PretrainHooks {
    std::function<void(const TrainRecord &)> on_record;
    std::optional<std::filesystem::path> checkpoint_path;  // rewritten periodically and at the end
    nlohmann::json checkpoint_meta;
};

// Only encoder parameters change. The LM hash is checked before and after;
// drift raises ContractViolation.
PretrainResult pretrain_encoder(const Corpus & corpus, const PretrainConfig & cfg, const EncoderConfig & enc_cfg,
                                const LanguageModel & lm, const PretrainHooks & hooks = {});

// Greedy decoding after audio ++ prompt, until <eoa> or max_len tokens.
TokenSequence transcribe(const Waveform & waveform, const AudioEncoder & encoder, const LanguageModel & lm,
                         const TokenSequence & prompt, int max_len = 16);

size_t edit_distance(const TokenSequence & ref, const TokenSequence & hyp);

struct TranscriptionScore {
    size_t utterances = 0;
    size_t reference_tokens = 0;
    size_t errors = 0;  // summed edit distance
    size_t exact = 0;

    double wer() const { return reference_tokens ? static_cast<double>(errors) / reference_tokens : 0.0; }
    double token_accuracy() const { return std::max(0.0, 1.0 - wer()); }
    double exact_match() const { return utterances ? static_cast<double>(exact) / utterances : 0.0; }
    void add(const TokenSequence & ref, const TokenSequence & hyp);
};

}  // namespace wavprompt
