#pragma once

// Few-shot prompting over a finite answer set, with contextual calibration.
//
// A prompt is, per demonstration: item ++ prompt ++ answer ++ <eoa>, then
// query item ++ question prompt. An item is the encoder output for its audio
// (mode audio) or the embedded transcript (mode text).

#include "wavprompt/acoustic.hpp"
#include "wavprompt/embedding.hpp"
#include "wavprompt/langmodel.hpp"
#include "wavprompt/vocab.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace wavprompt {

enum class PromptMode { audio, text };

std::string to_string(PromptMode m);
PromptMode prompt_mode_from_string(const std::string & s);

struct EpisodeItem {
    std::string id;
    const Waveform * audio = nullptr;  // used in audio mode
    TokenSequence transcript;          // used in text mode
};

struct Demonstration {
    EpisodeItem item;
    std::string prompt_text;
    std::string answer_text;
};

struct Episode {
    std::string id;
    std::vector<Demonstration> demonstrations;
    EpisodeItem query;
    std::string question_prompt;
    std::vector<std::string> answer_set;
    std::string gold;
    std::uint64_t seed = 0;

    static constexpr size_t kMaxDemonstrations = 10;

    // Throws ConfigError on more than 10 demonstrations or labels outside the answer set.
    void validate() const;
    nlohmann::json to_json() const;
};

struct AnswerDistribution {
    std::vector<std::string> labels;
    std::vector<double> logprobs;  // raw restricted scores
    std::vector<double> probs;     // softmax over the restricted set

    static AnswerDistribution from_scores(std::vector<std::string> labels, std::vector<double> scores);
    nlohmann::json to_json() const;
};

struct ArgMax {
    int index = 0;
    bool tie = false;
};

// First maximal entry in answer order; `tie` marks an exact tie.
ArgMax argmax(const std::vector<double> & values);

struct CalibrationResult {
    AnswerDistribution distribution;
    bool skipped = false;  // some p_cf_i <= eps; distribution is then a copy of p
};

inline constexpr double kCalibrationEpsilon = 1e-8;

// q_i = (p_i / p_cf_i) / sum_j (p_j / p_cf_j).
CalibrationResult calibrate(const AnswerDistribution & p, const AnswerDistribution & p_cf,
                            double eps = kCalibrationEpsilon);

struct ScoringOptions {
    bool length_normalize = false;  // divide candidate log-probability by token count
};

// Embeds one item for the given mode.
EmbeddingSequence embed_item(const EpisodeItem & item, PromptMode mode, const AudioEncoder * encoder,
                             const LanguageModel & lm);

// All demonstrations, in order.
EmbeddingSequence assemble_demonstrations(const Episode & ep, const Vocabulary & vocab,
                                          const AudioEncoder * encoder, const LanguageModel & lm, PromptMode mode);

// Query item ++ question prompt.
EmbeddingSequence assemble_query(const EmbeddingSequence & item, const std::string & question_prompt,
                                 const Vocabulary & vocab, const LanguageModel & lm);

// Full prompt; throws ContextOverflowError when it exceeds the context.
EmbeddingSequence assemble_prompt(const Episode & ep, const Vocabulary & vocab, const AudioEncoder * encoder,
                                  const LanguageModel & lm, PromptMode mode);

AnswerDistribution score_answers(const EmbeddingSequence & prompt, const std::vector<std::string> & answer_set,
                                 const Vocabulary & vocab, const LanguageModel & lm, const ScoringOptions & opts = {});

// The content-free query: silence for audio mode, a single <sil> for text mode.
struct ContentFreeInput {
    Waveform audio;
    TokenSequence text = {Vocabulary::kSilence};
};

// Silence of the given duration.
ContentFreeInput make_content_free(double duration_s, int sample_rate);

AnswerDistribution content_free_distribution(const Episode & ep, const ContentFreeInput & cf,
                                             const Vocabulary & vocab, const AudioEncoder * encoder,
                                             const LanguageModel & lm, PromptMode mode,
                                             const ScoringOptions & opts = {});

struct Prediction {
    AnswerDistribution raw;
    AnswerDistribution content_free;
    AnswerDistribution calibrated;
    ArgMax raw_choice;
    ArgMax calibrated_choice;
    bool calibration_skipped = false;

    const ArgMax & choice(bool use_calibration) const { return use_calibration ? calibrated_choice : raw_choice; }
    const std::string & label(bool use_calibration) const { return raw.labels[choice(use_calibration).index]; }
};

Prediction make_prediction(AnswerDistribution raw, AnswerDistribution content_free);

// End-to-end: assemble, score, calibrate. Both calibrated and raw choices
// are returned; `use_calibration` only selects Prediction::label.
Prediction predict(const Episode & ep, const ContentFreeInput & cf, const Vocabulary & vocab,
                   const AudioEncoder * encoder, const LanguageModel & lm, PromptMode mode,
                   const ScoringOptions & opts = {});

// Scores many queries against one shared demonstration prefix by caching the
// language-model state after the demonstrations.
class EpisodeScorer {
  public:
    EpisodeScorer(const LanguageModel & lm, const Vocabulary & vocab, std::vector<std::string> answer_set,
                  std::string question_prompt, ScoringOptions opts = {});

    void set_demonstrations(const EmbeddingSequence & demonstrations);

    // `item` is the embedded query (or content-free input).
    AnswerDistribution score(const EmbeddingSequence & item) const;

    size_t demonstration_length() const { return static_cast<size_t>(state_.length); }

  private:
    const LanguageModel & lm_;
    std::vector<std::string> answers_;
    std::vector<TokenSequence> answer_tokens_;
    TokenSequence question_;
    ScoringOptions opts_;
    LanguageModel::State state_;
    size_t longest_answer_ = 0;
};

}  // namespace wavprompt
