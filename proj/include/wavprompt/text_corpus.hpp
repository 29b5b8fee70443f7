#pragma once

// Synthetic text on which the language model is trained before it is frozen.
//
// Four kinds of sequences are drawn:
//  * transcription: 1..max_asr_blocks of <utterance> asr_prompt <transcript> <eoa>
//  * sound naming:  <sil... class sil...> sound_prompt <class> <eoa>
//  * facts:         runs of "<word> <associate> <eoa>" from `associations`
//  * episodes:      0..max_shots demonstrations and one query, each
//                   <item> prompt <label> <eoa>, for a task made up on the
//                   spot: random keywords, a random prompt, and labels that
//                   are the keywords themselves, their associates, or
//                   random words.
// The corpus' own tasks are never written out; the model meets them only as
// members of the episode family.
// Item spans carry random runs of <sil> so that the model learns to read
// content that arrives at a lower density than one symbol per position.

#include "wavprompt/corpus.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace wavprompt {

struct TextCorpusConfig {
    int sequences = 60000;
    int max_shots = 10;
    int max_asr_blocks = 8;
    double max_silence_per_token = 2.0;  // per-sequence density drawn from U[0, max]
    int max_sound_silence = 24;          // total <sil> around a sound class name
    double asr_weight = 0.45;
    double naming_weight = 0.05;
    double fact_weight = 0.1;
    double task_weight = 0.4;
    double identity_fraction = 0.3;     // episodes labelled by the keyword itself
    double association_fraction = 0.3;  // episodes labelled by the keyword's associate
    double sound_task_fraction = 0.3;   // episodes over sound class names instead of utterances
    int max_prompt_tokens = 6;
    std::vector<std::pair<std::string, std::string>> associations = {
        {"man", "male"},     {"woman", "female"}, {"black", "dark"},   {"white", "light"},   {"dog", "barks"},
        {"cat", "meows"},    {"bird", "chirps"},  {"sheep", "bleats"}, {"cow", "moos"},      {"pig", "snorts"},
        {"rooster", "crows"}, {"hen", "clucks"},  {"frog", "croaks"},  {"big", "small"},     {"red", "green"},
        {"park", "street"},  {"water", "running"}};
    std::string asr_prompt = "what did the speaker say ?";
    std::string sound_prompt = "what sound is this ?";

    nlohmann::json to_json() const;
    static TextCorpusConfig from_json(const nlohmann::json & j);
};

TokenSequence sample_text_sequence(const CorpusSpec & spec, const TextCorpusConfig & cfg, std::mt19937_64 & rng);

std::vector<TokenSequence> generate_text_corpus(const CorpusSpec & spec, const TextCorpusConfig & cfg,
                                                std::uint64_t seed);

}  // namespace wavprompt
