#pragma once

// Tone-coded "speech" and parametric non-speech sound classes.

#include "wavprompt/types.hpp"
#include "wavprompt/vocab.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace wavprompt {

struct SynthConfig {
    int sample_rate = 16000;
    double tone_duration = 0.25;    // seconds per token
    double base_frequency = 300.0;  // Hz for token id 0
    double frequency_step = 130.0;  // Hz per token id
    double amplitude = 0.5;
    double noise_std = 0.0;
    double ramp_duration = 0.01;  // raised-cosine fade at both ends of each tone
    double clip_duration = 2.0;   // seconds per non-speech clip

    // Samples per token segment.
    size_t segment_length() const;
    double token_frequency(TokenId id) const { return base_frequency + frequency_step * id; }

    // Throws ConfigError naming the violated constraint.
    void validate(size_t vocab_size) const;

    nlohmann::json to_json() const;
    static SynthConfig from_json(const nlohmann::json & j);
};

// Concatenated fixed-length sinusoids, one per token, plus optional Gaussian
// noise drawn from `seed`. Samples are clipped to [-1, 1].
Waveform synthesize_waveform(const TokenSequence & tokens, const Vocabulary & vocab, const SynthConfig & cfg,
                             std::uint64_t seed = 0);

// Nearest-content-token decoding of each segment's dominant spectral peak.
// All-zero segments decode to Vocabulary::kSilence.
TokenSequence oracle_decode(const Waveform & waveform, const Vocabulary & vocab, const SynthConfig & cfg);

// Adds N(0, std^2) noise (clipped to [-1, 1]); identity when std == 0.
Waveform add_noise(const Waveform & waveform, double noise_std, std::uint64_t seed);

Waveform silence(double duration_s, int sample_rate);

enum class GeneratorKind { chirp, noise_band, am_tone, click_train, harmonic };

std::string to_string(GeneratorKind kind);
GeneratorKind generator_kind_from_string(const std::string & s);

struct SoundClass {
    std::string class_name;
    std::string target_word;
    GeneratorKind kind = GeneratorKind::chirp;
    double f0 = 0.0;      // start / carrier / center / fundamental frequency (Hz)
    double f1 = 0.0;      // chirp end frequency or noise bandwidth (Hz)
    double rate = 0.0;    // repetition, modulation or click rate (Hz)
    int harmonics = 1;

    nlohmann::json to_json() const;
    static SoundClass from_json(const nlohmann::json & j);
};

// The nine built-in animal-style classes, each mapped to a distinct verb.
std::vector<SoundClass> standard_sound_classes();

// Draws one clip of cfg.clip_duration seconds from the class generator.
Waveform synthesize_sound(const SoundClass & cls, const SynthConfig & cfg, std::uint64_t seed);

// Looks up a class by name among `classes` and synthesizes it; unknown names throw ConfigError.
Waveform synthesize_sound(const std::string & class_name, const std::vector<SoundClass> & classes,
                          const SynthConfig & cfg, std::uint64_t seed);

}  // namespace wavprompt
