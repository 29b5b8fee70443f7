#pragma once

#include "wavprompt/types.hpp"

#include <filesystem>
#include <string>

namespace wavprompt {

enum class AudioFormat { pcm16, f32 };

std::string to_string(AudioFormat f);
AudioFormat audio_format_from_string(const std::string & s);

// pcm16 writes a RIFF/WAVE file; f32 writes raw little-endian 32-bit floats.
void write_audio(const std::filesystem::path & path, const Waveform & w, AudioFormat format);
Waveform read_audio(const std::filesystem::path & path, AudioFormat format, int sample_rate);

std::string audio_extension(AudioFormat f);

// Applies the storage quantization of `format` (identity for f32).
Waveform quantize(const Waveform & w, AudioFormat format);

}  // namespace wavprompt
