#include "wavprompt/audio_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

namespace wavprompt {

namespace {

static_assert(std::endian::native == std::endian::little, "audio IO assumes a little-endian host");

template <typename T>
void put(std::ofstream & out, T v) {
    out.write(reinterpret_cast<const char *>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream & in) {
    T v{};
    in.read(reinterpret_cast<char *>(&v), sizeof(T));
    if (!in) {
        throw IntegrityError("truncated audio header");
    }
    return v;
}

}  // namespace

std::string to_string(AudioFormat f) { return f == AudioFormat::pcm16 ? "pcm16" : "f32"; }

AudioFormat audio_format_from_string(const std::string & s) {
    if (s == "pcm16") {
        return AudioFormat::pcm16;
    }
    if (s == "f32") {
        return AudioFormat::f32;
    }
    throw ConfigError("unknown audio format '" + s + "' (expected pcm16 or f32)");
}

std::string audio_extension(AudioFormat f) { return f == AudioFormat::pcm16 ? ".wav" : ".f32"; }

Waveform quantize(const Waveform & w, AudioFormat format) {
    Waveform out = w;
    if (format == AudioFormat::pcm16) {
        for (float & s : out.samples) {
            s = static_cast<float>(static_cast<std::int16_t>(std::lround(std::clamp(s, -1.0f, 1.0f) * 32767.0f))) /
                32767.0f;
        }
    }
    return out;
}

void write_audio(const std::filesystem::path & path, const Waveform & w, AudioFormat format) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw Error("cannot open audio file for writing: " + path.string());
    }
    if (format == AudioFormat::f32) {
        out.write(reinterpret_cast<const char *>(w.samples.data()),
                  static_cast<std::streamsize>(w.samples.size() * sizeof(float)));
        return;
    }
    const auto data_bytes = static_cast<std::uint32_t>(w.samples.size() * 2);
    out.write("RIFF", 4);
    put<std::uint32_t>(out, 36 + data_bytes);
    out.write("WAVE", 4);
    out.write("fmt ", 4);
    put<std::uint32_t>(out, 16);
    put<std::uint16_t>(out, 1);  // PCM
    put<std::uint16_t>(out, 1);  // mono
    put<std::uint32_t>(out, static_cast<std::uint32_t>(w.sample_rate));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(w.sample_rate) * 2);
    put<std::uint16_t>(out, 2);
    put<std::uint16_t>(out, 16);
    out.write("data", 4);
    put<std::uint32_t>(out, data_bytes);
    std::vector<std::int16_t> pcm(w.samples.size());
    std::transform(w.samples.begin(), w.samples.end(), pcm.begin(), [](float s) {
        return static_cast<std::int16_t>(std::lround(std::clamp(s, -1.0f, 1.0f) * 32767.0f));
    });
    out.write(reinterpret_cast<const char *>(pcm.data()), static_cast<std::streamsize>(pcm.size() * 2));
}

Waveform read_audio(const std::filesystem::path & path, AudioFormat format, int sample_rate) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IntegrityError("cannot open audio file: " + path.string());
    }
    Waveform w;
    w.sample_rate = sample_rate;
    if (format == AudioFormat::f32) {
        const auto bytes = std::filesystem::file_size(path);
        if (bytes % sizeof(float) != 0) {
            throw IntegrityError("raw float audio has a partial sample: " + path.string());
        }
        w.samples.resize(bytes / sizeof(float));
        in.read(reinterpret_cast<char *>(w.samples.data()), static_cast<std::streamsize>(bytes));
        return w;
    }
    char tag[4];
    in.read(tag, 4);
    if (!in || std::memcmp(tag, "RIFF", 4) != 0) {
        throw IntegrityError("not a RIFF file: " + path.string());
    }
    get<std::uint32_t>(in);
    in.read(tag, 4);
    if (std::memcmp(tag, "WAVE", 4) != 0) {
        throw IntegrityError("not a WAVE file: " + path.string());
    }
    bool have_fmt = false;
    while (in.read(tag, 4)) {
        const auto size = get<std::uint32_t>(in);
        if (std::memcmp(tag, "fmt ", 4) == 0) {
            const auto fmt = get<std::uint16_t>(in);
            const auto channels = get<std::uint16_t>(in);
            w.sample_rate = static_cast<int>(get<std::uint32_t>(in));
            get<std::uint32_t>(in);
            get<std::uint16_t>(in);
            const auto bits = get<std::uint16_t>(in);
            if (fmt != 1 || channels != 1 || bits != 16) {
                throw IntegrityError("only mono 16-bit PCM WAVE is supported: " + path.string());
            }
            in.seekg(size - 16, std::ios::cur);
            have_fmt = true;
        } else if (std::memcmp(tag, "data", 4) == 0) {
            if (!have_fmt) {
                throw IntegrityError("WAVE data chunk before fmt chunk: " + path.string());
            }
            std::vector<std::int16_t> pcm(size / 2);
            in.read(reinterpret_cast<char *>(pcm.data()), static_cast<std::streamsize>(pcm.size() * 2));
            if (!in) {
                throw IntegrityError("truncated WAVE data: " + path.string());
            }
            w.samples.resize(pcm.size());
            std::transform(pcm.begin(), pcm.end(), w.samples.begin(),
                           [](std::int16_t s) { return static_cast<float>(s) / 32767.0f; });
            return w;
        } else {
            in.seekg(size, std::ios::cur);
        }
    }
    throw IntegrityError("WAVE file has no data chunk: " + path.string());
}

}  // namespace wavprompt
