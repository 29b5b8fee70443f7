#include "wavprompt/synth.hpp"

#include "wavprompt/seeding.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <mutex>
#include <numbers>
#include <random>

namespace wavprompt {

namespace {

// FFTW's planner is not reentrant.
std::mutex & fftw_planner_mutex() {
    static std::mutex m;
    return m;
}

float clip_unit(double v) { return static_cast<float>(std::clamp(v, -1.0, 1.0)); }

double ramp_gain(size_t i, size_t n, size_t ramp) {
    if (ramp == 0) {
        return 1.0;
    }
    const size_t edge = std::min(i, n - 1 - i);
    if (edge >= ramp) {
        return 1.0;
    }
    return 0.5 - 0.5 * std::cos(std::numbers::pi * static_cast<double>(edge) / static_cast<double>(ramp));
}

}  // namespace

size_t SynthConfig::segment_length() const {
    return static_cast<size_t>(std::llround(tone_duration * sample_rate));
}

void SynthConfig::validate(size_t vocab_size) const {
    if (sample_rate <= 0) {
        throw ConfigError("sample_rate must be positive");
    }
    if (tone_duration <= 0.0) {
        throw ConfigError("tone_duration must be positive");
    }
    const double seg = tone_duration * sample_rate;
    if (std::abs(seg - std::round(seg)) > 1e-9) {
        throw ConfigError("tone_duration * sample_rate must be an integer number of samples");
    }
    if (frequency_step <= 0.0 || base_frequency <= 0.0) {
        throw ConfigError("base_frequency and frequency_step must be positive");
    }
    const double top = base_frequency + static_cast<double>(vocab_size - 1) * frequency_step;
    if (top >= sample_rate / 2.0) {
        throw ConfigError("Nyquist constraint violated: base_frequency + (vocab_size-1)*frequency_step = " +
                          std::to_string(top) + " Hz must be below sample_rate/2 = " +
                          std::to_string(sample_rate / 2.0) + " Hz");
    }
    if (!(amplitude > 0.0 && amplitude <= 1.0)) {
        throw ConfigError("amplitude must lie in (0, 1]");
    }
    if (noise_std < 0.0) {
        throw ConfigError("noise_std must be >= 0");
    }
    if (ramp_duration < 0.0 || 2.0 * ramp_duration > tone_duration) {
        throw ConfigError("ramp_duration must lie in [0, tone_duration/2]");
    }
    if (clip_duration <= 0.0) {
        throw ConfigError("clip_duration must be positive");
    }
}

nlohmann::json SynthConfig::to_json() const {
    return {{"sample_rate", sample_rate},     {"tone_duration", tone_duration}, {"base_frequency", base_frequency},
            {"frequency_step", frequency_step}, {"amplitude", amplitude},       {"noise_std", noise_std},
            {"ramp_duration", ramp_duration},   {"clip_duration", clip_duration}};
}

SynthConfig SynthConfig::from_json(const nlohmann::json & j) {
    SynthConfig c;
    c.sample_rate = j.value("sample_rate", c.sample_rate);
    c.tone_duration = j.value("tone_duration", c.tone_duration);
    c.base_frequency = j.value("base_frequency", c.base_frequency);
    c.frequency_step = j.value("frequency_step", c.frequency_step);
    c.amplitude = j.value("amplitude", c.amplitude);
    c.noise_std = j.value("noise_std", c.noise_std);
    c.ramp_duration = j.value("ramp_duration", c.ramp_duration);
    c.clip_duration = j.value("clip_duration", c.clip_duration);
    return c;
}

Waveform synthesize_waveform(const TokenSequence & tokens, const Vocabulary & vocab, const SynthConfig & cfg,
                             std::uint64_t seed) {
    cfg.validate(vocab.size());
    for (TokenId t : tokens) {
        if (!vocab.is_content(t)) {
            throw VocabularyError("cannot synthesize token id " + std::to_string(t) + ": not a content id");
        }
    }
    const size_t seg = cfg.segment_length();
    const size_t ramp = static_cast<size_t>(std::llround(cfg.ramp_duration * cfg.sample_rate));
    Waveform w;
    w.sample_rate = cfg.sample_rate;
    w.samples.resize(tokens.size() * seg);
    for (size_t k = 0; k < tokens.size(); ++k) {
        const double f = cfg.token_frequency(tokens[k]);
        const double omega = 2.0 * std::numbers::pi * f / cfg.sample_rate;
        for (size_t i = 0; i < seg; ++i) {
            const double v = cfg.amplitude * ramp_gain(i, seg, ramp) * std::sin(omega * static_cast<double>(i));
            w.samples[k * seg + i] = clip_unit(v);
        }
    }
    if (cfg.noise_std > 0.0) {
        w = add_noise(w, cfg.noise_std, seed);
    }
    return w;
}

Waveform add_noise(const Waveform & waveform, double noise_std, std::uint64_t seed) {
    Waveform out = waveform;
    if (noise_std <= 0.0) {
        return out;
    }
    std::mt19937_64 rng(derive_seed(seed, name_salt("additive-noise")));
    std::normal_distribution<double> dist(0.0, noise_std);
    for (float & s : out.samples) {
        s = clip_unit(static_cast<double>(s) + dist(rng));
    }
    return out;
}

Waveform silence(double duration_s, int sample_rate) {
    Waveform w;
    w.sample_rate = sample_rate;
    w.samples.assign(static_cast<size_t>(std::llround(duration_s * sample_rate)), 0.0f);
    return w;
}

TokenSequence oracle_decode(const Waveform & waveform, const Vocabulary & vocab, const SynthConfig & cfg) {
    cfg.validate(vocab.size());
    const size_t seg = cfg.segment_length();
    if (waveform.size() % seg != 0) {
        throw FramingError("waveform length " + std::to_string(waveform.size()) +
                           " is not a multiple of the token segment length " + std::to_string(seg));
    }
    const size_t n_bins = seg / 2 + 1;
    std::vector<double> in(seg);
    std::vector<std::complex<double>> out(n_bins);
    fftw_plan plan;
    {
        std::lock_guard lock(fftw_planner_mutex());
        plan = fftw_plan_dft_r2c_1d(static_cast<int>(seg), in.data(), reinterpret_cast<fftw_complex *>(out.data()),
                                    FFTW_ESTIMATE);
    }
    TokenSequence tokens;
    for (size_t k = 0; k < waveform.size() / seg; ++k) {
        bool all_zero = true;
        for (size_t i = 0; i < seg; ++i) {
            in[i] = waveform.samples[k * seg + i];
            all_zero = all_zero && in[i] == 0.0;
        }
        if (all_zero) {
            tokens.push_back(Vocabulary::kSilence);
            continue;
        }
        fftw_execute(plan);
        size_t peak = 1;
        for (size_t b = 1; b < n_bins; ++b) {
            if (std::abs(out[b]) > std::abs(out[peak])) {
                peak = b;
            }
        }
        const double f = static_cast<double>(peak) * cfg.sample_rate / static_cast<double>(seg);
        TokenId best = Vocabulary::kNumSpecial;
        for (TokenId t = Vocabulary::kNumSpecial; static_cast<size_t>(t) < vocab.size(); ++t) {
            if (std::abs(cfg.token_frequency(t) - f) < std::abs(cfg.token_frequency(best) - f)) {
                best = t;
            }
        }
        tokens.push_back(best);
    }
    {
        std::lock_guard lock(fftw_planner_mutex());
        fftw_destroy_plan(plan);
    }
    return tokens;
}

std::string to_string(GeneratorKind kind) {
    switch (kind) {
    case GeneratorKind::chirp:
        return "chirp";
    case GeneratorKind::noise_band:
        return "noise_band";
    case GeneratorKind::am_tone:
        return "am_tone";
    case GeneratorKind::click_train:
        return "click_train";
    case GeneratorKind::harmonic:
        return "harmonic";
    }
    return "unknown";
}

GeneratorKind generator_kind_from_string(const std::string & s) {
    for (GeneratorKind k : {GeneratorKind::chirp, GeneratorKind::noise_band, GeneratorKind::am_tone,
                            GeneratorKind::click_train, GeneratorKind::harmonic}) {
        if (to_string(k) == s) {
            return k;
        }
    }
    throw ConfigError("unknown sound generator kind '" + s + "'");
}

nlohmann::json SoundClass::to_json() const {
    return {{"class_name", class_name}, {"target_word", target_word}, {"kind", to_string(kind)},
            {"f0", f0},                 {"f1", f1},                   {"rate", rate},
            {"harmonics", harmonics}};
}

SoundClass SoundClass::from_json(const nlohmann::json & j) {
    SoundClass c;
    c.class_name = j.at("class_name").get<std::string>();
    c.target_word = j.at("target_word").get<std::string>();
    c.kind = generator_kind_from_string(j.at("kind").get<std::string>());
    c.f0 = j.value("f0", 0.0);
    c.f1 = j.value("f1", 0.0);
    c.rate = j.value("rate", 0.0);
    c.harmonics = j.value("harmonics", 1);
    return c;
}

std::vector<SoundClass> standard_sound_classes() {
    using K = GeneratorKind;
    return {
        {"dog", "barks", K::am_tone, 600.0, 0.0, 3.0, 1},
        {"cat", "meows", K::chirp, 400.0, 1200.0, 2.0, 1},
        {"bird", "chirps", K::chirp, 2500.0, 4500.0, 5.0, 1},
        {"sheep", "bleats", K::am_tone, 1200.0, 0.0, 12.0, 1},
        {"cow", "moos", K::harmonic, 150.0, 0.0, 0.0, 6},
        {"pig", "snorts", K::noise_band, 700.0, 400.0, 0.0, 1},
        {"rooster", "crows", K::chirp, 3000.0, 1500.0, 1.0, 1},
        {"hen", "clucks", K::click_train, 0.0, 0.0, 8.0, 1},
        {"frog", "croaks", K::click_train, 0.0, 0.0, 25.0, 1},
    };
}

Waveform synthesize_sound(const SoundClass & cls, const SynthConfig & cfg, std::uint64_t seed) {
    if (cfg.sample_rate <= 0 || cfg.clip_duration <= 0.0) {
        throw ConfigError("sound synthesis needs a positive sample_rate and clip_duration");
    }
    std::mt19937_64 rng(derive_seed(seed, name_salt(cls.class_name)));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double jitter = 1.0 + 0.06 * (unit(rng) - 0.5);
    const double phase = 2.0 * std::numbers::pi * unit(rng);
    const double offset = unit(rng);  // fraction of one period
    const double sr = cfg.sample_rate;
    const size_t n = static_cast<size_t>(std::llround(cfg.clip_duration * sr));
    const double a = cfg.amplitude;
    constexpr double two_pi = 2.0 * std::numbers::pi;

    Waveform w;
    w.sample_rate = cfg.sample_rate;
    w.samples.assign(n, 0.0f);
    switch (cls.kind) {
    case GeneratorKind::chirp: {
        // Repeated linear sweeps from f0 to f1, one per 1/rate seconds.
        const double period = 1.0 / cls.rate;
        const double f0 = cls.f0 * jitter;
        const double f1 = cls.f1 * jitter;
        for (size_t i = 0; i < n; ++i) {
            const double t = static_cast<double>(i) / sr + offset * period;
            const double tau = std::fmod(t, period);
            const double inst_phase = two_pi * (f0 * tau + 0.5 * (f1 - f0) / period * tau * tau) + phase;
            w.samples[i] = clip_unit(a * std::sin(inst_phase));
        }
        break;
    }
    case GeneratorKind::noise_band: {
        constexpr int partials = 40;
        std::vector<double> freqs(partials);
        std::vector<double> phases(partials);
        for (int p = 0; p < partials; ++p) {
            freqs[p] = (cls.f0 + (unit(rng) - 0.5) * cls.f1) * jitter;
            phases[p] = two_pi * unit(rng);
        }
        const double norm = a / std::sqrt(static_cast<double>(partials) / 2.0) / 2.0;
        for (size_t i = 0; i < n; ++i) {
            const double t = static_cast<double>(i) / sr;
            double v = 0.0;
            for (int p = 0; p < partials; ++p) {
                v += std::sin(two_pi * freqs[p] * t + phases[p]);
            }
            w.samples[i] = clip_unit(norm * v);
        }
        break;
    }
    case GeneratorKind::am_tone: {
        const double fc = cls.f0 * jitter;
        const double fm = cls.rate * jitter;
        for (size_t i = 0; i < n; ++i) {
            const double t = static_cast<double>(i) / sr;
            const double env = 0.5 * (1.0 + std::sin(two_pi * fm * (t + offset / fm)));
            w.samples[i] = clip_unit(a * env * std::sin(two_pi * fc * t + phase));
        }
        break;
    }
    case GeneratorKind::click_train: {
        const double period = sr / (cls.rate * jitter);
        for (double pos = offset * period; pos < static_cast<double>(n); pos += period) {
            w.samples[static_cast<size_t>(pos)] = static_cast<float>(a);
        }
        break;
    }
    case GeneratorKind::harmonic: {
        const double f = cls.f0 * jitter;
        const double norm = a / static_cast<double>(cls.harmonics) * 1.5;
        for (size_t i = 0; i < n; ++i) {
            const double t = static_cast<double>(i) / sr;
            double v = 0.0;
            for (int h = 1; h <= cls.harmonics; ++h) {
                v += std::sin(two_pi * f * h * t + phase * h) / std::sqrt(static_cast<double>(h));
            }
            w.samples[i] = clip_unit(norm * v);
        }
        break;
    }
    }
    if (cfg.noise_std > 0.0) {
        w = add_noise(w, cfg.noise_std, seed);
    }
    return w;
}

Waveform synthesize_sound(const std::string & class_name, const std::vector<SoundClass> & classes,
                          const SynthConfig & cfg, std::uint64_t seed) {
    for (const SoundClass & c : classes) {
        if (c.class_name == class_name) {
            return synthesize_sound(c, cfg, seed);
        }
    }
    throw ConfigError("unknown sound class '" + class_name + "'");
}

}  // namespace wavprompt
