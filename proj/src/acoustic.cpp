#include "wavprompt/acoustic.hpp"

#include "wavprompt/checkpoint.hpp"
#include "wavprompt/seeding.hpp"

#include <cmath>
#include <random>
#include <utility>

namespace wavprompt {

using ad::Index;
using ad::Matrix;
using nlohmann::json;

int EncoderConfig::total_stride() const {
    int s = 1;
    for (const auto & c : conv) {
        s *= c.stride;
    }
    return s;
}

size_t EncoderConfig::frame_count(size_t samples) const {
    size_t n = samples;
    for (const auto & c : conv) {
        n /= static_cast<size_t>(c.stride);
    }
    return n;
}

size_t EncoderConfig::output_length(size_t samples) const {
    return pooled_length(frame_count(samples), downsample_rate);
}

void EncoderConfig::validate() const {
    if (sample_rate <= 0) {
        throw ConfigError("encoder.sample_rate must be positive");
    }
    if (conv.empty()) {
        throw ConfigError("encoder.conv must list at least one layer");
    }
    for (const auto & c : conv) {
        if (c.channels <= 0 || c.stride <= 0 || c.kernel < c.stride) {
            throw ConfigError("encoder.conv layers need channels > 0 and kernel >= stride > 0");
        }
    }
    if (dim <= 0 || layers < 0 || heads <= 0 || ff_dim <= 0 || output_dim <= 0) {
        throw ConfigError("encoder dimensions must be positive");
    }
    if (dim % heads != 0) {
        throw ConfigError("encoder.dim (" + std::to_string(dim) + ") must be divisible by encoder.heads (" +
                          std::to_string(heads) + ")");
    }
    if (downsample_rate < 1) {
        throw ConfigError("encoder.downsample_rate must be an integer >= 1, got " + std::to_string(downsample_rate));
    }
    if (!(output_norm >= 0.0)) {
        throw ConfigError("encoder.output_norm must be >= 0");
    }
}

json EncoderConfig::to_json() const {
    json conv_j = json::array();
    for (const auto & c : conv) {
        conv_j.push_back({{"channels", c.channels}, {"kernel", c.kernel}, {"stride", c.stride}});
    }
    return {{"sample_rate", sample_rate}, {"conv", conv_j},       {"dim", dim},
            {"layers", layers},           {"heads", heads},       {"ff_dim", ff_dim},
            {"output_dim", output_dim},   {"downsample_rate", downsample_rate},
            {"output_norm", output_norm}, {"match_lm_norm", match_lm_norm}};
}

EncoderConfig EncoderConfig::from_json(const json & j) {
    EncoderConfig c;
    c.sample_rate = j.value("sample_rate", c.sample_rate);
    if (j.contains("conv")) {
        c.conv.clear();
        for (const auto & l : j.at("conv")) {
            c.conv.push_back({l.at("channels").get<int>(), l.at("kernel").get<int>(), l.at("stride").get<int>()});
        }
    }
    c.dim = j.value("dim", c.dim);
    c.layers = j.value("layers", c.layers);
    c.heads = j.value("heads", c.heads);
    c.ff_dim = j.value("ff_dim", c.ff_dim);
    c.output_dim = j.value("output_dim", c.output_dim);
    c.downsample_rate = j.value("downsample_rate", c.downsample_rate);
    c.output_norm = j.value("output_norm", c.output_norm);
    c.match_lm_norm = j.value("match_lm_norm", c.match_lm_norm);
    return c;
}

namespace {

template <typename T>
Matrix<T> sinusoid_positions(Index n, Index dim) {
    Matrix<T> p(n, dim);
    for (Index t = 0; t < n; ++t) {
        for (Index i = 0; i < dim; i += 2) {
            const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(dim));
            p(t, i) = static_cast<T>(std::sin(static_cast<double>(t) * freq));
            if (i + 1 < dim) {
                p(t, i + 1) = static_cast<T>(std::cos(static_cast<double>(t) * freq));
            }
        }
    }
    // Keep the positional signal small next to unit-variance frame features.
    return p * T(0.1);
}

}  // namespace

template <typename T>
AudioEncoderT<T>::AudioEncoderT(const EncoderConfig & cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(derive_seed(seed, name_salt("encoder-init")));
    int in = 1;
    for (size_t i = 0; i < cfg_.conv.size(); ++i) {
        const auto & c = cfg_.conv[i];
        const std::string name = "enc.conv" + std::to_string(i);
        auto w = nn::make_param<T>(name + ".weight", static_cast<Index>(c.kernel) * in, c.channels);
        nn::fill_normal(w.value, std::sqrt(2.0 / (static_cast<double>(c.kernel) * in)), rng);
        conv_weight_.push_back(std::move(w));
        conv_bias_.push_back(nn::make_param<T>(name + ".bias", 1, c.channels));
        conv_norm_.emplace_back(name + ".norm", c.channels);
        in = c.channels;
    }
    frame_proj_ = nn::Linear<T>("enc.frame_proj", in, cfg_.dim);
    frame_proj_.init(rng, 1.0 / std::sqrt(static_cast<double>(in)));
    const double std = 0.02;
    const double residual_std = std / std::sqrt(2.0 * std::max(1, cfg_.layers));
    for (int l = 0; l < cfg_.layers; ++l) {
        blocks_.emplace_back("enc.block" + std::to_string(l), cfg_.dim, cfg_.ff_dim, cfg_.heads);
        blocks_.back().init(rng, std, residual_std);
    }
    ln_f_ = nn::LayerNorm<T>("enc.ln_f", cfg_.dim);
    out_proj_ = nn::Linear<T>("enc.downsample_proj", cfg_.dim, cfg_.output_dim);
    out_proj_.init(rng, 1.0 / std::sqrt(static_cast<double>(cfg_.dim)));
}

template <typename T>
template <typename F>
void AudioEncoderT<T>::for_each_param(F && f) const {
    for (size_t i = 0; i < conv_weight_.size(); ++i) {
        f(conv_weight_[i]);
        f(conv_bias_[i]);
        conv_norm_[i].for_each_param(f);
    }
    frame_proj_.for_each_param(f);
    for (const auto & b : blocks_) {
        b.for_each_param(f);
    }
    ln_f_.for_each_param(f);
    out_proj_.for_each_param(f);
}

template <typename T>
nn::ParamList<T> AudioEncoderT<T>::params() {
    nn::ParamList<T> out;
    std::as_const(*this).for_each_param(
        [&](const ad::Parameter<T> & p) { out.push_back(const_cast<ad::Parameter<T> *>(&p)); });
    return out;
}

template <typename T>
nn::ConstParamList<T> AudioEncoderT<T>::params() const {
    nn::ConstParamList<T> out;
    for_each_param([&](const ad::Parameter<T> & p) { out.push_back(&p); });
    return out;
}

template <typename T>
size_t AudioEncoderT<T>::parameter_count() const {
    size_t n = 0;
    for_each_param([&](const ad::Parameter<T> & p) { n += static_cast<size_t>(p.value.size()); });
    return n;
}

template <typename T>
void AudioEncoderT<T>::check_length(size_t n) const {
    if (n < cfg_.min_samples()) {
        throw InputLengthError("waveform of " + std::to_string(n) + " samples is shorter than the encoder minimum of " +
                               std::to_string(cfg_.min_samples()) + " samples");
    }
}

template <typename T>
ad::Var AudioEncoderT<T>::frames(ad::Tape<T> & tape, std::span<const T> samples, bool track) const {
    check_length(samples.size());
    Matrix<T> input(static_cast<Index>(samples.size()), 1);
    std::copy(samples.begin(), samples.end(), input.data());
    ad::Var x = tape.constant(std::move(input));
    for (size_t i = 0; i < cfg_.conv.size(); ++i) {
        const auto & c = cfg_.conv[i];
        const Index pad = c.kernel - c.stride;
        x = tape.conv1d(x, tape.parameter(conv_weight_[i], track), tape.parameter(conv_bias_[i], track), c.kernel,
                        c.stride, pad / 2, pad - pad / 2);
        x = tape.gelu(conv_norm_[i](tape, x, track));
    }
    x = frame_proj_(tape, x, track);
    const Index n = tape.value(x).rows();
    x = tape.add(x, tape.constant(sinusoid_positions<T>(n, cfg_.dim)));
    for (const auto & b : blocks_) {
        x = b.forward(tape, x, false, track);
    }
    return ln_f_(tape, x, track);
}

template <typename T>
ad::Var AudioEncoderT<T>::downsample(ad::Tape<T> & tape, ad::Var frames, int r, bool track) const {
    if (r < 1) {
        throw ConfigError("downsample rate must be an integer >= 1, got " + std::to_string(r));
    }
    if (tape.value(frames).rows() == 0) {
        throw std::invalid_argument("downsample: no frames");
    }
    ad::Var pooled = r == 1 ? frames : tape.mean_pool_rows(frames, r);
    ad::Var y = out_proj_(tape, pooled, track);
    if (cfg_.output_norm <= 0.0) {
        return y;
    }
    // Unit-variance rows have L2 norm sqrt(d).
    const Index d = cfg_.output_dim;
    const T g = static_cast<T>(cfg_.output_norm / std::sqrt(static_cast<double>(d)));
    return tape.layer_norm(y, tape.constant(Matrix<T>::Constant(1, d, g)), tape.constant(Matrix<T>::Zero(1, d)));
}

template <typename T>
ad::Var AudioEncoderT<T>::encode(ad::Tape<T> & tape, std::span<const T> samples, bool track) const {
    return downsample(tape, frames(tape, samples, track), cfg_.downsample_rate, track);
}

template <typename T>
Matrix<T> AudioEncoderT<T>::encode_frames(std::span<const T> samples) const {
    ad::Tape<T> tape(false);
    return tape.value(frames(tape, samples, false));
}

template <typename T>
Matrix<T> AudioEncoderT<T>::downsample(const Matrix<T> & frames, int r) const {
    ad::Tape<T> tape(false);
    return tape.value(downsample(tape, tape.constant_ref(frames), r, false));
}

template <typename T>
Matrix<T> AudioEncoderT<T>::encode(std::span<const T> samples) const {
    ad::Tape<T> tape(false);
    return tape.value(encode(tape, samples, false));
}

template class AudioEncoderT<float>;
template class AudioEncoderT<double>;

EmbeddingSequence AudioEncoder::encode_audio(const Waveform & w) const {
    if (w.sample_rate != config().sample_rate) {
        throw ConfigError("waveform sample rate " + std::to_string(w.sample_rate) + " differs from encoder rate " +
                          std::to_string(config().sample_rate));
    }
    return EmbeddingSequence(encode(std::span<const float>(w.samples)), Source::audio);
}

std::string AudioEncoder::hash() const { return hash_parameters(params()); }

void AudioEncoder::save(const std::filesystem::path & path, const json & meta) const {
    json m = meta.is_object() ? meta : json::object();
    m["config"] = config().to_json();
    Checkpoint::capture("encoder", m, params()).save(path);
}

AudioEncoder AudioEncoder::load(const std::filesystem::path & path, json * meta) {
    const Checkpoint c = Checkpoint::load(path);
    if (c.kind != "encoder") {
        throw CheckpointError(path.string() + " holds a '" + c.kind + "' checkpoint, expected 'encoder'");
    }
    AudioEncoder enc(EncoderConfig::from_json(c.meta.at("config")), 0);
    c.restore(enc.params());
    if (enc.hash() != c.hash) {
        throw CheckpointError("restored encoder hash differs from checkpoint: " + path.string());
    }
    if (meta) {
        *meta = c.meta;
    }
    return enc;
}

}  // namespace wavprompt
