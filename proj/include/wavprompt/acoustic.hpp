#pragma once

// Audio encoder: strided convolutions to ~50 Hz frames, a bidirectional
// transformer over the frames, then mean-pool downsampling by r and a linear
// projection into the language model's embedding space.

#include "wavprompt/embedding.hpp"
#include "wavprompt/nn.hpp"
#include "wavprompt/types.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace wavprompt {

struct ConvLayerSpec {
    int channels = 64;
    int kernel = 16;
    int stride = 8;
};

struct EncoderConfig {
    int sample_rate = 16000;
    // Each layer is padded by kernel - stride, so it maps n inputs to floor(n / stride) outputs.
    std::vector<ConvLayerSpec> conv = {{64, 16, 8}, {64, 10, 5}, {128, 16, 8}};
    int dim = 128;
    int layers = 2;
    int heads = 4;
    int ff_dim = 256;
    int output_dim = 128;  // must equal the language model's embedding dimension
    int downsample_rate = 8;
    // When > 0 every output row is layer-normalized and scaled to this L2 norm.
    double output_norm = 0.0;
    // Pretraining sets output_norm to the frozen LM's mean token-embedding norm.
    bool match_lm_norm = true;

    int total_stride() const;
    double frame_rate() const { return static_cast<double>(sample_rate) / total_stride(); }
    size_t min_samples() const { return static_cast<size_t>(total_stride()); }
    size_t frame_count(size_t samples) const;
    // ceil(frame_count / downsample_rate)
    size_t output_length(size_t samples) const;

    void validate() const;
    nlohmann::json to_json() const;
    static EncoderConfig from_json(const nlohmann::json & j);
};

// Number of rows produced by mean pooling m rows in windows of r.
inline size_t pooled_length(size_t m, int r) { return (m + static_cast<size_t>(r) - 1) / static_cast<size_t>(r); }

template <typename T>
class AudioEncoderT {
  public:
    AudioEncoderT() = default;
    AudioEncoderT(const EncoderConfig & cfg, std::uint64_t seed);

    const EncoderConfig & config() const { return cfg_; }

    // Differentiable pieces. `samples` must outlive the tape.
    ad::Var frames(ad::Tape<T> & tape, std::span<const T> samples, bool track) const;
    ad::Var downsample(ad::Tape<T> & tape, ad::Var frames, int r, bool track) const;
    ad::Var encode(ad::Tape<T> & tape, std::span<const T> samples, bool track) const;

    // Evaluation-mode wrappers.
    ad::Matrix<T> encode_frames(std::span<const T> samples) const;
    ad::Matrix<T> downsample(const ad::Matrix<T> & frames, int r) const;
    ad::Matrix<T> encode(std::span<const T> samples) const;

    nn::ParamList<T> params();
    nn::ConstParamList<T> params() const;
    size_t parameter_count() const;

  private:
    void check_length(size_t n) const;

    template <typename F>
    void for_each_param(F && f) const;

    EncoderConfig cfg_;
    std::vector<ad::Parameter<T>> conv_weight_;  // (kernel * in) x out
    std::vector<ad::Parameter<T>> conv_bias_;
    std::vector<nn::LayerNorm<T>> conv_norm_;
    nn::Linear<T> frame_proj_;
    std::vector<nn::TransformerBlock<T>> blocks_;
    nn::LayerNorm<T> ln_f_;
    nn::Linear<T> out_proj_;  // downsampler projection to output_dim
};

extern template class AudioEncoderT<float>;
extern template class AudioEncoderT<double>;

class AudioEncoder : public AudioEncoderT<float> {
  public:
    using AudioEncoderT<float>::AudioEncoderT;
    using AudioEncoderT<float>::encode;

    // encode_frames then downsample(cfg.downsample_rate); rows tagged audio.
    EmbeddingSequence encode_audio(const Waveform & w) const;

    std::string hash() const;
    void save(const std::filesystem::path & path, const nlohmann::json & meta = {}) const;
    // Meta stored with the checkpoint is returned through `meta`.
    static AudioEncoder load(const std::filesystem::path & path, nlohmann::json * meta = nullptr);
};

}  // namespace wavprompt
