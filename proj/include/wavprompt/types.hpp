#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace wavprompt {

using TokenId = std::int32_t;
using TokenSequence = std::vector<TokenId>;

struct Waveform {
    std::vector<float> samples;
    int sample_rate = 16000;

    size_t size() const { return samples.size(); }
    bool empty() const { return samples.empty(); }
    double duration_s() const { return static_cast<double>(samples.size()) / sample_rate; }
};

class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

// Token id or symbol outside the vocabulary.
class VocabularyError : public Error {
  public:
    using Error::Error;
};

// Invalid configuration value or combination.
class ConfigError : public Error {
  public:
    using Error::Error;
};

// Waveform not divisible into whole token segments.
class FramingError : public Error {
  public:
    using Error::Error;
};

// Waveform too short for the encoder's minimum input.
class InputLengthError : public Error {
  public:
    using Error::Error;
};

class ContextOverflowError : public Error {
  public:
    ContextOverflowError(const std::string & what, size_t length, size_t limit)
        : Error(what + " (length " + std::to_string(length) + " > context " + std::to_string(limit) + ")"),
          length_(length),
          limit_(limit) {}

    size_t length() const { return length_; }
    size_t limit() const { return limit_; }

  private:
    size_t length_;
    size_t limit_;
};

// Corpus or result-store consistency failure (overlapping splits, corrupt records).
class IntegrityError : public Error {
  public:
    using Error::Error;
};

// A pipeline guarantee was broken, e.g. the frozen language model changed.
class ContractViolation : public Error {
  public:
    using Error::Error;
};

class CheckpointError : public Error {
  public:
    using Error::Error;
};

// Loss or activations became non-finite during training.
class DivergenceError : public Error {
  public:
    using Error::Error;
};

}  // namespace wavprompt
