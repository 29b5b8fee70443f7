#pragma once

#include "wavprompt/types.hpp"

#include <nlohmann/json.hpp>

#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace wavprompt {

// Closed whitespace-delimited symbol vocabulary. Ids are dense from 0; the
// first four ids are the special symbols.
class Vocabulary {
  public:
    static constexpr TokenId kPad = 0;
    static constexpr TokenId kBeginAnswer = 1;
    static constexpr TokenId kEndAnswer = 2;
    static constexpr TokenId kSilence = 3;
    static constexpr TokenId kNumSpecial = 4;

    static constexpr std::string_view kPadSymbol = "<pad>";
    static constexpr std::string_view kBeginAnswerSymbol = "<boa>";
    static constexpr std::string_view kEndAnswerSymbol = "<eoa>";
    static constexpr std::string_view kSilenceSymbol = "<sil>";

    Vocabulary() = default;

    // Builds a vocabulary from content symbols; specials are prepended.
    explicit Vocabulary(const std::vector<std::string> & content_symbols);

    // The built-in vocabulary used by the default corpus.
    static Vocabulary standard();

    size_t size() const { return symbols_.size(); }
    const std::vector<std::string> & symbols() const { return symbols_; }

    bool contains(std::string_view symbol) const;
    bool valid(TokenId id) const { return id >= 0 && static_cast<size_t>(id) < symbols_.size(); }
    bool is_special(TokenId id) const { return id >= 0 && id < kNumSpecial; }
    bool is_content(TokenId id) const { return valid(id) && !is_special(id); }

    TokenId id(std::string_view symbol) const;
    const std::string & symbol(TokenId id) const;

    // Splits on whitespace; throws VocabularyError for unknown symbols.
    TokenSequence encode(std::string_view text) const;
    std::string decode(const TokenSequence & tokens) const;

    nlohmann::json to_json() const;
    static Vocabulary from_json(const nlohmann::json & j);

    bool operator==(const Vocabulary & other) const { return symbols_ == other.symbols_; }

  private:
    std::vector<std::string> symbols_;
    std::unordered_map<std::string, TokenId> index_;
};

}  // namespace wavprompt
