#include "wavprompt/vocab.hpp"

#include <sstream>

namespace wavprompt {

Vocabulary::Vocabulary(const std::vector<std::string> & content_symbols) {
    symbols_ = {std::string(kPadSymbol), std::string(kBeginAnswerSymbol), std::string(kEndAnswerSymbol),
                std::string(kSilenceSymbol)};
    for (const std::string & s : content_symbols) {
        if (s.empty() || s.find_first_of(" \t\n") != std::string::npos) {
            throw VocabularyError("vocabulary symbol must be non-empty and contain no whitespace: '" + s + "'");
        }
        symbols_.push_back(s);
    }
    for (size_t i = 0; i < symbols_.size(); ++i) {
        if (!index_.emplace(symbols_[i], static_cast<TokenId>(i)).second) {
            throw VocabularyError("duplicate vocabulary symbol '" + symbols_[i] + "'");
        }
    }
    if (symbols_.size() < 8) {
        throw VocabularyError("vocabulary must contain at least 8 symbols");
    }
}

Vocabulary Vocabulary::standard() {
    return Vocabulary({
        // spoken filler words
        "red", "suit", "street", "running", "park", "ball", "water", "green", "small", "big", "near", "holds",
        // spoken keywords
        "man", "woman", "black", "white",
        // prompt words
        "what", "did", "the", "speaker", "say", "?", "sound", "is", "this", "describing", "a", "person", "in", "=>",
        // label words that are never spoken
        "male", "female", "dark", "light",
        // sound class names
        "dog", "cat", "bird", "sheep", "cow", "pig", "rooster", "hen", "frog",
        // sound class verbs
        "barks", "meows", "chirps", "bleats", "moos", "snorts", "crows", "clucks", "croaks",
    });
}

bool Vocabulary::contains(std::string_view symbol) const { return index_.count(std::string(symbol)) > 0; }

TokenId Vocabulary::id(std::string_view symbol) const {
    auto it = index_.find(std::string(symbol));
    if (it == index_.end()) {
        throw VocabularyError("unknown symbol '" + std::string(symbol) + "'");
    }
    return it->second;
}

const std::string & Vocabulary::symbol(TokenId id) const {
    if (!valid(id)) {
        throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary of size " +
                              std::to_string(symbols_.size()));
    }
    return symbols_[static_cast<size_t>(id)];
}

TokenSequence Vocabulary::encode(std::string_view text) const {
    TokenSequence out;
    std::istringstream in{std::string(text)};
    std::string word;
    while (in >> word) {
        out.push_back(id(word));
    }
    return out;
}

std::string Vocabulary::decode(const TokenSequence & tokens) const {
    std::string out;
    for (TokenId t : tokens) {
        if (!out.empty()) {
            out += ' ';
        }
        out += symbol(t);
    }
    return out;
}

nlohmann::json Vocabulary::to_json() const {
    return nlohmann::json(std::vector<std::string>(symbols_.begin() + kNumSpecial, symbols_.end()));
}

Vocabulary Vocabulary::from_json(const nlohmann::json & j) { return Vocabulary(j.get<std::vector<std::string>>()); }

}  // namespace wavprompt
