#include "wavprompt/fewshot.hpp"

#include "wavprompt/synth.hpp"

#include <algorithm>
#include <cmath>

namespace wavprompt {

using nlohmann::json;

std::string to_string(PromptMode m) { return m == PromptMode::audio ? "audio" : "text"; }

PromptMode prompt_mode_from_string(const std::string & s) {
    if (s == "audio") {
        return PromptMode::audio;
    }
    if (s == "text") {
        return PromptMode::text;
    }
    throw ConfigError("unknown prompt mode '" + s + "' (expected audio or text)");
}

void Episode::validate() const {
    if (demonstrations.size() > kMaxDemonstrations) {
        throw ConfigError("episode " + id + " has " + std::to_string(demonstrations.size()) +
                          " demonstrations, at most 10 allowed");
    }
    if (answer_set.empty()) {
        throw ConfigError("episode " + id + " has an empty answer set");
    }
    auto in_set = [&](const std::string & a) { return std::find(answer_set.begin(), answer_set.end(), a) != answer_set.end(); };
    for (const auto & d : demonstrations) {
        if (!in_set(d.answer_text)) {
            throw ConfigError("demonstration answer '" + d.answer_text + "' is not in the answer set");
        }
    }
    if (!in_set(gold)) {
        throw ConfigError("gold label '" + gold + "' is not in the answer set");
    }
}

json Episode::to_json() const {
    json demos = json::array();
    for (const auto & d : demonstrations) {
        demos.push_back({{"id", d.item.id}, {"prompt", d.prompt_text}, {"answer", d.answer_text}});
    }
    return {{"id", id},       {"demonstrations", demos}, {"query", query.id}, {"question_prompt", question_prompt},
            {"answer_set", answer_set}, {"gold", gold},   {"seed", seed}};
}

AnswerDistribution AnswerDistribution::from_scores(std::vector<std::string> labels, std::vector<double> scores) {
    AnswerDistribution d;
    d.labels = std::move(labels);
    d.logprobs = std::move(scores);
    const double mx = *std::max_element(d.logprobs.begin(), d.logprobs.end());
    double z = 0.0;
    d.probs.resize(d.logprobs.size());
    for (size_t i = 0; i < d.logprobs.size(); ++i) {
        d.probs[i] = std::exp(d.logprobs[i] - mx);
        z += d.probs[i];
    }
    for (double & p : d.probs) {
        p /= z;
    }
    return d;
}

json AnswerDistribution::to_json() const { return {{"labels", labels}, {"logprobs", logprobs}, {"probs", probs}}; }

ArgMax argmax(const std::vector<double> & values) {
    ArgMax a;
    for (size_t i = 1; i < values.size(); ++i) {
        if (values[i] > values[static_cast<size_t>(a.index)]) {
            a.index = static_cast<int>(i);
        }
    }
    for (size_t i = 0; i < values.size(); ++i) {
        if (static_cast<int>(i) != a.index && values[i] == values[static_cast<size_t>(a.index)]) {
            a.tie = true;
        }
    }
    return a;
}

CalibrationResult calibrate(const AnswerDistribution & p, const AnswerDistribution & p_cf, double eps) {
    if (p.probs.size() != p_cf.probs.size()) {
        throw std::invalid_argument("calibrate: distributions differ in size");
    }
    CalibrationResult r;
    r.distribution = p;
    for (double c : p_cf.probs) {
        if (!(c > eps)) {
            r.skipped = true;
            return r;
        }
    }
    double z = 0.0;
    for (size_t i = 0; i < p.probs.size(); ++i) {
        r.distribution.probs[i] = p.probs[i] / p_cf.probs[i];
        z += r.distribution.probs[i];
    }
    for (double & q : r.distribution.probs) {
        q /= z;
    }
    return r;
}

EmbeddingSequence embed_item(const EpisodeItem & item, PromptMode mode, const AudioEncoder * encoder,
                             const LanguageModel & lm) {
    if (mode == PromptMode::text) {
        return lm.embed_text(item.transcript);
    }
    if (!encoder || !item.audio) {
        throw std::invalid_argument("embed_item: audio mode needs an encoder and audio for item '" + item.id + "'");
    }
    return encoder->encode_audio(*item.audio);
}

EmbeddingSequence assemble_demonstrations(const Episode & ep, const Vocabulary & vocab,
                                          const AudioEncoder * encoder, const LanguageModel & lm, PromptMode mode) {
    EmbeddingSequence out;
    for (const auto & d : ep.demonstrations) {
        out.append(embed_item(d.item, mode, encoder, lm));
        TokenSequence text = vocab.encode(d.prompt_text);
        const TokenSequence answer = vocab.encode(d.answer_text);
        text.insert(text.end(), answer.begin(), answer.end());
        text.push_back(Vocabulary::kEndAnswer);
        out.append(lm.embed_text(text));
    }
    return out;
}

EmbeddingSequence assemble_query(const EmbeddingSequence & item, const std::string & question_prompt,
                                 const Vocabulary & vocab, const LanguageModel & lm) {
    EmbeddingSequence out = item;
    out.append(lm.embed_text(vocab.encode(question_prompt)));
    return out;
}

EmbeddingSequence assemble_prompt(const Episode & ep, const Vocabulary & vocab, const AudioEncoder * encoder,
                                  const LanguageModel & lm, PromptMode mode) {
    ep.validate();
    EmbeddingSequence out = assemble_demonstrations(ep, vocab, encoder, lm, mode);
    out.append(assemble_query(embed_item(ep.query, mode, encoder, lm), ep.question_prompt, vocab, lm));
    if (out.size() > static_cast<size_t>(lm.config().max_context)) {
        throw ContextOverflowError("assembled prompt for episode " + ep.id, out.size(),
                                   static_cast<size_t>(lm.config().max_context));
    }
    return out;
}

namespace {

std::vector<TokenSequence> encode_answers(const std::vector<std::string> & answers, const Vocabulary & vocab) {
    std::vector<TokenSequence> out;
    for (const auto & a : answers) {
        TokenSequence t = vocab.encode(a);
        if (t.empty()) {
            throw VocabularyError("answer '" + a + "' has no tokens");
        }
        out.push_back(std::move(t));
    }
    return out;
}

AnswerDistribution score_from_state(const LanguageModel & lm, const LanguageModel::State & st,
                                    const std::vector<std::string> & answers,
                                    const std::vector<TokenSequence> & tokens, const ScoringOptions & opts) {
    std::vector<double> scores;
    for (const auto & t : tokens) {
        double s = lm.sequence_logprob(st, t);
        if (opts.length_normalize) {
            s /= static_cast<double>(t.size());
        }
        scores.push_back(s);
    }
    return AnswerDistribution::from_scores(answers, std::move(scores));
}

size_t longest(const std::vector<TokenSequence> & tokens) {
    size_t n = 0;
    for (const auto & t : tokens) {
        n = std::max(n, t.size());
    }
    return n;
}

}  // namespace

AnswerDistribution score_answers(const EmbeddingSequence & prompt, const std::vector<std::string> & answer_set,
                                 const Vocabulary & vocab, const LanguageModel & lm, const ScoringOptions & opts) {
    if (answer_set.empty()) {
        throw std::invalid_argument("score_answers: empty answer set");
    }
    if (prompt.empty()) {
        throw std::invalid_argument("score_answers: empty prompt");
    }
    const auto tokens = encode_answers(answer_set, vocab);
    const size_t need = prompt.size() + longest(tokens);
    if (need > static_cast<size_t>(lm.config().max_context)) {
        throw ContextOverflowError("prompt plus longest answer", need, static_cast<size_t>(lm.config().max_context));
    }
    LanguageModel::State st = lm.start();
    lm.extend(st, prompt.vectors);
    return score_from_state(lm, st, answer_set, tokens, opts);
}

ContentFreeInput make_content_free(double duration_s, int sample_rate) {
    ContentFreeInput cf;
    cf.audio = silence(duration_s, sample_rate);
    return cf;
}

AnswerDistribution content_free_distribution(const Episode & ep, const ContentFreeInput & cf,
                                             const Vocabulary & vocab, const AudioEncoder * encoder,
                                             const LanguageModel & lm, PromptMode mode, const ScoringOptions & opts) {
    Episode e = ep;
    e.query = EpisodeItem{"content-free", &cf.audio, cf.text};
    return score_answers(assemble_prompt(e, vocab, encoder, lm, mode), e.answer_set, vocab, lm, opts);
}

Prediction make_prediction(AnswerDistribution raw, AnswerDistribution content_free) {
    Prediction p;
    p.raw = std::move(raw);
    p.content_free = std::move(content_free);
    CalibrationResult c = calibrate(p.raw, p.content_free);
    p.calibrated = std::move(c.distribution);
    p.calibration_skipped = c.skipped;
    p.raw_choice = argmax(p.raw.probs);
    p.calibrated_choice = argmax(p.calibrated.probs);
    return p;
}

Prediction predict(const Episode & ep, const ContentFreeInput & cf, const Vocabulary & vocab,
                   const AudioEncoder * encoder, const LanguageModel & lm, PromptMode mode,
                   const ScoringOptions & opts) {
    AnswerDistribution raw = score_answers(assemble_prompt(ep, vocab, encoder, lm, mode), ep.answer_set, vocab, lm, opts);
    AnswerDistribution cfd = content_free_distribution(ep, cf, vocab, encoder, lm, mode, opts);
    return make_prediction(std::move(raw), std::move(cfd));
}

EpisodeScorer::EpisodeScorer(const LanguageModel & lm, const Vocabulary & vocab, std::vector<std::string> answer_set,
                             std::string question_prompt, ScoringOptions opts)
    : lm_(lm),
      answers_(std::move(answer_set)),
      answer_tokens_(encode_answers(answers_, vocab)),
      question_(vocab.encode(question_prompt)),
      opts_(opts),
      state_(lm.start()),
      longest_answer_(longest(answer_tokens_)) {
    if (answers_.empty()) {
        throw std::invalid_argument("EpisodeScorer: empty answer set");
    }
}

void EpisodeScorer::set_demonstrations(const EmbeddingSequence & demonstrations) {
    if (demonstrations.size() > static_cast<size_t>(lm_.config().max_context)) {
        throw ContextOverflowError("demonstrations", demonstrations.size(),
                                   static_cast<size_t>(lm_.config().max_context));
    }
    state_ = lm_.start();
    lm_.extend(state_, demonstrations.vectors);
}

AnswerDistribution EpisodeScorer::score(const EmbeddingSequence & item) const {
    const size_t need = static_cast<size_t>(state_.length) + item.size() + question_.size() + longest_answer_;
    if (need > static_cast<size_t>(lm_.config().max_context)) {
        throw ContextOverflowError("prompt plus longest answer", need, static_cast<size_t>(lm_.config().max_context));
    }
    LanguageModel::State st = state_;
    EmbeddingSequence q = item;
    q.append(lm_.embed_text(question_));
    lm_.extend(st, q.vectors);
    return score_from_state(lm_, st, answers_, answer_tokens_, opts_);
}

}  // namespace wavprompt
