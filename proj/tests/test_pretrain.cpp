#include "test_util.hpp"

#include "wavprompt/pretrain.hpp"

#include <doctest.h>

#include <functional>
#include <random>

using namespace wavprompt;

namespace {

// Plain recursion over the three edit operations; exponential but fine for short inputs.
size_t edit_distance_oracle(const TokenSequence & a, size_t i, const TokenSequence & b, size_t j) {
    if (i == a.size()) {
        return b.size() - j;
    }
    if (j == b.size()) {
        return a.size() - i;
    }
    if (a[i] == b[j]) {
        return edit_distance_oracle(a, i + 1, b, j + 1);
    }
    return 1 + std::min({edit_distance_oracle(a, i + 1, b, j), edit_distance_oracle(a, i, b, j + 1),
                         edit_distance_oracle(a, i + 1, b, j + 1)});
}

PretrainConfig quick_pretrain() {
    PretrainConfig c;
    c.steps = 12;
    c.batch_size = 2;
    c.learning_rate = 1e-3;
    c.log_every = 4;
    c.heldout_utterances = 4;
    c.checkpoint_every = 0;
    c.seed = 9;
    return c;
}

}  // namespace

TEST_SUITE("pretrain") {

TEST_CASE("edit distance matches the recursive definition") {
    CHECK(edit_distance({}, {}) == 0);
    CHECK(edit_distance({1, 2, 3}, {}) == 3);
    CHECK(edit_distance({}, {4, 4}) == 2);
    CHECK(edit_distance({1, 2, 3, 4}, {1, 3, 4, 5}) == 2);
    std::mt19937_64 rng(1);
    std::uniform_int_distribution<TokenId> tok(0, 3);
    std::uniform_int_distribution<int> len(0, 6);
    for (int k = 0; k < 300; ++k) {
        TokenSequence a(static_cast<size_t>(len(rng))), b(static_cast<size_t>(len(rng)));
        for (auto & x : a) {
            x = tok(rng);
        }
        for (auto & x : b) {
            x = tok(rng);
        }
        REQUIRE(edit_distance(a, b) == edit_distance_oracle(a, 0, b, 0));
        REQUIRE(edit_distance(a, b) == edit_distance(b, a));
    }
}

TEST_CASE("transcription score accumulates errors and exact matches") {
    TranscriptionScore s;
    s.add({4, 5, 6}, {4, 5, 6});
    s.add({4, 5}, {4, 7, 5});
    CHECK(s.utterances == 2);
    CHECK(s.reference_tokens == 5);
    CHECK(s.errors == 1);
    CHECK(s.exact == 1);
    CHECK(s.wer() == doctest::Approx(0.2));
    CHECK(s.token_accuracy() == doctest::Approx(0.8));
    CHECK(s.exact_match() == doctest::Approx(0.5));
}

TEST_CASE("training prefix is audio then prompt, target is answer then end marker") {
    const LanguageModel lm(test_util::tiny_lm_config(), 2);
    const AudioEncoder enc(test_util::tiny_audio_encoder(), 3);
    const Corpus & c = test_util::small_corpus();
    const Utterance & u = *c.select(Split::train, UtteranceKind::speech).front();
    const TokenSequence prompt = c.spec().vocab.encode("what did the speaker say ?");
    const TrainingPrefix tp = build_training_prefix(u, prompt, u.tokens, enc, lm);
    const size_t audio_rows = test_util::tiny_audio_encoder().output_length(u.waveform.size());
    CHECK(tp.prefix.size() == audio_rows + prompt.size());
    CHECK(tp.prefix.count(Source::audio) == audio_rows);
    CHECK(tp.prefix.count(Source::text) == prompt.size());
    for (size_t i = 0; i < audio_rows; ++i) {
        CHECK(tp.prefix.sources[i] == Source::audio);
    }
    TokenSequence expected = u.tokens;
    expected.push_back(Vocabulary::kEndAnswer);
    CHECK(tp.target == expected);

    LMConfig small = test_util::tiny_lm_config();
    small.max_context = 8;
    const LanguageModel cramped(small, 2);
    CHECK_THROWS_AS(build_training_prefix(u, prompt, u.tokens, enc, cramped), ContextOverflowError);
}

TEST_CASE("batch loss is total target nats over total target tokens") {
    const LanguageModel lm(test_util::tiny_lm_config(), 4);
    const AudioEncoder enc(test_util::tiny_audio_encoder(), 5);
    const Corpus & c = test_util::small_corpus();
    const TokenSequence prompt = c.spec().vocab.encode("what did the speaker say ?");
    std::vector<PretrainExample> batch;
    double nats = 0.0;
    size_t tokens = 0;
    double taped_nats = 0.0;
    for (const Utterance * u : c.select(Split::train, UtteranceKind::speech)) {
        if (batch.size() == 3) {
            break;
        }
        batch.push_back({&u->waveform, prompt, u->tokens});
        const TrainingPrefix tp = build_training_prefix(*u, prompt, u->tokens, enc, lm);
        nats -= lm.sequence_logprob(tp.prefix, tp.target);
        tokens += tp.target.size();
        const auto [n, t] = accumulate_asr_gradients(batch.back(), enc, lm, 1.0f);
        CHECK(t == tp.target.size());
        taped_nats += n;
    }
    CHECK(asr_loss(batch, enc, lm) == doctest::Approx(nats / static_cast<double>(tokens)).epsilon(1e-5));
    CHECK(taped_nats == doctest::Approx(nats).epsilon(1e-4));
}

TEST_CASE("chained examples are scored as one sequence with every answer in the loss") {
    const LanguageModel lm(test_util::tiny_lm_config(), 4);
    const AudioEncoder enc(test_util::tiny_audio_encoder(), 5);
    const Corpus & c = test_util::small_corpus();
    const TokenSequence prompt = c.spec().vocab.encode("what did the speaker say ?");
    const auto train = c.select(Split::train, UtteranceKind::speech);
    const PretrainExample a{&train[0]->waveform, prompt, train[0]->tokens};
    const PretrainExample b{&train[1]->waveform, prompt, train[1]->tokens};

    // Oracle: the first block as usual, the second conditioned on the solved first block.
    const TrainingPrefix first = build_training_prefix(*train[0], prompt, train[0]->tokens, enc, lm);
    EmbeddingSequence ctx = first.prefix;
    ctx.append(lm.embed_text(first.target));
    ctx.append(enc.encode_audio(train[1]->waveform));
    ctx.append(lm.embed_text(prompt));
    TokenSequence second = train[1]->tokens;
    second.push_back(Vocabulary::kEndAnswer);
    const double oracle = -lm.sequence_logprob(first.prefix, first.target) - lm.sequence_logprob(ctx, second);

    const auto [nats, tokens] = accumulate_chain_gradients({&a, &b}, enc, lm, 1.0f);
    CHECK(tokens == first.target.size() + second.size());
    CHECK(nats == doctest::Approx(oracle).epsilon(1e-4));
    CHECK(chain_length({&a, &b}, enc.config()) == ctx.size() + second.size());
    CHECK(accumulate_chain_gradients({&a}, enc, lm, 1.0f).first ==
          doctest::Approx(accumulate_asr_gradients(a, enc, lm, 1.0f).first));
}

TEST_CASE("pretraining matches the encoder output norm to the LM token embeddings") {
    const LanguageModel lm(test_util::tiny_lm_config(), 6);
    const Corpus & c = test_util::small_corpus();
    const PretrainResult matched = pretrain_encoder(c, quick_pretrain(), test_util::tiny_audio_encoder(), lm);
    CHECK(matched.encoder.config().output_norm == doctest::Approx(lm.mean_token_norm()));
    const EmbeddingSequence e = matched.encoder.encode_audio(c.select(Split::test, UtteranceKind::speech)[0]->waveform);
    CHECK(e.vectors.row(0).norm() == doctest::Approx(lm.mean_token_norm()).epsilon(1e-3));

    EncoderConfig free = test_util::tiny_audio_encoder();
    free.match_lm_norm = false;
    CHECK(pretrain_encoder(c, quick_pretrain(), free, lm).encoder.config().output_norm == 0.0);
}

TEST_CASE("pretraining changes only the encoder and is deterministic") {
    const LanguageModel lm(test_util::tiny_lm_config(), 6);
    const std::string before = lm.hash();
    const Corpus & c = test_util::small_corpus();
    const PretrainConfig cfg = quick_pretrain();
    const PretrainResult a = pretrain_encoder(c, cfg, test_util::tiny_audio_encoder(), lm);
    CHECK(lm.hash() == before);
    CHECK(a.lm_hash == before);
    CHECK(a.records.size() == 3);
    CHECK(a.encoder.hash() != AudioEncoder(test_util::tiny_audio_encoder(), 1).hash());

    const PretrainResult b = pretrain_encoder(c, cfg, test_util::tiny_audio_encoder(), lm);
    CHECK(a.encoder.hash() == b.encoder.hash());

    PretrainConfig multi = cfg;
    multi.multitask = true;
    const PretrainResult m = pretrain_encoder(c, multi, test_util::tiny_audio_encoder(), lm);
    CHECK(m.encoder.hash() != a.encoder.hash());
}

TEST_CASE("pretraining rejects mismatched dimensions and unknown resources") {
    const LanguageModel lm(test_util::tiny_lm_config(), 7);
    const Corpus & c = test_util::small_corpus();
    EncoderConfig wrong = test_util::tiny_audio_encoder();
    wrong.output_dim = 12;
    CHECK_THROWS_AS(pretrain_encoder(c, quick_pretrain(), wrong, lm), ConfigError);
    PretrainConfig missing = quick_pretrain();
    missing.resource = "37pct";
    CHECK_THROWS(pretrain_encoder(c, missing, test_util::tiny_audio_encoder(), lm));
    PretrainConfig bad_prompt = quick_pretrain();
    bad_prompt.asr_prompt = "what is zzz";
    CHECK_THROWS_AS(bad_prompt.validate(c.spec().vocab), VocabularyError);
}

TEST_CASE("greedy transcription stops at the length limit or the end marker") {
    const LanguageModel lm(test_util::tiny_lm_config(), 8);
    const AudioEncoder enc(test_util::tiny_audio_encoder(), 9);
    const Corpus & c = test_util::small_corpus();
    const TokenSequence prompt = c.spec().vocab.encode("what did the speaker say ?");
    const Utterance & u = *c.select(Split::test, UtteranceKind::speech).front();
    const TokenSequence t = transcribe(u.waveform, enc, lm, prompt, 5);
    CHECK(t.size() <= 5);
    for (TokenId x : t) {
        CHECK(x != Vocabulary::kEndAnswer);
    }
    CHECK(transcribe(u.waveform, enc, lm, prompt, 5) == t);
}

}  // TEST_SUITE
