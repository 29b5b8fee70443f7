#include "test_util.hpp"

#include "wavprompt/langmodel.hpp"
#include "wavprompt/text_corpus.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <set>

using namespace wavprompt;

namespace {

LMConfig tiny_config(int vocab_size) {
    LMConfig c;
    c.vocab_size = vocab_size;
    c.embed_dim = 16;
    c.layers = 2;
    c.heads = 2;
    c.ff_dim = 32;
    c.max_context = 32;
    return c;
}

double row_logsumexp(const Eigen::RowVectorXf & r) {
    const double mx = r.maxCoeff();
    double s = 0.0;
    for (Eigen::Index i = 0; i < r.size(); ++i) {
        s += std::exp(r(i) - mx);
    }
    return mx + std::log(s);
}

TokenSequence random_tokens(std::mt19937_64 & rng, size_t n, int vocab_size) {
    std::uniform_int_distribution<TokenId> d(Vocabulary::kNumSpecial, vocab_size - 1);
    TokenSequence t(n);
    for (auto & x : t) {
        x = d(rng);
    }
    return t;
}

}  // namespace

TEST_SUITE("langmodel") {

namespace {

// Splits a sequence into blocks ending at <eoa> (the marker dropped).
std::vector<TokenSequence> blocks_of(const TokenSequence & s) {
    std::vector<TokenSequence> out(1);
    for (TokenId t : s) {
        if (t == Vocabulary::kEndAnswer) {
            out.emplace_back();
        } else {
            out.back().push_back(t);
        }
    }
    out.pop_back();
    return out;
}

TextCorpusConfig episodes_only() {
    TextCorpusConfig c;
    c.sequences = 300;
    c.asr_weight = 0.0;
    c.naming_weight = 0.0;
    c.fact_weight = 0.0;
    c.task_weight = 1.0;
    return c;
}

}  // namespace

TEST_CASE("text corpus: deterministic, in vocabulary, every sequence ends an answer") {
    const CorpusSpec spec;
    TextCorpusConfig cfg;
    cfg.sequences = 400;
    const auto a = generate_text_corpus(spec, cfg, 7);
    CHECK(a == generate_text_corpus(spec, cfg, 7));
    CHECK(a != generate_text_corpus(spec, cfg, 8));
    for (const TokenSequence & s : a) {
        REQUIRE_FALSE(s.empty());
        CHECK(s.back() == Vocabulary::kEndAnswer);
        for (TokenId t : s) {
            CHECK(static_cast<size_t>(t) < spec.vocab.size());
        }
    }
    TextCorpusConfig bad = cfg;
    bad.associations = {{"man", "zebra"}};
    CHECK_THROWS_AS(generate_text_corpus(spec, bad, 1), VocabularyError);
}

TEST_CASE("text corpus: facts are the configured associations") {
    const CorpusSpec spec;
    TextCorpusConfig cfg;
    cfg.sequences = 100;
    cfg.asr_weight = cfg.naming_weight = cfg.task_weight = 0.0;
    cfg.fact_weight = 1.0;
    std::set<std::pair<TokenId, TokenId>> known;
    for (const auto & [w, a] : cfg.associations) {
        known.insert({spec.vocab.id(w), spec.vocab.id(a)});
    }
    for (const TokenSequence & s : generate_text_corpus(spec, cfg, 3)) {
        for (const TokenSequence & b : blocks_of(s)) {
            REQUIRE(b.size() == 2);
            CHECK(known.count({b[0], b[1]}) == 1);
        }
    }
}

TEST_CASE("text corpus: episode labels follow one relation per sequence") {
    const CorpusSpec spec;
    std::map<TokenId, TokenId> associate;
    for (const auto & [w, a] : TextCorpusConfig{}.associations) {
        associate[spec.vocab.id(w)] = spec.vocab.id(a);
    }
    SUBCASE("identity: the label occurs in its item") {
        TextCorpusConfig cfg = episodes_only();
        cfg.identity_fraction = 1.0;
        cfg.association_fraction = 0.0;
        for (const TokenSequence & s : generate_text_corpus(spec, cfg, 4)) {
            std::set<TokenId> labels;
            for (const TokenSequence & b : blocks_of(s)) {
                labels.insert(b.back());
                CHECK(std::find(b.begin(), b.end() - 1, b.back()) != b.end() - 1);
            }
            CHECK(labels.size() <= spec.sound_classes.size());
        }
    }
    SUBCASE("association: the label is the associate of a word in its item") {
        TextCorpusConfig cfg = episodes_only();
        cfg.identity_fraction = 0.0;
        cfg.association_fraction = 1.0;
        cfg.sound_task_fraction = 1.0;  // every sound class has an associate
        for (const TokenSequence & s : generate_text_corpus(spec, cfg, 5)) {
            for (const TokenSequence & b : blocks_of(s)) {
                const bool found = std::any_of(b.begin(), b.end() - 1, [&](TokenId t) {
                    return associate.count(t) && associate.at(t) == b.back();
                });
                CHECK(found);
            }
        }
    }
    SUBCASE("speech episodes are two-way with one prompt") {
        TextCorpusConfig cfg = episodes_only();
        cfg.sound_task_fraction = 0.0;
        for (const TokenSequence & s : generate_text_corpus(spec, cfg, 6)) {
            std::set<TokenId> labels;
            for (const TokenSequence & b : blocks_of(s)) {
                labels.insert(b.back());
            }
            CHECK(labels.size() <= 2);
        }
    }
}

TEST_CASE("next-token distributions are normalized at every position") {
    const LanguageModel lm(tiny_config(8), 1);
    std::mt19937_64 rng(2);
    const auto logp = lm.logprobs(lm.embed_text(random_tokens(rng, 12, 8)));
    REQUIRE(logp.rows() == 12);
    REQUIRE(logp.cols() == 8);
    for (Eigen::Index i = 0; i < logp.rows(); ++i) {
        CHECK(std::abs(row_logsumexp(logp.row(i))) < 1e-5);
    }
}

TEST_CASE("changing a later token leaves earlier predictions untouched") {
    const LanguageModel lm(tiny_config(8), 3);
    std::mt19937_64 rng(4);
    TokenSequence a = random_tokens(rng, 10, 8);
    for (size_t j = 1; j < a.size(); ++j) {
        TokenSequence b = a;
        b[j] = b[j] == 4 ? 5 : 4;
        const auto la = lm.logprobs(lm.embed_text(a));
        const auto lb = lm.logprobs(lm.embed_text(b));
        CHECK(la.topRows(static_cast<Eigen::Index>(j)) == lb.topRows(static_cast<Eigen::Index>(j)));
        CHECK((la.row(static_cast<Eigen::Index>(j)) - lb.row(static_cast<Eigen::Index>(j))).cwiseAbs().maxCoeff() > 0.0f);
    }
}

TEST_CASE("a zeroed output head predicts the uniform distribution") {
    LanguageModel lm(tiny_config(8), 5);
    lm.zero_output_head();
    const auto logp = lm.logprobs(lm.embed_text({4, 5, 6}));
    for (Eigen::Index i = 0; i < logp.rows(); ++i) {
        for (Eigen::Index k = 0; k < logp.cols(); ++k) {
            CHECK(logp(i, k) == doctest::Approx(-std::log(8.0)).epsilon(1e-6));
        }
    }
}

TEST_CASE("sequence probabilities over all length-2 targets sum to one (vocab 5)") {
    const LanguageModel lm(tiny_config(5), 6);
    const EmbeddingSequence prefix = lm.embed_text({4, 4});
    double total = 0.0;
    for (TokenId x = 0; x < 5; ++x) {
        for (TokenId y = 0; y < 5; ++y) {
            total += std::exp(lm.sequence_logprob(prefix, {x, y}));
        }
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-5));
}

TEST_CASE("teacher-forced score equals the chain rule computed one step at a time") {
    const LanguageModel lm(tiny_config(8), 7);
    std::mt19937_64 rng(8);
    for (int trial = 0; trial < 5; ++trial) {
        const TokenSequence prefix = random_tokens(rng, 4, 8);
        const TokenSequence target = random_tokens(rng, 5, 8);
        double literal = 0.0;
        TokenSequence ctx = prefix;
        for (TokenId t : target) {
            literal += lm.next_token_logprobs(lm.embed_text(ctx))(t);
            ctx.push_back(t);
        }
        CHECK(lm.sequence_logprob(lm.embed_text(prefix), target) == doctest::Approx(literal).epsilon(1e-6));

        LanguageModel::State st = lm.start();
        lm.extend(st, lm.embed_text(prefix).vectors);
        CHECK(lm.sequence_logprob(st, target) == doctest::Approx(literal).epsilon(1e-6));
    }
}

TEST_CASE("tape forward, full pass and incremental cache agree") {
    const LanguageModel lm(tiny_config(8), 9);
    std::mt19937_64 rng(10);
    const EmbeddingSequence e = lm.embed_text(random_tokens(rng, 9, 8));
    const auto full = lm.logprobs(e);

    ad::Tape<float> tape(false);
    const auto logits = tape.value(lm.forward(tape, tape.constant(e.vectors), false));
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const Eigen::RowVectorXf r = logits.row(i);
        const Eigen::RowVectorXf lp = r.array() - static_cast<float>(row_logsumexp(r));
        CHECK((lp - full.row(i)).cwiseAbs().maxCoeff() < 1e-4f);
    }

    LanguageModel::State st = lm.start();
    const auto first = lm.extend(st, e.vectors.topRows(4));
    const auto rest = lm.extend(st, e.vectors.bottomRows(5));
    CHECK(st.length == 9);
    CHECK((first - full.topRows(4)).cwiseAbs().maxCoeff() < 1e-4f);
    CHECK((rest - full.bottomRows(5)).cwiseAbs().maxCoeff() < 1e-4f);
    CHECK((st.last - full.row(8)).cwiseAbs().maxCoeff() < 1e-4f);
}

TEST_CASE("frozen forward passes gradient to inputs but not to parameters") {
    LanguageModel lm(tiny_config(8), 11);
    for (auto * p : lm.params()) {
        p->zero_grad();
    }
    std::mt19937_64 rng(12);
    const EmbeddingSequence e = lm.embed_text(random_tokens(rng, 6, 8));
    ad::Tape<float> tape;
    const ad::Var x = tape.leaf(e.vectors);
    const ad::Var logits = lm.forward(tape, x, false);
    const std::vector<ad::Index> rows = {0, 1, 2, 3, 4};
    const std::vector<int> targets = {4, 5, 6, 7, 4};
    tape.backward(tape.cross_entropy(logits, rows, targets));
    CHECK(tape.grad(x).cwiseAbs().maxCoeff() > 0.0f);
    // The last row predicts nothing scored, and later rows cannot influence earlier ones.
    CHECK(tape.grad(x).row(5).cwiseAbs().maxCoeff() == 0.0f);
    for (const auto * p : lm.params()) {
        CHECK(p->grad.cwiseAbs().maxCoeff() == 0.0f);
    }
}

TEST_CASE("input validation") {
    const LanguageModel lm(tiny_config(8), 13);
    CHECK_THROWS_AS(lm.embed_text({8}), VocabularyError);
    CHECK_THROWS_AS(lm.embed_text({-1}), VocabularyError);
    CHECK_THROWS_AS(lm.logprobs(lm.embed_text(TokenSequence(33, 4))), ContextOverflowError);
    LMConfig bad = tiny_config(8);
    bad.heads = 3;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("training: initial loss near log V, overfits a tiny set, deterministic") {
    std::mt19937_64 rng(14);
    std::vector<TokenSequence> data;
    for (int i = 0; i < 10; ++i) {
        data.push_back(random_tokens(rng, 12, 16));
        data.back()[0] = 4 + i;  // distinct first tokens make every sequence memorizable
    }
    LMTrainConfig t;
    t.steps = 1000;
    t.batch_size = 10;
    t.learning_rate = 3e-3;
    t.weight_decay = 0.0;
    t.log_every = 50;
    LMConfig cfg = tiny_config(16);
    cfg.embed_dim = 32;
    cfg.ff_dim = 64;
    const LMTrainResult r = train_lm(data, cfg, t, 15);
    CHECK(r.initial_loss == doctest::Approx(std::log(16.0)).epsilon(0.10));
    CHECK(lm_loss(r.model, data) < 0.1);
    CHECK_FALSE(r.records.empty());

    LMTrainConfig shorter = t;
    shorter.steps = 20;
    const auto a = train_lm(data, cfg, shorter, 16);
    const auto b = train_lm(data, cfg, shorter, 16);
    const auto c = train_lm(data, cfg, shorter, 17);
    CHECK(a.model.hash() == b.model.hash());
    CHECK(a.model.hash() != c.model.hash());
}

TEST_CASE("checkpoint round trip keeps the hash and vocabulary") {
    const Vocabulary v({"a", "b", "c", "d"});
    const LanguageModel lm(tiny_config(8), 18);
    const auto dir = test_util::temp_dir("lm_ckpt");
    lm.save(dir / "lm.ckpt", v);
    Vocabulary back;
    const LanguageModel loaded = LanguageModel::load(dir / "lm.ckpt", &back);
    CHECK(loaded.hash() == lm.hash());
    CHECK(back == v);
    CHECK(loaded.logprobs(loaded.embed_text({4, 5})) == lm.logprobs(lm.embed_text({4, 5})));
}

}  // TEST_SUITE
