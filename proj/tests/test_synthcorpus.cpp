#include "test_util.hpp"

#include "wavprompt/corpus.hpp"
#include "wavprompt/synth.hpp"

#include <doctest.h>

#include <cmath>
#include <algorithm>
#include <fstream>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

using namespace wavprompt;

namespace {

// Direct O(n^2) DFT magnitude peak; independent of the FFT used by the library.
double dft_peak_hz(const std::vector<float> & x, int sample_rate) {
    const size_t n = x.size();
    size_t best = 1;
    double best_mag = -1.0;
    for (size_t k = 1; k < n / 2; ++k) {
        double re = 0.0, im = 0.0;
        for (size_t i = 0; i < n; ++i) {
            const double a = 2.0 * std::numbers::pi * static_cast<double>(k * i % n) / static_cast<double>(n);
            re += x[i] * std::cos(a);
            im -= x[i] * std::sin(a);
        }
        const double mag = re * re + im * im;
        if (mag > best_mag) {
            best_mag = mag;
            best = k;
        }
    }
    return static_cast<double>(best) * sample_rate / static_cast<double>(n);
}

// Log band power averaged over frames, via Goertzel at band centres.
std::vector<double> spectral_features(const Waveform & w) {
    const size_t frame = 256;
    const int bands = 32;
    std::vector<double> f(bands, 0.0);
    size_t frames = 0;
    for (size_t start = 0; start + frame <= w.size(); start += frame) {
        for (int b = 0; b < bands; ++b) {
            const double hz = 100.0 * std::pow(70.0, b / static_cast<double>(bands - 1));  // 100 Hz .. 7 kHz
            const double c = 2.0 * std::cos(2.0 * std::numbers::pi * hz / w.sample_rate);
            double s1 = 0.0, s2 = 0.0;
            for (size_t i = 0; i < frame; ++i) {
                const double s = w.samples[start + i] + c * s1 - s2;
                s2 = s1;
                s1 = s;
            }
            f[b] += s1 * s1 + s2 * s2 - c * s1 * s2;
        }
        ++frames;
    }
    for (double & v : f) {
        v = std::log(v / static_cast<double>(frames) + 1e-9);
    }
    return f;
}

Vocabulary eight() { return Vocabulary({"a", "b", "c", "d"}); }

}  // namespace

TEST_SUITE("synthcorpus") {

TEST_CASE("vocabulary has dense ids and distinct specials") {
    const Vocabulary v = Vocabulary::standard();
    CHECK(v.size() >= 8);
    std::set<TokenId> specials = {Vocabulary::kPad, Vocabulary::kBeginAnswer, Vocabulary::kEndAnswer,
                                  Vocabulary::kSilence};
    CHECK(specials.size() == 4);
    for (TokenId i = 0; static_cast<size_t>(i) < v.size(); ++i) {
        CHECK(v.id(v.symbol(i)) == i);
        CHECK(v.is_special(i) == (specials.count(i) == 1));
    }
    CHECK_THROWS_AS(v.encode("no-such-word"), VocabularyError);
}

TEST_CASE("synthesized segment lengths and determinism") {
    const Vocabulary v = Vocabulary::standard();
    SynthConfig cfg;
    CHECK(synthesize_waveform({}, v, cfg).size() == 0);
    const TokenId t = Vocabulary::kNumSpecial + 3;
    const Waveform w = synthesize_waveform({t, t}, v, cfg);
    REQUIRE(w.size() == 8000);
    for (size_t i = 0; i < 4000; ++i) {
        REQUIRE(w.samples[i] == w.samples[4000 + i]);
    }
    CHECK_THROWS_AS(synthesize_waveform({Vocabulary::kPad}, v, cfg), VocabularyError);
    CHECK_THROWS_AS(synthesize_waveform({static_cast<TokenId>(v.size())}, v, cfg), VocabularyError);
}

TEST_CASE("first content token peaks at its frequency (direct DFT)") {
    const Vocabulary v = Vocabulary::standard();
    SynthConfig cfg;
    const TokenId first = Vocabulary::kNumSpecial;
    const Waveform w = synthesize_waveform({first}, v, cfg);
    REQUIRE(w.size() == 4000);
    CHECK(dft_peak_hz(w.samples, cfg.sample_rate) == doctest::Approx(cfg.token_frequency(first)).epsilon(0.005));
}

TEST_CASE("Nyquist violation is a configuration error naming the constraint") {
    SynthConfig cfg;
    cfg.frequency_step = 1000.0;
    try {
        cfg.validate(Vocabulary::standard().size());
        FAIL("expected ConfigError");
    } catch (const ConfigError & e) {
        CHECK(std::string(e.what()).find("Nyquist") != std::string::npos);
    }
}

TEST_CASE("round trip is exhaustive for length <= 3 over a vocabulary of 8") {
    const Vocabulary v = eight();
    REQUIRE(v.size() == 8);
    SynthConfig cfg;
    std::vector<TokenSequence> all = {{}};
    size_t checked = 0;
    for (int len = 1; len <= 3; ++len) {
        std::vector<TokenSequence> next;
        for (const auto & s : all) {
            if (static_cast<int>(s.size()) != len - 1) {
                continue;
            }
            for (TokenId t = Vocabulary::kNumSpecial; static_cast<size_t>(t) < v.size(); ++t) {
                TokenSequence e = s;
                e.push_back(t);
                next.push_back(e);
            }
        }
        for (const auto & s : next) {
            REQUIRE(oracle_decode(synthesize_waveform(s, v, cfg), v, cfg) == s);
            ++checked;
        }
        all.insert(all.end(), next.begin(), next.end());
    }
    CHECK(checked == 4 + 16 + 64);
}

TEST_CASE("round trip on random sequences over the standard vocabulary") {
    const Vocabulary v = Vocabulary::standard();
    SynthConfig cfg;
    std::mt19937_64 rng(11);
    std::uniform_int_distribution<TokenId> tok(Vocabulary::kNumSpecial, static_cast<TokenId>(v.size() - 1));
    std::uniform_int_distribution<int> len(1, 8);
    for (int i = 0; i < 100; ++i) {
        TokenSequence s(static_cast<size_t>(len(rng)));
        for (auto & t : s) {
            t = tok(rng);
        }
        const Waveform w = synthesize_waveform(s, v, cfg);
        REQUIRE(oracle_decode(w, v, cfg) == s);
        for (float x : w.samples) {
            REQUIRE(std::abs(x) <= 1.0f);
        }
    }
}

TEST_CASE("oracle decoding: silence and framing") {
    const Vocabulary v = Vocabulary::standard();
    SynthConfig cfg;
    Waveform z = silence(0.5, cfg.sample_rate);
    CHECK(oracle_decode(z, v, cfg) == TokenSequence{Vocabulary::kSilence, Vocabulary::kSilence});
    const TokenId five = Vocabulary::kNumSpecial + 5;
    CHECK(oracle_decode(synthesize_waveform({five}, v, cfg), v, cfg) == TokenSequence{five});
    z.samples.pop_back();
    CHECK_THROWS_AS(oracle_decode(z, v, cfg), FramingError);
}

TEST_CASE("sound classes: determinism, click positions, linear separability") {
    SynthConfig cfg;
    const auto classes = standard_sound_classes();
    CHECK(classes.size() == 9);
    for (const SoundClass & c : classes) {
        const Waveform a = synthesize_sound(c, cfg, 7);
        const Waveform b = synthesize_sound(c, cfg, 7);
        CHECK(a.samples == b.samples);
        CHECK(a.size() == static_cast<size_t>(cfg.clip_duration * cfg.sample_rate));
    }
    CHECK_THROWS_AS(synthesize_sound("unicorn", classes, cfg, 1), ConfigError);

    // Click trains are silent between clicks.
    const SoundClass & hen = classes[7];
    REQUIRE(hen.kind == GeneratorKind::click_train);
    const Waveform clicks = synthesize_sound(hen, cfg, 3);
    size_t nonzero = 0;
    for (float x : clicks.samples) {
        nonzero += x != 0.0f;
    }
    // 8 Hz over 2 s, with at most 3% rate jitter.
    CHECK(nonzero >= 15);
    CHECK(nonzero <= 17);

    // Nearest-centroid (a linear rule) on log band powers, 200 clips in total.
    const int per_class = 22;
    std::vector<std::vector<std::vector<double>>> feats(classes.size());
    for (size_t c = 0; c < classes.size(); ++c) {
        for (int s = 0; s < per_class; ++s) {
            feats[c].push_back(spectral_features(synthesize_sound(classes[c], cfg, 1000 + static_cast<std::uint64_t>(s))));
        }
    }
    const int train = per_class / 2;
    std::vector<std::vector<double>> centroid(classes.size(), std::vector<double>(feats[0][0].size(), 0.0));
    for (size_t c = 0; c < classes.size(); ++c) {
        for (int s = 0; s < train; ++s) {
            for (size_t d = 0; d < centroid[c].size(); ++d) {
                centroid[c][d] += feats[c][static_cast<size_t>(s)][d] / train;
            }
        }
    }
    int correct = 0, total = 0;
    for (size_t c = 0; c < classes.size(); ++c) {
        for (int s = train; s < per_class; ++s) {
            size_t best = 0;
            double best_d = 1e300;
            for (size_t k = 0; k < classes.size(); ++k) {
                double d = 0.0;
                for (size_t j = 0; j < centroid[k].size(); ++j) {
                    const double e = feats[c][static_cast<size_t>(s)][j] - centroid[k][j];
                    d += e * e;
                }
                if (d < best_d) {
                    best_d = d;
                    best = k;
                }
            }
            correct += best == c;
            ++total;
        }
    }
    CHECK(static_cast<double>(correct) / total > 0.95);
}

TEST_CASE("corpus: nested exact resource subsets, disjoint splits, labels from rule") {
    const Corpus & c = test_util::small_corpus();
    const CorpusSpec & spec = c.spec();
    const size_t n = static_cast<size_t>(spec.train_utterances);
    std::vector<std::set<std::string>> sets;
    for (double f : spec.resource_fractions) {
        const auto sub = c.resource_subset(resource_tag(f));
        CHECK(sub.size() == static_cast<size_t>(std::floor(f * static_cast<double>(n))));
        std::set<std::string> ids;
        for (const auto * u : sub) {
            ids.insert(u->id);
            CHECK(u->split == Split::train);
        }
        sets.push_back(ids);
    }
    for (size_t i = 0; i + 1 < sets.size(); ++i) {
        for (const auto & id : sets[i]) {
            CHECK(sets[i + 1].count(id) == 1);
        }
    }

    // Recount labels from tokens with the rule, independently of the stored labels.
    for (const TaskSpec & t : spec.tasks) {
        for (Split s : {Split::train, Split::test}) {
            std::map<std::string, int> recount;
            for (const Utterance & u : c.utterances()) {
                if (u.split != s) {
                    continue;
                }
                std::optional<std::string> label;
                if (t.kind == TaskKind::keyword && u.kind == UtteranceKind::speech) {
                    std::vector<std::string> hits;
                    for (const auto & [kw, lab] : t.label_rule) {
                        const TokenId id = spec.vocab.id(kw);
                        if (std::find(u.tokens.begin(), u.tokens.end(), id) != u.tokens.end()) {
                            hits.push_back(lab);
                        }
                    }
                    if (hits.size() == 1) {
                        label = hits[0];
                    }
                } else if (t.kind == TaskKind::sound && u.kind == UtteranceKind::sound) {
                    for (const auto & [cls, lab] : t.label_rule) {
                        if (cls == u.sound_class) {
                            label = lab;
                        }
                    }
                }
                if (label) {
                    ++recount[*label];
                    CHECK(u.labels.at(t.name) == *label);
                } else {
                    CHECK(u.labels.count(t.name) == 0);
                }
            }
            const auto report = label_balance_report(c);
            for (const std::string & a : t.answer_set) {
                CHECK(report[t.name][to_string(s)][a].get<int>() == recount[a]);
            }
        }
    }
    c.check_integrity();
}

TEST_CASE("default corpus has resource subsets of 100, 200 and 2000") {
    const Corpus c = generate_corpus(CorpusSpec{}, 1);
    CHECK(c.resource_subset("5pct").size() == 100);
    CHECK(c.resource_subset("10pct").size() == 200);
    CHECK(c.resource_subset("100pct").size() == 2000);
}

TEST_CASE("corpus: speech waveform length equals tokens x segment") {
    const Corpus & c = test_util::small_corpus();
    for (const Utterance & u : c.utterances()) {
        if (u.kind == UtteranceKind::speech) {
            REQUIRE(u.waveform.size() == u.tokens.size() * c.spec().synth.segment_length());
        }
    }
}

TEST_CASE("corpus: same spec and seed give byte-identical manifests") {
    CorpusSpec spec = test_util::small_spec();
    const auto d1 = test_util::temp_dir("corpus_a");
    const auto d2 = test_util::temp_dir("corpus_b");
    build_corpus(spec, 5, d1);
    build_corpus(spec, 5, d2);
    CHECK(test_util::read_file(d1 / "manifest.jsonl") == test_util::read_file(d2 / "manifest.jsonl"));
    const Corpus back = load_corpus(d1);
    CHECK(back.utterances().size() == generate_corpus(spec, 5).utterances().size());
}

TEST_CASE("corpus: overlapping splits are an integrity error") {
    const Corpus & c = test_util::small_corpus();
    std::vector<Utterance> us = c.utterances();
    Utterance dup = us.front();
    dup.split = dup.split == Split::train ? Split::test : Split::train;
    us.push_back(dup);
    CHECK_THROWS_AS(Corpus(c.spec(), us, c.resources()).check_integrity(), IntegrityError);
}

}  // TEST_SUITE
