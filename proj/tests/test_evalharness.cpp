#include "test_util.hpp"

#include "wavprompt/evalharness.hpp"

#include <doctest.h>

#include <cmath>
#include <random>
#include <set>

using namespace wavprompt;

namespace {

// 300 items of class 0 then 200 of class 1; the Utterance objects only carry ids.
struct SyntheticPool {
    std::vector<Utterance> utts;
    std::vector<LabeledItem> items;

    SyntheticPool(int a, int b) {
        utts.resize(static_cast<size_t>(a + b));
        for (int i = 0; i < a + b; ++i) {
            utts[static_cast<size_t>(i)].id = "u" + std::to_string(i);
        }
        for (int i = 0; i < a + b; ++i) {
            items.push_back({&utts[static_cast<size_t>(i)], i < a ? 0 : 1});
        }
    }
};

EvalConfig tiny_eval() {
    EvalConfig c;
    c.tasks = {"gender", "animal_verbs"};
    c.shots = {0, 2};
    c.batch_size = 12;
    c.seeds = 2;
    c.min_balanced = 4;
    c.max_transcript_len = 4;
    return c;
}

SweepRecord make_record(const std::string & task, const std::string & group, int shots, int seed, bool cal,
                        PromptMode mode, double acc) {
    SweepRecord r;
    r.task = task;
    r.group = group;
    r.rate = 8;
    r.resource = "100pct";
    r.shots = shots;
    r.seed = seed;
    r.calibrated = cal;
    r.mode = mode;
    r.n = 100;
    r.correct = static_cast<int>(std::lround(acc * 100));
    r.accuracy = acc;
    r.chance = 0.5;
    return r;
}

}  // namespace

TEST_SUITE("evalharness") {

TEST_CASE("balanced batch from a 300/200 pool with n = 250") {
    SyntheticPool pool(300, 200);
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const BalancedBatch b = build_balanced_batch(pool.items, 2, 250, seed);
        int counts[2] = {0, 0};
        std::set<std::string> ids;
        for (const LabeledItem & it : b.items) {
            ++counts[it.label];
            ids.insert(it.utt->id);
            // Labels agree with the pool layout.
            CHECK(it.label == (std::stoi(it.utt->id.substr(1)) < 300 ? 0 : 1));
        }
        CHECK(counts[0] == counts[1]);
        CHECK(b.items.size() % 2 == 0);
        CHECK(ids.size() == b.items.size());
        // Roughly 100 of the second class are drawn among 250 out of 500.
        CHECK(b.items.size() > 150);
        CHECK(b.items.size() <= 250);
        CHECK_FALSE(b.small);
    }
    const BalancedBatch x = build_balanced_batch(pool.items, 2, 250, 7);
    const BalancedBatch y = build_balanced_batch(pool.items, 2, 250, 7);
    const BalancedBatch z = build_balanced_batch(pool.items, 2, 250, 8);
    auto ids = [](const BalancedBatch & b) {
        std::vector<std::string> v;
        for (const auto & it : b.items) {
            v.push_back(it.utt->id);
        }
        return v;
    };
    CHECK(ids(x) == ids(y));
    CHECK(ids(x) != ids(z));
}

TEST_CASE("balanced accuracy of trivial predictors") {
    SyntheticPool pool(300, 200);
    const BalancedBatch b = build_balanced_batch(pool.items, 2, 250, 3);
    CHECK(batch_accuracy(b.items, [](const LabeledItem &) { return 0; }) == 0.5);
    CHECK(batch_accuracy(b.items, [](const LabeledItem &) { return 1; }) == 0.5);
    CHECK(batch_accuracy(b.items, [](const LabeledItem & it) { return it.label; }) == 1.0);
}

TEST_CASE("balancing errors and small batches") {
    SyntheticPool only_a(30, 0);
    CHECK_THROWS_AS(build_balanced_batch(only_a.items, 2, 20, 1), ConfigError);
    SyntheticPool tiny(3, 3);
    CHECK(build_balanced_batch(tiny.items, 2, 6, 1, 10).small);
    std::vector<LabeledItem> bad = tiny.items;
    bad[0].label = 5;
    CHECK_THROWS_AS(build_balanced_batch(bad, 2, 6, 1), IntegrityError);
}

TEST_CASE("demonstrations avoid the batch and are reproducible") {
    SyntheticPool pool(60, 40);
    const BalancedBatch b = build_balanced_batch(pool.items, 2, 50, 11);
    std::set<std::string> exclude;
    for (const auto & it : b.items) {
        exclude.insert(it.utt->id);
    }
    for (int k : {0, 2, 4, 10}) {
        const auto d = sample_demonstrations(pool.items, k, 12, exclude);
        CHECK(d.size() == static_cast<size_t>(k));
        std::set<std::string> seen;
        for (const auto & it : d) {
            CHECK(exclude.count(it.utt->id) == 0);
            seen.insert(it.utt->id);
        }
        CHECK(seen.size() == d.size());
        const auto again = sample_demonstrations(pool.items, k, 12, exclude);
        for (size_t i = 0; i < d.size(); ++i) {
            CHECK(again[i].utt == d[i].utt);
        }
    }
    CHECK(batch_seed(0, "gender", 0) != batch_seed(0, "gender", 1));
    CHECK(batch_seed(0, "gender", 0) != batch_seed(0, "sex", 0));
    CHECK(demo_seed(0, "gender", 0, 2) != demo_seed(0, "gender", 0, 4));
}

TEST_CASE("labeled pools follow the task rule; nine-way chance is 1/9") {
    const Corpus & c = test_util::small_corpus();
    const TaskSpec & animals = c.spec().task("animal_verbs");
    CHECK(animals.chance() == doctest::Approx(1.0 / 9.0));
    const auto pool = labeled_pool(c, animals);
    CHECK(pool.size() == 9 * static_cast<size_t>(c.spec().sound_test_per_class));
    for (const auto & it : pool) {
        CHECK(animals.answer_set[static_cast<size_t>(it.label)] == it.utt->labels.at("animal_verbs"));
        CHECK(it.utt->split == Split::test);
    }
}

TEST_CASE("record keys separate every condition field") {
    SweepRecord base = make_record("gender", "captions", 2, 0, true, PromptMode::audio, 0.5);
    std::set<std::string> keys = {base.key()};
    std::vector<SweepRecord> variants(9, base);
    variants[0].task = "sex";
    variants[1].rate = 16;
    variants[2].resource = "5pct";
    variants[3].multitask = true;
    variants[4].shots = 4;
    variants[5].seed = 1;
    variants[6].mode = PromptMode::text;
    variants[7].calibrated = false;
    variants[8].noise_std = 0.05;
    for (const auto & v : variants) {
        keys.insert(v.key());
    }
    CHECK(keys.size() == 10);
    SweepRecord oracle = base;
    oracle.mode = PromptMode::text;
    SweepRecord asr = oracle;
    oracle.transcripts = TranscriptSource::oracle;
    CHECK(oracle.key() != asr.key());
    CHECK(SweepRecord::from_json(base.to_json()).key() == base.key());
}

TEST_CASE("aggregation agrees with an independent reduction") {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(0.3, 0.9);
    std::vector<SweepRecord> records;
    const std::vector<std::string> tasks = {"t1", "t2", "t3"};
    const std::vector<int> shots = {0, 2, 4};
    std::map<std::pair<std::string, bool>, std::map<int, std::vector<double>>> values;
    for (const auto & t : tasks) {
        for (bool cal : {false, true}) {
            for (int k : shots) {
                for (int s = 0; s < 4; ++s) {
                    const double a = std::round(u(rng) * 100) / 100;
                    records.push_back(make_record(t, "g", k, s, cal, PromptMode::audio, a));
                    values[{t, cal}][k].push_back(a);
                }
            }
        }
    }
    std::shuffle(records.begin(), records.end(), rng);
    const Summary s = aggregate(records);
    CHECK(s.conditions.size() == 6);
    for (bool cal : {false, true}) {
        double group_total = 0.0;
        for (const auto & t : tasks) {
            const ConditionSummary * c = s.find(t, GridPoint{}, PromptMode::audio, cal);
            REQUIRE(c != nullptr);
            double best = -1.0;
            int best_k = -1;
            for (int k : shots) {
                const auto & v = values[{t, cal}][k];
                double m = 0.0;
                for (double x : v) {
                    m += x;
                }
                m /= static_cast<double>(v.size());
                double ss = 0.0;
                for (double x : v) {
                    ss += (x - m) * (x - m);
                }
                const double sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
                const CurvePoint * cp = nullptr;
                for (const auto & p : c->curve) {
                    if (p.shots == k) {
                        cp = &p;
                    }
                }
                REQUIRE(cp != nullptr);
                CHECK(cp->mean == doctest::Approx(m).epsilon(1e-12));
                CHECK(cp->std == doctest::Approx(sd).epsilon(1e-12));
                CHECK(cp->seeds == 4);
                if (m > best) {
                    best = m;
                    best_k = k;
                }
            }
            CHECK(c->best == doctest::Approx(best).epsilon(1e-12));
            CHECK(c->best_shots == best_k);
            group_total += best;
        }
        bool found = false;
        for (const GroupSummary & g : s.groups) {
            if (g.calibrated == cal) {
                found = true;
                CHECK(g.mean_best == doctest::Approx(group_total / 3.0).epsilon(1e-12));
                CHECK(g.tasks.size() == 3);
            }
        }
        CHECK(found);
    }
}

TEST_CASE("ties in best-over-shots go to fewer shots") {
    std::vector<SweepRecord> rs = {make_record("t", "g", 0, 0, true, PromptMode::audio, 0.6),
                                   make_record("t", "g", 2, 0, true, PromptMode::audio, 0.7),
                                   make_record("t", "g", 4, 0, true, PromptMode::audio, 0.7)};
    const Summary s = aggregate(rs);
    CHECK(s.conditions.at(0).best_shots == 2);
    CHECK(s.conditions.at(0).curve.at(0).std == 0.0);
}

TEST_CASE("missing cells are reported and block aggregation") {
    std::vector<SweepRecord> rs;
    for (int k : {0, 2}) {
        for (int s = 0; s < 3; ++s) {
            rs.push_back(make_record("t", "g", k, s, false, PromptMode::audio, 0.5));
        }
    }
    CHECK(missing_cells(rs).empty());
    rs.erase(rs.begin() + 4);  // shots 2, seed 1
    const auto miss = missing_cells(rs);
    REQUIRE(miss.size() == 1);
    CHECK(miss[0].find("shots=2") != std::string::npos);
    CHECK(miss[0].find("seed=1") != std::string::npos);
    try {
        aggregate(rs);
        FAIL("expected IntegrityError");
    } catch (const IntegrityError & e) {
        CHECK(std::string(e.what()).find("shots=2 seed=1") != std::string::npos);
    }
}

TEST_CASE("record store: append, reload, dedupe, corrupt lines, compact") {
    const auto dir = test_util::temp_dir("store");
    const auto path = dir / "records.jsonl";
    {
        RecordStore st(path);
        st.append(make_record("t", "g", 0, 0, true, PromptMode::audio, 0.5));
        st.append(make_record("t", "g", 2, 0, true, PromptMode::audio, 0.6));
        st.append(make_record("t", "g", 2, 0, true, PromptMode::audio, 0.7));
        CHECK(st.records().size() == 2);
    }
    {
        std::ofstream out(path, std::ios::app);
        out << "{not json\n";
    }
    RecordStore st(path);
    CHECK(st.records().size() == 2);
    CHECK(st.load_errors().size() == 1);
    CHECK(st.contains(make_record("t", "g", 2, 0, true, PromptMode::audio, 0).key()));
    for (const auto & r : st.records()) {
        if (r.shots == 2) {
            CHECK(r.accuracy == 0.7);
        }
    }
    st.compact();
    std::vector<std::string> errors;
    const auto back = RecordStore::read(path, &errors);
    CHECK(errors.empty());
    REQUIRE(back.size() == 2);
    CHECK(back[0].key() < back[1].key());
}

TEST_CASE("evaluation config: json round trip and validation") {
    const EvalConfig c = tiny_eval();
    CHECK(EvalConfig::from_json(c.to_json()).to_json() == c.to_json());
    nlohmann::json j = c.to_json();
    j["bogus"] = 1;
    CHECK_THROWS_AS(EvalConfig::from_json(j), ConfigError);
    EvalConfig bad = c;
    bad.seeds = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = c;
    bad.shots = {10};
    bad.batch_size = 19;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    CHECK(GridPoint::from_tag("r16_5pct_mt").tag() == "r16_5pct_mt");
    CHECK(GridPoint::from_tag("r16_5pct_mt").multitask);
    CHECK(GridPoint::from_tag("r4_100pct").rate == 4);
    CHECK_THROWS_AS(GridPoint::from_tag("x"), ConfigError);
}

TEST_CASE("evaluator cells: keys, counts, determinism, idempotent sweep") {
    const Corpus & c = test_util::small_corpus();
    const LanguageModel lm(test_util::tiny_lm_config(), 31);
    const AudioEncoder enc(test_util::tiny_audio_encoder(), 32);
    const EvalConfig cfg = tiny_eval();
    const TaskSpec & task = c.spec().task("gender");

    Evaluator a(c, lm, enc, GridPoint{}, cfg);
    Evaluator b(c, lm, enc, GridPoint{}, cfg);
    std::vector<nlohmann::json> episodes;
    const auto ra = a.run_cell(task, 2, 0, &episodes);
    const auto rb = b.run_cell(task, 2, 0);
    const auto keys = cell_keys(task, GridPoint{}, 2, 0, cfg);
    REQUIRE(ra.size() == 4);  // two modes, raw and calibrated
    REQUIRE(keys.size() == ra.size());
    for (size_t i = 0; i < ra.size(); ++i) {
        CHECK(ra[i].key() == rb[i].key());
        CHECK(ra[i].accuracy == rb[i].accuracy);
        CHECK(std::find(keys.begin(), keys.end(), ra[i].key()) != keys.end());
        CHECK(ra[i].n % 2 == 0);
        CHECK(ra[i].accuracy == doctest::Approx(static_cast<double>(ra[i].correct) / ra[i].n));
        CHECK(ra[i].chance == 0.5);
    }
    CHECK(episodes.size() == static_cast<size_t>(ra[0].n) * 2);
    CHECK(a.run_condition(task, 2, 0, PromptMode::audio, true) ==
          std::find_if(ra.begin(), ra.end(), [](const SweepRecord & r) {
              return r.mode == PromptMode::audio && r.calibrated;
          })->accuracy);

    const auto dir = test_util::temp_dir("sweep");
    std::map<std::string, AudioEncoder> encoders = {{GridPoint{}.tag(), enc}};
    RecordStore store(dir / "records.jsonl");
    run_sweep(c, lm, encoders, cfg, store);
    const size_t expected = cfg.tasks.size() * cfg.shots.size() * static_cast<size_t>(cfg.seeds) * 4;
    CHECK(store.records().size() == expected);
    const std::string before = test_util::read_file(dir / "records.jsonl");
    run_sweep(c, lm, encoders, cfg, store);
    CHECK(test_util::read_file(dir / "records.jsonl") == before);
    CHECK_NOTHROW(aggregate(store.records()));

    EvalConfig other = cfg;
    other.grid = {GridPoint{16, "5pct", false}};
    try {
        run_sweep(c, lm, encoders, other, store);
        FAIL("expected ConfigError");
    } catch (const ConfigError & e) {
        CHECK(std::string(e.what()).find("r8_100pct") != std::string::npos);
    }
}

}  // TEST_SUITE
