#include "test_util.hpp"

#include "wavprompt/report.hpp"

#include <doctest.h>

#include <fstream>

using namespace wavprompt;

namespace {

std::vector<SweepRecord> grid_records(double base) {
    std::vector<SweepRecord> out;
    for (const char * task : {"gender", "color"}) {
        for (PromptMode mode : {PromptMode::audio, PromptMode::text}) {
            for (bool cal : {false, true}) {
                for (int k : {0, 2, 4}) {
                    for (int s = 0; s < 3; ++s) {
                        SweepRecord r;
                        r.task = task;
                        r.group = "captions";
                        r.rate = 8;
                        r.resource = "100pct";
                        r.mode = mode;
                        r.calibrated = cal;
                        r.shots = k;
                        r.seed = s;
                        r.n = 100;
                        r.correct = static_cast<int>(base * 100) + k + s + (cal ? 5 : 0);
                        r.accuracy = r.correct / 100.0;
                        r.chance = 0.5;
                        out.push_back(r);
                    }
                }
            }
        }
    }
    return out;
}

}  // namespace

TEST_SUITE("report") {

TEST_CASE("report sections, chance row and figures") {
    ReportInput in;
    in.records = grid_records(0.6);
    const Report r = render_report(in);
    CHECK(r.warnings.empty());
    for (const char * section : {"Rate table", "chance", "WavPrompt", "gender", "color"}) {
        CHECK(r.markdown.find(section) != std::string::npos);
    }
    CHECK_FALSE(r.figures.empty());
    for (const auto & [name, svg] : r.figures) {
        CHECK(name.size() > 4);
        CHECK(name.substr(name.size() - 4) == ".svg");
        CHECK(svg.rfind("<svg", 0) == 0);
        CHECK(svg.find("</svg>") != std::string::npos);
        CHECK(r.markdown.find(name) != std::string::npos);
    }
    // Calibrated audio best for gender: shots 4 has the highest mean (0.6 + 4 + 1 + 5 points).
    const ConditionSummary * c = r.summary.find("gender", GridPoint{}, PromptMode::audio, true);
    REQUIRE(c != nullptr);
    CHECK(c->best == doctest::Approx(0.70));
    CHECK(c->best_shots == 4);
}

TEST_CASE("incomplete conditions are dropped with a warning, others still reported") {
    ReportInput in;
    in.records = grid_records(0.6);
    in.records.pop_back();
    const Report r = render_report(in);
    CHECK_FALSE(r.warnings.empty());
    CHECK(r.markdown.find("Warnings") != std::string::npos);
    CHECK(r.summary.conditions.size() == 7);
}

TEST_CASE("report files are byte-reproducible and loading validates the directory") {
    const auto dir = test_util::temp_dir("report");
    {
        RecordStore st(dir / "records.jsonl");
        for (const auto & rec : grid_records(0.55)) {
            st.append(rec);
        }
    }
    write_report(render_report(load_report_input(dir)), dir);
    const std::string first = test_util::read_file(dir / "report.md");
    const std::string summary = test_util::read_file(dir / "summary.json");
    write_report(render_report(load_report_input(dir)), dir);
    CHECK(test_util::read_file(dir / "report.md") == first);
    CHECK(test_util::read_file(dir / "summary.json") == summary);
    CHECK(std::filesystem::exists(dir / "figures"));

    const auto empty = test_util::temp_dir("report_empty");
    CHECK_THROWS_AS(load_report_input(empty), IntegrityError);
    std::ofstream(empty / "records.jsonl") << "garbage\n";
    CHECK_THROWS_AS(load_report_input(empty), IntegrityError);
}

TEST_CASE("transcription reports round trip and feed the naive comparison") {
    const auto dir = test_util::temp_dir("report_asr");
    TranscriptionReport t;
    t.task = "gender";
    t.error_rate = 0.25;
    t.items = 40;
    append_transcription_report(dir / "transcription.jsonl", t);
    const auto back = read_transcription_reports(dir / "transcription.jsonl");
    REQUIRE(back.size() == 1);
    CHECK(back[0].error_rate == 0.25);
    CHECK(back[0].point.tag() == "r8_100pct");

    const Summary s = aggregate(grid_records(0.6));
    const auto rows = compare_naive(s, back);
    REQUIRE(rows.size() == 2);
    for (const NaiveRow & row : rows) {
        CHECK(row.wavprompt == doctest::Approx(0.70));
        CHECK(row.naive == doctest::Approx(0.70));
        if (row.task == "gender") {
            REQUIRE(row.transcription_error.has_value());
            CHECK(*row.transcription_error == 0.25);
        }
    }
}

}  // TEST_SUITE
