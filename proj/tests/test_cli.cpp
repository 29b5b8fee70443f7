#include "test_util.hpp"

#include "wavprompt/cli.hpp"
#include "wavprompt/config.hpp"
#include "wavprompt/report.hpp"

#include <doctest.h>

#include <fstream>
#include <sstream>

using namespace wavprompt;
namespace fs = std::filesystem;

namespace {

struct CliResult {
    int code = 0;
    std::string out;
    std::string err;
};

CliResult cli(std::vector<std::string> args) {
    args.insert(args.begin(), "wavprompt");
    std::vector<const char *> argv;
    for (const auto & a : args) {
        argv.push_back(a.c_str());
    }
    std::ostringstream out, err;
    const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

// A pipeline small enough to run end to end in seconds.
nlohmann::json tiny_run_config() {
    return {
        {"corpus", {{"train_utterances", 60}, {"test_utterances", 40}, {"sound_train_per_class", 4},
                    {"sound_test_per_class", 4}}},
        {"text", {{"sequences", 200}}},
        {"lm", {{"embed_dim", 16}, {"layers", 1}, {"heads", 2}, {"ff_dim", 32}}},
        {"lm_train", {{"steps", 10}, {"batch_size", 4}, {"log_every", 5}}},
        {"encoder",
         {{"conv", {{{"channels", 8}, {"kernel", 16}, {"stride", 8}},
                    {{"channels", 8}, {"kernel", 10}, {"stride", 5}},
                    {{"channels", 8}, {"kernel", 16}, {"stride", 8}}}},
          {"dim", 8},
          {"layers", 1},
          {"heads", 2},
          {"ff_dim", 16}}},
        {"pretrain", {{"steps", 4}, {"batch_size", 2}, {"heldout_utterances", 4}, {"checkpoint_every", 0}, {"log_every", 2}}},
        {"eval", {{"tasks", {"gender", "animal_verbs"}}, {"shots", {0, 2}}, {"batch_size", 12}, {"seeds", 2},
                  {"min_balanced", 4}, {"max_transcript_len", 4}}},
    };
}

fs::path write_config(const fs::path & dir) {
    const fs::path p = dir / "tiny.json";
    std::ofstream(p) << tiny_run_config().dump(2);
    return p;
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("config: overrides, unknown keys and the reference page") {
    RunConfig c = RunConfig::defaults();
    c.set("eval.seeds=3");
    c.set("pretrain.asr_prompt=what did the speaker say ?");
    CHECK(c.eval().seeds == 3);
    CHECK_THROWS_AS(c.set("eval.nonsense=1"), ConfigError);
    CHECK_THROWS_AS(c.merge({{"lm", {{"depth", 3}}}}), ConfigError);
    const GridPoint p = GridPoint::from_tag("r16_5pct_mt");
    CHECK(c.encoder(p, 128).downsample_rate == 16);
    CHECK(c.pretrain(p).resource == "5pct");
    CHECK(c.pretrain(p).multitask);
    // Every grid point starts from the same encoder initialization.
    CHECK(c.pretrain(p).seed == c.pretrain(GridPoint::from_tag("r8_100pct")).seed);
    const std::string ref = config_reference();
    for (const char * key : {"eval.shots", "pretrain.learning_rate", "corpus.synth.tone_duration", "lm.embed_dim"}) {
        CHECK(ref.find(key) != std::string::npos);
    }
}

TEST_CASE("exit codes for user errors") {
    const auto dir = test_util::temp_dir("cli_errors");
    CHECK(cli({}).code == kExitUserError);
    CHECK(cli({"no-such-command"}).code == kExitUserError);
    CHECK(cli({"config", "--set", "eval.bogus=1"}).code == kExitUserError);
    const CliResult nyq = cli({"gen-corpus", "--out", dir.string(), "--set", "corpus.synth.frequency_step=1000"});
    CHECK(nyq.code == kExitUserError);
    CHECK(nyq.err.find("Nyquist") != std::string::npos);
    CHECK(cli({"report", (dir / "empty").string()}).code == kExitUserError);
    fs::create_directories(dir / "empty");
    CHECK(cli({"report", (dir / "empty").string()}).code == kExitUserError);
    CHECK(cli({"pretrain", "--out", dir.string()}).code == kExitUserError);  // no corpus or LM yet
    CHECK(cli({"config", "--reference"}).code == kExitOk);
}

TEST_CASE("pipeline end to end: outputs, idempotence, reproducible report, frozen-LM contract") {
    const auto dir = test_util::temp_dir("cli_pipeline");
    const std::string cfg = write_config(dir).string();
    const std::string out = (dir / "run").string();
    auto run = [&](std::vector<std::string> args) {
        args.insert(args.end(), {"--config", cfg, "--out", out});
        const CliResult r = cli(args);
        INFO(args[0] << ": " << r.err);
        return r;
    };

    REQUIRE(run({"gen-corpus"}).code == kExitOk);
    CHECK(fs::exists(fs::path(out) / "corpus" / "manifest.jsonl"));
    REQUIRE(run({"train-lm"}).code == kExitOk);
    const fs::path lm = fs::path(out) / "lm" / "lm.ckpt";
    CHECK(fs::exists(lm));
    CHECK(fs::exists(fs::path(out) / "lm" / "lm.ckpt.sha256"));
    REQUIRE(run({"pretrain"}).code == kExitOk);
    const fs::path enc = fs::path(out) / "encoders" / "r8_100pct.ckpt";
    CHECK(fs::exists(enc));
    CHECK_FALSE(fs::exists(fs::path(out) / "encoders" / "r8_100pct.ckpt.partial"));
    REQUIRE(run({"sweep", "--jobs", "2"}).code == kExitOk);
    const fs::path results = fs::path(out) / "results";
    CHECK(fs::exists(results / "records.jsonl"));
    CHECK(fs::exists(results / "report.md"));
    CHECK(fs::exists(results / "summary.json"));

    // Second invocations skip finished work and leave files untouched.
    const std::string lm_bytes = test_util::read_file(lm);
    const std::string records = test_util::read_file(results / "records.jsonl");
    CHECK(run({"train-lm"}).code == kExitOk);
    CHECK(run({"sweep"}).code == kExitOk);
    CHECK(test_util::read_file(lm) == lm_bytes);
    CHECK(test_util::read_file(results / "records.jsonl") == records);

    // The report is a pure function of the stored records.
    const std::string report = test_util::read_file(results / "report.md");
    CHECK(run({"report"}).code == kExitOk);
    CHECK(test_util::read_file(results / "report.md") == report);
    CHECK(report.find("gender") != std::string::npos);
    CHECK_FALSE(load_report_input(results).records.empty());

    // eval records the same keys that sweep already holds: nothing to do.
    CHECK(run({"eval"}).code == kExitOk);
    CHECK(test_util::read_file(results / "records.jsonl") == records);

    // Replacing the frozen LM after pretraining breaks the contract.
    REQUIRE(run({"train-lm", "--force", "--seed", "5"}).code == kExitOk);
    const CliResult broken = run({"eval", "--force"});
    CHECK(broken.code == kExitContract);
    CHECK(broken.err.find("pretrained against LM") != std::string::npos);

    // A checkpoint that no longer matches its recorded hash is also caught.
    std::ofstream(fs::path(lm.string() + ".sha256")) << std::string(64, '0') << "\n";
    CHECK(run({"pretrain", "--force"}).code == kExitContract);
}

TEST_CASE("missing encoders are named") {
    const auto dir = test_util::temp_dir("cli_missing");
    const std::string cfg = write_config(dir).string();
    const std::string out = (dir / "run").string();
    REQUIRE(cli({"gen-corpus", "--config", cfg, "--out", out}).code == kExitOk);
    REQUIRE(cli({"train-lm", "--config", cfg, "--out", out}).code == kExitOk);
    const CliResult r = cli({"sweep", "--config", cfg, "--out", out});
    CHECK(r.code == kExitUserError);
    CHECK(r.err.find("r8_100pct") != std::string::npos);
}

}  // TEST_SUITE
