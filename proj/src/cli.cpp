#include "wavprompt/cli.hpp"

#include "wavprompt/config.hpp"
#include "wavprompt/report.hpp"
#include "wavprompt/seeding.hpp"
#include "wavprompt/train_log.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>

namespace wavprompt {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Common {
    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
    int jobs = 1;
    bool force = false;
    std::vector<std::string> sets;
};

void add_common(CLI::App * cmd, Common & c) {
    cmd->add_option("--config", c.config, "JSON config file");
    cmd->add_option("--out", c.out, std::string("output root (default $") + kOutEnv + " or ./runs)");
    cmd->add_option("--seed", c.seed, "base seed");
    cmd->add_option("--jobs", c.jobs, "concurrent grid points (sweep)")->check(CLI::PositiveNumber);
    cmd->add_flag("--force", c.force, "redo outputs that already exist");
    cmd->add_option("--set", c.sets, "override, key=value (repeatable)");
}

class Ctx {
  public:
    Ctx(const Common & c, std::ostream & log) : log_(log) {
        cfg = RunConfig::defaults();
        if (!c.config.empty()) {
            cfg.merge_file(c.config);
        }
        if (c.seed) {
            cfg.set("seed=" + std::to_string(*c.seed));
        }
        for (const std::string & s : c.sets) {
            cfg.set(s);
        }
        cfg.validate();
        if (!c.out.empty()) {
            out = c.out;
        } else if (const char * env = std::getenv(kOutEnv); env && *env) {
            out = env;
        } else {
            out = "runs";
        }
        force = c.force;
        jobs = c.jobs;
    }

    fs::path path(const std::string & key, const fs::path & fallback) const {
        const std::string p = cfg.tree().at("paths").value(key, std::string());
        return p.empty() ? out / fallback : fs::path(p);
    }
    fs::path corpus_dir() const { return path("corpus", "corpus"); }
    fs::path lm_path() const { return path("lm", fs::path("lm") / "lm.ckpt"); }
    fs::path encoder_dir() const { return path("encoders", "encoders"); }
    fs::path results_dir() const { return path("results", "results"); }

    void dump_config(const std::string & cmd, const fs::path & dir) const {
        fs::create_directories(dir);
        const fs::path target = dir / ("config." + cmd + ".json");
        const fs::path tmp = target.string() + ".tmp";
        {
            std::ofstream f(tmp, std::ios::trunc);
            f << cfg.tree().dump(2) << "\n";
            if (!f) {
                throw ConfigError("cannot write " + tmp.string());
            }
        }
        fs::rename(tmp, target);
    }

    void info(const std::string & s) const { log_ << "[wavprompt] " << s << std::endl; }

    RunConfig cfg;
    fs::path out;
    bool force = false;
    int jobs = 1;

  private:
    std::ostream & log_;
};

std::string lm_hash_file(const fs::path & lm) { return lm.string() + ".sha256"; }

LanguageModel load_lm(const Ctx & ctx, Vocabulary * vocab) {
    const fs::path p = ctx.lm_path();
    if (!fs::exists(p)) {
        throw ConfigError("missing LM checkpoint " + p.string() + " (run train-lm first)");
    }
    LanguageModel lm = LanguageModel::load(p, vocab);
    std::ifstream h(lm_hash_file(p));
    std::string recorded;
    if (h >> recorded && recorded != lm.hash()) {
        throw ContractViolation("language model hash " + lm.hash() + " differs from the recorded " + recorded +
                                " in " + lm_hash_file(p));
    }
    return lm;
}

Corpus load_corpus_checked(const Ctx & ctx, const Vocabulary & lm_vocab) {
    const fs::path dir = ctx.corpus_dir();
    if (!fs::exists(dir / "manifest.jsonl")) {
        throw ConfigError("missing corpus in " + dir.string() + " (run gen-corpus first)");
    }
    Corpus c = load_corpus(dir);
    if (!(c.spec().vocab == lm_vocab)) {
        throw ConfigError("corpus vocabulary differs from the language model's");
    }
    return c;
}

int cmd_gen_corpus(const Ctx & ctx) {
    const fs::path dir = ctx.corpus_dir();
    ctx.dump_config("gen-corpus", ctx.out);
    if (fs::exists(dir / "manifest.jsonl") && !ctx.force) {
        ctx.info("corpus already present in " + dir.string() + " (use --force to rebuild)");
        return kExitOk;
    }
    const CorpusSpec spec = ctx.cfg.corpus();
    spec.validate();
    const fs::path tmp = dir.string() + ".tmp";
    fs::remove_all(tmp);
    const Corpus c = build_corpus(spec, derive_seed(ctx.cfg.seed(), name_salt("corpus")), tmp);
    fs::remove_all(dir);
    if (dir.has_parent_path()) {
        fs::create_directories(dir.parent_path());
    }
    fs::rename(tmp, dir);
    ctx.info("wrote " + std::to_string(c.utterances().size()) + " utterances to " + dir.string());
    return kExitOk;
}

int cmd_train_lm(const Ctx & ctx) {
    const fs::path ckpt = ctx.lm_path();
    ctx.dump_config("train-lm", ckpt.parent_path());
    if (fs::exists(ckpt) && !ctx.force) {
        ctx.info("LM checkpoint already present at " + ckpt.string() + " (use --force to retrain)");
        return kExitOk;
    }
    const CorpusSpec spec = ctx.cfg.corpus();
    spec.validate();
    const auto text = generate_text_corpus(spec, ctx.cfg.text(), derive_seed(ctx.cfg.seed(), name_salt("text")));
    const LMConfig lcfg = ctx.cfg.lm(spec.vocab.size());
    const fs::path log_path = ckpt.parent_path() / "train_log.jsonl";
    fs::remove(log_path);
    TrainLogWriter log(log_path);
    ctx.info("training LM on " + std::to_string(text.size()) + " sequences");
    auto r = train_lm(text, lcfg, ctx.cfg.lm_train(), derive_seed(ctx.cfg.seed(), name_salt("lm")),
                      [&](const TrainRecord & rec) {
                          log.write(rec);
                          ctx.info("lm step " + std::to_string(rec.step) + " loss " + std::to_string(rec.loss) +
                                   " heldout " + std::to_string(rec.heldout_loss));
                      });
    r.model.save(ckpt, spec.vocab);
    std::ofstream(lm_hash_file(ckpt)) << r.model.hash() << "\n";
    ctx.info("saved " + ckpt.string() + " (hash " + r.model.hash() + ")");
    return kExitOk;
}

int cmd_pretrain(const Ctx & ctx) {
    Vocabulary vocab;
    const LanguageModel lm = load_lm(ctx, &vocab);
    const Corpus corpus = load_corpus_checked(ctx, vocab);
    const fs::path dir = ctx.encoder_dir();
    ctx.dump_config("pretrain", dir);
    for (const GridPoint & p : ctx.cfg.pretrain_grid()) {
        const fs::path ckpt = dir / (p.tag() + ".ckpt");
        if (fs::exists(ckpt) && !ctx.force) {
            ctx.info(p.tag() + ": checkpoint present, skipped");
            continue;
        }
        const PretrainConfig pc = ctx.cfg.pretrain(p);
        const EncoderConfig ec = ctx.cfg.encoder(p, lm.config().embed_dim);
        const fs::path log_path = dir / (p.tag() + ".log.jsonl");
        fs::remove(log_path);
        TrainLogWriter log(log_path);
        PretrainHooks hooks;
        hooks.on_record = [&](const TrainRecord & rec) {
            log.write(rec);
            ctx.info(p.tag() + " step " + std::to_string(rec.step) + " loss " + std::to_string(rec.loss) +
                     " heldout " + std::to_string(rec.heldout_loss));
        };
        // Periodic checkpoints go to a side file so an interrupted run is not mistaken for a finished one.
        const fs::path partial = ckpt.string() + ".partial";
        hooks.checkpoint_path = partial;
        hooks.checkpoint_meta = {{"grid", p.tag()}, {"pretrain", pc.to_json()}, {"lm_hash", lm.hash()}};
        const PretrainResult r = pretrain_encoder(corpus, pc, ec, lm, hooks);
        fs::rename(partial, ckpt);
        ctx.info(p.tag() + ": saved " + ckpt.string() + " (LM hash unchanged: " + r.lm_hash + ", skipped " +
                 std::to_string(r.skipped_overflow) + " overlong examples)");
    }
    return kExitOk;
}

std::map<std::string, AudioEncoder> load_encoders(const Ctx & ctx, const EvalConfig & ec, const std::string & lm_hash) {
    const fs::path dir = ctx.encoder_dir();
    std::vector<std::string> missing;
    for (const GridPoint & p : ec.grid) {
        if (!fs::exists(dir / (p.tag() + ".ckpt"))) {
            missing.push_back(p.tag());
        }
    }
    if (!missing.empty()) {
        std::string have;
        if (fs::exists(dir)) {
            std::vector<std::string> tags;
            for (const auto & e : fs::directory_iterator(dir)) {
                if (e.path().extension() == ".ckpt") {
                    tags.push_back(e.path().stem().string());
                }
            }
            std::sort(tags.begin(), tags.end());
            for (const auto & t : tags) {
                have += (have.empty() ? "" : ", ") + t;
            }
        }
        std::string miss;
        for (const auto & m : missing) {
            miss += (miss.empty() ? "" : ", ") + m;
        }
        throw ConfigError("missing encoder checkpoint(s): " + miss + " in " + dir.string() +
                          " (available: " + (have.empty() ? "none" : have) + ")");
    }
    std::map<std::string, AudioEncoder> out;
    for (const GridPoint & p : ec.grid) {
        json meta;
        AudioEncoder e = AudioEncoder::load(dir / (p.tag() + ".ckpt"), &meta);
        if (meta.contains("lm_hash") && meta["lm_hash"].get<std::string>() != lm_hash) {
            throw ContractViolation("encoder " + p.tag() + " was pretrained against LM " +
                                    meta["lm_hash"].get<std::string>() + ", not " + lm_hash);
        }
        if (e.config().downsample_rate != p.rate) {
            throw ConfigError("encoder " + p.tag() + " has downsampling rate " +
                              std::to_string(e.config().downsample_rate));
        }
        out.emplace(p.tag(), std::move(e));
    }
    return out;
}

int write_report_for(const Ctx & ctx, const fs::path & dir, std::ostream & err) {
    ReportInput in = load_report_input(dir);
    const Report rep = render_report(in);
    write_report(rep, dir);
    for (const std::string & w : rep.warnings) {
        err << "[wavprompt] warning: " << w << "\n";
    }
    ctx.info("report written to " + (dir / "report.md").string());
    return kExitOk;
}

int cmd_sweep(const Ctx & ctx, bool detailed, std::ostream & err) {
    Vocabulary vocab;
    const LanguageModel lm = load_lm(ctx, &vocab);
    const Corpus corpus = load_corpus_checked(ctx, vocab);
    const EvalConfig ec = ctx.cfg.eval();
    const auto encoders = load_encoders(ctx, ec, lm.hash());
    const fs::path dir = ctx.results_dir();
    ctx.dump_config(detailed ? "eval" : "sweep", dir);
    RecordStore store(dir / "records.jsonl");
    for (const std::string & e : store.load_errors()) {
        err << "[wavprompt] warning: " << e << "\n";
    }
    std::vector<TranscriptionReport> asr;
    if (!detailed) {
        SweepOptions opts;
        opts.jobs = ctx.jobs;
        opts.force = ctx.force;
        opts.log = [&](const std::string & s) { ctx.info(s); };
        run_sweep(corpus, lm, encoders, ec, store, opts, &asr);
    } else {
        std::ofstream episodes(dir / "episodes.jsonl", std::ios::app);
        for (const GridPoint & p : ec.grid) {
            Evaluator ev(corpus, lm, encoders.at(p.tag()), p, ec);
            for (const std::string & name : ec.tasks) {
                const TaskSpec & t = corpus.spec().task(name);
                for (int k : ec.shots) {
                    for (int s = 0; s < ec.seeds; ++s) {
                        bool have = !ctx.force;
                        for (const std::string & key : cell_keys(t, p, k, s, ec)) {
                            have = have && store.contains(key);
                        }
                        if (have) {
                            continue;
                        }
                        std::vector<json> eps;
                        const auto recs = ev.run_cell(t, k, s, &eps);
                        for (const SweepRecord & r : recs) {
                            store.append(r);
                        }
                        for (const json & e : eps) {
                            episodes << e.dump() << "\n";
                        }
                    }
                }
                ctx.info(p.tag() + " " + name + " done");
                if (ec.transcripts == TranscriptSource::asr &&
                    std::find(ec.modes.begin(), ec.modes.end(), PromptMode::text) != ec.modes.end()) {
                    asr.push_back(ev.transcription_report(t));
                }
            }
        }
    }
    for (const TranscriptionReport & r : asr) {
        append_transcription_report(dir / "transcription.jsonl", r);
    }
    store.compact();
    return write_report_for(ctx, dir, err);
}

}  // namespace

int run_cli(int argc, const char * const * argv, std::ostream & out, std::ostream & err) {
    CLI::App app{"wavprompt: frozen-LM audio prompting on a synthetic corpus"};
    app.require_subcommand(1);
    Common common;
    auto * gen = app.add_subcommand("gen-corpus", "generate the synthetic corpus");
    auto * tlm = app.add_subcommand("train-lm", "train the language model, then freeze it");
    auto * pre = app.add_subcommand("pretrain", "pretrain one encoder per grid point through the frozen LM");
    auto * evl = app.add_subcommand("eval", "evaluate sequentially, keeping per-query episodes");
    auto * swp = app.add_subcommand("sweep", "evaluate the whole grid, grid points in parallel");
    auto * rep = app.add_subcommand("report", "render tables and figures from stored records");
    auto * cfg = app.add_subcommand("config", "print the effective config or the reference page");
    for (auto * c : {gen, tlm, pre, evl, swp, rep, cfg}) {
        add_common(c, common);
    }
    std::string report_dir;
    rep->add_option("dir", report_dir, "results directory (default <out>/results)");
    bool reference = false;
    cfg->add_flag("--reference", reference, "print the configuration reference page");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp & e) {
        out << app.help();  // the selected subcommand's page when there is one
        return kExitOk;
    } catch (const CLI::ParseError & e) {
        std::ostringstream o, er;
        const int rc = app.exit(e, o, er);
        out << o.str();
        err << er.str();
        return rc == 0 ? kExitOk : kExitUserError;
    }

    try {
        if (cfg->parsed() && reference) {
            out << config_reference();
            return kExitOk;
        }
        const Ctx ctx(common, err);
        if (cfg->parsed()) {
            out << ctx.cfg.tree().dump(2) << "\n";
            return kExitOk;
        }
        if (gen->parsed()) {
            return cmd_gen_corpus(ctx);
        }
        if (tlm->parsed()) {
            return cmd_train_lm(ctx);
        }
        if (pre->parsed()) {
            return cmd_pretrain(ctx);
        }
        if (evl->parsed()) {
            return cmd_sweep(ctx, true, err);
        }
        if (swp->parsed()) {
            return cmd_sweep(ctx, false, err);
        }
        if (rep->parsed()) {
            const fs::path dir = report_dir.empty() ? ctx.results_dir() : fs::path(report_dir);
            return write_report_for(ctx, dir, err);
        }
    } catch (const ContractViolation & e) {
        err << "[wavprompt] contract violation: " << e.what() << "\n";
        return kExitContract;
    } catch (const std::exception & e) {
        err << "[wavprompt] error: " << e.what() << "\n";
        return kExitUserError;
    }
    return kExitUserError;
}

}  // namespace wavprompt
