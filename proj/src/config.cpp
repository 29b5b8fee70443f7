#include "wavprompt/config.hpp"

#include "wavprompt/seeding.hpp"

#include <fstream>
#include <map>
#include <sstream>

namespace wavprompt {

using nlohmann::json;

namespace {

void merge_into(json & base, const json & patch, const std::string & path) {
    if (!patch.is_object()) {
        throw ConfigError("config patch at '" + (path.empty() ? std::string("<root>") : path) + "' must be an object");
    }
    for (auto it = patch.begin(); it != patch.end(); ++it) {
        const std::string p = path.empty() ? it.key() : path + "." + it.key();
        if (!base.contains(it.key())) {
            throw ConfigError("unknown config key '" + p + "'");
        }
        json & dst = base[it.key()];
        if (dst.is_object() && it.value().is_object()) {
            merge_into(dst, it.value(), p);
        } else {
            dst = it.value();
        }
    }
}

template <typename F>
auto section(const json & tree, const std::string & name, F && parse) {
    try {
        return parse(tree.at(name));
    } catch (const json::exception & e) {
        throw ConfigError("bad value in config section '" + name + "': " + e.what());
    }
}

}  // namespace

RunConfig RunConfig::defaults() {
    RunConfig c;
    json enc = EncoderConfig{}.to_json();
    enc.erase("downsample_rate");
    enc.erase("output_dim");
    json lm = LMConfig{}.to_json();
    lm.erase("vocab_size");
    json pre = PretrainConfig{}.to_json();
    pre.erase("resource");
    pre.erase("multitask");
    pre.erase("seed");
    pre["grid"] = json::array({"r8_100pct"});
    json ev = EvalConfig{}.to_json();
    ev.erase("seed");
    c.tree_ = {{"seed", 1},
               {"corpus", CorpusSpec{}.to_json()},
               {"text", TextCorpusConfig{}.to_json()},
               {"lm", lm},
               {"lm_train", LMTrainConfig{}.to_json()},
               {"encoder", enc},
               {"pretrain", pre},
               {"eval", ev},
               {"paths", {{"corpus", ""}, {"lm", ""}, {"encoders", ""}, {"results", ""}}}};
    return c;
}

void RunConfig::merge(const json & patch) { merge_into(tree_, patch, ""); }

void RunConfig::merge_file(const std::filesystem::path & path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot open config file " + path.string());
    }
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception & e) {
        throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
    }
    merge(j);
}

void RunConfig::set(const std::string & assignment) {
    const size_t eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw ConfigError("override '" + assignment + "' must look like key=value");
    }
    const std::string key = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(raw);
    } catch (const json::exception &) {
        value = raw;
    }
    json patch = value;
    std::vector<std::string> parts;
    std::stringstream ss(key);
    for (std::string part; std::getline(ss, part, '.');) {
        if (part.empty()) {
            throw ConfigError("override key '" + key + "' has an empty component");
        }
        parts.push_back(part);
    }
    for (auto it = parts.rbegin(); it != parts.rend(); ++it) {
        patch = json{{*it, patch}};
    }
    merge(patch);
}

std::uint64_t RunConfig::seed() const {
    try {
        return tree_.at("seed").get<std::uint64_t>();
    } catch (const json::exception &) {
        throw ConfigError("seed must be a non-negative integer");
    }
}

CorpusSpec RunConfig::corpus() const {
    return section(tree_, "corpus", [](const json & j) { return CorpusSpec::from_json(j); });
}

TextCorpusConfig RunConfig::text() const {
    return section(tree_, "text", [](const json & j) { return TextCorpusConfig::from_json(j); });
}

LMConfig RunConfig::lm(size_t vocab_size) const {
    LMConfig c = section(tree_, "lm", [](const json & j) { return LMConfig::from_json(j); });
    c.vocab_size = static_cast<int>(vocab_size);
    c.validate();
    return c;
}

LMTrainConfig RunConfig::lm_train() const {
    return section(tree_, "lm_train", [](const json & j) { return LMTrainConfig::from_json(j); });
}

EncoderConfig RunConfig::encoder(const GridPoint & p, int lm_dim) const {
    EncoderConfig c = section(tree_, "encoder", [](const json & j) { return EncoderConfig::from_json(j); });
    c.downsample_rate = p.rate;
    c.output_dim = lm_dim;
    c.validate();
    return c;
}

PretrainConfig RunConfig::pretrain(const GridPoint & p) const {
    json j = tree_.at("pretrain");
    j.erase("grid");
    PretrainConfig c = section(json{{"pretrain", j}}, "pretrain", [](const json & x) { return PretrainConfig::from_json(x); });
    c.resource = p.resource;
    c.multitask = p.multitask;
    c.seed = derive_seed(seed(), name_salt("pretrain"));
    return c;
}

std::vector<GridPoint> RunConfig::pretrain_grid() const {
    std::vector<GridPoint> out;
    try {
        for (const auto & t : tree_.at("pretrain").at("grid")) {
            out.push_back(GridPoint::from_tag(t.get<std::string>()));
        }
    } catch (const json::exception & e) {
        throw ConfigError(std::string("pretrain.grid must be a list of grid tags: ") + e.what());
    }
    if (out.empty()) {
        throw ConfigError("pretrain.grid must not be empty");
    }
    return out;
}

EvalConfig RunConfig::eval() const {
    EvalConfig c = section(tree_, "eval", [](const json & j) { return EvalConfig::from_json(j); });
    c.seed = derive_seed(seed(), name_salt("eval"));
    return c;
}

void RunConfig::validate() const {
    seed();
    const CorpusSpec spec = corpus();
    spec.validate();
    const LMConfig l = lm(spec.vocab.size());
    for (const GridPoint & p : pretrain_grid()) {
        encoder(p, l.embed_dim);
        pretrain(p).validate(spec.vocab);
    }
    const EvalConfig e = eval();
    for (const std::string & t : e.tasks) {
        spec.task(t);
    }
}

namespace {

const std::map<std::string, std::string> & docs() {
    static const std::map<std::string, std::string> d = {
        {"seed", "base seed; every stage derives its own seed from it"},
        {"corpus.vocab", "closed symbol vocabulary (specials are prepended)"},
        {"corpus.synth.sample_rate", "Hz"},
        {"corpus.synth.tone_duration", "seconds per spoken token"},
        {"corpus.synth.base_frequency", "Hz of token id 0"},
        {"corpus.synth.frequency_step", "Hz between consecutive token ids"},
        {"corpus.synth.amplitude", "tone amplitude in (0, 1]"},
        {"corpus.synth.noise_std", "additive Gaussian noise used when the corpus is generated"},
        {"corpus.synth.ramp_duration", "raised-cosine fade at tone edges, seconds"},
        {"corpus.synth.clip_duration", "seconds per non-speech clip"},
        {"corpus.train_utterances", "speech utterances in the train split"},
        {"corpus.test_utterances", "speech utterances in the test split"},
        {"corpus.min_tokens", "shortest utterance, tokens"},
        {"corpus.max_tokens", "longest utterance, tokens"},
        {"corpus.filler", "symbols drawn for non-keyword positions"},
        {"corpus.keyword_sets", "keywords planted in utterances, with planting probability"},
        {"corpus.tasks", "classification tasks: answer set, question prompt, label rule"},
        {"corpus.sound_classes", "non-speech classes: name, target word, generator"},
        {"corpus.sound_train_per_class", "train clips per sound class"},
        {"corpus.sound_test_per_class", "test clips per sound class"},
        {"corpus.resource_fractions", "nested pretraining subsets, fraction of train speech"},
        {"corpus.audio_format", "pcm16 or float32"},
        {"text.sequences", "LM training sequences"},
        {"text.max_shots", "most demonstrations in a task-episode sequence"},
        {"text.max_asr_blocks", "most transcription blocks in one transcription sequence"},
        {"text.max_silence_per_token", "upper bound of the <sil> density drawn per sequence"},
        {"text.max_sound_silence", "<sil> tokens around a sound class name"},
        {"text.asr_weight", "share of transcription sequences"},
        {"text.naming_weight", "share of sound-naming sequences"},
        {"text.fact_weight", "share of association-fact sequences"},
        {"text.task_weight", "share of episode sequences"},
        {"text.identity_fraction", "episodes whose labels are the keywords themselves"},
        {"text.association_fraction", "episodes whose labels are the keywords' associates"},
        {"text.sound_task_fraction", "episodes over sound class names rather than utterances"},
        {"text.max_prompt_tokens", "longest random episode prompt"},
        {"text.associations", "word pairs the LM is taught as facts"},
        {"text.asr_prompt", "prompt between utterance and transcript"},
        {"text.sound_prompt", "prompt between sound and its name"},
        {"lm.embed_dim", "model width d; also the encoder output size"},
        {"lm.layers", "transformer blocks"},
        {"lm.heads", "attention heads (must divide embed_dim)"},
        {"lm.ff_dim", "feed-forward width"},
        {"lm.max_context", "positions; every assembled prompt must fit"},
        {"lm.dropout", "training dropout"},
        {"lm_train.steps", "optimizer steps"},
        {"lm_train.batch_size", "sequences per step"},
        {"lm_train.learning_rate", "peak Adam learning rate"},
        {"lm_train.warmup_fraction", "linear warmup share of steps, then cosine decay"},
        {"lm_train.weight_decay", "decoupled weight decay"},
        {"lm_train.clip_norm", "global gradient-norm clip"},
        {"lm_train.heldout_fraction", "sequences held out for the held-out loss"},
        {"lm_train.log_every", "steps between log records"},
        {"encoder.sample_rate", "Hz expected by the encoder"},
        {"encoder.conv", "conv feature extractor layers (channels, kernel, stride)"},
        {"encoder.dim", "frame transformer width"},
        {"encoder.layers", "frame transformer blocks"},
        {"encoder.heads", "frame transformer heads"},
        {"encoder.ff_dim", "frame transformer feed-forward width"},
        {"encoder.output_norm", "L2 norm of every output row after layer normalization (0 disables)"},
        {"encoder.match_lm_norm", "set output_norm to the frozen LM's mean token-embedding norm at pretraining"},
        {"pretrain.grid", "encoders to pretrain, as r<rate>_<resource>[_mt] tags"},
        {"pretrain.batch_size", "examples per step"},
        {"pretrain.steps", "optimizer steps"},
        {"pretrain.learning_rate", "peak Adam learning rate"},
        {"pretrain.warmup_fraction", "linear warmup share of steps"},
        {"pretrain.weight_decay", "decoupled weight decay"},
        {"pretrain.clip_norm", "global gradient-norm clip"},
        {"pretrain.asr_prompt", "fixed prompt after the audio"},
        {"pretrain.sound_prompt", "fixed prompt after a sound clip (multitask)"},
        {"pretrain.heldout_utterances", "test utterances used for the held-out loss"},
        {"pretrain.context_blocks", "most solved examples placed before each training example"},
        {"pretrain.log_every", "steps between log records"},
        {"pretrain.checkpoint_every", "steps between checkpoints (0: only at the end)"},
        {"eval.tasks", "tasks to evaluate"},
        {"eval.shots", "demonstration counts"},
        {"eval.batch_size", "queries drawn per batch before balancing"},
        {"eval.seeds", "batches (and demonstration draws) per condition"},
        {"eval.modes", "audio (encoder prompts) and/or text (transcript prompts)"},
        {"eval.transcripts", "text-mode transcripts: asr (greedy decoding) or oracle"},
        {"eval.grid", "encoders to evaluate"},
        {"eval.noise_std", "Gaussian noise added to every evaluated waveform"},
        {"eval.length_normalize", "divide answer log-probabilities by token count"},
        {"eval.min_balanced", "balanced batches smaller than this are flagged"},
        {"eval.max_transcript_len", "greedy decoding limit, tokens"},
        {"eval.asr_prompt", "prompt used to transcribe speech for text mode"},
        {"eval.sound_prompt", "prompt used to transcribe sounds for text mode"},
        {"paths.corpus", "corpus directory (default <out>/corpus)"},
        {"paths.lm", "LM checkpoint (default <out>/lm/lm.ckpt)"},
        {"paths.encoders", "encoder directory (default <out>/encoders)"},
        {"paths.results", "results directory (default <out>/results)"},
    };
    return d;
}

void walk(const json & j, const std::string & path, std::ostringstream & out) {
    if (j.is_object() && path != "corpus.vocab") {
        for (auto it = j.begin(); it != j.end(); ++it) {
            walk(it.value(), path.empty() ? it.key() : path + "." + it.key(), out);
        }
        return;
    }
    std::string value = j.dump();
    if (value.size() > 60) {
        value = "(" + std::string(j.is_array() ? "list of " + std::to_string(j.size()) : "object") + ", see `wavprompt config`)";
    } else {
        value = "`" + value + "`";
    }
    auto it = docs().find(path);
    out << "| `" << path << "` | " << value << " | " << (it == docs().end() ? "" : it->second) << " |\n";
}

}  // namespace

std::string config_reference() {
    std::ostringstream out;
    out << "# Configuration reference\n\n"
           "Generated by `wavprompt config --reference`. A config file is a JSON object holding any subset of "
           "these keys; `--set key=value` patches one key after the file is read (values are parsed as JSON, "
           "otherwise taken as strings). Unknown keys are rejected.\n\n"
           "| key | default | meaning |\n|---|---|---|\n";
    walk(RunConfig::defaults().tree(), "", out);
    return out.str();
}

}  // namespace wavprompt
