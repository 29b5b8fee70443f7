#include "wavprompt/corpus.hpp"

#include "wavprompt/seeding.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

namespace wavprompt {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- TaskSpec --------------------------------------------------------------

std::optional<std::string> TaskSpec::label_for_tokens(const TokenSequence & tokens, const Vocabulary & vocab) const {
    if (kind != TaskKind::keyword) {
        return std::nullopt;
    }
    std::optional<std::string> found;
    for (const auto & [keyword, label] : label_rule) {
        if (!vocab.contains(keyword)) {
            continue;
        }
        const TokenId id = vocab.id(keyword);
        if (std::find(tokens.begin(), tokens.end(), id) != tokens.end()) {
            if (found && *found != label) {
                return std::nullopt;  // conflicting keywords: unlabeled
            }
            found = label;
        }
    }
    return found;
}

std::optional<std::string> TaskSpec::label_for_class(const std::string & class_name) const {
    if (kind != TaskKind::sound) {
        return std::nullopt;
    }
    for (const auto & [cls, label] : label_rule) {
        if (cls == class_name) {
            return label;
        }
    }
    return std::nullopt;
}

int TaskSpec::answer_index(const std::string & label) const {
    auto it = std::find(answer_set.begin(), answer_set.end(), label);
    return it == answer_set.end() ? -1 : static_cast<int>(it - answer_set.begin());
}

void TaskSpec::validate(const Vocabulary & vocab) const {
    if (name.empty()) {
        throw ConfigError("task name must be non-empty");
    }
    if (answer_set.size() != 2 && answer_set.size() != 9) {
        throw ConfigError("task '" + name + "': answer set must have 2 or 9 labels");
    }
    if (std::set<std::string>(answer_set.begin(), answer_set.end()).size() != answer_set.size()) {
        throw ConfigError("task '" + name + "': duplicate answers");
    }
    if (question_prompt.empty() || vocab.encode(question_prompt).empty()) {
        throw ConfigError("task '" + name + "': question prompt must be non-empty");
    }
    for (const std::string & a : answer_set) {
        if (vocab.encode(a).empty()) {
            throw ConfigError("task '" + name + "': empty answer");
        }
    }
    std::set<std::string> covered;
    for (const auto & [key, label] : label_rule) {
        if (answer_index(label) < 0) {
            throw ConfigError("task '" + name + "': rule label '" + label + "' not in answer set");
        }
        if (kind == TaskKind::keyword) {
            vocab.id(key);
        }
        covered.insert(label);
    }
    if (covered.size() != answer_set.size()) {
        throw ConfigError("task '" + name + "': label rule does not exhaust the answer set");
    }
}

json TaskSpec::to_json() const {
    json rule = json::array();
    for (const auto & [k, v] : label_rule) {
        rule.push_back({k, v});
    }
    return {{"name", name},
            {"group", group},
            {"kind", kind == TaskKind::keyword ? "keyword" : "sound"},
            {"answer_set", answer_set},
            {"question_prompt", question_prompt},
            {"label_rule", rule}};
}

TaskSpec TaskSpec::from_json(const json & j) {
    TaskSpec t;
    t.name = j.at("name").get<std::string>();
    t.group = j.value("group", t.name);
    const std::string kind = j.value("kind", "keyword");
    if (kind != "keyword" && kind != "sound") {
        throw ConfigError("task '" + t.name + "': kind must be keyword or sound");
    }
    t.kind = kind == "keyword" ? TaskKind::keyword : TaskKind::sound;
    t.answer_set = j.at("answer_set").get<std::vector<std::string>>();
    t.question_prompt = j.at("question_prompt").get<std::string>();
    for (const auto & pair : j.at("label_rule")) {
        t.label_rule.emplace_back(pair.at(0).get<std::string>(), pair.at(1).get<std::string>());
    }
    return t;
}

std::vector<TaskSpec> standard_tasks() {
    std::vector<TaskSpec> tasks;
    tasks.push_back({"gender", "captions", TaskKind::keyword, {"man", "woman"}, "the speaker is describing a",
                     {{"man", "man"}, {"woman", "woman"}}});
    tasks.push_back({"sex", "captions", TaskKind::keyword, {"male", "female"}, "the speaker is describing a",
                     {{"man", "male"}, {"woman", "female"}}});
    tasks.push_back({"color", "captions", TaskKind::keyword, {"black", "white"},
                     "the speaker is describing a person in", {{"black", "black"}, {"white", "white"}}});
    tasks.push_back({"shade", "captions", TaskKind::keyword, {"dark", "light"},
                     "the speaker is describing a person in", {{"black", "dark"}, {"white", "light"}}});
    TaskSpec animals{"animal_verbs", "animals", TaskKind::sound, {}, "=>", {}};
    for (const SoundClass & c : standard_sound_classes()) {
        animals.answer_set.push_back(c.target_word);
        animals.label_rule.emplace_back(c.class_name, c.target_word);
    }
    tasks.push_back(std::move(animals));
    return tasks;
}

// ---- CorpusSpec ------------------------------------------------------------

void CorpusSpec::validate() const {
    synth.validate(vocab.size());
    if (train_utterances < 1 || test_utterances < 1) {
        throw ConfigError("corpus needs at least one train and one test utterance");
    }
    if (min_tokens < 1 || max_tokens < min_tokens) {
        throw ConfigError("token-length range must satisfy 1 <= min_tokens <= max_tokens");
    }
    if (static_cast<size_t>(min_tokens) < keyword_sets.size()) {
        throw ConfigError("min_tokens must be at least the number of keyword sets");
    }
    if (filler.empty()) {
        throw ConfigError("filler vocabulary must be non-empty");
    }
    for (const std::string & f : filler) {
        if (!vocab.is_content(vocab.id(f))) {
            throw ConfigError("filler symbol '" + f + "' is not a content symbol");
        }
    }
    for (const KeywordSet & ks : keyword_sets) {
        if (ks.symbols.empty() || ks.probability < 0.0 || ks.probability > 1.0) {
            throw ConfigError("keyword sets need symbols and a probability in [0, 1]");
        }
        for (const std::string & s : ks.symbols) {
            vocab.id(s);
        }
    }
    std::set<std::string> names;
    for (const TaskSpec & t : tasks) {
        t.validate(vocab);
        if (!names.insert(t.name).second) {
            throw ConfigError("duplicate task name '" + t.name + "'");
        }
    }
    std::set<std::string> spoken(filler.begin(), filler.end());
    for (const KeywordSet & ks : keyword_sets) {
        spoken.insert(ks.symbols.begin(), ks.symbols.end());
    }
    for (const SoundClass & c : sound_classes) {
        if (spoken.count(c.class_name)) {
            throw ConfigError("sound class name '" + c.class_name + "' collides with a speech token");
        }
        vocab.id(c.class_name);
        vocab.id(c.target_word);
    }
    if (resource_fractions.empty()) {
        throw ConfigError("at least one resource fraction is required");
    }
    for (double f : resource_fractions) {
        if (!(f > 0.0 && f <= 1.0)) {
            throw ConfigError("resource fractions must lie in (0, 1]");
        }
        if (static_cast<int>(std::floor(f * train_utterances)) < 1) {
            throw ConfigError("resource fraction " + std::to_string(f) + " selects no utterances");
        }
    }
    if (sound_train_per_class < 0 || sound_test_per_class < 0) {
        throw ConfigError("sound clip counts must be non-negative");
    }
}

const TaskSpec & CorpusSpec::task(const std::string & name) const {
    for (const TaskSpec & t : tasks) {
        if (t.name == name) {
            return t;
        }
    }
    throw ConfigError("unknown task '" + name + "'");
}

json CorpusSpec::to_json() const {
    json ks = json::array();
    for (const KeywordSet & k : keyword_sets) {
        ks.push_back({{"symbols", k.symbols}, {"probability", k.probability}});
    }
    json ts = json::array();
    for (const TaskSpec & t : tasks) {
        ts.push_back(t.to_json());
    }
    json sc = json::array();
    for (const SoundClass & c : sound_classes) {
        sc.push_back(c.to_json());
    }
    return {{"vocab", vocab.to_json()},
            {"synth", synth.to_json()},
            {"train_utterances", train_utterances},
            {"test_utterances", test_utterances},
            {"min_tokens", min_tokens},
            {"max_tokens", max_tokens},
            {"filler", filler},
            {"keyword_sets", ks},
            {"tasks", ts},
            {"sound_classes", sc},
            {"sound_train_per_class", sound_train_per_class},
            {"sound_test_per_class", sound_test_per_class},
            {"resource_fractions", resource_fractions},
            {"audio_format", to_string(audio_format)}};
}

CorpusSpec CorpusSpec::from_json(const json & j) {
    CorpusSpec c;
    if (j.contains("vocab")) {
        c.vocab = Vocabulary::from_json(j.at("vocab"));
    }
    if (j.contains("synth")) {
        c.synth = SynthConfig::from_json(j.at("synth"));
    }
    c.train_utterances = j.value("train_utterances", c.train_utterances);
    c.test_utterances = j.value("test_utterances", c.test_utterances);
    c.min_tokens = j.value("min_tokens", c.min_tokens);
    c.max_tokens = j.value("max_tokens", c.max_tokens);
    c.filler = j.value("filler", c.filler);
    if (j.contains("keyword_sets")) {
        c.keyword_sets.clear();
        for (const json & k : j.at("keyword_sets")) {
            c.keyword_sets.push_back({k.at("symbols").get<std::vector<std::string>>(), k.value("probability", 0.5)});
        }
    }
    if (j.contains("tasks")) {
        c.tasks.clear();
        for (const json & t : j.at("tasks")) {
            c.tasks.push_back(TaskSpec::from_json(t));
        }
    }
    if (j.contains("sound_classes")) {
        c.sound_classes.clear();
        for (const json & s : j.at("sound_classes")) {
            c.sound_classes.push_back(SoundClass::from_json(s));
        }
    }
    c.sound_train_per_class = j.value("sound_train_per_class", c.sound_train_per_class);
    c.sound_test_per_class = j.value("sound_test_per_class", c.sound_test_per_class);
    c.resource_fractions = j.value("resource_fractions", c.resource_fractions);
    c.audio_format = audio_format_from_string(j.value("audio_format", to_string(c.audio_format)));
    return c;
}

// ---- Corpus ----------------------------------------------------------------

std::string to_string(Split s) { return s == Split::train ? "train" : "test"; }
std::string to_string(UtteranceKind k) { return k == UtteranceKind::speech ? "speech" : "sound"; }

namespace {

Split split_from_string(const std::string & s) {
    if (s == "train") {
        return Split::train;
    }
    if (s == "test") {
        return Split::test;
    }
    throw IntegrityError("unknown split '" + s + "'");
}

UtteranceKind kind_from_string(const std::string & s) {
    if (s == "speech") {
        return UtteranceKind::speech;
    }
    if (s == "sound") {
        return UtteranceKind::sound;
    }
    throw IntegrityError("unknown utterance kind '" + s + "'");
}

std::string numbered(const std::string & prefix, int i) {
    std::ostringstream s;
    s << prefix << std::setw(6) << std::setfill('0') << i;
    return s.str();
}

void assign_labels(Utterance & u, const CorpusSpec & spec) {
    u.labels.clear();
    for (const TaskSpec & t : spec.tasks) {
        std::optional<std::string> label = u.kind == UtteranceKind::speech ? t.label_for_tokens(u.tokens, spec.vocab)
                                                                           : t.label_for_class(u.sound_class);
        if (label) {
            u.labels[t.name] = *label;
        }
    }
}

}  // namespace

std::string resource_tag(double fraction) {
    const double pct = fraction * 100.0;
    std::ostringstream s;
    if (std::abs(pct - std::round(pct)) < 1e-9) {
        s << static_cast<long>(std::llround(pct));
    } else {
        s << std::setprecision(6) << pct;
    }
    s << "pct";
    return s.str();
}

Corpus::Corpus(CorpusSpec spec, std::vector<Utterance> utterances, std::map<std::string, std::vector<std::string>> resources)
    : spec_(std::move(spec)), utterances_(std::move(utterances)), resources_(std::move(resources)) {
    for (size_t i = 0; i < utterances_.size(); ++i) {
        if (!index_.emplace(utterances_[i].id, i).second) {
            throw IntegrityError("duplicate utterance id '" + utterances_[i].id + "'");
        }
    }
}

const Utterance & Corpus::get(const std::string & id) const {
    auto it = index_.find(id);
    if (it == index_.end()) {
        throw IntegrityError("unknown utterance id '" + id + "'");
    }
    return utterances_[it->second];
}

std::vector<const Utterance *> Corpus::select(Split split, UtteranceKind kind) const {
    std::vector<const Utterance *> out;
    for (const Utterance & u : utterances_) {
        if (u.split == split && u.kind == kind) {
            out.push_back(&u);
        }
    }
    return out;
}

std::vector<const Utterance *> Corpus::resource_subset(const std::string & tag) const {
    auto it = resources_.find(tag);
    if (it == resources_.end()) {
        std::string have;
        for (const auto & [k, v] : resources_) {
            have += (have.empty() ? "" : ", ") + k;
        }
        throw ConfigError("unknown resource condition '" + tag + "' (available: " + have + ")");
    }
    std::vector<const Utterance *> out;
    for (const std::string & id : it->second) {
        out.push_back(&get(id));
    }
    return out;
}

std::vector<const Utterance *> Corpus::task_pool(const TaskSpec & task, Split split) const {
    std::vector<const Utterance *> out;
    for (const Utterance & u : utterances_) {
        if (u.split == split && u.labels.count(task.name)) {
            out.push_back(&u);
        }
    }
    return out;
}

void Corpus::check_integrity() const {
    std::set<std::string> train;
    std::set<std::string> test;
    for (const Utterance & u : utterances_) {
        (u.split == Split::train ? train : test).insert(u.id);
        for (const auto & [task_name, label] : u.labels) {
            const TaskSpec & t = spec_.task(task_name);
            if (t.answer_index(label) < 0) {
                throw IntegrityError("utterance '" + u.id + "' has label '" + label + "' outside task '" + task_name +
                                     "'");
            }
        }
        std::map<std::string, std::string> expected;
        for (const TaskSpec & t : spec_.tasks) {
            auto l = u.kind == UtteranceKind::speech ? t.label_for_tokens(u.tokens, spec_.vocab)
                                                     : t.label_for_class(u.sound_class);
            if (l) {
                expected[t.name] = *l;
            }
        }
        if (expected != u.labels) {
            throw IntegrityError("utterance '" + u.id + "' labels disagree with the task label rules");
        }
    }
    for (const std::string & id : train) {
        if (test.count(id)) {
            throw IntegrityError("utterance '" + id + "' appears in both train and test splits");
        }
    }
    // Resource subsets must be nested train speech subsets.
    std::vector<std::pair<size_t, const std::vector<std::string> *>> by_size;
    for (const auto & [tag, ids] : resources_) {
        for (const std::string & id : ids) {
            const Utterance & u = get(id);
            if (u.split != Split::train || u.kind != UtteranceKind::speech) {
                throw IntegrityError("resource subset '" + tag + "' contains non-training utterance '" + id + "'");
            }
        }
        by_size.emplace_back(ids.size(), &ids);
    }
    std::sort(by_size.begin(), by_size.end());
    for (size_t i = 1; i < by_size.size(); ++i) {
        const auto & small = *by_size[i - 1].second;
        const auto & big = *by_size[i].second;
        std::set<std::string> big_set(big.begin(), big.end());
        for (const std::string & id : small) {
            if (!big_set.count(id)) {
                throw IntegrityError("resource subsets are not nested");
            }
        }
    }
}

TokenSequence sample_utterance_tokens(const CorpusSpec & spec, std::mt19937_64 & rng,
                                      const std::optional<std::string> & forced_keyword) {
    std::uniform_int_distribution<int> len_dist(spec.min_tokens, spec.max_tokens);
    std::uniform_int_distribution<size_t> filler_dist(0, spec.filler.size() - 1);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const int len = len_dist(rng);
    TokenSequence tokens(static_cast<size_t>(len));
    for (TokenId & t : tokens) {
        t = spec.vocab.id(spec.filler[filler_dist(rng)]);
    }
    std::vector<size_t> positions(tokens.size());
    for (size_t i = 0; i < positions.size(); ++i) {
        positions[i] = i;
    }
    std::shuffle(positions.begin(), positions.end(), rng);
    size_t next = 0;
    for (const KeywordSet & ks : spec.keyword_sets) {
        const bool forced = forced_keyword && std::find(ks.symbols.begin(), ks.symbols.end(), *forced_keyword) !=
                                                  ks.symbols.end();
        const bool plant = unit(rng) < ks.probability;
        std::uniform_int_distribution<size_t> pick(0, ks.symbols.size() - 1);
        const std::string & chosen = ks.symbols[pick(rng)];
        if (forced) {
            tokens[positions[next++]] = spec.vocab.id(*forced_keyword);
        } else if (plant) {
            tokens[positions[next++]] = spec.vocab.id(chosen);
        }
    }
    return tokens;
}

Corpus generate_corpus(const CorpusSpec & spec, std::uint64_t seed) {
    spec.validate();
    std::vector<Utterance> utts;
    auto make_speech = [&](Split split, int i) {
        const std::string prefix = split == Split::train ? "tr-" : "te-";
        const std::uint64_t s = derive_seed(seed, name_salt(prefix) + static_cast<std::uint64_t>(i));
        std::mt19937_64 rng(s);
        Utterance u;
        u.id = numbered(prefix, i);
        u.split = split;
        u.kind = UtteranceKind::speech;
        u.tokens = sample_utterance_tokens(spec, rng);
        u.waveform = quantize(synthesize_waveform(u.tokens, spec.vocab, spec.synth, s), spec.audio_format);
        assign_labels(u, spec);
        utts.push_back(std::move(u));
    };
    for (int i = 0; i < spec.train_utterances; ++i) {
        make_speech(Split::train, i);
    }
    for (int i = 0; i < spec.test_utterances; ++i) {
        make_speech(Split::test, i);
    }
    for (const SoundClass & cls : spec.sound_classes) {
        for (Split split : {Split::train, Split::test}) {
            const int count = split == Split::train ? spec.sound_train_per_class : spec.sound_test_per_class;
            for (int i = 0; i < count; ++i) {
                const std::string prefix = "snd-" + to_string(split) + "-" + cls.class_name + "-";
                const std::uint64_t s = derive_seed(seed, name_salt(prefix) + static_cast<std::uint64_t>(i));
                Utterance u;
                u.id = numbered(prefix, i);
                u.split = split;
                u.kind = UtteranceKind::sound;
                u.sound_class = cls.class_name;
                u.tokens = {spec.vocab.id(cls.class_name)};
                u.waveform = quantize(synthesize_sound(cls, spec.synth, s), spec.audio_format);
                assign_labels(u, spec);
                utts.push_back(std::move(u));
            }
        }
    }

    // Nested subsets: prefixes of one seeded permutation of the training speech ids.
    std::vector<std::string> train_ids;
    for (const Utterance & u : utts) {
        if (u.split == Split::train && u.kind == UtteranceKind::speech) {
            train_ids.push_back(u.id);
        }
    }
    std::mt19937_64 perm_rng(derive_seed(seed, name_salt("resource-permutation")));
    std::shuffle(train_ids.begin(), train_ids.end(), perm_rng);
    std::map<std::string, std::vector<std::string>> resources;
    for (double f : spec.resource_fractions) {
        const auto n = static_cast<size_t>(std::floor(f * static_cast<double>(train_ids.size()) + 1e-9));
        std::vector<std::string> subset(train_ids.begin(), train_ids.begin() + static_cast<std::ptrdiff_t>(n));
        std::sort(subset.begin(), subset.end());
        resources[resource_tag(f)] = std::move(subset);
    }
    Corpus corpus(spec, std::move(utts), std::move(resources));
    corpus.check_integrity();
    return corpus;
}

json label_balance_report(const Corpus & corpus) {
    json report = json::object();
    for (const TaskSpec & t : corpus.spec().tasks) {
        json per_split = json::object();
        for (Split s : {Split::train, Split::test}) {
            json counts = json::object();
            for (const std::string & a : t.answer_set) {
                counts[a] = 0;
            }
            for (const Utterance * u : corpus.task_pool(t, s)) {
                counts[u->labels.at(t.name)] = counts[u->labels.at(t.name)].get<int>() + 1;
            }
            per_split[to_string(s)] = counts;
        }
        report[t.name] = per_split;
    }
    return report;
}

void write_corpus(const Corpus & corpus, const fs::path & dir) {
    const CorpusSpec & spec = corpus.spec();
    fs::create_directories(dir / "audio");
    std::ofstream manifest(dir / "manifest.jsonl", std::ios::binary);
    if (!manifest) {
        throw Error("cannot write manifest in " + dir.string());
    }
    json header = {{"record", "header"},
                   {"format", "wavprompt-manifest"},
                   {"version", 1},
                   {"audio_format", to_string(spec.audio_format)},
                   {"sample_rate", spec.synth.sample_rate},
                   {"spec", spec.to_json()}};
    manifest << header.dump() << '\n';
    for (const Utterance & u : corpus.utterances()) {
        const std::string rel = "audio/" + u.id + audio_extension(spec.audio_format);
        write_audio(dir / rel, u.waveform, spec.audio_format);
        json rec = {{"id", u.id},
                    {"split", to_string(u.split)},
                    {"kind", to_string(u.kind)},
                    {"tokens", spec.vocab.decode(u.tokens)},
                    {"sound_class", u.sound_class},
                    {"labels", u.labels},
                    {"audio_path", rel},
                    {"duration_s", u.waveform.duration_s()}};
        manifest << rec.dump() << '\n';
    }
    std::ofstream(dir / "resources.json") << json(corpus.resources()).dump(2) << '\n';
    std::ofstream(dir / "label_report.json") << label_balance_report(corpus).dump(2) << '\n';
}

Corpus build_corpus(const CorpusSpec & spec, std::uint64_t seed, const fs::path & dir) {
    Corpus c = generate_corpus(spec, seed);
    write_corpus(c, dir);
    return c;
}

Corpus load_corpus(const fs::path & dir) {
    std::ifstream manifest(dir / "manifest.jsonl");
    if (!manifest) {
        throw IntegrityError("no manifest.jsonl in " + dir.string());
    }
    std::string line;
    if (!std::getline(manifest, line)) {
        throw IntegrityError("empty manifest in " + dir.string());
    }
    const json header = json::parse(line);
    if (header.value("format", "") != "wavprompt-manifest" || header.value("version", 0) != 1) {
        throw IntegrityError("unsupported manifest header in " + dir.string());
    }
    CorpusSpec spec = CorpusSpec::from_json(header.at("spec"));
    const AudioFormat fmt = audio_format_from_string(header.at("audio_format").get<std::string>());
    std::vector<Utterance> utts;
    size_t line_no = 1;
    while (std::getline(manifest, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        json rec;
        try {
            rec = json::parse(line);
        } catch (const json::exception & e) {
            throw IntegrityError("manifest line " + std::to_string(line_no) + ": " + e.what());
        }
        Utterance u;
        u.id = rec.at("id").get<std::string>();
        u.split = split_from_string(rec.at("split").get<std::string>());
        u.kind = kind_from_string(rec.at("kind").get<std::string>());
        u.tokens = spec.vocab.encode(rec.at("tokens").get<std::string>());
        u.sound_class = rec.value("sound_class", "");
        u.labels = rec.at("labels").get<std::map<std::string, std::string>>();
        u.waveform = read_audio(dir / rec.at("audio_path").get<std::string>(), fmt, spec.synth.sample_rate);
        utts.push_back(std::move(u));
    }
    std::ifstream res_in(dir / "resources.json");
    if (!res_in) {
        throw IntegrityError("no resources.json in " + dir.string());
    }
    auto resources = json::parse(res_in).get<std::map<std::string, std::vector<std::string>>>();
    Corpus c(std::move(spec), std::move(utts), std::move(resources));
    c.check_integrity();
    return c;
}

}  // namespace wavprompt
