#include "wavprompt/evalharness.hpp"

#include "wavprompt/pretrain.hpp"
#include "wavprompt/seeding.hpp"
#include "wavprompt/synth.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>
#include <thread>

namespace wavprompt {

using nlohmann::json;

// ---- GridPoint --------------------------------------------------------------

std::string GridPoint::tag() const {
    return "r" + std::to_string(rate) + "_" + resource + (multitask ? "_mt" : "");
}

GridPoint GridPoint::from_tag(const std::string & tag) {
    GridPoint p;
    std::string rest = tag;
    if (rest.size() > 3 && rest.compare(rest.size() - 3, 3, "_mt") == 0) {
        p.multitask = true;
        rest.resize(rest.size() - 3);
    }
    const size_t us = rest.find('_');
    if (rest.empty() || rest[0] != 'r' || us == std::string::npos || us < 2) {
        throw ConfigError("bad grid tag '" + tag + "' (expected r<rate>_<resource>[_mt])");
    }
    try {
        size_t used = 0;
        p.rate = std::stoi(rest.substr(1, us - 1), &used);
        if (used != us - 1) {
            throw std::invalid_argument("trailing");
        }
    } catch (const std::exception &) {
        throw ConfigError("bad rate in grid tag '" + tag + "'");
    }
    p.resource = rest.substr(us + 1);
    if (p.resource.empty() || p.rate < 1) {
        throw ConfigError("bad grid tag '" + tag + "'");
    }
    return p;
}

std::string to_string(TranscriptSource s) { return s == TranscriptSource::asr ? "asr" : "oracle"; }

TranscriptSource transcript_source_from_string(const std::string & s) {
    if (s == "asr") {
        return TranscriptSource::asr;
    }
    if (s == "oracle") {
        return TranscriptSource::oracle;
    }
    throw ConfigError("unknown transcript source '" + s + "' (expected asr or oracle)");
}

// ---- EvalConfig -------------------------------------------------------------

void EvalConfig::validate() const {
    if (tasks.empty()) {
        throw ConfigError("eval.tasks must not be empty");
    }
    if (shots.empty()) {
        throw ConfigError("eval.shots must not be empty");
    }
    for (int k : shots) {
        if (k < 0 || k > static_cast<int>(Episode::kMaxDemonstrations)) {
            throw ConfigError("eval.shots entries must lie in [0, 10], got " + std::to_string(k));
        }
    }
    if (batch_size < 1) {
        throw ConfigError("eval.batch_size must be positive");
    }
    if (seeds < 1) {
        throw ConfigError("eval.seeds must be positive");
    }
    for (int k : shots) {
        if (batch_size < 2 * k) {
            throw ConfigError("eval.batch_size (" + std::to_string(batch_size) + ") must be at least twice every shots value (" +
                              std::to_string(k) + ")");
        }
    }
    if (modes.empty()) {
        throw ConfigError("eval.modes must not be empty");
    }
    if (grid.empty()) {
        throw ConfigError("eval.grid must not be empty");
    }
    for (const GridPoint & p : grid) {
        if (p.rate < 1) {
            throw ConfigError("grid rate must be >= 1");
        }
    }
    if (!(noise_std >= 0.0)) {
        throw ConfigError("eval.noise_std must be >= 0");
    }
    if (max_transcript_len < 1) {
        throw ConfigError("eval.max_transcript_len must be positive");
    }
}

json EvalConfig::to_json() const {
    json m = json::array();
    for (PromptMode x : modes) {
        m.push_back(to_string(x));
    }
    json g = json::array();
    for (const GridPoint & p : grid) {
        g.push_back(p.tag());
    }
    return {{"tasks", tasks},
            {"shots", shots},
            {"batch_size", batch_size},
            {"seeds", seeds},
            {"seed", seed},
            {"modes", m},
            {"transcripts", to_string(transcripts)},
            {"grid", g},
            {"noise_std", noise_std},
            {"length_normalize", length_normalize},
            {"min_balanced", min_balanced},
            {"max_transcript_len", max_transcript_len},
            {"asr_prompt", asr_prompt},
            {"sound_prompt", sound_prompt}};
}

EvalConfig EvalConfig::from_json(const json & j) {
    EvalConfig c;
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string & k = it.key();
        const json & v = it.value();
        if (k == "tasks") {
            c.tasks = v.get<std::vector<std::string>>();
        } else if (k == "shots") {
            c.shots = v.get<std::vector<int>>();
        } else if (k == "batch_size") {
            c.batch_size = v.get<int>();
        } else if (k == "seeds") {
            c.seeds = v.get<int>();
        } else if (k == "seed") {
            c.seed = v.get<std::uint64_t>();
        } else if (k == "modes") {
            c.modes.clear();
            for (const auto & s : v) {
                c.modes.push_back(prompt_mode_from_string(s.get<std::string>()));
            }
        } else if (k == "transcripts") {
            c.transcripts = transcript_source_from_string(v.get<std::string>());
        } else if (k == "grid") {
            c.grid.clear();
            for (const auto & s : v) {
                c.grid.push_back(GridPoint::from_tag(s.get<std::string>()));
            }
        } else if (k == "noise_std") {
            c.noise_std = v.get<double>();
        } else if (k == "length_normalize") {
            c.length_normalize = v.get<bool>();
        } else if (k == "min_balanced") {
            c.min_balanced = v.get<int>();
        } else if (k == "max_transcript_len") {
            c.max_transcript_len = v.get<int>();
        } else if (k == "asr_prompt") {
            c.asr_prompt = v.get<std::string>();
        } else if (k == "sound_prompt") {
            c.sound_prompt = v.get<std::string>();
        } else {
            throw ConfigError("unknown eval config key '" + k + "'");
        }
    }
    c.validate();
    return c;
}

// ---- batches and demonstrations ---------------------------------------------

BalancedBatch build_balanced_batch(const std::vector<LabeledItem> & pool, int num_classes, int n, std::uint64_t seed,
                                   int min_balanced) {
    if (num_classes < 1 || n < 1) {
        throw ConfigError("balanced batch needs num_classes >= 1 and n >= 1");
    }
    std::vector<int> in_pool(static_cast<size_t>(num_classes), 0);
    for (const LabeledItem & it : pool) {
        if (it.label < 0 || it.label >= num_classes) {
            throw IntegrityError("pool item '" + it.utt->id + "' has label index " + std::to_string(it.label) +
                                 " outside [0, " + std::to_string(num_classes) + ")");
        }
        ++in_pool[static_cast<size_t>(it.label)];
    }
    for (int c = 0; c < num_classes; ++c) {
        if (in_pool[static_cast<size_t>(c)] == 0) {
            throw ConfigError("class " + std::to_string(c) + " has no items in the pool");
        }
    }

    std::vector<size_t> order(pool.size());
    for (size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    order.resize(std::min(order.size(), static_cast<size_t>(n)));

    std::vector<int> sampled(static_cast<size_t>(num_classes), 0);
    for (size_t i : order) {
        ++sampled[static_cast<size_t>(pool[i].label)];
    }
    const int c = *std::min_element(sampled.begin(), sampled.end());

    BalancedBatch b;
    std::vector<int> kept(static_cast<size_t>(num_classes), 0);
    for (size_t i : order) {
        int & k = kept[static_cast<size_t>(pool[i].label)];
        if (k < c) {
            ++k;
            b.items.push_back(pool[i]);
        }
    }
    b.small = static_cast<int>(b.items.size()) < min_balanced;
    return b;
}

std::vector<LabeledItem> sample_demonstrations(const std::vector<LabeledItem> & pool, int k, std::uint64_t seed,
                                               const std::set<std::string> & exclude) {
    if (k < 0) {
        throw ConfigError("number of demonstrations must be >= 0");
    }
    std::vector<LabeledItem> candidates;
    for (const LabeledItem & it : pool) {
        if (!exclude.count(it.utt->id)) {
            candidates.push_back(it);
        }
    }
    if (static_cast<size_t>(k) > candidates.size()) {
        throw ConfigError("cannot draw " + std::to_string(k) + " demonstrations from " +
                          std::to_string(candidates.size()) + " candidates");
    }
    std::mt19937_64 rng(seed);
    std::shuffle(candidates.begin(), candidates.end(), rng);
    candidates.resize(static_cast<size_t>(k));
    return candidates;
}

std::vector<LabeledItem> labeled_pool(const Corpus & corpus, const TaskSpec & task, Split split) {
    std::vector<LabeledItem> out;
    for (const Utterance * u : corpus.task_pool(task, split)) {
        const int idx = task.answer_index(u->labels.at(task.name));
        if (idx < 0) {
            throw IntegrityError("utterance '" + u->id + "' has a label outside the answer set of " + task.name);
        }
        out.push_back({u, idx});
    }
    return out;
}

double batch_accuracy(const std::vector<LabeledItem> & batch, const std::function<int(const LabeledItem &)> & predict) {
    if (batch.empty()) {
        return 0.0;
    }
    size_t correct = 0;
    for (const LabeledItem & it : batch) {
        correct += predict(it) == it.label ? 1 : 0;
    }
    return static_cast<double>(correct) / static_cast<double>(batch.size());
}

std::uint64_t batch_seed(std::uint64_t base, const std::string & task, int seed_index) {
    return derive_seed(derive_seed(base, name_salt("batch:" + task)), static_cast<std::uint64_t>(seed_index));
}

std::uint64_t demo_seed(std::uint64_t base, const std::string & task, int seed_index, int shots) {
    const std::uint64_t s = derive_seed(derive_seed(base, name_salt("demos:" + task)), static_cast<std::uint64_t>(seed_index));
    return derive_seed(s, static_cast<std::uint64_t>(shots));
}

// ---- SweepRecord ------------------------------------------------------------

namespace {

std::string fmt_noise(double x) {
    std::ostringstream os;
    os << std::setprecision(6) << x;
    return os.str();
}

// Audio-mode records do not depend on the transcript source.
std::string transcript_field(PromptMode mode, TranscriptSource src) {
    return mode == PromptMode::audio ? "-" : to_string(src);
}

std::string condition_key(const std::string & task, const GridPoint & p, PromptMode mode, bool calibrated,
                          TranscriptSource src, double noise) {
    return task + "|" + p.tag() + "|" + to_string(mode) + "|" + (calibrated ? "cal" : "raw") + "|" +
           transcript_field(mode, src) + "|noise=" + fmt_noise(noise);
}

}  // namespace

std::string SweepRecord::key() const {
    return condition_key(task, grid_point(), mode, calibrated, transcripts, noise_std) + "|shots=" +
           std::to_string(shots) + "|seed=" + std::to_string(seed);
}

json SweepRecord::to_json() const {
    return {{"task", task},
            {"group", group},
            {"rate", rate},
            {"resource", resource},
            {"multitask", multitask},
            {"shots", shots},
            {"seed", seed},
            {"mode", to_string(mode)},
            {"calibrated", calibrated},
            {"transcripts", to_string(transcripts)},
            {"noise_std", noise_std},
            {"n", n},
            {"correct", correct},
            {"accuracy", accuracy},
            {"chance", chance},
            {"ties", ties},
            {"calibration_skipped", calibration_skipped},
            {"small_batch", small_batch}};
}

SweepRecord SweepRecord::from_json(const json & j) {
    SweepRecord r;
    r.task = j.at("task").get<std::string>();
    r.group = j.at("group").get<std::string>();
    r.rate = j.at("rate").get<int>();
    r.resource = j.at("resource").get<std::string>();
    r.multitask = j.at("multitask").get<bool>();
    r.shots = j.at("shots").get<int>();
    r.seed = j.at("seed").get<int>();
    r.mode = prompt_mode_from_string(j.at("mode").get<std::string>());
    r.calibrated = j.at("calibrated").get<bool>();
    r.transcripts = transcript_source_from_string(j.at("transcripts").get<std::string>());
    r.noise_std = j.at("noise_std").get<double>();
    r.n = j.at("n").get<int>();
    r.correct = j.at("correct").get<int>();
    r.accuracy = j.at("accuracy").get<double>();
    r.chance = j.at("chance").get<double>();
    r.ties = j.value("ties", 0);
    r.calibration_skipped = j.value("calibration_skipped", 0);
    r.small_batch = j.value("small_batch", false);
    if (r.n < 0 || r.correct < 0 || r.correct > r.n) {
        throw IntegrityError("record has inconsistent counts (n " + std::to_string(r.n) + ", correct " +
                             std::to_string(r.correct) + ")");
    }
    if (!(r.accuracy >= 0.0 && r.accuracy <= 1.0)) {
        throw IntegrityError("record accuracy outside [0, 1]");
    }
    return r;
}

std::vector<std::string> cell_keys(const TaskSpec & task, const GridPoint & p, int shots, int seed_index,
                                   const EvalConfig & cfg) {
    std::vector<std::string> out;
    for (PromptMode m : cfg.modes) {
        for (bool cal : {false, true}) {
            SweepRecord r;
            r.task = task.name;
            r.rate = p.rate;
            r.resource = p.resource;
            r.multitask = p.multitask;
            r.shots = shots;
            r.seed = seed_index;
            r.mode = m;
            r.calibrated = cal;
            r.transcripts = cfg.transcripts;
            r.noise_std = cfg.noise_std;
            out.push_back(r.key());
        }
    }
    return out;
}

// ---- RecordStore ------------------------------------------------------------

RecordStore::RecordStore(std::filesystem::path path) : path_(std::move(path)) {
    if (std::filesystem::exists(path_)) {
        for (SweepRecord & r : read(path_, &load_errors_)) {
            const std::string k = r.key();
            auto it = index_.find(k);
            if (it == index_.end()) {
                index_[k] = records_.size();
                records_.push_back(std::move(r));
            } else {
                records_[it->second] = std::move(r);
            }
        }
    }
}

std::vector<SweepRecord> RecordStore::read(const std::filesystem::path & path, std::vector<std::string> * errors) {
    std::ifstream in(path);
    if (!in) {
        throw IntegrityError("cannot open record file " + path.string());
    }
    std::vector<SweepRecord> out;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        try {
            out.push_back(SweepRecord::from_json(json::parse(line)));
        } catch (const std::exception & e) {
            const std::string msg = path.string() + ":" + std::to_string(lineno) + ": " + e.what();
            if (!errors) {
                throw IntegrityError(msg);
            }
            errors->push_back(msg);
        }
    }
    return out;
}

bool RecordStore::contains(const std::string & key) const {
    std::lock_guard<std::mutex> lock(mu_);
    return index_.count(key) > 0;
}

void RecordStore::append(const SweepRecord & r) {
    std::lock_guard<std::mutex> lock(mu_);
    if (path_.has_parent_path()) {
        std::filesystem::create_directories(path_.parent_path());
    }
    std::ofstream out(path_, std::ios::app);
    if (!out) {
        throw IntegrityError("cannot append to record file " + path_.string());
    }
    out << r.to_json().dump() << '\n';
    out.flush();
    const std::string k = r.key();
    auto it = index_.find(k);
    if (it == index_.end()) {
        index_[k] = records_.size();
        records_.push_back(r);
    } else {
        records_[it->second] = r;
    }
}

void RecordStore::compact() {
    std::lock_guard<std::mutex> lock(mu_);
    const std::filesystem::path tmp = path_.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        for (const auto & [k, i] : index_) {
            out << records_[i].to_json().dump() << '\n';
        }
        if (!out) {
            throw IntegrityError("cannot write " + tmp.string());
        }
    }
    std::filesystem::rename(tmp, path_);
}

json TranscriptionReport::to_json() const {
    return {{"task", task}, {"grid", point.tag()}, {"noise_std", noise_std}, {"error_rate", error_rate}, {"items", items}};
}

// ---- Evaluator --------------------------------------------------------------

Evaluator::Evaluator(const Corpus & corpus, const LanguageModel & lm, const AudioEncoder & encoder, GridPoint point,
                     const EvalConfig & cfg)
    : corpus_(corpus), lm_(lm), encoder_(encoder), point_(std::move(point)), cfg_(cfg) {
    cfg_.validate();
}

const Waveform & Evaluator::audio(const Utterance & u) {
    if (cfg_.noise_std <= 0.0) {
        return u.waveform;
    }
    auto it = noisy_.find(u.id);
    if (it == noisy_.end()) {
        const std::uint64_t s = derive_seed(name_salt("eval-noise"), name_salt(u.id));
        it = noisy_.emplace(u.id, add_noise(u.waveform, cfg_.noise_std, s)).first;
    }
    return it->second;
}

const EmbeddingSequence & Evaluator::audio_embedding(const Utterance & u) {
    auto it = audio_cache_.find(u.id);
    if (it == audio_cache_.end()) {
        it = audio_cache_.emplace(u.id, encoder_.encode_audio(audio(u))).first;
    }
    return it->second;
}

const TokenSequence & Evaluator::transcript(const Utterance & u) {
    if (cfg_.transcripts == TranscriptSource::oracle) {
        return u.tokens;
    }
    auto it = transcript_cache_.find(u.id);
    if (it == transcript_cache_.end()) {
        const Vocabulary & vocab = corpus_.spec().vocab;
        const std::string & prompt = u.kind == UtteranceKind::sound ? cfg_.sound_prompt : cfg_.asr_prompt;
        TokenSequence t = transcribe(audio(u), encoder_, lm_, vocab.encode(prompt), cfg_.max_transcript_len);
        if (t.empty()) {
            // An empty transcript still needs one row to sit in the prompt.
            t.push_back(Vocabulary::kSilence);
        }
        it = transcript_cache_.emplace(u.id, std::move(t)).first;
    }
    return it->second;
}

const EmbeddingSequence & Evaluator::item_embedding(const Utterance & u, PromptMode mode) {
    if (mode == PromptMode::audio) {
        return audio_embedding(u);
    }
    auto it = text_cache_.find(u.id);
    if (it == text_cache_.end()) {
        it = text_cache_.emplace(u.id, lm_.embed_text(transcript(u))).first;
    }
    return it->second;
}

const ContentFreeInput & Evaluator::content_free(const TaskSpec & task) {
    auto it = content_free_.find(task.name);
    if (it == content_free_.end()) {
        const auto pool = corpus_.task_pool(task, Split::test);
        double total = 0.0;
        for (const Utterance * u : pool) {
            total += u->waveform.duration_s();
        }
        const int sr = encoder_.config().sample_rate;
        double dur = pool.empty() ? 1.0 : total / static_cast<double>(pool.size());
        dur = std::max(dur, static_cast<double>(encoder_.config().min_samples()) / sr);
        it = content_free_.emplace(task.name, make_content_free(dur, sr)).first;
    }
    return it->second;
}

std::vector<SweepRecord> Evaluator::run_cell(const TaskSpec & task, int shots, int seed_index,
                                             std::vector<json> * episodes) {
    const Vocabulary & vocab = corpus_.spec().vocab;
    const auto pool = labeled_pool(corpus_, task, Split::test);
    const int k = static_cast<int>(task.answer_set.size());
    const BalancedBatch batch =
        build_balanced_batch(pool, k, cfg_.batch_size, batch_seed(cfg_.seed, task.name, seed_index), cfg_.min_balanced);
    std::set<std::string> exclude;
    for (const LabeledItem & it : batch.items) {
        exclude.insert(it.utt->id);
    }
    const auto demos = sample_demonstrations(pool, shots, demo_seed(cfg_.seed, task.name, seed_index, shots), exclude);
    const ContentFreeInput & cf = content_free(task);

    std::vector<SweepRecord> out;
    for (PromptMode mode : cfg_.modes) {
        EpisodeScorer scorer(lm_, vocab, task.answer_set, task.question_prompt, {cfg_.length_normalize});
        EmbeddingSequence demo_emb;
        for (const LabeledItem & d : demos) {
            demo_emb.append(item_embedding(*d.utt, mode));
            TokenSequence text = vocab.encode(task.question_prompt);
            const TokenSequence ans = vocab.encode(task.answer_set[static_cast<size_t>(d.label)]);
            text.insert(text.end(), ans.begin(), ans.end());
            text.push_back(Vocabulary::kEndAnswer);
            demo_emb.append(lm_.embed_text(text));
        }
        scorer.set_demonstrations(demo_emb);

        const std::string cf_key = task.name + "|" + to_string(mode);
        auto cfit = cf_embedding_.find(cf_key);
        if (cfit == cf_embedding_.end()) {
            EmbeddingSequence e = mode == PromptMode::audio ? encoder_.encode_audio(cf.audio) : lm_.embed_text(cf.text);
            cfit = cf_embedding_.emplace(cf_key, std::move(e)).first;
        }
        const AnswerDistribution cf_dist = scorer.score(cfit->second);

        SweepRecord base;
        base.task = task.name;
        base.group = task.group;
        base.rate = point_.rate;
        base.resource = point_.resource;
        base.multitask = point_.multitask;
        base.shots = shots;
        base.seed = seed_index;
        base.mode = mode;
        base.transcripts = mode == PromptMode::audio ? TranscriptSource::asr : cfg_.transcripts;
        base.noise_std = cfg_.noise_std;
        base.n = static_cast<int>(batch.items.size());
        base.chance = task.chance();
        base.small_batch = batch.small;
        SweepRecord raw = base;
        SweepRecord cal = base;
        cal.calibrated = true;

        for (const LabeledItem & q : batch.items) {
            const Prediction p = make_prediction(scorer.score(item_embedding(*q.utt, mode)), cf_dist);
            raw.correct += p.raw_choice.index == q.label ? 1 : 0;
            cal.correct += p.calibrated_choice.index == q.label ? 1 : 0;
            raw.ties += p.raw_choice.tie ? 1 : 0;
            cal.ties += p.calibrated_choice.tie ? 1 : 0;
            cal.calibration_skipped += p.calibration_skipped ? 1 : 0;
            if (episodes) {
                json d = json::array();
                for (const LabeledItem & x : demos) {
                    d.push_back({{"id", x.utt->id}, {"answer", task.answer_set[static_cast<size_t>(x.label)]}});
                }
                episodes->push_back({{"task", task.name},
                                     {"grid", point_.tag()},
                                     {"shots", shots},
                                     {"seed", seed_index},
                                     {"mode", to_string(mode)},
                                     {"query", q.utt->id},
                                     {"gold", task.answer_set[static_cast<size_t>(q.label)]},
                                     {"demonstrations", d},
                                     {"raw", p.raw.to_json()},
                                     {"content_free", p.content_free.to_json()},
                                     {"calibrated", p.calibrated.to_json()},
                                     {"raw_prediction", p.label(false)},
                                     {"calibrated_prediction", p.label(true)},
                                     {"calibration_skipped", p.calibration_skipped}});
            }
        }
        for (SweepRecord * r : {&raw, &cal}) {
            r->accuracy = r->n > 0 ? static_cast<double>(r->correct) / r->n : 0.0;
            out.push_back(*r);
        }
    }
    return out;
}

double Evaluator::run_condition(const TaskSpec & task, int shots, int seed_index, PromptMode mode, bool calibrated) {
    EvalConfig saved = cfg_;
    cfg_.modes = {mode};
    std::vector<SweepRecord> rs;
    try {
        rs = run_cell(task, shots, seed_index);
    } catch (...) {
        cfg_ = saved;
        throw;
    }
    cfg_ = saved;
    for (const SweepRecord & r : rs) {
        if (r.calibrated == calibrated) {
            return r.accuracy;
        }
    }
    return 0.0;
}

TranscriptionReport Evaluator::transcription_report(const TaskSpec & task) {
    TranscriptionScore score;
    for (const Utterance * u : corpus_.task_pool(task, Split::test)) {
        score.add(u->tokens, transcript(*u));
    }
    TranscriptionReport r;
    r.task = task.name;
    r.point = point_;
    r.noise_std = cfg_.noise_std;
    r.error_rate = score.wer();
    r.items = score.utterances;
    return r;
}

// ---- aggregation ------------------------------------------------------------

std::string ConditionSummary::key() const {
    return point.tag() + "|" + to_string(mode) + "|" + (calibrated ? "cal" : "raw") + "|" +
           transcript_field(mode, transcripts) + "|noise=" + fmt_noise(noise_std);
}

json ConditionSummary::to_json() const {
    json c = json::array();
    for (const CurvePoint & p : curve) {
        c.push_back({{"shots", p.shots}, {"mean", p.mean}, {"std", p.std}, {"seeds", p.seeds}});
    }
    return {{"task", task},
            {"group", group},
            {"grid", point.tag()},
            {"mode", to_string(mode)},
            {"calibrated", calibrated},
            {"transcripts", transcript_field(mode, transcripts)},
            {"noise_std", noise_std},
            {"chance", chance},
            {"curve", c},
            {"best", best},
            {"best_shots", best_shots}};
}

json GroupSummary::to_json() const {
    return {{"group", group},
            {"grid", point.tag()},
            {"mode", to_string(mode)},
            {"calibrated", calibrated},
            {"transcripts", transcript_field(mode, transcripts)},
            {"noise_std", noise_std},
            {"chance", chance},
            {"mean_best", mean_best},
            {"tasks", tasks}};
}

json Summary::to_json() const {
    json c = json::array();
    for (const auto & x : conditions) {
        c.push_back(x.to_json());
    }
    json g = json::array();
    for (const auto & x : groups) {
        g.push_back(x.to_json());
    }
    return {{"conditions", c}, {"groups", g}};
}

const ConditionSummary * Summary::find(const std::string & task, const GridPoint & p, PromptMode mode, bool calibrated,
                                       TranscriptSource src, double noise_std) const {
    const std::string want = condition_key(task, p, mode, calibrated, src, noise_std);
    for (const ConditionSummary & c : conditions) {
        if (condition_key(c.task, c.point, c.mode, c.calibrated, c.transcripts, c.noise_std) == want) {
            return &c;
        }
    }
    return nullptr;
}

namespace {

std::string record_condition(const SweepRecord & r) {
    return condition_key(r.task, r.grid_point(), r.mode, r.calibrated, r.transcripts, r.noise_std);
}

std::map<std::string, std::vector<const SweepRecord *>> by_condition(const std::vector<SweepRecord> & records) {
    std::map<std::string, std::vector<const SweepRecord *>> m;
    for (const SweepRecord & r : records) {
        m[record_condition(r)].push_back(&r);
    }
    return m;
}

}  // namespace

std::vector<std::string> missing_cells(const std::vector<SweepRecord> & records) {
    std::vector<std::string> out;
    for (const auto & [cond, rs] : by_condition(records)) {
        std::set<int> shots, seeds;
        std::set<std::pair<int, int>> have;
        for (const SweepRecord * r : rs) {
            shots.insert(r->shots);
            seeds.insert(r->seed);
            have.insert({r->shots, r->seed});
        }
        for (int k : shots) {
            for (int s : seeds) {
                if (!have.count({k, s})) {
                    out.push_back(cond + " shots=" + std::to_string(k) + " seed=" + std::to_string(s));
                }
            }
        }
    }
    return out;
}

Summary aggregate(const std::vector<SweepRecord> & records) {
    const auto missing = missing_cells(records);
    if (!missing.empty()) {
        std::string msg = "incomplete grid, " + std::to_string(missing.size()) + " missing cell(s):";
        for (size_t i = 0; i < missing.size() && i < 20; ++i) {
            msg += "\n  " + missing[i];
        }
        if (missing.size() > 20) {
            msg += "\n  ...";
        }
        throw IntegrityError(msg);
    }

    Summary s;
    for (const auto & [cond, rs] : by_condition(records)) {
        const SweepRecord & f = *rs.front();
        ConditionSummary c;
        c.task = f.task;
        c.group = f.group;
        c.point = f.grid_point();
        c.mode = f.mode;
        c.calibrated = f.calibrated;
        c.transcripts = f.transcripts;
        c.noise_std = f.noise_std;
        c.chance = f.chance;
        std::map<int, std::map<int, double>> acc;  // shots -> seed -> accuracy (last record wins)
        for (const SweepRecord * r : rs) {
            acc[r->shots][r->seed] = r->accuracy;
        }
        bool first = true;
        for (const auto & [k, by_seed] : acc) {
            CurvePoint p;
            p.shots = k;
            p.seeds = static_cast<int>(by_seed.size());
            for (const auto & [sd, a] : by_seed) {
                p.mean += a;
            }
            p.mean /= p.seeds;
            if (p.seeds > 1) {
                double ss = 0.0;
                for (const auto & [sd, a] : by_seed) {
                    ss += (a - p.mean) * (a - p.mean);
                }
                p.std = std::sqrt(ss / (p.seeds - 1));
            }
            if (first || p.mean > c.best) {
                c.best = p.mean;
                c.best_shots = k;
                first = false;
            }
            c.curve.push_back(p);
        }
        s.conditions.push_back(std::move(c));
    }

    std::map<std::string, std::vector<const ConditionSummary *>> groups;
    for (const ConditionSummary & c : s.conditions) {
        groups[c.group + "|" + c.key()].push_back(&c);
    }
    for (const auto & [gk, cs] : groups) {
        const ConditionSummary & f = *cs.front();
        GroupSummary g;
        g.group = f.group;
        g.point = f.point;
        g.mode = f.mode;
        g.calibrated = f.calibrated;
        g.transcripts = f.transcripts;
        g.noise_std = f.noise_std;
        g.chance = f.chance;
        for (const ConditionSummary * c : cs) {
            g.mean_best += c->best;
            g.tasks.push_back(c->task);
        }
        g.mean_best /= static_cast<double>(cs.size());
        s.groups.push_back(std::move(g));
    }
    return s;
}

json NaiveRow::to_json() const {
    json j = {{"task", task}, {"grid", point.tag()}, {"noise_std", noise_std}, {"wavprompt", wavprompt}, {"naive", naive}};
    j["oracle"] = oracle ? json(*oracle) : json(nullptr);
    j["transcription_error"] = transcription_error ? json(*transcription_error) : json(nullptr);
    return j;
}

std::vector<NaiveRow> compare_naive(const Summary & summary, const std::vector<TranscriptionReport> & asr) {
    std::vector<NaiveRow> out;
    for (const ConditionSummary & c : summary.conditions) {
        if (c.mode != PromptMode::audio || !c.calibrated) {
            continue;
        }
        const ConditionSummary * naive =
            summary.find(c.task, c.point, PromptMode::text, true, TranscriptSource::asr, c.noise_std);
        if (!naive) {
            continue;
        }
        NaiveRow row;
        row.task = c.task;
        row.point = c.point;
        row.noise_std = c.noise_std;
        row.wavprompt = c.best;
        row.naive = naive->best;
        if (const ConditionSummary * o =
                summary.find(c.task, c.point, PromptMode::text, true, TranscriptSource::oracle, c.noise_std)) {
            row.oracle = o->best;
        }
        for (const TranscriptionReport & t : asr) {
            if (t.task == c.task && t.point == c.point && fmt_noise(t.noise_std) == fmt_noise(c.noise_std)) {
                row.transcription_error = t.error_rate;
            }
        }
        out.push_back(std::move(row));
    }
    return out;
}

// ---- sweeps -----------------------------------------------------------------

void run_sweep(const Corpus & corpus, const LanguageModel & lm, const std::map<std::string, AudioEncoder> & encoders,
               const EvalConfig & cfg, RecordStore & store, const SweepOptions & opts,
               std::vector<TranscriptionReport> * asr) {
    cfg.validate();
    std::vector<const TaskSpec *> tasks;
    for (const std::string & name : cfg.tasks) {
        tasks.push_back(&corpus.spec().task(name));
    }
    for (const GridPoint & p : cfg.grid) {
        if (!encoders.count(p.tag())) {
            std::string avail;
            for (const auto & [tag, e] : encoders) {
                avail += (avail.empty() ? "" : ", ") + tag;
            }
            throw ConfigError("no encoder for grid point " + p.tag() + " (available: " +
                              (avail.empty() ? "none" : avail) + ")");
        }
    }

    std::mutex log_mu;
    auto log = [&](const std::string & s) {
        if (opts.log) {
            std::lock_guard<std::mutex> lock(log_mu);
            opts.log(s);
        }
    };
    std::mutex asr_mu;

    auto run_point = [&](const GridPoint & p) {
        Evaluator ev(corpus, lm, encoders.at(p.tag()), p, cfg);
        for (const TaskSpec * t : tasks) {
            size_t done = 0, skipped = 0;
            for (int k : cfg.shots) {
                for (int s = 0; s < cfg.seeds; ++s) {
                    bool have = !opts.force;
                    for (const std::string & key : cell_keys(*t, p, k, s, cfg)) {
                        have = have && store.contains(key);
                    }
                    if (have) {
                        ++skipped;
                        continue;
                    }
                    for (const SweepRecord & r : ev.run_cell(*t, k, s)) {
                        store.append(r);
                    }
                    ++done;
                }
            }
            log(p.tag() + " " + t->name + ": " + std::to_string(done) + " cell(s) run, " + std::to_string(skipped) +
                " already present");
            const bool wants_asr = std::find(cfg.modes.begin(), cfg.modes.end(), PromptMode::text) != cfg.modes.end() &&
                                   cfg.transcripts == TranscriptSource::asr;
            if (asr && wants_asr) {
                TranscriptionReport rep = ev.transcription_report(*t);
                std::lock_guard<std::mutex> lock(asr_mu);
                asr->push_back(std::move(rep));
            }
        }
    };

    const int jobs = std::max(1, std::min<int>(opts.jobs, static_cast<int>(cfg.grid.size())));
    if (jobs == 1) {
        for (const GridPoint & p : cfg.grid) {
            run_point(p);
        }
        return;
    }
    std::atomic<size_t> next{0};
    std::exception_ptr first_error;
    std::mutex err_mu;
    std::vector<std::thread> workers;
    for (int w = 0; w < jobs; ++w) {
        workers.emplace_back([&] {
            for (size_t i = next++; i < cfg.grid.size(); i = next++) {
                try {
                    run_point(cfg.grid[i]);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(err_mu);
                    if (!first_error) {
                        first_error = std::current_exception();
                    }
                }
            }
        });
    }
    for (auto & t : workers) {
        t.join();
    }
    if (first_error) {
        std::rethrow_exception(first_error);
    }
}

}  // namespace wavprompt
