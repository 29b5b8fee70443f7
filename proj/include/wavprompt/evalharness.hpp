#pragma once

// Evaluation protocol: balanced query batches, per-(seed, shots)
// demonstrations, accuracy records keyed by the full condition, and
// aggregation (mean over seeds, best over shots, mean over label pairs).

#include "wavprompt/acoustic.hpp"
#include "wavprompt/corpus.hpp"
#include "wavprompt/fewshot.hpp"
#include "wavprompt/langmodel.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace wavprompt {

// One pretrained encoder: downsampling rate x resource condition (x multitask).
struct GridPoint {
    int rate = 8;
    std::string resource = "100pct";
    bool multitask = false;

    std::string tag() const;  // e.g. "r8_100pct" or "r8_100pct_mt"
    static GridPoint from_tag(const std::string & tag);
    bool operator<(const GridPoint & o) const { return tag() < o.tag(); }
    bool operator==(const GridPoint & o) const { return tag() == o.tag(); }
};

enum class TranscriptSource { asr, oracle };
std::string to_string(TranscriptSource s);
TranscriptSource transcript_source_from_string(const std::string & s);

struct EvalConfig {
    std::vector<std::string> tasks = {"gender", "sex", "color", "shade", "animal_verbs"};
    std::vector<int> shots = {0, 2, 4, 6, 8, 10};
    int batch_size = 250;  // drawn before balancing
    int seeds = 5;
    std::uint64_t seed = 0;
    std::vector<PromptMode> modes = {PromptMode::audio, PromptMode::text};
    TranscriptSource transcripts = TranscriptSource::asr;  // text-mode transcripts
    std::vector<GridPoint> grid = {{8, "100pct", false}};
    double noise_std = 0.0;  // test-time noise added to every evaluated waveform
    bool length_normalize = false;
    int min_balanced = 10;  // smaller balanced batches are flagged
    int max_transcript_len = 16;
    std::string asr_prompt = "what did the speaker say ?";  // used to transcribe speech for text mode
    std::string sound_prompt = "what sound is this ?";      // used to transcribe sound clips for text mode

    void validate() const;
    nlohmann::json to_json() const;
    static EvalConfig from_json(const nlohmann::json & j);
};

struct LabeledItem {
    const Utterance * utt = nullptr;
    int label = 0;  // index into the task answer set
};

struct BalancedBatch {
    std::vector<LabeledItem> items;
    bool small = false;  // fewer than min_balanced items after balancing
};

// Samples min(n, |pool|) items without replacement, then keeps, per class,
// the first c sampled items where c is the smallest class count.
BalancedBatch build_balanced_batch(const std::vector<LabeledItem> & pool, int num_classes, int n, std::uint64_t seed,
                                   int min_balanced = 10);

// k items from pool minus `exclude` (by id), without replacement.
std::vector<LabeledItem> sample_demonstrations(const std::vector<LabeledItem> & pool, int k, std::uint64_t seed,
                                               const std::set<std::string> & exclude);

// Labeled test pool of a task.
std::vector<LabeledItem> labeled_pool(const Corpus & corpus, const TaskSpec & task, Split split = Split::test);

// Fraction of batch items where predict(item) == item.label.
double batch_accuracy(const std::vector<LabeledItem> & batch, const std::function<int(const LabeledItem &)> & predict);

std::uint64_t batch_seed(std::uint64_t base, const std::string & task, int seed_index);
std::uint64_t demo_seed(std::uint64_t base, const std::string & task, int seed_index, int shots);

struct SweepRecord {
    std::string task;
    std::string group;
    int rate = 0;
    std::string resource;
    bool multitask = false;
    int shots = 0;
    int seed = 0;
    PromptMode mode = PromptMode::audio;
    bool calibrated = false;
    TranscriptSource transcripts = TranscriptSource::asr;
    double noise_std = 0.0;
    int n = 0;
    int correct = 0;
    double accuracy = 0.0;
    double chance = 0.0;
    int ties = 0;
    int calibration_skipped = 0;
    bool small_batch = false;

    GridPoint grid_point() const { return {rate, resource, multitask}; }
    // Unique key over every condition field.
    std::string key() const;
    nlohmann::json to_json() const;
    static SweepRecord from_json(const nlohmann::json & j);
};

// Keys of every record run_cell produces for one cell.
std::vector<std::string> cell_keys(const TaskSpec & task, const GridPoint & p, int shots, int seed_index,
                                   const EvalConfig & cfg);

// Line-delimited, append-only record file with idempotent keys.
class RecordStore {
  public:
    explicit RecordStore(std::filesystem::path path);

    // Malformed lines are collected in `errors` rather than thrown.
    static std::vector<SweepRecord> read(const std::filesystem::path & path, std::vector<std::string> * errors = nullptr);

    bool contains(const std::string & key) const;
    // Replaces any record with the same key in memory; appends to the file.
    void append(const SweepRecord & r);
    const std::vector<SweepRecord> & records() const { return records_; }
    const std::vector<std::string> & load_errors() const { return load_errors_; }
    // Rewrites the file with one record per key, sorted by key.
    void compact();

  private:
    std::filesystem::path path_;
    std::vector<SweepRecord> records_;
    std::map<std::string, size_t> index_;
    std::vector<std::string> load_errors_;
    mutable std::mutex mu_;
};

struct TranscriptionReport {
    std::string task;
    GridPoint point;
    double noise_std = 0.0;
    double error_rate = 0.0;  // token edit distance / reference tokens on the task's test pool
    size_t items = 0;
    nlohmann::json to_json() const;
};

// Holds the frozen LM, one encoder per grid point and per-encoder caches of
// embeddings and transcripts. Not shared across threads: use one per grid point.
class Evaluator {
  public:
    Evaluator(const Corpus & corpus, const LanguageModel & lm, const AudioEncoder & encoder, GridPoint point,
              const EvalConfig & cfg);

    // Every record of one (task, shots, seed): modes x {raw, calibrated}.
    std::vector<SweepRecord> run_cell(const TaskSpec & task, int shots, int seed_index,
                                      std::vector<nlohmann::json> * episodes = nullptr);

    // Accuracy of a single condition.
    double run_condition(const TaskSpec & task, int shots, int seed_index, PromptMode mode, bool calibrated);

    TranscriptionReport transcription_report(const TaskSpec & task);

    const Waveform & audio(const Utterance & u);
    const EmbeddingSequence & audio_embedding(const Utterance & u);
    const TokenSequence & transcript(const Utterance & u);

  private:
    const EmbeddingSequence & item_embedding(const Utterance & u, PromptMode mode);
    const ContentFreeInput & content_free(const TaskSpec & task);

    const Corpus & corpus_;
    const LanguageModel & lm_;
    const AudioEncoder & encoder_;
    GridPoint point_;
    EvalConfig cfg_;
    std::map<std::string, Waveform> noisy_;
    std::map<std::string, EmbeddingSequence> audio_cache_;
    std::map<std::string, TokenSequence> transcript_cache_;
    std::map<std::string, EmbeddingSequence> text_cache_;
    std::map<std::string, ContentFreeInput> content_free_;
    std::map<std::string, EmbeddingSequence> cf_embedding_;
};

// ---- aggregation ----------------------------------------------------------

struct CurvePoint {
    int shots = 0;
    double mean = 0.0;
    double std = 0.0;  // sample standard deviation across seeds
    int seeds = 0;
};

struct ConditionSummary {
    std::string task;
    std::string group;
    GridPoint point;
    PromptMode mode = PromptMode::audio;
    bool calibrated = false;
    TranscriptSource transcripts = TranscriptSource::asr;
    double noise_std = 0.0;
    double chance = 0.0;
    std::vector<CurvePoint> curve;
    double best = 0.0;  // max over shots of the seed mean
    int best_shots = 0;

    std::string key() const;  // condition key without task
    nlohmann::json to_json() const;
};

struct GroupSummary {
    std::string group;
    GridPoint point;
    PromptMode mode = PromptMode::audio;
    bool calibrated = false;
    TranscriptSource transcripts = TranscriptSource::asr;
    double noise_std = 0.0;
    double chance = 0.0;
    double mean_best = 0.0;  // mean over label pairs of best-over-shots
    std::vector<std::string> tasks;
    nlohmann::json to_json() const;
};

struct Summary {
    std::vector<ConditionSummary> conditions;
    std::vector<GroupSummary> groups;
    nlohmann::json to_json() const;

    const ConditionSummary * find(const std::string & task, const GridPoint & p, PromptMode mode, bool calibrated,
                                  TranscriptSource src = TranscriptSource::asr, double noise_std = 0.0) const;
};

// Missing (seed, shots) cells relative to the union over records of each
// condition, listed as "<condition key> shots=<k> seed=<s>".
std::vector<std::string> missing_cells(const std::vector<SweepRecord> & records);

// Throws IntegrityError listing missing cells when the grid is incomplete.
Summary aggregate(const std::vector<SweepRecord> & records);

struct NaiveRow {
    std::string task;
    GridPoint point;
    double noise_std = 0.0;
    double wavprompt = 0.0;        // best calibrated accuracy, audio mode
    double naive = 0.0;            // best calibrated accuracy, text mode on ASR transcripts
    std::optional<double> oracle;  // text mode on gold transcripts, when present
    std::optional<double> transcription_error;
    nlohmann::json to_json() const;
};

std::vector<NaiveRow> compare_naive(const Summary & summary, const std::vector<TranscriptionReport> & asr = {});

// ---- sweeps -----------------------------------------------------------------

struct SweepOptions {
    int jobs = 1;
    bool force = false;
    std::function<void(const std::string &)> log;
};

// Runs every (grid point, task, shots, seed) cell whose records are not yet in
// the store. Encoders are looked up by grid tag; a missing tag raises
// ConfigError listing the available ones.
void run_sweep(const Corpus & corpus, const LanguageModel & lm, const std::map<std::string, AudioEncoder> & encoders,
               const EvalConfig & cfg, RecordStore & store, const SweepOptions & opts = {},
               std::vector<TranscriptionReport> * asr = nullptr);

}  // namespace wavprompt
