#pragma once

// Synthetic corpora: tone-coded speech utterances with keyword-derived task
// labels, non-speech sound clips, nested resource subsets, and a
// line-delimited manifest on disk.

#include "wavprompt/audio_io.hpp"
#include "wavprompt/synth.hpp"
#include "wavprompt/types.hpp"
#include "wavprompt/vocab.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace wavprompt {

enum class TaskKind { keyword, sound };

// A classification task over a finite answer set.
//
// Keyword tasks label an utterance when exactly one of the rule's keywords
// occurs in its tokens; sound tasks label a clip by its class name.
struct TaskSpec {
    std::string name;
    std::string group;  // label pairs in one group are averaged together
    TaskKind kind = TaskKind::keyword;
    std::vector<std::string> answer_set;
    std::string question_prompt;
    std::vector<std::pair<std::string, std::string>> label_rule;  // keyword or class name -> label

    double chance() const { return 1.0 / static_cast<double>(answer_set.size()); }

    std::optional<std::string> label_for_tokens(const TokenSequence & tokens, const Vocabulary & vocab) const;
    std::optional<std::string> label_for_class(const std::string & class_name) const;

    // Index of `label` in answer_set, or -1.
    int answer_index(const std::string & label) const;

    void validate(const Vocabulary & vocab) const;

    nlohmann::json to_json() const;
    static TaskSpec from_json(const nlohmann::json & j);
};

std::vector<TaskSpec> standard_tasks();

struct KeywordSet {
    std::vector<std::string> symbols;
    double probability = 0.5;  // chance that an utterance carries one of the symbols
};

struct CorpusSpec {
    Vocabulary vocab = Vocabulary::standard();
    SynthConfig synth;
    int train_utterances = 2000;
    int test_utterances = 400;
    int min_tokens = 3;
    int max_tokens = 6;
    std::vector<std::string> filler = {"red",  "suit",  "street", "running", "park", "ball",
                                       "water", "green", "small",  "big",     "near", "holds"};
    std::vector<KeywordSet> keyword_sets = {{{"man", "woman"}, 0.7}, {{"black", "white"}, 0.6}};
    std::vector<TaskSpec> tasks = standard_tasks();
    std::vector<SoundClass> sound_classes = standard_sound_classes();
    int sound_train_per_class = 40;
    int sound_test_per_class = 20;
    std::vector<double> resource_fractions = {0.05, 0.1, 1.0};
    AudioFormat audio_format = AudioFormat::pcm16;

    void validate() const;
    const TaskSpec & task(const std::string & name) const;

    nlohmann::json to_json() const;
    static CorpusSpec from_json(const nlohmann::json & j);
};

enum class Split { train, test };
enum class UtteranceKind { speech, sound };

std::string to_string(Split s);
std::string to_string(UtteranceKind k);

struct Utterance {
    std::string id;
    Split split = Split::train;
    UtteranceKind kind = UtteranceKind::speech;
    TokenSequence tokens;     // transcript (speech) or {class name token} (sound)
    std::string sound_class;  // empty for speech
    Waveform waveform;
    std::map<std::string, std::string> labels;  // task name -> label
};

// Canonical tag for a resource fraction, e.g. 0.05 -> "5pct".
std::string resource_tag(double fraction);

class Corpus {
  public:
    Corpus() = default;
    Corpus(CorpusSpec spec, std::vector<Utterance> utterances, std::map<std::string, std::vector<std::string>> resources);

    const CorpusSpec & spec() const { return spec_; }
    const std::vector<Utterance> & utterances() const { return utterances_; }
    const std::map<std::string, std::vector<std::string>> & resources() const { return resources_; }

    const Utterance & get(const std::string & id) const;

    std::vector<const Utterance *> select(Split split, UtteranceKind kind) const;

    // Training speech utterances of one resource condition.
    std::vector<const Utterance *> resource_subset(const std::string & tag) const;

    // Utterances of `split` carrying a label for `task`.
    std::vector<const Utterance *> task_pool(const TaskSpec & task, Split split) const;

    // Throws IntegrityError on duplicate ids, overlapping splits, invalid
    // labels or non-nested resource subsets.
    void check_integrity() const;

  private:
    CorpusSpec spec_;
    std::vector<Utterance> utterances_;
    std::unordered_map<std::string, size_t> index_;
    std::map<std::string, std::vector<std::string>> resources_;
};

// Draws a speech token sequence: filler tokens with keywords planted per
// keyword set. A forced keyword is always planted.
TokenSequence sample_utterance_tokens(const CorpusSpec & spec, std::mt19937_64 & rng,
                                      const std::optional<std::string> & forced_keyword = std::nullopt);

// Generates a corpus in memory. Waveforms are quantized exactly as the
// on-disk audio format stores them.
Corpus generate_corpus(const CorpusSpec & spec, std::uint64_t seed);

// Writes manifest.jsonl, resources.json, label_report.json and audio/.
void write_corpus(const Corpus & corpus, const std::filesystem::path & dir);

Corpus build_corpus(const CorpusSpec & spec, std::uint64_t seed, const std::filesystem::path & dir);

Corpus load_corpus(const std::filesystem::path & dir);

// Per task and split: label -> count.
nlohmann::json label_balance_report(const Corpus & corpus);

}  // namespace wavprompt
