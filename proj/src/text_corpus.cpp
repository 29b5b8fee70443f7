#include "wavprompt/text_corpus.hpp"

#include "wavprompt/seeding.hpp"

#include <algorithm>
#include <map>
#include <random>

namespace wavprompt {

using nlohmann::json;

json TextCorpusConfig::to_json() const {
    return {{"sequences", sequences},
            {"max_shots", max_shots},
            {"max_asr_blocks", max_asr_blocks},
            {"max_silence_per_token", max_silence_per_token},
            {"max_sound_silence", max_sound_silence},
            {"asr_weight", asr_weight},
            {"naming_weight", naming_weight},
            {"fact_weight", fact_weight},
            {"task_weight", task_weight},
            {"identity_fraction", identity_fraction},
            {"association_fraction", association_fraction},
            {"sound_task_fraction", sound_task_fraction},
            {"max_prompt_tokens", max_prompt_tokens},
            {"associations", associations},
            {"asr_prompt", asr_prompt},
            {"sound_prompt", sound_prompt}};
}

TextCorpusConfig TextCorpusConfig::from_json(const json & j) {
    TextCorpusConfig c;
    c.sequences = j.value("sequences", c.sequences);
    c.max_shots = j.value("max_shots", c.max_shots);
    c.max_asr_blocks = j.value("max_asr_blocks", c.max_asr_blocks);
    c.max_silence_per_token = j.value("max_silence_per_token", c.max_silence_per_token);
    c.max_sound_silence = j.value("max_sound_silence", c.max_sound_silence);
    c.asr_weight = j.value("asr_weight", c.asr_weight);
    c.naming_weight = j.value("naming_weight", c.naming_weight);
    c.fact_weight = j.value("fact_weight", c.fact_weight);
    c.task_weight = j.value("task_weight", c.task_weight);
    c.identity_fraction = j.value("identity_fraction", c.identity_fraction);
    c.association_fraction = j.value("association_fraction", c.association_fraction);
    c.sound_task_fraction = j.value("sound_task_fraction", c.sound_task_fraction);
    c.max_prompt_tokens = j.value("max_prompt_tokens", c.max_prompt_tokens);
    if (j.contains("associations")) {
        c.associations = j.at("associations").get<std::vector<std::pair<std::string, std::string>>>();
    }
    c.asr_prompt = j.value("asr_prompt", c.asr_prompt);
    c.sound_prompt = j.value("sound_prompt", c.sound_prompt);
    return c;
}

namespace {

void append(TokenSequence & out, const TokenSequence & more) { out.insert(out.end(), more.begin(), more.end()); }

void append_silence(TokenSequence & out, int count) { out.insert(out.end(), static_cast<size_t>(count), Vocabulary::kSilence); }

TokenSequence with_silence(const TokenSequence & tokens, double density, std::mt19937_64 & rng) {
    TokenSequence out;
    if (density <= 0.0) {
        return tokens;
    }
    std::poisson_distribution<int> lead(density / 2.0);
    std::poisson_distribution<int> gap(density);
    append_silence(out, lead(rng));
    for (TokenId t : tokens) {
        out.push_back(t);
        append_silence(out, gap(rng));
    }
    return out;
}

TokenSequence sound_item(TokenId name, int max_silence, std::mt19937_64 & rng) {
    std::uniform_int_distribution<int> total(0, max_silence);
    const int n = total(rng);
    std::uniform_int_distribution<int> before(0, n);
    const int b = before(rng);
    TokenSequence out;
    append_silence(out, b);
    out.push_back(name);
    append_silence(out, n - b);
    return out;
}

}  // namespace

TokenSequence sample_text_sequence(const CorpusSpec & spec, const TextCorpusConfig & cfg, std::mt19937_64 & rng) {
    const Vocabulary & vocab = spec.vocab;
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double density = unit(rng) * cfg.max_silence_per_token;
    const double total_weight = cfg.asr_weight + cfg.naming_weight + cfg.fact_weight + cfg.task_weight;
    const double pick = unit(rng) * total_weight;
    const TokenId eoa = Vocabulary::kEndAnswer;
    TokenSequence out;

    if (pick < cfg.asr_weight) {
        std::uniform_int_distribution<int> blocks(1, std::max(1, cfg.max_asr_blocks));
        for (int b = blocks(rng); b > 0; --b) {
            const TokenSequence tokens = sample_utterance_tokens(spec, rng);
            append(out, with_silence(tokens, density, rng));
            append(out, vocab.encode(cfg.asr_prompt));
            append(out, tokens);
            out.push_back(eoa);
        }
        return out;
    }
    if (pick < cfg.asr_weight + cfg.naming_weight && !spec.sound_classes.empty()) {
        std::uniform_int_distribution<size_t> cls(0, spec.sound_classes.size() - 1);
        const TokenId name = vocab.id(spec.sound_classes[cls(rng)].class_name);
        append(out, sound_item(name, cfg.max_sound_silence, rng));
        append(out, vocab.encode(cfg.sound_prompt));
        out.push_back(name);
        out.push_back(eoa);
        return out;
    }

    if (pick < cfg.asr_weight + cfg.naming_weight + cfg.fact_weight && !cfg.associations.empty()) {
        std::uniform_int_distribution<size_t> fact(0, cfg.associations.size() - 1);
        std::uniform_int_distribution<int> count(1, 8);
        for (int n = count(rng); n > 0; --n) {
            const auto & [word, associate] = cfg.associations[fact(rng)];
            out.push_back(vocab.id(word));
            out.push_back(vocab.id(associate));
            out.push_back(eoa);
        }
        return out;
    }

    // An episode of a task made up for this sequence.
    std::vector<TokenId> content;
    for (size_t id = Vocabulary::kNumSpecial; id < vocab.size(); ++id) {
        content.push_back(static_cast<TokenId>(id));
    }
    std::map<TokenId, TokenId> associate;
    for (const auto & [word, other] : cfg.associations) {
        associate[vocab.id(word)] = vocab.id(other);
    }
    const bool sound = unit(rng) < cfg.sound_task_fraction && spec.sound_classes.size() >= 2;
    std::vector<TokenId> keywords;
    if (sound) {
        for (const SoundClass & c : spec.sound_classes) {
            keywords.push_back(vocab.id(c.class_name));
        }
        std::shuffle(keywords.begin(), keywords.end(), rng);
        std::uniform_int_distribution<size_t> ways(2, keywords.size());
        keywords.resize(ways(rng));
    } else {
        std::vector<TokenId> symbols;
        for (const std::string & f : spec.filler) {
            symbols.push_back(vocab.id(f));
        }
        for (const KeywordSet & ks : spec.keyword_sets) {
            for (const std::string & k : ks.symbols) {
                symbols.push_back(vocab.id(k));
            }
        }
        std::sort(symbols.begin(), symbols.end());
        symbols.erase(std::unique(symbols.begin(), symbols.end()), symbols.end());
        std::shuffle(symbols.begin(), symbols.end(), rng);
        keywords.assign(symbols.begin(), symbols.begin() + 2);
    }
    std::vector<TokenId> labels = keywords;
    const double relation = unit(rng);
    const bool all_associated = std::all_of(keywords.begin(), keywords.end(),
                                            [&](TokenId k) { return associate.count(k) > 0; });
    if (relation >= cfg.identity_fraction) {
        if (relation < cfg.identity_fraction + cfg.association_fraction && all_associated) {
            for (TokenId & l : labels) {
                l = associate.at(l);
            }
        } else {
            std::vector<TokenId> pool = content;
            std::shuffle(pool.begin(), pool.end(), rng);
            labels.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(keywords.size()));
        }
    }
    TokenSequence prompt;
    {
        std::uniform_int_distribution<int> len(1, std::max(1, cfg.max_prompt_tokens));
        std::uniform_int_distribution<size_t> sym(0, content.size() - 1);
        for (int n = len(rng); n > 0; --n) {
            prompt.push_back(content[sym(rng)]);
        }
    }
    // Items of speech episodes: utterance-like filler with exactly one of the keywords.
    std::vector<TokenId> filler;
    for (const std::string & f : spec.filler) {
        const TokenId id = vocab.id(f);
        if (std::find(keywords.begin(), keywords.end(), id) == keywords.end()) {
            filler.push_back(id);
        }
    }
    std::uniform_int_distribution<int> item_len(spec.min_tokens, spec.max_tokens);
    std::uniform_int_distribution<size_t> filler_pick(0, filler.size() - 1);
    std::uniform_int_distribution<size_t> class_pick(0, keywords.size() - 1);
    std::uniform_int_distribution<int> shots(0, cfg.max_shots);
    const int k = shots(rng);
    for (int i = 0; i <= k; ++i) {
        const size_t c = class_pick(rng);
        if (sound) {
            append(out, sound_item(keywords[c], cfg.max_sound_silence, rng));
        } else {
            TokenSequence item(static_cast<size_t>(item_len(rng)));
            for (TokenId & t : item) {
                t = filler[filler_pick(rng)];
            }
            std::uniform_int_distribution<size_t> at(0, item.size() - 1);
            item[at(rng)] = keywords[c];
            append(out, with_silence(item, density, rng));
        }
        append(out, prompt);
        out.push_back(labels[c]);
        out.push_back(eoa);
    }
    return out;
}

std::vector<TokenSequence> generate_text_corpus(const CorpusSpec & spec, const TextCorpusConfig & cfg,
                                                std::uint64_t seed) {
    spec.validate();
    std::mt19937_64 rng(derive_seed(seed, name_salt("lm-text")));
    std::vector<TokenSequence> out;
    out.reserve(static_cast<size_t>(cfg.sequences));
    for (int i = 0; i < cfg.sequences; ++i) {
        out.push_back(sample_text_sequence(spec, cfg, rng));
    }
    return out;
}

}  // namespace wavprompt
