#include "wavprompt/pretrain.hpp"

#include "wavprompt/seeding.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>

namespace wavprompt {

using ad::Index;
using ad::Matrix;
using nlohmann::json;

void PretrainConfig::validate(const Vocabulary & vocab) const {
    if (steps <= 0) {
        throw ConfigError("pretrain.steps must be > 0");
    }
    if (batch_size <= 0) {
        throw ConfigError("pretrain.batch_size must be > 0");
    }
    if (!(learning_rate > 0.0)) {
        throw ConfigError("pretrain.learning_rate must be > 0");
    }
    if (context_blocks < 0) {
        throw ConfigError("pretrain.context_blocks must be >= 0");
    }
    if (vocab.encode(asr_prompt).empty() || vocab.encode(sound_prompt).empty()) {
        throw ConfigError("pretrain prompts must be non-empty");
    }
}

json PretrainConfig::to_json() const {
    return {{"resource", resource},
            {"batch_size", batch_size},
            {"steps", steps},
            {"learning_rate", learning_rate},
            {"warmup_fraction", warmup_fraction},
            {"weight_decay", weight_decay},
            {"clip_norm", clip_norm},
            {"asr_prompt", asr_prompt},
            {"sound_prompt", sound_prompt},
            {"multitask", multitask},
            {"context_blocks", context_blocks},
            {"seed", seed},
            {"heldout_utterances", heldout_utterances},
            {"log_every", log_every},
            {"checkpoint_every", checkpoint_every}};
}

PretrainConfig PretrainConfig::from_json(const json & j) {
    PretrainConfig c;
    c.resource = j.value("resource", c.resource);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.steps = j.value("steps", c.steps);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.warmup_fraction = j.value("warmup_fraction", c.warmup_fraction);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    c.asr_prompt = j.value("asr_prompt", c.asr_prompt);
    c.sound_prompt = j.value("sound_prompt", c.sound_prompt);
    c.multitask = j.value("multitask", c.multitask);
    c.context_blocks = j.value("context_blocks", c.context_blocks);
    c.seed = j.value("seed", c.seed);
    c.heldout_utterances = j.value("heldout_utterances", c.heldout_utterances);
    c.log_every = j.value("log_every", c.log_every);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    return c;
}

TrainingPrefix build_training_prefix(const EmbeddingSequence & audio, const TokenSequence & prompt,
                                     const TokenSequence & answer, const LanguageModel & lm) {
    TrainingPrefix out;
    out.target = answer;
    out.target.push_back(Vocabulary::kEndAnswer);
    const size_t total = audio.size() + prompt.size() + out.target.size();
    if (total > static_cast<size_t>(lm.config().max_context)) {
        throw ContextOverflowError("training example", total, static_cast<size_t>(lm.config().max_context));
    }
    out.prefix = audio;
    out.prefix.append(lm.embed_text(prompt));
    return out;
}

TrainingPrefix build_training_prefix(const Utterance & utt, const TokenSequence & prompt,
                                     const TokenSequence & answer, const AudioEncoder & encoder,
                                     const LanguageModel & lm) {
    return build_training_prefix(encoder.encode_audio(utt.waveform), prompt, answer, lm);
}

double asr_loss(const std::vector<PretrainExample> & batch, const AudioEncoder & encoder, const LanguageModel & lm) {
    if (batch.empty()) {
        throw std::invalid_argument("asr_loss: empty batch");
    }
    double total = 0.0;
    size_t tokens = 0;
    for (const auto & ex : batch) {
        const TrainingPrefix tp = build_training_prefix(encoder.encode_audio(*ex.audio), ex.prompt, ex.answer, lm);
        total -= lm.sequence_logprob(tp.prefix, tp.target);
        tokens += tp.target.size();
    }
    const double loss = total / static_cast<double>(tokens);
    if (!std::isfinite(loss)) {
        throw DivergenceError("asr_loss is non-finite");
    }
    return loss;
}

size_t chain_length(const std::vector<const PretrainExample *> & chain, const EncoderConfig & enc) {
    size_t n = 0;
    for (const auto * ex : chain) {
        n += enc.output_length(ex->audio->size()) + ex->prompt.size() + ex->answer.size() + 1;
    }
    return n;
}

std::pair<double, size_t> accumulate_asr_gradients(const PretrainExample & ex, const AudioEncoder & encoder,
                                                   const LanguageModel & lm, float loss_scale) {
    return accumulate_chain_gradients({&ex}, encoder, lm, loss_scale);
}

std::pair<double, size_t> accumulate_chain_gradients(const std::vector<const PretrainExample *> & chain,
                                                     const AudioEncoder & encoder, const LanguageModel & lm,
                                                     float loss_scale) {
    if (chain.empty()) {
        throw std::invalid_argument("accumulate_chain_gradients: empty chain");
    }
    const size_t total = chain_length(chain, encoder.config());
    if (total > static_cast<size_t>(lm.config().max_context)) {
        throw ContextOverflowError("training example", total, static_cast<size_t>(lm.config().max_context));
    }
    ad::Tape<float> tape;
    std::vector<ad::Var> parts;
    std::vector<Index> rows;
    TokenSequence targets;
    Index pos = 0;
    for (size_t i = 0; i < chain.size(); ++i) {
        const PretrainExample & ex = *chain[i];
        TokenSequence target = ex.answer;
        target.push_back(Vocabulary::kEndAnswer);
        parts.push_back(encoder.encode(tape, std::span<const float>(ex.audio->samples), true));
        pos += static_cast<Index>(encoder.config().output_length(ex.audio->size()));
        // Prompt, then the target shifted right (teacher forcing); the
        // final <eoa> is fed only when another example follows.
        TokenSequence text = ex.prompt;
        const bool last = i + 1 == chain.size();
        text.insert(text.end(), target.begin(), last ? target.end() - 1 : target.end());
        const Index first = pos + static_cast<Index>(ex.prompt.size()) - 1;
        for (size_t t = 0; t < target.size(); ++t) {
            rows.push_back(first + static_cast<Index>(t));
        }
        targets.insert(targets.end(), target.begin(), target.end());
        parts.push_back(tape.constant(lm.embed_text(text).vectors));
        pos += static_cast<Index>(text.size());
    }
    ad::Var logits = lm.forward(tape, tape.concat_rows(parts), false);
    ad::Var ce = tape.cross_entropy(logits, rows, targets);
    const double nats = tape.scalar(ce);
    tape.backward(tape.scale(ce, loss_scale));
    return {nats, targets.size()};
}

namespace {

struct Pool {
    std::vector<PretrainExample> items;
};

// Speech answers are transcripts; sound answers are the class-name token.
Pool make_pool(const std::vector<const Utterance *> & utts, const TokenSequence & prompt) {
    Pool p;
    for (const auto * u : utts) {
        p.items.push_back({&u->waveform, prompt, u->tokens});
    }
    return p;
}

}  // namespace

PretrainResult pretrain_encoder(const Corpus & corpus, const PretrainConfig & cfg, const EncoderConfig & requested,
                                const LanguageModel & lm, const PretrainHooks & hooks) {
    const Vocabulary & vocab = corpus.spec().vocab;
    EncoderConfig enc_cfg = requested;
    if (enc_cfg.match_lm_norm) {
        enc_cfg.output_norm = lm.mean_token_norm();
    }
    cfg.validate(vocab);
    enc_cfg.validate();
    if (enc_cfg.output_dim != lm.config().embed_dim) {
        throw ConfigError("encoder.output_dim (" + std::to_string(enc_cfg.output_dim) +
                          ") must equal the language model embedding dimension (" +
                          std::to_string(lm.config().embed_dim) + ")");
    }
    if (static_cast<size_t>(lm.config().vocab_size) != vocab.size()) {
        throw ConfigError("language model vocabulary size differs from the corpus vocabulary");
    }
    const auto t0 = std::chrono::steady_clock::now();
    const std::string lm_hash = lm.hash();

    const TokenSequence asr_prompt = vocab.encode(cfg.asr_prompt);
    const TokenSequence snd_prompt = vocab.encode(cfg.sound_prompt);
    const Pool asr = make_pool(corpus.resource_subset(cfg.resource), asr_prompt);
    if (asr.items.empty()) {
        throw ConfigError("resource condition '" + cfg.resource + "' has no training utterances");
    }
    Pool sound;
    if (cfg.multitask) {
        sound = make_pool(corpus.select(Split::train, UtteranceKind::sound), snd_prompt);
        if (sound.items.empty()) {
            throw ConfigError("multitask pretraining needs training sound clips");
        }
    }
    std::vector<PretrainExample> heldout;
    {
        const auto test = corpus.select(Split::test, UtteranceKind::speech);
        const size_t n = std::min(test.size(), static_cast<size_t>(std::max(0, cfg.heldout_utterances)));
        for (size_t i = 0; i < n; ++i) {
            heldout.push_back({&test[i]->waveform, asr_prompt, test[i]->tokens});
        }
    }

    PretrainResult result{AudioEncoder(enc_cfg, derive_seed(cfg.seed, name_salt("encoder"))), {}, 0, lm_hash};
    AudioEncoder & enc = result.encoder;
    nn::AdamOptions opts;
    opts.learning_rate = cfg.learning_rate;
    opts.weight_decay = cfg.weight_decay;
    opts.clip_norm = cfg.clip_norm;
    nn::ParamList<float> params = enc.params();
    nn::Adam<float> adam(params, opts);

    std::mt19937_64 asr_rng(derive_seed(cfg.seed, name_salt("asr-batches")));
    std::mt19937_64 snd_rng(derive_seed(cfg.seed, name_salt("sound-batches")));

    auto save = [&](long step) {
        if (!hooks.checkpoint_path) {
            return;
        }
        json meta = hooks.checkpoint_meta.is_object() ? hooks.checkpoint_meta : json::object();
        meta["pretrain"] = cfg.to_json();
        meta["lm_hash"] = lm_hash;
        meta["step"] = step;
        enc.save(*hooks.checkpoint_path, meta);
    };

    double window_nats = 0.0;
    double window_tokens = 0.0;
    for (long step = 0; step < cfg.steps; ++step) {
        const bool sound_step = cfg.multitask && (step % 2 == 1);
        const Pool & pool = sound_step ? sound : asr;
        std::mt19937_64 & rng = sound_step ? snd_rng : asr_rng;
        std::uniform_int_distribution<size_t> pick(0, pool.items.size() - 1);
        std::uniform_int_distribution<int> context(0, cfg.context_blocks);
        std::vector<std::vector<const PretrainExample *>> batch;
        size_t tokens = 0;
        for (int b = 0; b < cfg.batch_size; ++b) {
            const PretrainExample & ex = pool.items[pick(rng)];
            if (chain_length({&ex}, enc_cfg) > static_cast<size_t>(lm.config().max_context)) {
                ++result.skipped_overflow;
                continue;
            }
            // Solved examples in front, as many as fit.
            std::vector<const PretrainExample *> chain;
            const int k = context(rng);
            for (int c = 0; c < k; ++c) {
                chain.push_back(&pool.items[pick(rng)]);
            }
            chain.push_back(&ex);
            while (chain_length(chain, enc_cfg) > static_cast<size_t>(lm.config().max_context)) {
                chain.erase(chain.begin());
            }
            for (const auto * e : chain) {
                tokens += e->answer.size() + 1;
            }
            batch.push_back(std::move(chain));
        }
        if (batch.empty()) {
            continue;
        }
        nn::zero_grads(params);
        double nats = 0.0;
        for (const auto & chain : batch) {
            nats += accumulate_chain_gradients(chain, enc, lm, 1.0f / static_cast<float>(tokens)).first;
        }
        if (!std::isfinite(nats)) {
            throw DivergenceError("pretraining loss became non-finite at step " + std::to_string(step));
        }
        const double lr = nn::warmup_cosine(step, cfg.steps, cfg.learning_rate, cfg.warmup_fraction);
        const double gnorm = adam.step(lr);
        window_nats += nats;
        window_tokens += static_cast<double>(tokens);
        if ((step + 1) % cfg.log_every == 0 || step + 1 == cfg.steps) {
            TrainRecord r;
            r.step = step + 1;
            r.loss = window_nats / window_tokens;
            r.heldout_loss = heldout.empty() ? r.loss : asr_loss(heldout, enc, lm);
            r.learning_rate = lr;
            r.grad_norm = gnorm;
            r.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            result.records.push_back(r);
            if (hooks.on_record) {
                hooks.on_record(r);
            }
            window_nats = 0.0;
            window_tokens = 0.0;
        }
        if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.steps) {
            save(step + 1);
        }
    }
    if (lm.hash() != lm_hash) {
        throw ContractViolation("language model parameters changed during encoder pretraining");
    }
    save(cfg.steps);
    return result;
}

TokenSequence transcribe(const Waveform & waveform, const AudioEncoder & encoder, const LanguageModel & lm,
                         const TokenSequence & prompt, int max_len) {
    EmbeddingSequence prefix = encoder.encode_audio(waveform);
    prefix.append(lm.embed_text(prompt));
    LanguageModel::State st = lm.start();
    lm.extend(st, prefix.vectors);
    TokenSequence out;
    for (int i = 0; i < max_len; ++i) {
        Index best = 0;
        st.last.maxCoeff(&best);
        const TokenId t = static_cast<TokenId>(best);
        if (t == Vocabulary::kEndAnswer) {
            break;
        }
        out.push_back(t);
        if (st.length + 1 > lm.config().max_context) {
            break;
        }
        lm.extend(st, lm.embed_text({t}).vectors);
    }
    return out;
}

size_t edit_distance(const TokenSequence & ref, const TokenSequence & hyp) {
    std::vector<size_t> prev(hyp.size() + 1);
    std::vector<size_t> cur(hyp.size() + 1);
    std::iota(prev.begin(), prev.end(), size_t{0});
    for (size_t i = 1; i <= ref.size(); ++i) {
        cur[0] = i;
        for (size_t j = 1; j <= hyp.size(); ++j) {
            const size_t sub = prev[j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
            cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
        }
        std::swap(prev, cur);
    }
    return prev[hyp.size()];
}

void TranscriptionScore::add(const TokenSequence & ref, const TokenSequence & hyp) {
    ++utterances;
    reference_tokens += ref.size();
    const size_t e = edit_distance(ref, hyp);
    errors += e;
    exact += e == 0 ? 1 : 0;
}

}  // namespace wavprompt
