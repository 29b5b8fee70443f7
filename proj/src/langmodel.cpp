#include "wavprompt/langmodel.hpp"

#include "wavprompt/seeding.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <utility>

namespace wavprompt {

using ad::Index;
using ad::Matrix;
using nlohmann::json;

void LMConfig::validate() const {
    if (vocab_size < 2) {
        throw ConfigError("lm.vocab_size must be >= 2");
    }
    if (embed_dim <= 0 || layers <= 0 || heads <= 0 || ff_dim <= 0 || max_context <= 0) {
        throw ConfigError("lm dimensions must be positive");
    }
    if (embed_dim % heads != 0) {
        throw ConfigError("lm.embed_dim (" + std::to_string(embed_dim) + ") must be divisible by lm.heads (" +
                          std::to_string(heads) + ")");
    }
    if (dropout < 0.0 || dropout >= 1.0) {
        throw ConfigError("lm.dropout must lie in [0, 1)");
    }
}

json LMConfig::to_json() const {
    return {{"vocab_size", vocab_size}, {"embed_dim", embed_dim},     {"layers", layers}, {"heads", heads},
            {"ff_dim", ff_dim},         {"max_context", max_context}, {"dropout", dropout}};
}

LMConfig LMConfig::from_json(const json & j) {
    LMConfig c;
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.layers = j.value("layers", c.layers);
    c.heads = j.value("heads", c.heads);
    c.ff_dim = j.value("ff_dim", c.ff_dim);
    c.max_context = j.value("max_context", c.max_context);
    c.dropout = j.value("dropout", c.dropout);
    return c;
}

LanguageModel::LanguageModel(const LMConfig & cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    const Index d = cfg_.embed_dim;
    token_embedding_ = nn::make_param<float>("lm.token_embedding", cfg_.vocab_size, d);
    position_embedding_ = nn::make_param<float>("lm.position_embedding", cfg_.max_context, d);
    for (int l = 0; l < cfg_.layers; ++l) {
        blocks_.emplace_back("lm.block" + std::to_string(l), d, cfg_.ff_dim, cfg_.heads);
    }
    ln_f_ = nn::LayerNorm<float>("lm.ln_f", d);
    head_ = nn::Linear<float>("lm.head", d, cfg_.vocab_size);

    std::mt19937_64 rng(derive_seed(seed, name_salt("lm-init")));
    const double std = 0.02;
    const double residual_std = std / std::sqrt(2.0 * cfg_.layers);
    nn::fill_normal(token_embedding_.value, std, rng);
    nn::fill_normal(position_embedding_.value, 0.01, rng);
    for (auto & b : blocks_) {
        b.init(rng, std, residual_std);
    }
    head_.init(rng, std);
}

template <typename F>
void LanguageModel::for_each_param(F && f) const {
    f(token_embedding_);
    f(position_embedding_);
    for (const auto & b : blocks_) {
        b.for_each_param(f);
    }
    ln_f_.for_each_param(f);
    head_.for_each_param(f);
}

nn::ParamList<float> LanguageModel::params() {
    nn::ParamList<float> out;
    std::as_const(*this).for_each_param(
        [&](const ad::Parameter<float> & p) { out.push_back(const_cast<ad::Parameter<float> *>(&p)); });
    return out;
}

nn::ConstParamList<float> LanguageModel::params() const {
    nn::ConstParamList<float> out;
    for_each_param([&](const ad::Parameter<float> & p) { out.push_back(&p); });
    return out;
}

size_t LanguageModel::parameter_count() const {
    size_t n = 0;
    for_each_param([&](const ad::Parameter<float> & p) { n += static_cast<size_t>(p.value.size()); });
    return n;
}

std::string LanguageModel::hash() const { return hash_parameters(params()); }

void LanguageModel::zero_output_head() {
    head_.weight.value.setZero();
    head_.bias.value.setZero();
}

void LanguageModel::check_tokens(const TokenSequence & tokens) const {
    for (TokenId t : tokens) {
        if (t < 0 || t >= cfg_.vocab_size) {
            throw VocabularyError("token id " + std::to_string(t) + " outside vocabulary of size " +
                                  std::to_string(cfg_.vocab_size));
        }
    }
}

double LanguageModel::mean_token_norm() const {
    return static_cast<double>(token_embedding_.value.rowwise().norm().mean());
}

EmbeddingSequence LanguageModel::embed_text(const TokenSequence & tokens) const {
    check_tokens(tokens);
    Matrix<float> out(static_cast<Index>(tokens.size()), dim());
    for (size_t i = 0; i < tokens.size(); ++i) {
        out.row(static_cast<Index>(i)) = token_embedding_.value.row(tokens[i]);
    }
    return EmbeddingSequence(std::move(out), Source::text);
}

LanguageModel::State LanguageModel::start() const {
    State s;
    s.keys.assign(blocks_.size(), Matrix<float>(0, dim()));
    s.values.assign(blocks_.size(), Matrix<float>(0, dim()));
    return s;
}

Matrix<float> LanguageModel::extend(State & st, const Matrix<float> & embeddings) const {
    const Index m = embeddings.rows();
    const Index d = dim();
    if (m == 0) {
        return Matrix<float>(0, cfg_.vocab_size);
    }
    if (embeddings.cols() != d) {
        throw std::invalid_argument("extend: embedding dimension " + std::to_string(embeddings.cols()) +
                                    " differs from model dimension " + std::to_string(d));
    }
    const Index past = st.length;
    if (past + m > cfg_.max_context) {
        throw ContextOverflowError("language model input", static_cast<size_t>(past + m),
                                   static_cast<size_t>(cfg_.max_context));
    }
    const Index total = past + m;
    const int heads = cfg_.heads;
    const Index dh = d / heads;
    const float inv_scale = 1.0f / std::sqrt(static_cast<float>(dh));

    Matrix<float> x = embeddings + position_embedding_.value.middleRows(past, m);
    for (size_t l = 0; l < blocks_.size(); ++l) {
        const auto & b = blocks_[l];
        const Matrix<float> qkv = b.qkv.apply(b.ln1.apply(x));
        Matrix<float> & keys = st.keys[l];
        Matrix<float> & vals = st.values[l];
        keys.conservativeResize(total, d);
        vals.conservativeResize(total, d);
        keys.bottomRows(m) = qkv.middleCols(d, d);
        vals.bottomRows(m) = qkv.middleCols(2 * d, d);
        Matrix<float> att(m, d);
        for (int h = 0; h < heads; ++h) {
            Matrix<float> s = (qkv.block(0, h * dh, m, dh) * keys.middleCols(h * dh, dh).transpose()) * inv_scale;
            for (Index i = 0; i < m; ++i) {
                for (Index j = past + i + 1; j < total; ++j) {
                    s(i, j) = -std::numeric_limits<float>::infinity();
                }
            }
            ad::kernels::softmax_rows(s);
            att.middleCols(h * dh, dh).noalias() = s * vals.middleCols(h * dh, dh);
        }
        x += b.attn_out.apply(att);
        x += b.fc2.apply(ad::kernels::gelu<float>(b.fc1.apply(b.ln2.apply(x))));
    }
    Matrix<float> lp = ad::kernels::log_softmax_rows<float>(head_.apply(ln_f_.apply(x)));
    st.length = total;
    st.last = lp.row(m - 1);
    return lp;
}

Matrix<float> LanguageModel::logprobs(const EmbeddingSequence & prefix) const {
    State st = start();
    return extend(st, prefix.vectors);
}

Eigen::RowVectorXf LanguageModel::next_token_logprobs(const EmbeddingSequence & prefix) const {
    if (prefix.empty()) {
        throw std::invalid_argument("next_token_logprobs: empty prefix");
    }
    State st = start();
    extend(st, prefix.vectors);
    return st.last;
}

double LanguageModel::sequence_logprob(const State & state, const TokenSequence & target) const {
    if (state.length == 0) {
        throw std::invalid_argument("sequence_logprob: empty prefix");
    }
    check_tokens(target);
    if (target.empty()) {
        return 0.0;
    }
    if (state.length + static_cast<Index>(target.size()) > cfg_.max_context) {
        throw ContextOverflowError("prefix plus target", static_cast<size_t>(state.length) + target.size(),
                                   static_cast<size_t>(cfg_.max_context));
    }
    double total = state.last(target[0]);
    if (target.size() > 1) {
        State st = state;
        const TokenSequence feed(target.begin(), target.end() - 1);
        const Matrix<float> lp = extend(st, embed_text(feed).vectors);
        for (size_t i = 1; i < target.size(); ++i) {
            total += lp(static_cast<Index>(i - 1), target[i]);
        }
    }
    return total;
}

double LanguageModel::sequence_logprob(const EmbeddingSequence & prefix, const TokenSequence & target) const {
    if (prefix.empty()) {
        throw std::invalid_argument("sequence_logprob: empty prefix");
    }
    if (prefix.size() + target.size() > static_cast<size_t>(cfg_.max_context)) {
        throw ContextOverflowError("prefix plus target", prefix.size() + target.size(),
                                   static_cast<size_t>(cfg_.max_context));
    }
    State st = start();
    extend(st, prefix.vectors);
    return sequence_logprob(st, target);
}

ad::Var LanguageModel::embed_tokens(ad::Tape<float> & tape, const TokenSequence & tokens, bool track) const {
    check_tokens(tokens);
    return tape.gather_rows(tape.parameter(token_embedding_, track), tokens);
}

ad::Var LanguageModel::forward(ad::Tape<float> & tape, ad::Var embeddings, bool track,
                               std::mt19937_64 * dropout_rng) const {
    const Index n = tape.value(embeddings).rows();
    if (n > cfg_.max_context) {
        throw ContextOverflowError("language model input", static_cast<size_t>(n),
                                   static_cast<size_t>(cfg_.max_context));
    }
    ad::Var pos = tape.slice_rows(tape.parameter(position_embedding_, track), 0, n);
    ad::Var x = tape.add(embeddings, pos);
    if (dropout_rng && cfg_.dropout > 0.0) {
        x = tape.dropout(x, static_cast<float>(cfg_.dropout), *dropout_rng);
    }
    for (const auto & b : blocks_) {
        x = b.forward(tape, x, true, track);
    }
    x = ln_f_(tape, x, track);
    return head_(tape, x, track);
}

void LanguageModel::save(const std::filesystem::path & path, const Vocabulary & vocab) const {
    if (vocab.size() != static_cast<size_t>(cfg_.vocab_size)) {
        throw CheckpointError("vocabulary size does not match the model");
    }
    const json meta = {{"config", cfg_.to_json()}, {"vocab", vocab.to_json()}};
    Checkpoint::capture("lm", meta, params()).save(path);
}

LanguageModel LanguageModel::load(const std::filesystem::path & path, Vocabulary * vocab) {
    const Checkpoint c = Checkpoint::load(path);
    if (c.kind != "lm") {
        throw CheckpointError(path.string() + " holds a '" + c.kind + "' checkpoint, expected 'lm'");
    }
    LanguageModel lm(LMConfig::from_json(c.meta.at("config")), 0);
    c.restore(lm.params());
    if (lm.hash() != c.hash) {
        throw CheckpointError("restored language model hash differs from checkpoint: " + path.string());
    }
    if (vocab) {
        *vocab = Vocabulary::from_json(c.meta.at("vocab"));
    }
    return lm;
}

json LMTrainConfig::to_json() const {
    return {{"steps", steps},
            {"batch_size", batch_size},
            {"learning_rate", learning_rate},
            {"warmup_fraction", warmup_fraction},
            {"weight_decay", weight_decay},
            {"clip_norm", clip_norm},
            {"heldout_fraction", heldout_fraction},
            {"log_every", log_every}};
}

LMTrainConfig LMTrainConfig::from_json(const json & j) {
    LMTrainConfig c;
    c.steps = j.value("steps", c.steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.warmup_fraction = j.value("warmup_fraction", c.warmup_fraction);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    c.heldout_fraction = j.value("heldout_fraction", c.heldout_fraction);
    c.log_every = j.value("log_every", c.log_every);
    return c;
}

namespace {

// Inputs and targets of one sequence, cut to the context length.
struct Shifted {
    TokenSequence inputs;
    std::vector<int> targets;
};

Shifted shift(const TokenSequence & seq, int max_context) {
    Shifted s;
    const size_t n = std::min(seq.size(), static_cast<size_t>(max_context) + 1);
    if (n < 2) {
        return s;
    }
    s.inputs.assign(seq.begin(), seq.begin() + static_cast<long>(n - 1));
    s.targets.assign(seq.begin() + 1, seq.begin() + static_cast<long>(n));
    return s;
}

}  // namespace

double lm_loss(const LanguageModel & lm, const std::vector<TokenSequence> & sequences) {
    double total = 0.0;
    size_t count = 0;
    for (const auto & seq : sequences) {
        const Shifted s = shift(seq, lm.config().max_context);
        if (s.inputs.empty()) {
            continue;
        }
        const Matrix<float> lp = lm.logprobs(lm.embed_text(s.inputs));
        for (size_t i = 0; i < s.targets.size(); ++i) {
            total -= lp(static_cast<Index>(i), s.targets[i]);
        }
        count += s.targets.size();
    }
    return count ? total / static_cast<double>(count) : 0.0;
}

LMTrainResult train_lm(const std::vector<TokenSequence> & corpus, const LMConfig & cfg, const LMTrainConfig & tcfg,
                       std::uint64_t seed, const std::function<void(const TrainRecord &)> & on_record) {
    if (corpus.empty()) {
        throw ConfigError("train_lm: empty corpus");
    }
    if (tcfg.steps <= 0 || tcfg.batch_size <= 0) {
        throw ConfigError("train_lm: steps and batch_size must be positive");
    }
    for (const auto & seq : corpus) {
        for (TokenId t : seq) {
            if (t < 0 || t >= cfg.vocab_size) {
                throw VocabularyError("train_lm: token id " + std::to_string(t) + " outside vocabulary");
            }
        }
    }
    const auto t0 = std::chrono::steady_clock::now();
    LMTrainResult result{LanguageModel(cfg, seed), {}, 0.0};
    LanguageModel & lm = result.model;

    std::mt19937_64 rng(derive_seed(seed, name_salt("lm-train")));
    std::vector<size_t> order(corpus.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    size_t n_heldout = static_cast<size_t>(std::floor(tcfg.heldout_fraction * static_cast<double>(corpus.size())));
    if (n_heldout >= corpus.size()) {
        n_heldout = 0;
    }
    std::vector<TokenSequence> heldout;
    for (size_t i = 0; i < n_heldout; ++i) {
        heldout.push_back(corpus[order[i]]);
    }
    std::vector<size_t> train_ids(order.begin() + static_cast<long>(n_heldout), order.end());
    if (heldout.empty()) {
        // Nothing held out: report the loss on the training sequences instead.
        for (size_t i : train_ids) {
            heldout.push_back(corpus[i]);
        }
    }

    nn::AdamOptions opts;
    opts.learning_rate = tcfg.learning_rate;
    opts.weight_decay = tcfg.weight_decay;
    opts.clip_norm = tcfg.clip_norm;
    nn::ParamList<float> params = lm.params();
    nn::Adam<float> adam(params, opts);
    std::uniform_int_distribution<size_t> pick(0, train_ids.size() - 1);
    std::mt19937_64 drop_rng(derive_seed(seed, name_salt("lm-dropout")));

    double window_loss = 0.0;
    double window_tokens = 0.0;
    for (long step = 0; step < tcfg.steps; ++step) {
        std::vector<Shifted> batch;
        size_t tokens = 0;
        for (int b = 0; b < tcfg.batch_size; ++b) {
            Shifted s = shift(corpus[train_ids[pick(rng)]], cfg.max_context);
            tokens += s.targets.size();
            batch.push_back(std::move(s));
        }
        if (tokens == 0) {
            continue;
        }
        nn::zero_grads(params);
        double batch_loss = 0.0;
        for (const Shifted & s : batch) {
            if (s.inputs.empty()) {
                continue;
            }
            ad::Tape<float> tape;
            ad::Var emb = lm.embed_tokens(tape, s.inputs, true);
            ad::Var logits = lm.forward(tape, emb, true, &drop_rng);
            std::vector<Index> rows(s.targets.size());
            std::iota(rows.begin(), rows.end(), Index{0});
            ad::Var ce = tape.cross_entropy(logits, rows, s.targets);
            batch_loss += tape.scalar(ce);
            tape.backward(tape.scale(ce, 1.0f / static_cast<float>(tokens)));
        }
        const double mean = batch_loss / static_cast<double>(tokens);
        if (!std::isfinite(mean)) {
            throw DivergenceError("language model loss became non-finite at step " + std::to_string(step) +
                                  " (lr " + std::to_string(tcfg.learning_rate) + ")");
        }
        if (step == 0) {
            result.initial_loss = mean;
        }
        const double lr = nn::warmup_cosine(step, tcfg.steps, tcfg.learning_rate, tcfg.warmup_fraction);
        const double gnorm = adam.step(lr);
        if (!std::isfinite(gnorm)) {
            throw DivergenceError("language model gradient became non-finite at step " + std::to_string(step));
        }
        window_loss += batch_loss;
        window_tokens += static_cast<double>(tokens);
        if ((step + 1) % tcfg.log_every == 0 || step + 1 == tcfg.steps) {
            TrainRecord r;
            r.step = step + 1;
            r.loss = window_loss / window_tokens;
            r.heldout_loss = lm_loss(lm, heldout);
            r.learning_rate = lr;
            r.grad_norm = gnorm;
            r.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            if (!std::isfinite(r.heldout_loss)) {
                throw DivergenceError("held-out loss became non-finite at step " + std::to_string(r.step));
            }
            result.records.push_back(r);
            if (on_record) {
                on_record(r);
            }
            window_loss = 0.0;
            window_tokens = 0.0;
        }
    }
    return result;
}

}  // namespace wavprompt
