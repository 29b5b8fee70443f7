#pragma once

// Layers and optimizer shared by the language model and the audio encoder.

#include "wavprompt/autograd.hpp"

#include <cmath>
#include <random>
#include <string>
#include <vector>

namespace wavprompt::nn {

using ad::Index;
using ad::Matrix;
using ad::Parameter;
using ad::Tape;
using ad::Var;

template <typename T>
using ParamList = std::vector<Parameter<T> *>;

template <typename T>
using ConstParamList = std::vector<const Parameter<T> *>;

template <typename T>
ConstParamList<T> as_const(const ParamList<T> & params) {
    return ConstParamList<T>(params.begin(), params.end());
}

template <typename T, typename Rng>
void fill_normal(Matrix<T> & m, double stddev, Rng & rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    for (Index i = 0; i < m.size(); ++i) {
        m.data()[i] = static_cast<T>(dist(rng));
    }
}

template <typename T>
Parameter<T> make_param(std::string name, Index rows, Index cols) {
    Parameter<T> p;
    p.name = std::move(name);
    p.value.setZero(rows, cols);
    return p;
}

template <typename T>
struct Linear {
    Parameter<T> weight;  // in x out
    Parameter<T> bias;    // 1 x out

    Linear() = default;
    Linear(const std::string & name, Index in, Index out)
        : weight(make_param<T>(name + ".weight", in, out)), bias(make_param<T>(name + ".bias", 1, out)) {}

    template <typename Rng>
    void init(Rng & rng, double stddev) {
        fill_normal(weight.value, stddev, rng);
        bias.value.setZero();
    }

    Var operator()(Tape<T> & tape, Var x, bool track = true) const {
        return tape.linear(x, tape.parameter(weight, track), tape.parameter(bias, track));
    }

    Matrix<T> apply(const Matrix<T> & x) const {
        Matrix<T> y = x * weight.value;
        y.rowwise() += bias.value.row(0);
        return y;
    }

    template <typename F>
    void for_each_param(F && f) {
        f(weight);
        f(bias);
    }
    template <typename F>
    void for_each_param(F && f) const {
        f(weight);
        f(bias);
    }
};

template <typename T>
struct LayerNorm {
    Parameter<T> gain;
    Parameter<T> bias;
    T eps = T(1e-5);

    LayerNorm() = default;
    LayerNorm(const std::string & name, Index dim)
        : gain(make_param<T>(name + ".gain", 1, dim)), bias(make_param<T>(name + ".bias", 1, dim)) {
        gain.value.setOnes();
    }

    Var operator()(Tape<T> & tape, Var x, bool track = true) const {
        return tape.layer_norm(x, tape.parameter(gain, track), tape.parameter(bias, track), eps);
    }

    Matrix<T> apply(const Matrix<T> & x) const { return ad::kernels::layer_norm<T>(x, gain.value, bias.value, eps); }

    template <typename F>
    void for_each_param(F && f) {
        f(gain);
        f(bias);
    }
    template <typename F>
    void for_each_param(F && f) const {
        f(gain);
        f(bias);
    }
};

// Pre-norm transformer block: x + attn(ln(x)), then x + mlp(ln(x)).
template <typename T>
struct TransformerBlock {
    LayerNorm<T> ln1;
    Linear<T> qkv;
    Linear<T> attn_out;
    LayerNorm<T> ln2;
    Linear<T> fc1;
    Linear<T> fc2;
    int heads = 1;

    TransformerBlock() = default;
    TransformerBlock(const std::string & name, Index dim, Index ff_dim, int n_heads)
        : ln1(name + ".ln1", dim),
          qkv(name + ".qkv", dim, 3 * dim),
          attn_out(name + ".attn_out", dim, dim),
          ln2(name + ".ln2", dim),
          fc1(name + ".fc1", dim, ff_dim),
          fc2(name + ".fc2", ff_dim, dim),
          heads(n_heads) {}

    template <typename Rng>
    void init(Rng & rng, double stddev, double residual_stddev) {
        qkv.init(rng, stddev);
        attn_out.init(rng, residual_stddev);
        fc1.init(rng, stddev);
        fc2.init(rng, residual_stddev);
    }

    Var forward(Tape<T> & tape, Var x, bool causal, bool track = true) const {
        Var h = ln1(tape, x, track);
        h = qkv(tape, h, track);
        h = tape.attention(h, heads, causal);
        h = attn_out(tape, h, track);
        x = tape.add(x, h);
        h = ln2(tape, x, track);
        h = tape.gelu(fc1(tape, h, track));
        h = fc2(tape, h, track);
        return tape.add(x, h);
    }

    template <typename F>
    void for_each_param(F && f) {
        ln1.for_each_param(f);
        qkv.for_each_param(f);
        attn_out.for_each_param(f);
        ln2.for_each_param(f);
        fc1.for_each_param(f);
        fc2.for_each_param(f);
    }
    template <typename F>
    void for_each_param(F && f) const {
        ln1.for_each_param(f);
        qkv.for_each_param(f);
        attn_out.for_each_param(f);
        ln2.for_each_param(f);
        fc1.for_each_param(f);
        fc2.for_each_param(f);
    }
};

template <typename T>
void zero_grads(const ParamList<T> & params) {
    for (const Parameter<T> * p : params) {
        p->zero_grad();
    }
}

template <typename T>
double grad_norm(const ParamList<T> & params) {
    double s = 0.0;
    for (const Parameter<T> * p : params) {
        if (p->grad.size() > 0) {
            s += static_cast<double>(p->grad.squaredNorm());
        }
    }
    return std::sqrt(s);
}

struct AdamOptions {
    double learning_rate = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    double clip_norm = 1.0;  // <= 0 disables clipping
};

// Adam with decoupled weight decay and global-norm gradient clipping.
template <typename T>
class Adam {
  public:
    Adam(ParamList<T> params, AdamOptions opts) : params_(std::move(params)), opts_(opts) {
        for (Parameter<T> * p : params_) {
            m_.push_back(Matrix<T>::Zero(p->value.rows(), p->value.cols()));
            v_.push_back(Matrix<T>::Zero(p->value.rows(), p->value.cols()));
        }
    }

    // Applies one update at the given learning rate; returns the pre-clip gradient norm.
    double step(double lr) {
        ++t_;
        const double norm = grad_norm(params_);
        const double clip = (opts_.clip_norm > 0 && norm > opts_.clip_norm) ? opts_.clip_norm / norm : 1.0;
        const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
        const T b1 = static_cast<T>(opts_.beta1);
        const T b2 = static_cast<T>(opts_.beta2);
        const T step_size = static_cast<T>(lr / bc1);
        const T inv_bc2 = static_cast<T>(1.0 / bc2);
        const T eps = static_cast<T>(opts_.eps);
        const T decay = static_cast<T>(lr * opts_.weight_decay);
        for (size_t i = 0; i < params_.size(); ++i) {
            Parameter<T> & p = *params_[i];
            if (!p.trainable || p.grad.size() == 0) {
                continue;
            }
            auto g = (p.grad.array() * static_cast<T>(clip));
            m_[i].array() = b1 * m_[i].array() + (T(1) - b1) * g;
            v_[i].array() = b2 * v_[i].array() + (T(1) - b2) * g * g;
            if (decay > T(0) && p.value.rows() > 1) {
                p.value.array() -= decay * p.value.array();
            }
            p.value.array() -= step_size * m_[i].array() / ((v_[i].array() * inv_bc2).sqrt() + eps);
        }
        return norm;
    }

    const AdamOptions & options() const { return opts_; }

  private:
    ParamList<T> params_;
    AdamOptions opts_;
    std::vector<Matrix<T>> m_;
    std::vector<Matrix<T>> v_;
    long t_ = 0;
};

// Linear warmup followed by cosine decay to `floor` x peak.
inline double warmup_cosine(long step, long total, double peak, double warmup_fraction, double floor = 0.1) {
    const long warm = std::max<long>(1, static_cast<long>(std::lround(warmup_fraction * static_cast<double>(total))));
    if (step < warm) {
        return peak * static_cast<double>(step + 1) / static_cast<double>(warm);
    }
    const double progress =
        std::min(1.0, static_cast<double>(step - warm) / std::max(1.0, static_cast<double>(total - warm)));
    const double cosine = 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
    return peak * (floor + (1.0 - floor) * cosine);
}

}  // namespace wavprompt::nn
