#pragma once

// Minimal tape-based reverse-mode differentiation over row-major Eigen
// matrices. Every value is a 2-D matrix; scalars are 1x1.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace wavprompt::ad {

using Index = Eigen::Index;

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
struct Parameter {
    std::string name;
    Matrix<T> value;
    mutable Matrix<T> grad;  // accumulated by Tape::backward
    bool trainable = true;

    void zero_grad() const { grad.setZero(value.rows(), value.cols()); }
};

struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

namespace kernels {

template <typename T>
constexpr T gelu_c = T(0.7978845608028654);  // sqrt(2/pi)

template <typename T>
T gelu(T x) {
    const T u = gelu_c<T> * (x + T(0.044715) * x * x * x);
    return T(0.5) * x * (T(1) + std::tanh(u));
}

template <typename T>
T gelu_grad(T x) {
    const T u = gelu_c<T> * (x + T(0.044715) * x * x * x);
    const T t = std::tanh(u);
    return T(0.5) * (T(1) + t) +
           T(0.5) * x * (T(1) - t * t) * gelu_c<T> * (T(1) + T(3) * T(0.044715) * x * x);
}

template <typename T>
Matrix<T> gelu(const Matrix<T> & x) {
    const auto a = x.array();
    return (T(0.5) * a * (T(1) + (gelu_c<T> * (a + T(0.044715) * a.cube())).tanh())).matrix();
}

template <typename T>
Matrix<T> gelu_grad(const Matrix<T> & x) {
    const auto a = x.array();
    const Eigen::Array<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> t =
        (gelu_c<T> * (a + T(0.044715) * a.cube())).tanh();
    return (T(0.5) * (T(1) + t) + T(0.5) * a * (T(1) - t.square()) * gelu_c<T> * (T(1) + T(3) * T(0.044715) * a.square()))
        .matrix();
}

// Row-wise layer normalization. Optionally returns normalized rows and 1/sigma.
template <typename T>
Matrix<T> layer_norm(const Matrix<T> & x, const Matrix<T> & gain, const Matrix<T> & bias, T eps,
                     Matrix<T> * xhat_out = nullptr, std::vector<T> * rstd_out = nullptr) {
    const Index n = x.rows();
    const Index d = x.cols();
    Matrix<T> xhat(n, d);
    if (rstd_out) {
        rstd_out->resize(static_cast<size_t>(n));
    }
    for (Index i = 0; i < n; ++i) {
        const T mean = x.row(i).mean();
        const T var = (x.row(i).array() - mean).square().mean();
        const T rstd = T(1) / std::sqrt(var + eps);
        xhat.row(i) = (x.row(i).array() - mean) * rstd;
        if (rstd_out) {
            (*rstd_out)[static_cast<size_t>(i)] = rstd;
        }
    }
    Matrix<T> y = (xhat.array().rowwise() * gain.row(0).array()).rowwise() + bias.row(0).array();
    if (xhat_out) {
        *xhat_out = std::move(xhat);
    }
    return y;
}

// In-place row softmax.
template <typename T>
void softmax_rows(Matrix<T> & s) {
    for (Index i = 0; i < s.rows(); ++i) {
        const T mx = s.row(i).maxCoeff();
        s.row(i) = (s.row(i).array() - mx).exp();
        s.row(i) /= s.row(i).sum();
    }
}

template <typename T>
Matrix<T> log_softmax_rows(const Matrix<T> & logits) {
    Matrix<T> out(logits.rows(), logits.cols());
    for (Index i = 0; i < logits.rows(); ++i) {
        const T mx = logits.row(i).maxCoeff();
        const T lse = mx + std::log((logits.row(i).array() - mx).exp().sum());
        out.row(i) = logits.row(i).array() - lse;
    }
    return out;
}

}  // namespace kernels

template <typename T>
class Tape {
  public:
    explicit Tape(bool record = true) : record_(record) {}

    Tape(const Tape &) = delete;
    Tape & operator=(const Tape &) = delete;

    bool recording() const { return record_; }

    Var constant(Matrix<T> value) { return push(std::move(value), false); }

    // A constant that aliases external storage; the referent must outlive the tape.
    Var constant_ref(const Matrix<T> & value) {
        Var v = push(Matrix<T>(), false);
        nodes_[v.id].ref = &value;
        return v;
    }

    // A differentiable leaf owned by the tape.
    Var leaf(Matrix<T> value) { return push(std::move(value), record_); }

    // Gradients flow into p.grad when the parameter is trainable and tracked.
    Var parameter(const Parameter<T> & p, bool track = true) {
        const bool rg = record_ && track && p.trainable;
        Var v = push(Matrix<T>(), rg);
        nodes_[v.id].ref = &p.value;
        if (rg) {
            nodes_[v.id].param = &p;
        }
        return v;
    }

    const Matrix<T> & value(Var v) const {
        const Node & n = nodes_.at(static_cast<size_t>(v.id));
        return n.ref ? *n.ref : n.value;
    }

    // Gradient accumulated for a leaf after backward(); empty when none flowed.
    const Matrix<T> & grad(Var v) const { return nodes_.at(static_cast<size_t>(v.id)).grad; }

    bool requires_grad(Var v) const { return nodes_.at(static_cast<size_t>(v.id)).requires_grad; }

    T scalar(Var v) const { return value(v)(0, 0); }

    size_t size() const { return nodes_.size(); }

    // ---- operations -------------------------------------------------------

    Var matmul(Var a, Var b) {
        Matrix<T> out = value(a) * value(b);
        Var o = push(std::move(out), rg(a) || rg(b));
        on_backward(o, [this, a, b, o] {
            const Matrix<T> & g = nodes_[o.id].grad;
            if (rg(a)) {
                acc(a).noalias() += g * value(b).transpose();
            }
            if (rg(b)) {
                acc(b).noalias() += value(a).transpose() * g;
            }
        });
        return o;
    }

    // x (n x in) * w (in x out) + bias (1 x out)
    Var linear(Var x, Var w, Var bias) {
        Matrix<T> out = value(x) * value(w);
        out.rowwise() += value(bias).row(0);
        Var o = push(std::move(out), rg(x) || rg(w) || rg(bias));
        on_backward(o, [this, x, w, bias, o] {
            const Matrix<T> & g = nodes_[o.id].grad;
            if (rg(x)) {
                acc(x).noalias() += g * value(w).transpose();
            }
            if (rg(w)) {
                acc(w).noalias() += value(x).transpose() * g;
            }
            if (rg(bias)) {
                acc(bias) += g.colwise().sum();
            }
        });
        return o;
    }

    // Elementwise sum; b may be a 1 x cols row broadcast over a's rows.
    Var add(Var a, Var b) {
        const Matrix<T> & av = value(a);
        const Matrix<T> & bv = value(b);
        const bool broadcast = bv.rows() == 1 && av.rows() != 1;
        if (bv.cols() != av.cols() || (!broadcast && bv.rows() != av.rows())) {
            throw std::invalid_argument("add: shape mismatch");
        }
        Matrix<T> out = av;
        if (broadcast) {
            out.rowwise() += bv.row(0);
        } else {
            out += bv;
        }
        Var o = push(std::move(out), rg(a) || rg(b));
        on_backward(o, [this, a, b, o, broadcast] {
            const Matrix<T> & g = nodes_[o.id].grad;
            if (rg(a)) {
                acc(a) += g;
            }
            if (rg(b)) {
                if (broadcast) {
                    acc(b) += g.colwise().sum();
                } else {
                    acc(b) += g;
                }
            }
        });
        return o;
    }

    Var scale(Var a, T s) {
        Matrix<T> out = value(a) * s;
        Var o = push(std::move(out), rg(a));
        on_backward(o, [this, a, o, s] { acc(a) += nodes_[o.id].grad * s; });
        return o;
    }

    Var gelu(Var a) {
        const Matrix<T> & x = value(a);
        Matrix<T> out = kernels::gelu<T>(x);
        Var o = push(std::move(out), rg(a));
        on_backward(o, [this, a, o] {
            const Matrix<T> & x = value(a);
            acc(a).array() += nodes_[o.id].grad.array() * kernels::gelu_grad<T>(x).array();
        });
        return o;
    }

    Var layer_norm(Var x, Var gain, Var bias, T eps = T(1e-5)) {
        auto xhat = std::make_shared<Matrix<T>>();
        auto rstd = std::make_shared<std::vector<T>>();
        Matrix<T> out = kernels::layer_norm<T>(value(x), value(gain), value(bias), eps, xhat.get(), rstd.get());
        Var o = push(std::move(out), rg(x) || rg(gain) || rg(bias));
        on_backward(o, [this, x, gain, bias, o, xhat, rstd] {
            const Matrix<T> & g = nodes_[o.id].grad;
            if (rg(gain)) {
                acc(gain) += (g.array() * xhat->array()).matrix().colwise().sum();
            }
            if (rg(bias)) {
                acc(bias) += g.colwise().sum();
            }
            if (rg(x)) {
                Matrix<T> dxhat = g.array().rowwise() * value(gain).row(0).array();
                Matrix<T> & dx = acc(x);
                const T inv_d = T(1) / static_cast<T>(g.cols());
                for (Index i = 0; i < g.rows(); ++i) {
                    const T m1 = dxhat.row(i).sum() * inv_d;
                    const T m2 = dxhat.row(i).dot(xhat->row(i)) * inv_d;
                    dx.row(i).array() +=
                        (*rstd)[static_cast<size_t>(i)] * (dxhat.row(i).array() - m1 - xhat->row(i).array() * m2);
                }
            }
        });
        return o;
    }

    // Multi-head scaled dot-product attention over a packed (n x 3d) q|k|v input.
    Var attention(Var qkv, int heads, bool causal) {
        const Matrix<T> & in = value(qkv);
        const Index n = in.rows();
        if (in.cols() % 3 != 0) {
            throw std::invalid_argument("attention: packed input must have 3d columns");
        }
        const Index d = in.cols() / 3;
        if (heads <= 0 || d % heads != 0) {
            throw std::invalid_argument("attention: dimension not divisible by heads");
        }
        const Index dh = d / heads;
        const T inv_scale = T(1) / std::sqrt(static_cast<T>(dh));
        auto probs = std::make_shared<std::vector<Matrix<T>>>(static_cast<size_t>(heads));
        Matrix<T> out(n, d);
        for (int h = 0; h < heads; ++h) {
            auto q = in.block(0, h * dh, n, dh);
            auto k = in.block(0, d + h * dh, n, dh);
            auto v = in.block(0, 2 * d + h * dh, n, dh);
            Matrix<T> s = (q * k.transpose()) * inv_scale;
            if (causal) {
                for (Index i = 0; i < n; ++i) {
                    for (Index j = i + 1; j < n; ++j) {
                        s(i, j) = -std::numeric_limits<T>::infinity();
                    }
                }
            }
            kernels::softmax_rows(s);
            out.block(0, h * dh, n, dh).noalias() = s * v;
            (*probs)[static_cast<size_t>(h)] = std::move(s);
        }
        Var o = push(std::move(out), rg(qkv));
        on_backward(o, [this, qkv, o, probs, heads, d, dh, inv_scale] {
            const Matrix<T> & g = nodes_[o.id].grad;
            const Matrix<T> & in = value(qkv);
            const Index n = in.rows();
            Matrix<T> & dqkv = acc(qkv);
            for (int h = 0; h < heads; ++h) {
                const Matrix<T> & p = (*probs)[static_cast<size_t>(h)];
                auto q = in.block(0, h * dh, n, dh);
                auto k = in.block(0, d + h * dh, n, dh);
                auto v = in.block(0, 2 * d + h * dh, n, dh);
                auto go = g.block(0, h * dh, n, dh);
                dqkv.block(0, 2 * d + h * dh, n, dh).noalias() += p.transpose() * go;
                Matrix<T> dp = go * v.transpose();
                Matrix<T> ds(n, n);
                for (Index i = 0; i < n; ++i) {
                    const T dot = dp.row(i).dot(p.row(i));
                    ds.row(i) = p.row(i).array() * (dp.row(i).array() - dot);
                }
                ds *= inv_scale;
                dqkv.block(0, h * dh, n, dh).noalias() += ds * k;
                dqkv.block(0, d + h * dh, n, dh).noalias() += ds.transpose() * q;
            }
        });
        return o;
    }

    Var concat_rows(std::span<const Var> parts) {
        Index rows = 0;
        Index cols = -1;
        bool any = false;
        for (Var p : parts) {
            const Matrix<T> & v = value(p);
            if (cols >= 0 && v.cols() != cols && v.rows() > 0) {
                throw std::invalid_argument("concat_rows: column mismatch");
            }
            if (v.rows() > 0) {
                cols = v.cols();
            }
            rows += v.rows();
            any = any || rg(p);
        }
        Matrix<T> out(rows, std::max<Index>(cols, 0));
        Index r = 0;
        for (Var p : parts) {
            const Matrix<T> & v = value(p);
            if (v.rows() > 0) {
                out.middleRows(r, v.rows()) = v;
            }
            r += v.rows();
        }
        Var o = push(std::move(out), any);
        std::vector<Var> ps(parts.begin(), parts.end());
        on_backward(o, [this, ps, o] {
            const Matrix<T> & g = nodes_[o.id].grad;
            Index r = 0;
            for (Var p : ps) {
                const Index pr = value(p).rows();
                if (rg(p) && pr > 0) {
                    acc(p) += g.middleRows(r, pr);
                }
                r += pr;
            }
        });
        return o;
    }

    Var slice_rows(Var x, Index begin, Index count) {
        const Matrix<T> & v = value(x);
        if (begin < 0 || count < 0 || begin + count > v.rows()) {
            throw std::out_of_range("slice_rows: range outside matrix");
        }
        Matrix<T> out = v.middleRows(begin, count);
        Var o = push(std::move(out), rg(x));
        on_backward(o, [this, x, o, begin, count] { acc(x).middleRows(begin, count) += nodes_[o.id].grad; });
        return o;
    }

    // Non-overlapping mean over windows of `window` rows; the last window may be short.
    Var mean_pool_rows(Var x, Index window) {
        if (window < 1) {
            throw std::invalid_argument("mean_pool_rows: window must be >= 1");
        }
        const Matrix<T> & v = value(x);
        const Index n = v.rows();
        const Index m = (n + window - 1) / window;
        Matrix<T> out(m, v.cols());
        for (Index i = 0; i < m; ++i) {
            const Index b = i * window;
            const Index c = std::min(window, n - b);
            out.row(i) = v.middleRows(b, c).colwise().mean();
        }
        Var o = push(std::move(out), rg(x));
        on_backward(o, [this, x, o, window, n, m] {
            const Matrix<T> & g = nodes_[o.id].grad;
            Matrix<T> & dx = acc(x);
            for (Index i = 0; i < m; ++i) {
                const Index b = i * window;
                const Index c = std::min(window, n - b);
                for (Index j = 0; j < c; ++j) {
                    dx.row(b + j) += g.row(i) / static_cast<T>(c);
                }
            }
        });
        return o;
    }

    // 1-D convolution over time. x: (time x in_ch), w: (kernel*in_ch x out_ch),
    // bias: (1 x out_ch). Input is zero-padded by pad_left/pad_right rows.
    Var conv1d(Var x, Var w, Var bias, Index kernel, Index stride, Index pad_left, Index pad_right) {
        const Matrix<T> & xv = value(x);
        const Index cin = xv.cols();
        if (value(w).rows() != kernel * cin) {
            throw std::invalid_argument("conv1d: weight rows must equal kernel * in_channels");
        }
        const Index padded = xv.rows() + pad_left + pad_right;
        if (padded < kernel) {
            throw std::invalid_argument("conv1d: input shorter than kernel");
        }
        const Index tout = (padded - kernel) / stride + 1;
        auto xp = std::make_shared<Matrix<T>>(Matrix<T>::Zero(padded, cin));
        xp->middleRows(pad_left, xv.rows()) = xv;
        using Strided = Eigen::Map<const Matrix<T>, 0, Eigen::OuterStride<>>;
        Strided cols(xp->data(), tout, kernel * cin, Eigen::OuterStride<>(stride * cin));
        Matrix<T> out = cols * value(w);
        out.rowwise() += value(bias).row(0);
        Var o = push(std::move(out), rg(x) || rg(w) || rg(bias));
        on_backward(o, [this, x, w, bias, o, xp, kernel, stride, pad_left, tout, cin] {
            const Matrix<T> & g = nodes_[o.id].grad;
            Strided cols(xp->data(), tout, kernel * cin, Eigen::OuterStride<>(stride * cin));
            if (rg(w)) {
                acc(w).noalias() += cols.transpose() * g;
            }
            if (rg(bias)) {
                acc(bias) += g.colwise().sum();
            }
            if (rg(x)) {
                Matrix<T> dcols = g * value(w).transpose();
                Matrix<T> dxp = Matrix<T>::Zero(xp->rows(), cin);
                for (Index t = 0; t < tout; ++t) {
                    Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> dst(dxp.data() + t * stride * cin, kernel * cin);
                    dst += dcols.row(t);
                }
                acc(x) += dxp.middleRows(pad_left, value(x).rows());
            }
        });
        return o;
    }

    Var gather_rows(Var table, std::span<const int> ids) {
        const Matrix<T> & tv = value(table);
        Matrix<T> out(static_cast<Index>(ids.size()), tv.cols());
        for (size_t i = 0; i < ids.size(); ++i) {
            if (ids[i] < 0 || ids[i] >= tv.rows()) {
                throw std::out_of_range("gather_rows: id outside table");
            }
            out.row(static_cast<Index>(i)) = tv.row(ids[i]);
        }
        Var o = push(std::move(out), rg(table));
        std::vector<int> idv(ids.begin(), ids.end());
        on_backward(o, [this, table, o, idv] {
            const Matrix<T> & g = nodes_[o.id].grad;
            Matrix<T> & dt = acc(table);
            for (size_t i = 0; i < idv.size(); ++i) {
                dt.row(idv[i]) += g.row(static_cast<Index>(i));
            }
        });
        return o;
    }

    // Sum over the listed rows of -log softmax(logits[row])[target]. Returns 1x1.
    Var cross_entropy(Var logits, std::span<const Index> rows, std::span<const int> targets) {
        if (rows.size() != targets.size()) {
            throw std::invalid_argument("cross_entropy: rows and targets differ in length");
        }
        const Matrix<T> & lv = value(logits);
        auto probs = std::make_shared<Matrix<T>>(static_cast<Index>(rows.size()), lv.cols());
        T total = 0;
        for (size_t i = 0; i < rows.size(); ++i) {
            auto row = lv.row(rows[i]);
            const T mx = row.maxCoeff();
            const T lse = mx + std::log((row.array() - mx).exp().sum());
            total -= row(targets[i]) - lse;
            probs->row(static_cast<Index>(i)) = (row.array() - lse).exp();
        }
        Matrix<T> out(1, 1);
        out(0, 0) = total;
        Var o = push(std::move(out), rg(logits));
        std::vector<Index> rv(rows.begin(), rows.end());
        std::vector<int> tv(targets.begin(), targets.end());
        on_backward(o, [this, logits, o, probs, rv, tv] {
            const T g = nodes_[o.id].grad(0, 0);
            Matrix<T> & dl = acc(logits);
            for (size_t i = 0; i < rv.size(); ++i) {
                dl.row(rv[i]) += g * probs->row(static_cast<Index>(i));
                dl(rv[i], tv[i]) -= g;
            }
        });
        return o;
    }

    // sum(x .* weights), a 1x1 scalar.
    Var weighted_sum(Var x, const Matrix<T> & weights) {
        if (weights.rows() != value(x).rows() || weights.cols() != value(x).cols()) {
            throw std::invalid_argument("weighted_sum: shape mismatch");
        }
        Matrix<T> out(1, 1);
        out(0, 0) = value(x).cwiseProduct(weights).sum();
        Var o = push(std::move(out), rg(x));
        on_backward(o, [this, x, o, weights] { acc(x) += nodes_[o.id].grad(0, 0) * weights; });
        return o;
    }

    // Inverted dropout; identity when p == 0.
    template <typename Rng>
    Var dropout(Var x, T p, Rng & rng) {
        if (p <= T(0)) {
            return x;
        }
        std::bernoulli_distribution keep(1.0 - static_cast<double>(p));
        auto mask = std::make_shared<Matrix<T>>(value(x).rows(), value(x).cols());
        const T s = T(1) / (T(1) - p);
        for (Index i = 0; i < mask->size(); ++i) {
            mask->data()[i] = keep(rng) ? s : T(0);
        }
        Matrix<T> out = value(x).cwiseProduct(*mask);
        Var o = push(std::move(out), rg(x));
        on_backward(o, [this, x, o, mask] { acc(x) += nodes_[o.id].grad.cwiseProduct(*mask); });
        return o;
    }

    // Runs reverse accumulation from a 1x1 output. Gradients for tracked
    // parameters accumulate into Parameter::grad.
    void backward(Var out) {
        if (!record_) {
            throw std::logic_error("backward: tape was not recording");
        }
        const Matrix<T> & ov = value(out);
        if (ov.rows() != 1 || ov.cols() != 1) {
            throw std::invalid_argument("backward: output must be a scalar");
        }
        if (!rg(out)) {
            return;
        }
        acc(out)(0, 0) += T(1);
        for (auto it = backward_.rbegin(); it != backward_.rend(); ++it) {
            if (nodes_[static_cast<size_t>(it->first)].grad.size() > 0) {
                it->second();
            }
        }
        for (Node & n : nodes_) {
            if (n.param && n.grad.size() > 0) {
                if (n.param->grad.size() == 0) {
                    n.param->zero_grad();
                }
                n.param->grad += n.grad;
            }
        }
    }

  private:
    struct Node {
        Matrix<T> value;
        const Matrix<T> * ref = nullptr;
        Matrix<T> grad;
        const Parameter<T> * param = nullptr;
        bool requires_grad = false;
    };

    Var push(Matrix<T> value, bool requires_grad) {
        Node n;
        n.value = std::move(value);
        n.requires_grad = requires_grad && record_;
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size() - 1)};
    }

    bool rg(Var v) const { return nodes_[static_cast<size_t>(v.id)].requires_grad; }

    Matrix<T> & acc(Var v) {
        Node & n = nodes_[static_cast<size_t>(v.id)];
        if (n.grad.size() == 0) {
            const Matrix<T> & val = n.ref ? *n.ref : n.value;
            n.grad.setZero(val.rows(), val.cols());
        }
        return n.grad;
    }

    void on_backward(Var out, std::function<void()> fn) {
        if (record_ && rg(out)) {
            backward_.emplace_back(out.id, std::move(fn));
        }
    }

    bool record_;
    std::vector<Node> nodes_;
    std::vector<std::pair<int, std::function<void()>>> backward_;
};

}  // namespace wavprompt::ad
