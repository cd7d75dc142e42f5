#pragma once

// Reverse-mode automatic differentiation over dense Eigen matrices.
//
// A Tape records one forward computation as a flat list of nodes; backward()
// replays it in reverse, accumulating gradients. Everything is templated on
// the scalar so the same model code runs in float for training and in double
// for finite-difference verification.
//
// Leaves reference caller-owned storage (parameters are never copied onto the
// tape); all other nodes own their values. Gradient buffers are allocated
// lazily, so a node that no gradient reaches keeps an empty buffer and its
// backward step is skipped entirely. That makes "this parameter received
// exactly zero gradient" an observable structural fact, not a numeric one.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <vector>

#include "vlm3d/errors.hpp"

namespace vlm3d::ag {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

template <typename S>
class Tape;

// Lightweight handle into a tape.
template <typename S>
struct Var {
    Tape<S>* tape = nullptr;
    int id = -1;

    const Mat<S>& val() const { return tape->value(id); }
    const Mat<S>& grad() const { return tape->gradient(id); }
    Eigen::Index rows() const { return val().rows(); }
    Eigen::Index cols() const { return val().cols(); }
};

template <typename S>
class Tape {
public:
    struct Node {
        Mat<S> value;                    // owned value; unused for external leaves
        const Mat<S>* external = nullptr;
        Mat<S> grad;                     // lazily sized; empty means "no gradient reached"
        std::function<void()> backprop;  // adds into parents' grads
        bool needs_grad = false;
    };

    // Leaf referencing caller-owned storage. The storage must stay alive and
    // unmodified until the tape is destroyed.
    Var<S> leaf(const Mat<S>* storage, bool needs_grad) {
        Node n;
        n.external = storage;
        n.needs_grad = needs_grad;
        nodes_.push_back(std::move(n));
        return {this, static_cast<int>(nodes_.size()) - 1};
    }

    Var<S> constant(Mat<S> v) {
        Node n;
        n.value = std::move(v);
        nodes_.push_back(std::move(n));
        return {this, static_cast<int>(nodes_.size()) - 1};
    }

    Var<S> emplace(Mat<S> v, bool needs_grad) {
        Node n;
        n.value = std::move(v);
        n.needs_grad = needs_grad;
        nodes_.push_back(std::move(n));
        return {this, static_cast<int>(nodes_.size()) - 1};
    }

    void set_backprop(int id, std::function<void()> fn) {
        nodes_[static_cast<size_t>(id)].backprop = std::move(fn);
    }

    const Mat<S>& value(int id) const {
        const Node& n = nodes_[static_cast<size_t>(id)];
        return n.external ? *n.external : n.value;
    }

    bool needs_grad(int id) const { return nodes_[static_cast<size_t>(id)].needs_grad; }

    // Gradient buffer, allocated (zeroed) on first touch.
    Mat<S>& grad_buffer(int id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (n.grad.size() == 0) {
            const Mat<S>& v = value(id);
            n.grad = Mat<S>::Zero(v.rows(), v.cols());
        }
        return n.grad;
    }

    // Read-only gradient; empty matrix if nothing reached this node.
    const Mat<S>& gradient(int id) const { return nodes_[static_cast<size_t>(id)].grad; }

    bool grad_allocated(int id) const { return nodes_[static_cast<size_t>(id)].grad.size() != 0; }

    void backward(const Var<S>& loss) {
        const Mat<S>& v = value(loss.id);
        if (v.rows() != 1 || v.cols() != 1)
            throw numeric_error("backward: loss node must be a 1x1 scalar");
        grad_buffer(loss.id)(0, 0) = S(1);
        for (int i = loss.id; i >= 0; --i) {
            Node& n = nodes_[static_cast<size_t>(i)];
            if (n.backprop && n.grad.size() != 0) n.backprop();
        }
    }

    size_t size() const { return nodes_.size(); }
    void reserve(size_t n) { nodes_.reserve(n); }

private:
    std::vector<Node> nodes_;
};

namespace detail {

template <typename S>
bool any_needs(std::initializer_list<Var<S>> vs) {
    for (const auto& v : vs)
        if (v.tape->needs_grad(v.id)) return true;
    return false;
}

// Builds a computed node and installs its backward callback. `bwd` receives
// the gradient flowing into the node.
template <typename S, typename Bwd>
Var<S> make_op(Tape<S>& t, Mat<S> value, std::initializer_list<Var<S>> parents, Bwd bwd) {
    bool ng = any_needs<S>(parents);
    Var<S> out = t.emplace(std::move(value), ng);
    if (ng) {
        Tape<S>* tp = &t;
        int out_id = out.id;
        t.set_backprop(out_id, [tp, out_id, bwd]() { bwd(*tp, tp->gradient(out_id)); });
    }
    return out;
}

} // namespace detail

// ---- basic arithmetic ------------------------------------------------------

template <typename S>
Var<S> matmul(Var<S> a, Var<S> b) {
    Tape<S>& t = *a.tape;
    return detail::make_op<S>(t, a.val() * b.val(), {a, b}, [a, b](Tape<S>& tp, const Mat<S>& g) {
        if (tp.needs_grad(a.id)) tp.grad_buffer(a.id).noalias() += g * tp.value(b.id).transpose();
        if (tp.needs_grad(b.id)) tp.grad_buffer(b.id).noalias() += tp.value(a.id).transpose() * g;
    });
}

// a * b^T; the workhorse for y = x W^T with W stored [d_out, d_in].
template <typename S>
Var<S> matmul_nt(Var<S> a, Var<S> b) {
    Tape<S>& t = *a.tape;
    return detail::make_op<S>(t, a.val() * b.val().transpose(), {a, b},
                              [a, b](Tape<S>& tp, const Mat<S>& g) {
        if (tp.needs_grad(a.id)) tp.grad_buffer(a.id).noalias() += g * tp.value(b.id);
        if (tp.needs_grad(b.id)) tp.grad_buffer(b.id).noalias() += g.transpose() * tp.value(a.id);
    });
}

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
    Tape<S>& t = *a.tape;
    return detail::make_op<S>(t, a.val() + b.val(), {a, b}, [a, b](Tape<S>& tp, const Mat<S>& g) {
        if (tp.needs_grad(a.id)) tp.grad_buffer(a.id) += g;
        if (tp.needs_grad(b.id)) tp.grad_buffer(b.id) += g;
    });
}

template <typename S>
Var<S> sub(Var<S> a, Var<S> b) {
    Tape<S>& t = *a.tape;
    return detail::make_op<S>(t, a.val() - b.val(), {a, b}, [a, b](Tape<S>& tp, const Mat<S>& g) {
        if (tp.needs_grad(a.id)) tp.grad_buffer(a.id) += g;
        if (tp.needs_grad(b.id)) tp.grad_buffer(b.id) -= g;
    });
}

template <typename S>
Var<S> hadamard(Var<S> a, Var<S> b) {
    Tape<S>& t = *a.tape;
    return detail::make_op<S>(t, a.val().cwiseProduct(b.val()), {a, b},
                              [a, b](Tape<S>& tp, const Mat<S>& g) {
        if (tp.needs_grad(a.id)) tp.grad_buffer(a.id) += g.cwiseProduct(tp.value(b.id));
        if (tp.needs_grad(b.id)) tp.grad_buffer(b.id) += g.cwiseProduct(tp.value(a.id));
    });
}

template <typename S>
Var<S> scale(Var<S> a, S c) {
    Tape<S>& t = *a.tape;
    return detail::make_op<S>(t, Mat<S>(a.val() * c), {a}, [a, c](Tape<S>& tp, const Mat<S>& g) {
        if (tp.needs_grad(a.id)) tp.grad_buffer(a.id) += g * c;
    });
}

// a + c * b
template <typename S>
Var<S> add_scaled(Var<S> a, Var<S> b, S c) {
    Tape<S>& t = *a.tape;
    return detail::make_op<S>(t, Mat<S>(a.val() + c * b.val()), {a, b},
                              [a, b, c](Tape<S>& tp, const Mat<S>& g) {
        if (tp.needs_grad(a.id)) tp.grad_buffer(a.id) += g;
        if (tp.needs_grad(b.id)) tp.grad_buffer(b.id) += g * c;
    });
}

// Adds a [1,C] row vector to every row of a [N,C] matrix (bias add).
template <typename S>
Var<S> add_row_broadcast(Var<S> a, Var<S> row) {
    Tape<S>& t = *a.tape;
    Mat<S> v = a.val();
    v.array().rowwise() += row.val().row(0).array();
    return detail::make_op<S>(t, std::move(v), {a, row}, [a, row](Tape<S>& tp, const Mat<S>& g) {
        if (tp.needs_grad(a.id)) tp.grad_buffer(a.id) += g;
        if (tp.needs_grad(row.id)) tp.grad_buffer(row.id) += g.colwise().sum();
    });
}

template <typename S>
Var<S> transpose(Var<S> a) {
    Tape<S>& t = *a.tape;
    return detail::make_op<S>(t, Mat<S>(a.val().transpose()), {a},
                              [a](Tape<S>& tp, const Mat<S>& g) {
        if (tp.needs_grad(a.id)) tp.grad_buffer(a.id) += g.transpose();
    });
}

template <typename S>
Var<S> sum_all(Var<S> a) {
    Tape<S>& t = *a.tape;
    Mat<S> v(1, 1);
    v(0, 0) = a.val().sum();
    return detail::make_op<S>(t, std::move(v), {a}, [a](Tape<S>& tp, const Mat<S>& g) {
        if (tp.needs_grad(a.id)) tp.grad_buffer(a.id).array() += g(0, 0);
    });
}

template <typename S>
Var<S> mean_all(Var<S> a) {
    return scale(sum_all(a), S(1) / static_cast<S>(a.val().size()));
}

// ---- nonlinearities --------------------------------------------------------

// Exact GELU: 0.5 x (1 + erf(x / sqrt(2))).
template <typename S>
Var<S> gelu(Var<S> a) {
    Tape<S>& t = *a.tape;
    const Mat<S>& x = a.val();
    Mat<S> v(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        double xi = static_cast<double>(x(i));
        v(i) = static_cast<S>(0.5 * xi * (1.0 + std::erf(xi / std::sqrt(2.0))));
    }
    return detail::make_op<S>(t, std::move(v), {a}, [a](Tape<S>& tp, const Mat<S>& g) {
        if (!tp.needs_grad(a.id)) return;
        const Mat<S>& x = tp.value(a.id);
        Mat<S>& ga = tp.grad_buffer(a.id);
        constexpr double inv_sqrt2pi = 0.3989422804014327;
        for (Eigen::Index i = 0; i < x.size(); ++i) {
            double xi = static_cast<double>(x(i));
            double d = 0.5 * (1.0 + std::erf(xi / std::sqrt(2.0)))
                     + xi * inv_sqrt2pi * std::exp(-0.5 * xi * xi);
            ga(i) += g(i) * static_cast<S>(d);
        }
    });
}

template <typename S>
Var<S> softmax_rows(Var<S> a) {
    Tape<S>& t = *a.tape;
    const Mat<S>& x = a.val();
    Mat<S> p(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        S mx = x.row(r).maxCoeff();
        Eigen::Array<S, 1, Eigen::Dynamic> e = (x.row(r).array() - mx).exp();
        p.row(r) = e / e.sum();
    }
    Var<S> out = t.emplace(std::move(p), t.needs_grad(a.id));
    if (t.needs_grad(a.id)) {
        Tape<S>* tp = &t;
        int out_id = out.id, a_id = a.id;
        t.set_backprop(out_id, [tp, out_id, a_id]() {
            const Mat<S>& p = tp->value(out_id);
            const Mat<S>& g = tp->gradient(out_id);
            Mat<S>& ga = tp->grad_buffer(a_id);
            for (Eigen::Index r = 0; r < p.rows(); ++r) {
                S dot = g.row(r).dot(p.row(r));
                ga.row(r).array() += p.row(r).array() * (g.row(r).array() - dot);
            }
        });
    }
    return out;
}

template <typename S>
Var<S> log_softmax_rows(Var<S> a) {
    Tape<S>& t = *a.tape;
    const Mat<S>& x = a.val();
    Mat<S> ls(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        S mx = x.row(r).maxCoeff();
        S lse = std::log((x.row(r).array() - mx).exp().sum()) + mx;
        ls.row(r) = x.row(r).array() - lse;
    }
    Var<S> out = t.emplace(std::move(ls), t.needs_grad(a.id));
    if (t.needs_grad(a.id)) {
        Tape<S>* tp = &t;
        int out_id = out.id, a_id = a.id;
        t.set_backprop(out_id, [tp, out_id, a_id]() {
            const Mat<S>& ls = tp->value(out_id);
            const Mat<S>& g = tp->gradient(out_id);
            Mat<S>& ga = tp->grad_buffer(a_id);
            for (Eigen::Index r = 0; r < ls.rows(); ++r) {
                S gsum = g.row(r).sum();
                ga.row(r).array() += g.row(r).array() - ls.row(r).array().exp() * gsum;
            }
        });
    }
    return out;
}

// Row-wise layer norm with affine parameters gamma, beta given as [1,C].
template <typename S>
Var<S> layer_norm_rows(Var<S> x, Var<S> gamma, Var<S> beta, S eps = S(1e-5)) {
    Tape<S>& t = *x.tape;
    const Mat<S>& xv = x.val();
    const Eigen::Index n = xv.rows(), c = xv.cols();
    Mat<S> xhat(n, c);
    Eigen::Array<S, Eigen::Dynamic, 1> inv_std(n);
    for (Eigen::Index r = 0; r < n; ++r) {
        S mu = xv.row(r).mean();
        Eigen::Array<S, 1, Eigen::Dynamic> xc = xv.row(r).array() - mu;
        S var = xc.square().mean();
        S inv = S(1) / std::sqrt(var + eps);
        inv_std(r) = inv;
        xhat.row(r) = xc * inv;
    }
    Mat<S> y(n, c);
    for (Eigen::Index r = 0; r < n; ++r)
        y.row(r) = xhat.row(r).cwiseProduct(gamma.val().row(0)) + beta.val().row(0);

    bool ng = detail::any_needs<S>({x, gamma, beta});
    Var<S> out = t.emplace(std::move(y), ng);
    if (ng) {
        Tape<S>* tp = &t;
        int out_id = out.id, x_id = x.id, g_id = gamma.id, b_id = beta.id;
        // xhat and inv_std are captured by value; they are only needed backward.
        t.set_backprop(out_id, [tp, out_id, x_id, g_id, b_id, xhat, inv_std]() {
            const Mat<S>& g = tp->gradient(out_id);
            if (tp->needs_grad(b_id)) tp->grad_buffer(b_id) += g.colwise().sum();
            if (tp->needs_grad(g_id)) tp->grad_buffer(g_id) += g.cwiseProduct(xhat).colwise().sum();
            if (tp->needs_grad(x_id)) {
                const Mat<S>& gamma_v = tp->value(g_id);
                Mat<S>& gx = tp->grad_buffer(x_id);
                const Eigen::Index c = g.cols();
                for (Eigen::Index r = 0; r < g.rows(); ++r) {
                    Eigen::Array<S, 1, Eigen::Dynamic> dxhat =
                        g.row(r).array() * gamma_v.row(0).array();
                    S m1 = dxhat.mean();
                    S m2 = (dxhat * xhat.row(r).array()).mean();
                    gx.row(r).array() +=
                        inv_std(r) * (dxhat - m1 - xhat.row(r).array() * m2);
                    (void)c;
                }
            }
        });
    }
    return out;
}

// ---- structural ops --------------------------------------------------------

template <typename S>
Var<S> slice_rows(Var<S> a, Eigen::Index r0, Eigen::Index n) {
    Tape<S>& t = *a.tape;
    return detail::make_op<S>(t, Mat<S>(a.val().middleRows(r0, n)), {a},
                              [a, r0, n](Tape<S>& tp, const Mat<S>& g) {
        if (tp.needs_grad(a.id)) tp.grad_buffer(a.id).middleRows(r0, n) += g;
    });
}

template <typename S>
Var<S> slice_cols(Var<S> a, Eigen::Index c0, Eigen::Index n) {
    Tape<S>& t = *a.tape;
    return detail::make_op<S>(t, Mat<S>(a.val().middleCols(c0, n)), {a},
                              [a, c0, n](Tape<S>& tp, const Mat<S>& g) {
        if (tp.needs_grad(a.id)) tp.grad_buffer(a.id).middleCols(c0, n) += g;
    });
}

template <typename S>
Var<S> concat_rows(const std::vector<Var<S>>& parts) {
    Tape<S>& t = *parts.front().tape;
    Eigen::Index rows = 0;
    const Eigen::Index cols = parts.front().cols();
    for (const auto& p : parts) rows += p.rows();
    Mat<S> v(rows, cols);
    Eigen::Index r = 0;
    bool ng = false;
    for (const auto& p : parts) {
        v.middleRows(r, p.rows()) = p.val();
        r += p.rows();
        ng = ng || t.needs_grad(p.id);
    }
    Var<S> out = t.emplace(std::move(v), ng);
    if (ng) {
        Tape<S>* tp = &t;
        int out_id = out.id;
        std::vector<Var<S>> ps = parts;
        t.set_backprop(out_id, [tp, out_id, ps]() {
            const Mat<S>& g = tp->gradient(out_id);
            Eigen::Index r = 0;
            for (const auto& p : ps) {
                Eigen::Index n = p.rows();
                if (tp->needs_grad(p.id)) tp->grad_buffer(p.id) += g.middleRows(r, n);
                r += n;
            }
        });
    }
    return out;
}

template <typename S>
Var<S> concat_cols(const std::vector<Var<S>>& parts) {
    Tape<S>& t = *parts.front().tape;
    Eigen::Index cols = 0;
    const Eigen::Index rows = parts.front().rows();
    for (const auto& p : parts) cols += p.cols();
    Mat<S> v(rows, cols);
    Eigen::Index c = 0;
    bool ng = false;
    for (const auto& p : parts) {
        v.middleCols(c, p.cols()) = p.val();
        c += p.cols();
        ng = ng || t.needs_grad(p.id);
    }
    Var<S> out = t.emplace(std::move(v), ng);
    if (ng) {
        Tape<S>* tp = &t;
        int out_id = out.id;
        std::vector<Var<S>> ps = parts;
        t.set_backprop(out_id, [tp, out_id, ps]() {
            const Mat<S>& g = tp->gradient(out_id);
            Eigen::Index c = 0;
            for (const auto& p : ps) {
                Eigen::Index n = p.cols();
                if (tp->needs_grad(p.id)) tp->grad_buffer(p.id) += g.middleCols(c, n);
                c += n;
            }
        });
    }
    return out;
}

// Row gather: out.row(i) = a.row(idx[i]). Backward scatter-adds (embedding lookup).
template <typename S>
Var<S> gather_rows(Var<S> a, std::vector<int> idx) {
    Tape<S>& t = *a.tape;
    const Mat<S>& v = a.val();
    Mat<S> out(static_cast<Eigen::Index>(idx.size()), v.cols());
    for (size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = v.row(idx[i]);
    return detail::make_op<S>(t, std::move(out), {a},
                              [a, idx = std::move(idx)](Tape<S>& tp, const Mat<S>& g) {
        if (!tp.needs_grad(a.id)) return;
        Mat<S>& ga = tp.grad_buffer(a.id);
        for (size_t i = 0; i < idx.size(); ++i)
            ga.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
    });
}

// out(i,0) = a(i, idx[i]); used to pick target log-probabilities.
template <typename S>
Var<S> select_cols_per_row(Var<S> a, std::vector<int> idx) {
    Tape<S>& t = *a.tape;
    const Mat<S>& v = a.val();
    Mat<S> out(static_cast<Eigen::Index>(idx.size()), 1);
    for (size_t i = 0; i < idx.size(); ++i) out(static_cast<Eigen::Index>(i), 0) = v(static_cast<Eigen::Index>(i), idx[i]);
    return detail::make_op<S>(t, std::move(out), {a},
                              [a, idx = std::move(idx)](Tape<S>& tp, const Mat<S>& g) {
        if (!tp.needs_grad(a.id)) return;
        Mat<S>& ga = tp.grad_buffer(a.id);
        for (size_t i = 0; i < idx.size(); ++i)
            ga(static_cast<Eigen::Index>(i), idx[i]) += g(static_cast<Eigen::Index>(i), 0);
    });
}

// -log(max(p(0, idx), eps)) for one probability row vector. The derivative is
// zero in the clamped region, matching the clamp exactly.
template <typename S>
Var<S> neg_log_prob(Var<S> p, int idx, S eps) {
    Tape<S>& t = *p.tape;
    S pv = p.val()(0, idx);
    Mat<S> out(1, 1);
    out(0, 0) = -std::log(std::max(pv, eps));
    return detail::make_op<S>(t, std::move(out), {p}, [p, idx, eps](Tape<S>& tp, const Mat<S>& g) {
        if (!tp.needs_grad(p.id)) return;
        S pv = tp.value(p.id)(0, idx);
        if (pv > eps) tp.grad_buffer(p.id)(0, idx) += -g(0, 0) / pv;
    });
}

// ---- rotary position embedding along the depth axis -------------------------
//
// Rotates adjacent channel pairs of each head by angle depth[row] * theta_j,
// theta_j = base^(-2j / head_dim). Parameter-free; backward is the inverse
// rotation.
template <typename S>
Var<S> rope_depth(Var<S> a, std::vector<int> depth, int head_dim, double base) {
    if (head_dim % 2 != 0) throw config_error("rope: head dimension must be even");
    Tape<S>& t = *a.tape;
    const Mat<S>& x = a.val();
    const Eigen::Index n = x.rows(), c = x.cols();
    const int pairs = head_dim / 2;
    std::vector<double> theta(static_cast<size_t>(pairs));
    for (int j = 0; j < pairs; ++j)
        theta[static_cast<size_t>(j)] = std::pow(base, -2.0 * j / head_dim);

    Mat<S> v(n, c);
    for (Eigen::Index r = 0; r < n; ++r) {
        for (Eigen::Index h0 = 0; h0 < c; h0 += head_dim) {
            for (int j = 0; j < pairs; ++j) {
                double ang = depth[static_cast<size_t>(r)] * theta[static_cast<size_t>(j)];
                S cs = static_cast<S>(std::cos(ang)), sn = static_cast<S>(std::sin(ang));
                S x0 = x(r, h0 + 2 * j), x1 = x(r, h0 + 2 * j + 1);
                v(r, h0 + 2 * j) = cs * x0 - sn * x1;
                v(r, h0 + 2 * j + 1) = sn * x0 + cs * x1;
            }
        }
    }
    return detail::make_op<S>(t, std::move(v), {a},
                              [a, depth = std::move(depth), head_dim, theta = std::move(theta)](
                                  Tape<S>& tp, const Mat<S>& g) {
        if (!tp.needs_grad(a.id)) return;
        Mat<S>& ga = tp.grad_buffer(a.id);
        const int pairs = head_dim / 2;
        for (Eigen::Index r = 0; r < g.rows(); ++r) {
            for (Eigen::Index h0 = 0; h0 < g.cols(); h0 += head_dim) {
                for (int j = 0; j < pairs; ++j) {
                    double ang = depth[static_cast<size_t>(r)] * theta[static_cast<size_t>(j)];
                    S cs = static_cast<S>(std::cos(ang)), sn = static_cast<S>(std::sin(ang));
                    S g0 = g(r, h0 + 2 * j), g1 = g(r, h0 + 2 * j + 1);
                    ga(r, h0 + 2 * j) += cs * g0 + sn * g1;
                    ga(r, h0 + 2 * j + 1) += -sn * g0 + cs * g1;
                }
            }
        }
    });
}

} // namespace vlm3d::ag
