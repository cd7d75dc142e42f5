#pragma once

// Shared neural-net building blocks on top of the autodiff tape: named
// parameter registry, per-forward context, linear / layer-norm / multi-head
// attention helpers. All structs are templated on the scalar type.

#include <Eigen/Dense>

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "vlm3d/autodiff.hpp"
#include "vlm3d/rng.hpp"

namespace vlm3d {

template <typename S>
using Mat = ag::Mat<S>;

// Ordered, named view over a model's parameter tensors. Collection order is
// structural (stable across runs), which fixes serialization, optimizer
// iteration and gradient-reduction order.
template <typename S>
struct ParamRefs {
    std::vector<std::pair<std::string, Mat<S>*>> items;

    void add(std::string name, Mat<S>* m) { items.emplace_back(std::move(name), m); }

    Mat<S>* find(const std::string& name) const {
        for (const auto& [n, m] : items)
            if (n == name) return m;
        return nullptr;
    }
};

// Per-forward context: wraps a tape and registers parameter leaves by name.
// `trainable` decides which parameters get gradient buffers; a parameter
// outside the mask participates in the forward value but its gradient is
// never computed, so freezes are exact by construction.
template <typename S>
struct FwdCtx {
    ag::Tape<S>* tape;
    bool train = false;
    std::function<bool(const std::string&)> trainable;  // empty = all trainable

    std::vector<std::pair<std::string, ag::Var<S>>> leaves;

    explicit FwdCtx(ag::Tape<S>& t) : tape(&t) {}

    ag::Var<S> param(const std::string& name, const Mat<S>& storage) {
        auto it = cache_.find(name);
        if (it != cache_.end()) return it->second;
        bool ng = train && (!trainable || trainable(name));
        ag::Var<S> v = tape->leaf(&storage, ng);
        if (ng) leaves.emplace_back(name, v);
        cache_.emplace(name, v);
        return v;
    }

    ag::Var<S> input(Mat<S> m) { return tape->constant(std::move(m)); }

    // Adds every reached parameter gradient into `grads` (missing entries are
    // created). Parameters never touched by backward are skipped, i.e. their
    // accumulated gradient stays exactly zero.
    void accumulate_grads(std::map<std::string, Mat<S>>& grads, S scale = S(1)) const {
        for (const auto& [name, v] : leaves) {
            if (!tape->grad_allocated(v.id)) continue;
            const Mat<S>& g = tape->gradient(v.id);
            auto it = grads.find(name);
            if (it == grads.end())
                grads.emplace(name, Mat<S>(g * scale));
            else
                it->second += g * scale;
        }
    }

private:
    std::map<std::string, ag::Var<S>> cache_;
};

// ---- layers -----------------------------------------------------------------

// y = x W^T + b with W stored [d_out, d_in], b stored [1, d_out].
template <typename S>
struct Linear {
    Mat<S> w, b;

    void init(Rng& rng, Eigen::Index d_in, Eigen::Index d_out, double stddev) {
        w = normal_matrix<S>(rng, d_out, d_in, stddev);
        b = Mat<S>::Zero(1, d_out);
    }
    void collect(const std::string& prefix, ParamRefs<S>& out) {
        out.add(prefix + ".weight", &w);
        out.add(prefix + ".bias", &b);
    }
    ag::Var<S> fwd(FwdCtx<S>& cx, const std::string& prefix, ag::Var<S> x) const {
        return ag::add_row_broadcast(ag::matmul_nt(x, cx.param(prefix + ".weight", w)),
                                     cx.param(prefix + ".bias", b));
    }
};

template <typename S>
struct LayerNorm {
    Mat<S> gamma, beta;

    void init(Eigen::Index dim) {
        gamma = Mat<S>::Ones(1, dim);
        beta = Mat<S>::Zero(1, dim);
    }
    void collect(const std::string& prefix, ParamRefs<S>& out) {
        out.add(prefix + ".weight", &gamma);
        out.add(prefix + ".bias", &beta);
    }
    ag::Var<S> fwd(FwdCtx<S>& cx, const std::string& prefix, ag::Var<S> x) const {
        return ag::layer_norm_rows(x, cx.param(prefix + ".weight", gamma),
                                   cx.param(prefix + ".bias", beta));
    }
};

// Two-layer feed-forward with GELU, the block every MoE expert replicates.
template <typename S>
struct Ffn {
    Linear<S> fc1, fc2;

    void init(Rng& rng, Eigen::Index dim, Eigen::Index hidden, double stddev) {
        fc1.init(rng, dim, hidden, stddev);
        fc2.init(rng, hidden, dim, stddev);
    }
    void collect(const std::string& prefix, ParamRefs<S>& out) {
        fc1.collect(prefix + ".fc1", out);
        fc2.collect(prefix + ".fc2", out);
    }
    ag::Var<S> fwd(FwdCtx<S>& cx, const std::string& prefix, ag::Var<S> x) const {
        return fc2.fwd(cx, prefix + ".fc2", ag::gelu(fc1.fwd(cx, prefix + ".fc1", x)));
    }
};

// Multi-head self-attention options. `rope_depth` rotates q/k channel pairs by
// the per-token depth index; `causal` adds a lower-triangular mask.
struct AttnOptions {
    int heads = 1;
    const std::vector<int>* rope_depth = nullptr;
    double rope_base = 10000.0;
    bool causal = false;
};

// Fused-qkv attention weights (vision encoder convention).
template <typename S>
struct AttnFused {
    Linear<S> qkv;  // [3C, C]
    Linear<S> out;  // [C, C]

    void init(Rng& rng, Eigen::Index dim, double stddev) {
        qkv.init(rng, dim, 3 * dim, stddev);
        out.init(rng, dim, dim, stddev);
    }
    void collect(const std::string& prefix, ParamRefs<S>& out_refs) {
        qkv.collect(prefix + ".qkv", out_refs);
        out.collect(prefix + ".out", out_refs);
    }
};

namespace detail {

// Scaled dot-product attention over already-projected q, k, v, per head.
template <typename S>
ag::Var<S> mhsa_core(FwdCtx<S>& cx, ag::Var<S> q, ag::Var<S> k, ag::Var<S> v,
                     const AttnOptions& opt) {
    const Eigen::Index dim = q.cols();
    const Eigen::Index n = q.rows();
    if (dim % opt.heads != 0) throw config_error("attention: dim not divisible by heads");
    const Eigen::Index hd = dim / opt.heads;

    if (opt.rope_depth) {
        q = ag::rope_depth(q, *opt.rope_depth, static_cast<int>(hd), opt.rope_base);
        k = ag::rope_depth(k, *opt.rope_depth, static_cast<int>(hd), opt.rope_base);
    }

    std::optional<ag::Var<S>> mask;
    if (opt.causal) {
        Mat<S> m = Mat<S>::Zero(n, n);
        for (Eigen::Index r = 0; r < n; ++r)
            for (Eigen::Index c = r + 1; c < n; ++c)
                m(r, c) = -std::numeric_limits<S>::infinity();
        mask = cx.input(std::move(m));
    }

    const S inv_sqrt = S(1) / static_cast<S>(std::sqrt(static_cast<double>(hd)));
    std::vector<ag::Var<S>> head_outs;
    head_outs.reserve(static_cast<size_t>(opt.heads));
    for (int h = 0; h < opt.heads; ++h) {
        ag::Var<S> qh = ag::slice_cols(q, h * hd, hd);
        ag::Var<S> kh = ag::slice_cols(k, h * hd, hd);
        ag::Var<S> vh = ag::slice_cols(v, h * hd, hd);
        ag::Var<S> scores = ag::scale(ag::matmul_nt(qh, kh), inv_sqrt);
        if (mask) scores = ag::add(scores, *mask);
        head_outs.push_back(ag::matmul(ag::softmax_rows(scores), vh));
    }
    return ag::concat_cols(head_outs);
}

} // namespace detail

// Full MHSA with fused qkv projection.
template <typename S>
ag::Var<S> mhsa_fused(FwdCtx<S>& cx, const AttnFused<S>& w, const std::string& prefix,
                      ag::Var<S> x, const AttnOptions& opt) {
    const Eigen::Index dim = x.cols();
    ag::Var<S> qkv = w.qkv.fwd(cx, prefix + ".qkv", x);
    ag::Var<S> q = ag::slice_cols(qkv, 0, dim);
    ag::Var<S> k = ag::slice_cols(qkv, dim, dim);
    ag::Var<S> v = ag::slice_cols(qkv, 2 * dim, dim);
    ag::Var<S> o = detail::mhsa_core(cx, q, k, v, opt);
    return w.out.fwd(cx, prefix + ".out", o);
}

} // namespace vlm3d
