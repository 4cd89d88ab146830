#pragma once

// Dense n-d tensor with a reverse-mode tape. Scalar type is a template
// parameter: float for training, double for finite-difference checks.
//
// Ops are free functions taking the tape as first argument; pass nullptr to
// run forward-only. A recorded tape is consumed by one backward() call and
// must be reset() before it can record or replay again.

#include <algorithm>
#include <array>
#include <cstring>
#include <functional>
#include <limits>
#include <memory>
#include <thread>
#include <vector>

#include "hmim/common.hpp"

namespace hmim {

template <typename S>
struct TensorImpl {
    Shape shape;
    std::vector<S> v;  // values, contiguous, last axis fastest
    std::vector<S> g;  // gradient accumulator; empty until touched
    bool requires_grad = false;

    void ensure_grad() {
        if (g.empty()) g.assign(v.size(), S(0));
    }
};

template <typename S>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(const Shape& shape) {
        Tensor t;
        t.p_ = std::make_shared<TensorImpl<S>>();
        t.p_->shape = shape;
        t.p_->v.assign(static_cast<size_t>(numel(shape)), S(0));
        return t;
    }

    static Tensor full(const Shape& shape, S value) {
        Tensor t = zeros(shape);
        std::fill(t.p_->v.begin(), t.p_->v.end(), value);
        return t;
    }

    static Tensor scalar(S value) { return full({1}, value); }

    static Tensor from(const Shape& shape, std::vector<S> data) {
        if (static_cast<int64_t>(data.size()) != numel(shape))
            throw dimension_error("tensor data length " + std::to_string(data.size()) +
                                  " does not match shape " + shape_str(shape));
        Tensor t;
        t.p_ = std::make_shared<TensorImpl<S>>();
        t.p_->shape = shape;
        t.p_->v = std::move(data);
        return t;
    }

    static Tensor randn(const Shape& shape, Rng& rng, S stddev = S(1)) {
        Tensor t = zeros(shape);
        for (auto& x : t.p_->v) x = static_cast<S>(rng.normal()) * stddev;
        return t;
    }

    bool defined() const { return p_ != nullptr; }
    const Shape& shape() const { return p_->shape; }
    int64_t size() const { return static_cast<int64_t>(p_->v.size()); }
    bool requires_grad() const { return p_ && p_->requires_grad; }
    void set_requires_grad(bool rg) { p_->requires_grad = rg; }

    std::vector<S>& values() { return p_->v; }
    const std::vector<S>& values() const { return p_->v; }

    // zeros until backward touches this tensor
    const std::vector<S>& grad() const {
        p_->ensure_grad();
        return p_->g;
    }
    std::vector<S>& grad() {
        p_->ensure_grad();
        return p_->g;
    }
    bool grad_touched() const { return !p_->g.empty(); }
    void zero_grad() {
        if (!p_->g.empty()) std::fill(p_->g.begin(), p_->g.end(), S(0));
    }

    S item() const {
        if (size() != 1) throw contract_error("item() on non-scalar tensor " + shape_str(shape()));
        return p_->v[0];
    }

    std::shared_ptr<TensorImpl<S>> impl() const { return p_; }

    // deep copy of values (no grad, no graph link)
    Tensor clone_detached() const {
        Tensor t = zeros(shape());
        t.p_->v = p_->v;
        return t;
    }

private:
    std::shared_ptr<TensorImpl<S>> p_;
};

// value copy across scalar types; no graph link
template <typename T, typename U>
Tensor<T> cast(const Tensor<U>& x) {
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    for (int64_t i = 0; i < x.size(); ++i) out.values()[i] = static_cast<T>(x.values()[i]);
    return out;
}

template <typename S>
class Tape {
public:
    void record(std::function<void()> back) {
        if (consumed_) throw state_error("tape already consumed; reset() before recording");
        nodes_.push_back(std::move(back));
    }

    // Seeds d(out)/d(out) = 1 and replays the recorded primitives in reverse
    // execution order; leaf gradients accumulate in their tensors.
    void backward(const Tensor<S>& out) {
        if (consumed_) throw contract_error("backward called twice on the same tape");
        if (out.size() != 1) throw contract_error("backward requires a scalar output, got " + shape_str(out.shape()));
        if (!out.requires_grad()) throw contract_error("backward output does not require grad");
        consumed_ = true;
        out.impl()->ensure_grad();
        out.impl()->g[0] = S(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    }

    void reset() {
        nodes_.clear();
        consumed_ = false;
    }

    size_t node_count() const { return nodes_.size(); }
    bool consumed() const { return consumed_; }

private:
    std::vector<std::function<void()>> nodes_;
    bool consumed_ = false;
};

namespace detail {

template <typename S>
inline void check_finite(const std::vector<S>& v, const char* op) {
    if (!checked_mode()) return;
    for (S x : v)
        if (!std::isfinite(x)) throw numeric_error(std::string(op) + " produced a non-finite value");
}

template <typename S>
inline bool will_record(Tape<S>* tape, std::initializer_list<const Tensor<S>*> ins) {
    if (!tape) return false;
    for (const Tensor<S>* t : ins)
        if (t->defined() && t->requires_grad()) return true;
    return false;
}

template <typename S>
inline void accum(std::vector<S>& dst, const std::vector<S>& src) {
    for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
    if (a != b)
        throw dimension_error(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

}  // namespace detail

// Instrumentation for smoothness-aware gradient checks: while a sink is
// installed, ops with piecewise-definition points (relu signs, hard
// thresholds) append a fingerprint of their discrete state. Two evaluations
// with equal traces lie in the same smooth piece of the objective.
inline std::vector<uint64_t>*& nonsmooth_trace() {
    static std::vector<uint64_t>* sink = nullptr;
    return sink;
}

namespace detail {
template <typename S>
inline void trace_signs(const std::vector<S>& v) {
    if (auto* tr = nonsmooth_trace()) {
        uint64_t h = 1469598103934665603ULL;
        for (S x : v) {
            h ^= static_cast<uint64_t>(x > S(0));
            h *= 1099511628211ULL;
        }
        tr->push_back(h);
    }
}
inline void trace_value(uint64_t v) {
    if (auto* tr = nonsmooth_trace()) tr->push_back(v);
}
}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename S, typename FwdFn, typename BwdFn>
Tensor<S> unary_op(Tape<S>* tape, const Tensor<S>& x, const char* name, FwdFn fwd, BwdFn bwd) {
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    const auto& xv = x.values();
    auto& ov = out.values();
    for (size_t i = 0; i < xv.size(); ++i) ov[i] = fwd(xv[i]);
    detail::check_finite(ov, name);
    if (detail::will_record(tape, {&x})) {
        out.set_requires_grad(true);
        tape->record([xi = x.impl(), oi = out.impl(), bwd] {
            if (oi->g.empty()) return;
            xi->ensure_grad();
            for (size_t i = 0; i < xi->v.size(); ++i) xi->g[i] += bwd(xi->v[i], oi->v[i]) * oi->g[i];
        });
    }
    return out;
}

template <typename S>
Tensor<S> add(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& b) {
    detail::require_same_shape(a.shape(), b.shape(), "add");
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    auto& ov = out.values();
    const auto &av = a.values(), &bv = b.values();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
    detail::check_finite(ov, "add");
    if (detail::will_record(tape, {&a, &b})) {
        out.set_requires_grad(true);
        tape->record([ai = a.impl(), bi = b.impl(), oi = out.impl()] {
            if (oi->g.empty()) return;
            if (ai->requires_grad) { ai->ensure_grad(); detail::accum(ai->g, oi->g); }
            if (bi->requires_grad) { bi->ensure_grad(); detail::accum(bi->g, oi->g); }
        });
    }
    return out;
}

template <typename S>
Tensor<S> sub(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& b) {
    detail::require_same_shape(a.shape(), b.shape(), "sub");
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    auto& ov = out.values();
    const auto &av = a.values(), &bv = b.values();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
    detail::check_finite(ov, "sub");
    if (detail::will_record(tape, {&a, &b})) {
        out.set_requires_grad(true);
        tape->record([ai = a.impl(), bi = b.impl(), oi = out.impl()] {
            if (oi->g.empty()) return;
            if (ai->requires_grad) { ai->ensure_grad(); detail::accum(ai->g, oi->g); }
            if (bi->requires_grad) {
                bi->ensure_grad();
                for (size_t i = 0; i < bi->g.size(); ++i) bi->g[i] -= oi->g[i];
            }
        });
    }
    return out;
}

template <typename S>
Tensor<S> mul(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& b) {
    detail::require_same_shape(a.shape(), b.shape(), "mul");
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    auto& ov = out.values();
    const auto &av = a.values(), &bv = b.values();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
    detail::check_finite(ov, "mul");
    if (detail::will_record(tape, {&a, &b})) {
        out.set_requires_grad(true);
        tape->record([ai = a.impl(), bi = b.impl(), oi = out.impl()] {
            if (oi->g.empty()) return;
            if (ai->requires_grad) {
                ai->ensure_grad();
                for (size_t i = 0; i < ai->g.size(); ++i) ai->g[i] += bi->v[i] * oi->g[i];
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                for (size_t i = 0; i < bi->g.size(); ++i) bi->g[i] += ai->v[i] * oi->g[i];
            }
        });
    }
    return out;
}

template <typename S>
Tensor<S> scale(Tape<S>* tape, const Tensor<S>& x, S c) {
    return unary_op(tape, x, "scale",
                    [c](S v) { return c * v; },
                    [c](S, S) { return c; });
}

template <typename S>
Tensor<S> add_scalar(Tape<S>* tape, const Tensor<S>& x, S c) {
    return unary_op(tape, x, "add_scalar",
                    [c](S v) { return v + c; },
                    [](S, S) { return S(1); });
}

template <typename S>
Tensor<S> relu(Tape<S>* tape, const Tensor<S>& x) {
    detail::trace_signs(x.values());
    return unary_op(tape, x, "relu",
                    [](S v) { return v > S(0) ? v : S(0); },
                    [](S v, S) { return v > S(0) ? S(1) : S(0); });
}

// Output clamped to the open interval at one ulp-of-one so (0,1) holds in
// 32-bit mode even for saturating inputs.
template <typename S>
Tensor<S> sigmoid(Tape<S>* tape, const Tensor<S>& x) {
    constexpr S eps = std::is_same_v<S, float> ? S(5.9604645e-08) : S(1.1102230246251565e-16);
    return unary_op(tape, x, "sigmoid",
                    [eps](S v) {
                        S y = v >= S(0) ? S(1) / (S(1) + std::exp(-v))
                                        : std::exp(v) / (S(1) + std::exp(v));
                        return std::clamp(y, eps, S(1) - eps);
                    },
                    [](S, S y) { return y * (S(1) - y); });
}

template <typename S>
Tensor<S> exp_op(Tape<S>* tape, const Tensor<S>& x) {
    return unary_op(tape, x, "exp",
                    [](S v) { return std::exp(v); },
                    [](S, S y) { return y; });
}

// log(max(x, eps)); flat (zero-gradient) below the clamp
template <typename S>
Tensor<S> log_clamped(Tape<S>* tape, const Tensor<S>& x, S eps = S(1e-12)) {
    return unary_op(tape, x, "log_clamped",
                    [eps](S v) { return std::log(std::max(v, eps)); },
                    [eps](S v, S) { return v > eps ? S(1) / v : S(0); });
}

template <typename S>
Tensor<S> reciprocal(Tape<S>* tape, const Tensor<S>& x) {
    return unary_op(tape, x, "reciprocal",
                    [](S v) { return S(1) / v; },
                    [](S, S y) { return -y * y; });
}

// sqrt with subgradient 0 at the origin
template <typename S>
Tensor<S> sqrt0(Tape<S>* tape, const Tensor<S>& x) {
    return unary_op(tape, x, "sqrt",
                    [](S v) { return std::sqrt(std::max(v, S(0))); },
                    [](S v, S y) { return v > S(0) ? S(1) / (S(2) * y) : S(0); });
}

// ---------------------------------------------------------------------------
// reductions, reshape-likes
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> sum_all(Tape<S>* tape, const Tensor<S>& x) {
    S acc = 0;
    for (S v : x.values()) acc += v;
    Tensor<S> out = Tensor<S>::scalar(acc);
    detail::check_finite(out.values(), "sum");
    if (detail::will_record(tape, {&x})) {
        out.set_requires_grad(true);
        tape->record([xi = x.impl(), oi = out.impl()] {
            if (oi->g.empty()) return;
            xi->ensure_grad();
            const S g = oi->g[0];
            for (auto& gx : xi->g) gx += g;
        });
    }
    return out;
}

template <typename S>
Tensor<S> mean_all(Tape<S>* tape, const Tensor<S>& x) {
    return scale(tape, sum_all(tape, x), S(1) / static_cast<S>(x.size()));
}

template <typename S>
Tensor<S> dot(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& b) {
    return sum_all(tape, mul(tape, a, b));
}

template <typename S>
Tensor<S> reshape(Tape<S>* tape, const Tensor<S>& x, const Shape& shape) {
    if (numel(shape) != x.size())
        throw dimension_error("reshape: element count mismatch " + shape_str(x.shape()) + " -> " + shape_str(shape));
    Tensor<S> out = Tensor<S>::from(shape, x.values());
    if (detail::will_record(tape, {&x})) {
        out.set_requires_grad(true);
        tape->record([xi = x.impl(), oi = out.impl()] {
            if (oi->g.empty()) return;
            xi->ensure_grad();
            detail::accum(xi->g, oi->g);
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// softmax over one axis
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> softmax(Tape<S>* tape, const Tensor<S>& x, int axis) {
    const Shape& sh = x.shape();
    if (axis < 0 || axis >= static_cast<int>(sh.size()))
        throw dimension_error("softmax: axis out of range");
    int64_t K = sh[axis];
    int64_t inner = 1, outer = 1;
    for (int i = axis + 1; i < static_cast<int>(sh.size()); ++i) inner *= sh[i];
    for (int i = 0; i < axis; ++i) outer *= sh[i];

    Tensor<S> out = Tensor<S>::zeros(sh);
    const auto& xv = x.values();
    auto& ov = out.values();
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
            const int64_t base = o * K * inner + in;
            S mx = -std::numeric_limits<S>::infinity();
            for (int64_t k = 0; k < K; ++k) mx = std::max(mx, xv[base + k * inner]);
            S denom = 0;
            for (int64_t k = 0; k < K; ++k) {
                S e = std::exp(xv[base + k * inner] - mx);
                ov[base + k * inner] = e;
                denom += e;
            }
            for (int64_t k = 0; k < K; ++k) ov[base + k * inner] /= denom;
        }
    }
    detail::check_finite(ov, "softmax");
    if (detail::will_record(tape, {&x})) {
        out.set_requires_grad(true);
        tape->record([xi = x.impl(), oi = out.impl(), K, inner, outer] {
            if (oi->g.empty()) return;
            xi->ensure_grad();
            for (int64_t o = 0; o < outer; ++o) {
                for (int64_t in = 0; in < inner; ++in) {
                    const int64_t base = o * K * inner + in;
                    S s = 0;
                    for (int64_t k = 0; k < K; ++k) s += oi->g[base + k * inner] * oi->v[base + k * inner];
                    for (int64_t k = 0; k < K; ++k) {
                        const int64_t idx = base + k * inner;
                        xi->g[idx] += oi->v[idx] * (oi->g[idx] - s);
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// linear: [M,K] x [K,N] + [N] -> [M,N]
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> linear(Tape<S>* tape, const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
    if (x.shape().size() != 2 || w.shape().size() != 2)
        throw dimension_error("linear: expects 2-d input and weight");
    const int64_t M = x.shape()[0], K = x.shape()[1], N = w.shape()[1];
    if (w.shape()[0] != K)
        throw dimension_error("linear: inner dims " + shape_str(x.shape()) + " vs " + shape_str(w.shape()));
    if (b.defined() && b.size() != N) throw dimension_error("linear: bias length mismatch");

    Tensor<S> out = Tensor<S>::zeros({static_cast<int>(M), static_cast<int>(N)});
    const auto& xv = x.values();
    const auto& wv = w.values();
    auto& ov = out.values();
    for (int64_t m = 0; m < M; ++m) {
        S* orow = ov.data() + m * N;
        if (b.defined())
            std::copy(b.values().begin(), b.values().end(), orow);
        for (int64_t k = 0; k < K; ++k) {
            const S xv_mk = xv[m * K + k];
            const S* wrow = wv.data() + k * N;
            for (int64_t n = 0; n < N; ++n) orow[n] += xv_mk * wrow[n];
        }
    }
    detail::check_finite(ov, "linear");
    if (detail::will_record(tape, {&x, &w, &b})) {
        out.set_requires_grad(true);
        tape->record([xi = x.impl(), wi = w.impl(), bi = b.defined() ? b.impl() : nullptr,
                      oi = out.impl(), M, K, N] {
            if (oi->g.empty()) return;
            if (xi->requires_grad) {
                xi->ensure_grad();
                for (int64_t m = 0; m < M; ++m)
                    for (int64_t k = 0; k < K; ++k) {
                        S acc = 0;
                        const S* grow = oi->g.data() + m * N;
                        const S* wrow = wi->v.data() + k * N;
                        for (int64_t n = 0; n < N; ++n) acc += grow[n] * wrow[n];
                        xi->g[m * K + k] += acc;
                    }
            }
            if (wi->requires_grad) {
                wi->ensure_grad();
                for (int64_t m = 0; m < M; ++m)
                    for (int64_t k = 0; k < K; ++k) {
                        const S xv_mk = xi->v[m * K + k];
                        const S* grow = oi->g.data() + m * N;
                        S* wgrow = wi->g.data() + k * N;
                        for (int64_t n = 0; n < N; ++n) wgrow[n] += xv_mk * grow[n];
                    }
            }
            if (bi && bi->requires_grad) {
                bi->ensure_grad();
                for (int64_t m = 0; m < M; ++m) {
                    const S* grow = oi->g.data() + m * N;
                    for (int64_t n = 0; n < N; ++n) bi->g[n] += grow[n];
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// 3-d convolution on [C,H,W,D] tensors
// ---------------------------------------------------------------------------

enum class ConvPath { direct, im2col };

inline ConvPath& conv_path() {
    static ConvPath p = ConvPath::direct;
    return p;
}

// Worker count for intra-op parallelism. Output channels are partitioned, so
// every element is produced by exactly one worker with a fixed summation
// order and results do not depend on the count.
inline int& device_threads() {
    static int n = 1;
    return n;
}

namespace detail {

struct ConvDims {
    int ci, h, w, d;
    int co, k;
    int stride, pad;
    int oh, ow, od;
};

inline ConvDims conv_dims(const Shape& xs, const Shape& ws, int stride, int padding) {
    if (xs.size() != 4) throw dimension_error("conv3d: input must be [C,H,W,D], got " + shape_str(xs));
    if (ws.size() != 5) throw dimension_error("conv3d: kernel must be [Co,Ci,k,k,k], got " + shape_str(ws));
    if (ws[2] != ws[3] || ws[3] != ws[4]) throw dimension_error("conv3d: kernel must be cubic");
    if (xs[0] != ws[1])
        throw dimension_error("conv3d: input channels " + std::to_string(xs[0]) +
                              " != kernel input channels " + std::to_string(ws[1]));
    if (stride < 1) throw contract_error("conv3d: stride must be >= 1");
    if (padding < 0) throw contract_error("conv3d: padding must be >= 0");
    ConvDims cd{};
    cd.ci = xs[0]; cd.h = xs[1]; cd.w = xs[2]; cd.d = xs[3];
    cd.co = ws[0]; cd.k = ws[2];
    cd.stride = stride; cd.pad = padding;
    if (cd.k > cd.h + 2 * padding || cd.k > cd.w + 2 * padding || cd.k > cd.d + 2 * padding)
        throw dimension_error("conv3d: kernel exceeds padded extent");
    cd.oh = (cd.h + 2 * padding - cd.k) / stride + 1;
    cd.ow = (cd.w + 2 * padding - cd.k) / stride + 1;
    cd.od = (cd.d + 2 * padding - cd.k) / stride + 1;
    return cd;
}

// valid output range [lo,hi) for one kernel offset: 0 <= o*stride + koff - pad < extent
inline void out_range(int koff, int pad, int stride, int extent, int out_extent, int& lo, int& hi) {
    int shift = koff - pad;  // in = o*stride + shift
    lo = shift >= 0 ? 0 : (-shift + stride - 1) / stride;
    hi = shift >= extent ? 0 : (extent - 1 - shift) / stride + 1;
    lo = std::min(lo, out_extent);
    hi = std::min(hi, out_extent);
    if (hi < lo) hi = lo;
}

template <typename S>
void conv3d_forward_direct_range(const S* x, const S* w, const S* b, S* out, const ConvDims& c,
                                 int co_begin, int co_end) {
    const int64_t in_hw = static_cast<int64_t>(c.w) * c.d;
    const int64_t in_chw = static_cast<int64_t>(c.h) * in_hw;
    const int64_t out_hw = static_cast<int64_t>(c.ow) * c.od;
    const int64_t out_chw = static_cast<int64_t>(c.oh) * out_hw;
    for (int co = co_begin; co < co_end; ++co) {
        S* oc = out + co * out_chw;
        const S bias = b ? b[co] : S(0);
        std::fill(oc, oc + out_chw, bias);
        for (int ci = 0; ci < c.ci; ++ci) {
            const S* xc = x + ci * in_chw;
            const S* wc = w + ((static_cast<int64_t>(co) * c.ci + ci) * c.k * c.k * c.k);
            for (int kh = 0; kh < c.k; ++kh) {
                int oh_lo, oh_hi;
                out_range(kh, c.pad, c.stride, c.h, c.oh, oh_lo, oh_hi);
                for (int kw = 0; kw < c.k; ++kw) {
                    int ow_lo, ow_hi;
                    out_range(kw, c.pad, c.stride, c.w, c.ow, ow_lo, ow_hi);
                    for (int kd = 0; kd < c.k; ++kd) {
                        int od_lo, od_hi;
                        out_range(kd, c.pad, c.stride, c.d, c.od, od_lo, od_hi);
                        const S wv = wc[(kh * c.k + kw) * c.k + kd];
                        if (wv == S(0)) continue;
                        for (int oh = oh_lo; oh < oh_hi; ++oh) {
                            const int ih = oh * c.stride + kh - c.pad;
                            for (int ow = ow_lo; ow < ow_hi; ++ow) {
                                const int iw = ow * c.stride + kw - c.pad;
                                const S* xrow = xc + ih * in_hw + static_cast<int64_t>(iw) * c.d + (kd - c.pad);
                                S* orow = oc + oh * out_hw + static_cast<int64_t>(ow) * c.od;
                                if (c.stride == 1) {
                                    for (int od = od_lo; od < od_hi; ++od) orow[od] += wv * xrow[od];
                                } else {
                                    for (int od = od_lo; od < od_hi; ++od)
                                        orow[od] += wv * xrow[static_cast<int64_t>(od) * c.stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

template <typename S>
void conv3d_forward_direct(const S* x, const S* w, const S* b, S* out, const ConvDims& c) {
    const int threads = std::min(device_threads(), c.co);
    if (threads <= 1 || static_cast<int64_t>(c.oh) * c.ow * c.od * c.ci < 4096) {
        conv3d_forward_direct_range(x, w, b, out, c, 0, c.co);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(threads);
    const int per = (c.co + threads - 1) / threads;
    for (int t = 0; t < threads; ++t) {
        const int lo = t * per, hi = std::min(c.co, lo + per);
        if (lo >= hi) break;
        pool.emplace_back([=] { conv3d_forward_direct_range(x, w, b, out, c, lo, hi); });
    }
    for (auto& th : pool) th.join();
}

template <typename S>
void conv3d_forward_im2col(const S* x, const S* w, const S* b, S* out, const ConvDims& c) {
    const int64_t cells = static_cast<int64_t>(c.oh) * c.ow * c.od;
    const int64_t patch = static_cast<int64_t>(c.ci) * c.k * c.k * c.k;
    std::vector<S> col(patch * cells, S(0));
    const int64_t in_hw = static_cast<int64_t>(c.w) * c.d;
    const int64_t in_chw = static_cast<int64_t>(c.h) * in_hw;
    int64_t prow = 0;
    for (int ci = 0; ci < c.ci; ++ci) {
        const S* xc = x + ci * in_chw;
        for (int kh = 0; kh < c.k; ++kh)
            for (int kw = 0; kw < c.k; ++kw)
                for (int kd = 0; kd < c.k; ++kd, ++prow) {
                    S* crow = col.data() + prow * cells;
                    for (int oh = 0; oh < c.oh; ++oh) {
                        const int ih = oh * c.stride + kh - c.pad;
                        if (ih < 0 || ih >= c.h) continue;
                        for (int ow = 0; ow < c.ow; ++ow) {
                            const int iw = ow * c.stride + kw - c.pad;
                            if (iw < 0 || iw >= c.w) continue;
                            S* dst = crow + (static_cast<int64_t>(oh) * c.ow + ow) * c.od;
                            const S* src = xc + ih * in_hw + static_cast<int64_t>(iw) * c.d + (kd - c.pad);
                            for (int od = 0; od < c.od; ++od) {
                                const int id = od * c.stride + kd - c.pad;
                                if (id >= 0 && id < c.d) dst[od] = src[c.stride == 1 ? od : static_cast<int64_t>(od) * c.stride];
                            }
                        }
                    }
                }
    }
    // out[co, cell] = sum_p w[co, p] * col[p, cell]
    for (int co = 0; co < c.co; ++co) {
        S* orow = out + static_cast<int64_t>(co) * cells;
        std::fill(orow, orow + cells, b ? b[co] : S(0));
        const S* wrow = w + static_cast<int64_t>(co) * patch;
        for (int64_t p = 0; p < patch; ++p) {
            const S wv = wrow[p];
            if (wv == S(0)) continue;
            const S* crow = col.data() + p * cells;
            for (int64_t i = 0; i < cells; ++i) orow[i] += wv * crow[i];
        }
    }
}

template <typename S>
void conv3d_backward(const S* x, const S* w, const S* gout,
                     S* gx, S* gw, S* gb, const ConvDims& c) {
    const int64_t in_hw = static_cast<int64_t>(c.w) * c.d;
    const int64_t in_chw = static_cast<int64_t>(c.h) * in_hw;
    const int64_t out_hw = static_cast<int64_t>(c.ow) * c.od;
    const int64_t out_chw = static_cast<int64_t>(c.oh) * out_hw;
    for (int co = 0; co < c.co; ++co) {
        const S* gc = gout + co * out_chw;
        if (gb) {
            S acc = 0;
            for (int64_t i = 0; i < out_chw; ++i) acc += gc[i];
            gb[co] += acc;
        }
        for (int ci = 0; ci < c.ci; ++ci) {
            const S* xc = x + ci * in_chw;
            S* gxc = gx ? gx + ci * in_chw : nullptr;
            const int64_t wbase = (static_cast<int64_t>(co) * c.ci + ci) * c.k * c.k * c.k;
            for (int kh = 0; kh < c.k; ++kh) {
                int oh_lo, oh_hi;
                out_range(kh, c.pad, c.stride, c.h, c.oh, oh_lo, oh_hi);
                for (int kw = 0; kw < c.k; ++kw) {
                    int ow_lo, ow_hi;
                    out_range(kw, c.pad, c.stride, c.w, c.ow, ow_lo, ow_hi);
                    for (int kd = 0; kd < c.k; ++kd) {
                        int od_lo, od_hi;
                        out_range(kd, c.pad, c.stride, c.d, c.od, od_lo, od_hi);
                        const int64_t widx = wbase + (kh * c.k + kw) * c.k + kd;
                        const S wv = w[widx];
                        S wacc = 0;
                        for (int oh = oh_lo; oh < oh_hi; ++oh) {
                            const int ih = oh * c.stride + kh - c.pad;
                            for (int ow = ow_lo; ow < ow_hi; ++ow) {
                                const int iw = ow * c.stride + kw - c.pad;
                                const S* xrow = xc + ih * in_hw + static_cast<int64_t>(iw) * c.d + (kd - c.pad);
                                const S* grow = gc + oh * out_hw + static_cast<int64_t>(ow) * c.od;
                                S* gxrow = gxc ? gxc + ih * in_hw + static_cast<int64_t>(iw) * c.d + (kd - c.pad) : nullptr;
                                if (c.stride == 1) {
                                    if (gw)
                                        for (int od = od_lo; od < od_hi; ++od) wacc += grow[od] * xrow[od];
                                    if (gxrow)
                                        for (int od = od_lo; od < od_hi; ++od) gxrow[od] += wv * grow[od];
                                } else {
                                    for (int od = od_lo; od < od_hi; ++od) {
                                        const int64_t off = static_cast<int64_t>(od) * c.stride;
                                        if (gw) wacc += grow[od] * xrow[off];
                                        if (gxrow) gxrow[off] += wv * grow[od];
                                    }
                                }
                            }
                        }
                        if (gw) gw[widx] += wacc;
                    }
                }
            }
        }
    }
}

}  // namespace detail

template <typename S>
Tensor<S> conv3d(Tape<S>* tape, const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b,
                 int stride, int padding) {
    const detail::ConvDims c = detail::conv_dims(x.shape(), w.shape(), stride, padding);
    Tensor<S> out = Tensor<S>::zeros({c.co, c.oh, c.ow, c.od});
    const S* bp = b.defined() ? b.values().data() : nullptr;
    if (conv_path() == ConvPath::im2col)
        detail::conv3d_forward_im2col(x.values().data(), w.values().data(), bp, out.values().data(), c);
    else
        detail::conv3d_forward_direct(x.values().data(), w.values().data(), bp, out.values().data(), c);
    detail::check_finite(out.values(), "conv3d");
    if (detail::will_record(tape, {&x, &w, &b})) {
        out.set_requires_grad(true);
        tape->record([xi = x.impl(), wi = w.impl(), bi = b.defined() ? b.impl() : nullptr,
                      oi = out.impl(), c] {
            if (oi->g.empty()) return;
            S* gx = nullptr;
            S* gw = nullptr;
            S* gb = nullptr;
            if (xi->requires_grad) { xi->ensure_grad(); gx = xi->g.data(); }
            if (wi->requires_grad) { wi->ensure_grad(); gw = wi->g.data(); }
            if (bi && bi->requires_grad) { bi->ensure_grad(); gb = bi->g.data(); }
            detail::conv3d_backward(xi->v.data(), wi->v.data(), oi->g.data(), gx, gw, gb, c);
        });
    }
    return out;
}

// Transposed 3-d convolution (fractionally-strided). Kernel is [Ci,Co,k,k,k];
// output extent = (in-1)*stride + k.
template <typename S>
Tensor<S> conv3d_transpose(Tape<S>* tape, const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b,
                           int stride) {
    const Shape& xs = x.shape();
    const Shape& ws = w.shape();
    if (xs.size() != 4) throw dimension_error("conv3d_transpose: input must be [C,H,W,D]");
    if (ws.size() != 5 || ws[2] != ws[3] || ws[3] != ws[4])
        throw dimension_error("conv3d_transpose: kernel must be [Ci,Co,k,k,k]");
    if (xs[0] != ws[0]) throw dimension_error("conv3d_transpose: channel mismatch");
    if (stride < 1) throw contract_error("conv3d_transpose: stride must be >= 1");
    const int ci = xs[0], h = xs[1], wdim = xs[2], d = xs[3];
    const int co = ws[1], k = ws[2];
    if (k < stride) throw contract_error("conv3d_transpose: kernel smaller than stride leaves gaps");
    const int oh = (h - 1) * stride + k, ow = (wdim - 1) * stride + k, od = (d - 1) * stride + k;

    Tensor<S> out = Tensor<S>::zeros({co, oh, ow, od});
    const auto& xv = x.values();
    const auto& wv = w.values();
    auto& ov = out.values();
    const int64_t in_hw = static_cast<int64_t>(wdim) * d;
    const int64_t in_chw = static_cast<int64_t>(h) * in_hw;
    const int64_t out_hw = static_cast<int64_t>(ow) * od;
    const int64_t out_chw = static_cast<int64_t>(oh) * out_hw;
    if (b.defined()) {
        if (b.size() != co) throw dimension_error("conv3d_transpose: bias length mismatch");
        for (int c2 = 0; c2 < co; ++c2)
            std::fill(ov.begin() + c2 * out_chw, ov.begin() + (c2 + 1) * out_chw, b.values()[c2]);
    }
    for (int c1 = 0; c1 < ci; ++c1)
        for (int c2 = 0; c2 < co; ++c2) {
            const S* wk = wv.data() + ((static_cast<int64_t>(c1) * co + c2) * k * k * k);
            const S* xc = xv.data() + c1 * in_chw;
            S* oc = ov.data() + c2 * out_chw;
            for (int ih = 0; ih < h; ++ih)
                for (int iw = 0; iw < wdim; ++iw) {
                    const S* xrow = xc + ih * in_hw + static_cast<int64_t>(iw) * d;
                    for (int kh = 0; kh < k; ++kh)
                        for (int kw = 0; kw < k; ++kw) {
                            S* obase = oc + (static_cast<int64_t>(ih) * stride + kh) * out_hw +
                                       (static_cast<int64_t>(iw) * stride + kw) * od;
                            const S* wrow = wk + (kh * k + kw) * k;
                            for (int id = 0; id < d; ++id) {
                                const S xval = xrow[id];
                                if (xval == S(0)) continue;
                                S* o2 = obase + static_cast<int64_t>(id) * stride;
                                for (int kd = 0; kd < k; ++kd) o2[kd] += xval * wrow[kd];
                            }
                        }
                }
        }
    detail::check_finite(ov, "conv3d_transpose");
    if (detail::will_record(tape, {&x, &w, &b})) {
        out.set_requires_grad(true);
        tape->record([xi = x.impl(), wi = w.impl(), bi = b.defined() ? b.impl() : nullptr,
                      oi = out.impl(), ci, co, h, wdim, d, k, stride,
                      in_hw, in_chw, out_hw, out_chw, od] {
            if (oi->g.empty()) return;
            const auto& go = oi->g;
            if (bi && bi->requires_grad) {
                bi->ensure_grad();
                for (int c2 = 0; c2 < co; ++c2) {
                    S acc = 0;
                    for (int64_t i = 0; i < out_chw; ++i) acc += go[c2 * out_chw + i];
                    bi->g[c2] += acc;
                }
            }
            const bool need_x = xi->requires_grad;
            const bool need_w = wi->requires_grad;
            if (need_x) xi->ensure_grad();
            if (need_w) wi->ensure_grad();
            if (!need_x && !need_w) return;
            for (int c1 = 0; c1 < ci; ++c1)
                for (int c2 = 0; c2 < co; ++c2) {
                    const int64_t wbase = (static_cast<int64_t>(c1) * co + c2) * k * k * k;
                    const S* goc = go.data() + c2 * out_chw;
                    for (int ih = 0; ih < h; ++ih)
                        for (int iw = 0; iw < wdim; ++iw)
                            for (int id = 0; id < d; ++id) {
                                const int64_t xidx = c1 * in_chw + ih * in_hw + static_cast<int64_t>(iw) * d + id;
                                const S xval = xi->v[xidx];
                                S gx_acc = 0;
                                for (int kh = 0; kh < k; ++kh)
                                    for (int kw = 0; kw < k; ++kw) {
                                        const S* grow = goc + (static_cast<int64_t>(ih) * stride + kh) * out_hw +
                                                        (static_cast<int64_t>(iw) * stride + kw) * od +
                                                        static_cast<int64_t>(id) * stride;
                                        const int64_t wrow = wbase + (kh * k + kw) * k;
                                        for (int kd = 0; kd < k; ++kd) {
                                            if (need_x) gx_acc += wi->v[wrow + kd] * grow[kd];
                                            if (need_w) wi->g[wrow + kd] += xval * grow[kd];
                                        }
                                    }
                                if (need_x) xi->g[xidx] += gx_acc;
                            }
                }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// pooling, dropout, normalize, concat, crop/embed
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> global_avg_pool(Tape<S>* tape, const Tensor<S>& x) {
    const Shape& sh = x.shape();
    if (sh.size() != 4) throw dimension_error("global_avg_pool: input must be [C,H,W,D]");
    const int cch = sh[0];
    const int64_t spatial = static_cast<int64_t>(sh[1]) * sh[2] * sh[3];
    Tensor<S> out = Tensor<S>::zeros({cch});
    const auto& xv = x.values();
    auto& ov = out.values();
    for (int c = 0; c < cch; ++c) {
        S acc = 0;
        const S* base = xv.data() + c * spatial;
        for (int64_t i = 0; i < spatial; ++i) acc += base[i];
        ov[c] = acc / static_cast<S>(spatial);
    }
    detail::check_finite(ov, "global_avg_pool");
    if (detail::will_record(tape, {&x})) {
        out.set_requires_grad(true);
        tape->record([xi = x.impl(), oi = out.impl(), cch, spatial] {
            if (oi->g.empty()) return;
            xi->ensure_grad();
            for (int c = 0; c < cch; ++c) {
                const S g = oi->g[c] / static_cast<S>(spatial);
                S* base = xi->g.data() + c * spatial;
                for (int64_t i = 0; i < spatial; ++i) base[i] += g;
            }
        });
    }
    return out;
}

// Mean over equal blocks so the spatial grid becomes (gh,gw,gd). Extents must
// divide; identity copy when they already match.
template <typename S>
Tensor<S> avg_pool_to_grid(Tape<S>* tape, const Tensor<S>& x, int gh, int gw, int gd) {
    const Shape& sh = x.shape();
    if (sh.size() != 4) throw dimension_error("avg_pool_to_grid: input must be [C,H,W,D]");
    if (sh[1] % gh || sh[2] % gw || sh[3] % gd)
        throw dimension_error("avg_pool_to_grid: " + shape_str(sh) + " not divisible by target grid");
    const int bh = sh[1] / gh, bw = sh[2] / gw, bd = sh[3] / gd;
    const int cch = sh[0];
    Tensor<S> out = Tensor<S>::zeros({cch, gh, gw, gd});
    const auto& xv = x.values();
    auto& ov = out.values();
    const int64_t in_hw = static_cast<int64_t>(sh[2]) * sh[3];
    const int64_t in_chw = static_cast<int64_t>(sh[1]) * in_hw;
    const S inv = S(1) / static_cast<S>(static_cast<int64_t>(bh) * bw * bd);
    for (int c = 0; c < cch; ++c)
        for (int a = 0; a < gh; ++a)
            for (int b2 = 0; b2 < gw; ++b2)
                for (int e = 0; e < gd; ++e) {
                    S acc = 0;
                    for (int i = 0; i < bh; ++i)
                        for (int j = 0; j < bw; ++j) {
                            const S* row = xv.data() + c * in_chw + (static_cast<int64_t>(a) * bh + i) * in_hw +
                                           (static_cast<int64_t>(b2) * bw + j) * sh[3] + static_cast<int64_t>(e) * bd;
                            for (int l = 0; l < bd; ++l) acc += row[l];
                        }
                    ov[((static_cast<int64_t>(c) * gh + a) * gw + b2) * gd + e] = acc * inv;
                }
    detail::check_finite(ov, "avg_pool_to_grid");
    if (detail::will_record(tape, {&x})) {
        out.set_requires_grad(true);
        tape->record([xi = x.impl(), oi = out.impl(), cch, gh, gw, gd, bh, bw, bd, in_hw, in_chw,
                      d_in = sh[3], inv] {
            if (oi->g.empty()) return;
            xi->ensure_grad();
            for (int c = 0; c < cch; ++c)
                for (int a = 0; a < gh; ++a)
                    for (int b2 = 0; b2 < gw; ++b2)
                        for (int e = 0; e < gd; ++e) {
                            const S g = oi->g[((static_cast<int64_t>(c) * gh + a) * gw + b2) * gd + e] * inv;
                            for (int i = 0; i < bh; ++i)
                                for (int j = 0; j < bw; ++j) {
                                    S* row = xi->g.data() + c * in_chw + (static_cast<int64_t>(a) * bh + i) * in_hw +
                                             (static_cast<int64_t>(b2) * bw + j) * d_in + static_cast<int64_t>(e) * bd;
                                    for (int l = 0; l < bd; ++l) row[l] += g;
                                }
                        }
        });
    }
    return out;
}

// Bernoulli keep mask scaled by 1/keep. Identity when training is off or the
// rate is zero; the mask is a pure function of the seed.
template <typename S>
Tensor<S> dropout(Tape<S>* tape, const Tensor<S>& x, double rate, bool training, uint64_t seed) {
    if (rate < 0.0 || rate >= 1.0) throw contract_error("dropout: rate must be in [0,1)");
    if (!training || rate == 0.0) {
        Tensor<S> out = Tensor<S>::from(x.shape(), x.values());
        if (detail::will_record(tape, {&x})) {
            out.set_requires_grad(true);
            tape->record([xi = x.impl(), oi = out.impl()] {
                if (oi->g.empty()) return;
                xi->ensure_grad();
                detail::accum(xi->g, oi->g);
            });
        }
        return out;
    }
    const double keep = 1.0 - rate;
    const S inv_keep = static_cast<S>(1.0 / keep);
    auto mask = std::make_shared<std::vector<uint8_t>>(x.size());
    Rng rng(seed);
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    const auto& xv = x.values();
    auto& ov = out.values();
    for (size_t i = 0; i < xv.size(); ++i) {
        const bool k = rng.u01() < keep;
        (*mask)[i] = k;
        ov[i] = k ? xv[i] * inv_keep : S(0);
    }
    detail::check_finite(ov, "dropout");
    if (detail::will_record(tape, {&x})) {
        out.set_requires_grad(true);
        tape->record([xi = x.impl(), oi = out.impl(), mask, inv_keep] {
            if (oi->g.empty()) return;
            xi->ensure_grad();
            for (size_t i = 0; i < xi->g.size(); ++i)
                if ((*mask)[i]) xi->g[i] += inv_keep * oi->g[i];
        });
    }
    return out;
}

template <typename S>
Tensor<S> l2_normalize(Tape<S>* tape, const Tensor<S>& x) {
    S sq = 0;
    for (S v : x.values()) sq += v * v;
    const S n = std::max(std::sqrt(sq), S(1e-12));
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    const auto& xv = x.values();
    auto& ov = out.values();
    for (size_t i = 0; i < xv.size(); ++i) ov[i] = xv[i] / n;
    detail::check_finite(ov, "l2_normalize");
    if (detail::will_record(tape, {&x})) {
        out.set_requires_grad(true);
        tape->record([xi = x.impl(), oi = out.impl(), n] {
            if (oi->g.empty()) return;
            xi->ensure_grad();
            S gy = 0;
            for (size_t i = 0; i < oi->g.size(); ++i) gy += oi->g[i] * oi->v[i];
            for (size_t i = 0; i < xi->g.size(); ++i) xi->g[i] += (oi->g[i] - oi->v[i] * gy) / n;
        });
    }
    return out;
}

template <typename S>
Tensor<S> concat_channels(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& b) {
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    if (as.size() != 4 || bs.size() != 4 || as[1] != bs[1] || as[2] != bs[2] || as[3] != bs[3])
        throw dimension_error("concat_channels: spatial mismatch " + shape_str(as) + " vs " + shape_str(bs));
    Tensor<S> out = Tensor<S>::zeros({as[0] + bs[0], as[1], as[2], as[3]});
    auto& ov = out.values();
    std::copy(a.values().begin(), a.values().end(), ov.begin());
    std::copy(b.values().begin(), b.values().end(), ov.begin() + a.size());
    if (detail::will_record(tape, {&a, &b})) {
        out.set_requires_grad(true);
        tape->record([ai = a.impl(), bi = b.impl(), oi = out.impl()] {
            if (oi->g.empty()) return;
            const size_t na = ai->v.size();
            if (ai->requires_grad) {
                ai->ensure_grad();
                for (size_t i = 0; i < na; ++i) ai->g[i] += oi->g[i];
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                for (size_t i = 0; i < bi->v.size(); ++i) bi->g[i] += oi->g[na + i];
            }
        });
    }
    return out;
}

// axis-aligned sub-block of a [C,H,W,D] tensor; gradient scatters back
template <typename S>
Tensor<S> crop(Tape<S>* tape, const Tensor<S>& x, const std::array<int, 4>& offset,
               const std::array<int, 4>& extent) {
    const Shape& sh = x.shape();
    if (sh.size() != 4) throw dimension_error("crop: input must be [C,H,W,D]");
    for (int i = 0; i < 4; ++i)
        if (offset[i] < 0 || extent[i] < 1 || offset[i] + extent[i] > sh[i])
            throw dimension_error("crop: window out of bounds on axis " + std::to_string(i));
    Tensor<S> out = Tensor<S>::zeros({extent[0], extent[1], extent[2], extent[3]});
    const auto& xv = x.values();
    auto& ov = out.values();
    const int64_t s3 = sh[3], s23 = static_cast<int64_t>(sh[2]) * s3, s123 = static_cast<int64_t>(sh[1]) * s23;
    int64_t o = 0;
    for (int c = 0; c < extent[0]; ++c)
        for (int h = 0; h < extent[1]; ++h)
            for (int w = 0; w < extent[2]; ++w) {
                const S* src = xv.data() + (offset[0] + c) * s123 + (offset[1] + h) * s23 +
                               (offset[2] + w) * s3 + offset[3];
                std::copy(src, src + extent[3], ov.data() + o);
                o += extent[3];
            }
    if (detail::will_record(tape, {&x})) {
        out.set_requires_grad(true);
        tape->record([xi = x.impl(), oi = out.impl(), offset, extent, s3, s23, s123] {
            if (oi->g.empty()) return;
            xi->ensure_grad();
            int64_t o2 = 0;
            for (int c = 0; c < extent[0]; ++c)
                for (int h = 0; h < extent[1]; ++h)
                    for (int w = 0; w < extent[2]; ++w) {
                        S* dst = xi->g.data() + (offset[0] + c) * s123 + (offset[1] + h) * s23 +
                                 (offset[2] + w) * s3 + offset[3];
                        for (int d = 0; d < extent[3]; ++d) dst[d] += oi->g[o2 + d];
                        o2 += extent[3];
                    }
        });
    }
    return out;
}

// place x into a zero canvas of the given shape at the given offset
template <typename S>
Tensor<S> embed(Tape<S>* tape, const Tensor<S>& x, const Shape& canvas, const std::array<int, 4>& offset) {
    const Shape& sh = x.shape();
    if (sh.size() != 4 || canvas.size() != 4) throw dimension_error("embed: expects [C,H,W,D]");
    for (int i = 0; i < 4; ++i)
        if (offset[i] < 0 || offset[i] + sh[i] > canvas[i])
            throw dimension_error("embed: window out of bounds on axis " + std::to_string(i));
    Tensor<S> out = Tensor<S>::zeros(canvas);
    const auto& xv = x.values();
    auto& ov = out.values();
    const int64_t s3 = canvas[3], s23 = static_cast<int64_t>(canvas[2]) * s3,
                  s123 = static_cast<int64_t>(canvas[1]) * s23;
    int64_t o = 0;
    for (int c = 0; c < sh[0]; ++c)
        for (int h = 0; h < sh[1]; ++h)
            for (int w = 0; w < sh[2]; ++w) {
                S* dst = ov.data() + (offset[0] + c) * s123 + (offset[1] + h) * s23 + (offset[2] + w) * s3 + offset[3];
                std::copy(xv.data() + o, xv.data() + o + sh[3], dst);
                o += sh[3];
            }
    if (detail::will_record(tape, {&x})) {
        out.set_requires_grad(true);
        tape->record([xi = x.impl(), oi = out.impl(), offset, sh, s3, s23, s123] {
            if (oi->g.empty()) return;
            xi->ensure_grad();
            int64_t o2 = 0;
            for (int c = 0; c < sh[0]; ++c)
                for (int h = 0; h < sh[1]; ++h)
                    for (int w = 0; w < sh[2]; ++w) {
                        const S* src = oi->g.data() + (offset[0] + c) * s123 + (offset[1] + h) * s23 +
                                       (offset[2] + w) * s3 + offset[3];
                        for (int d = 0; d < sh[3]; ++d) xi->g[o2 + d] += src[d];
                        o2 += sh[3];
                    }
        });
    }
    return out;
}

// [C,gh,gw,gd] -> [gh*gw*gd, C]; row order matches the sub-volume index
// convention (h, then w, then d fastest).
template <typename S>
Tensor<S> cells_to_rows(Tape<S>* tape, const Tensor<S>& x) {
    const Shape& sh = x.shape();
    if (sh.size() != 4) throw dimension_error("cells_to_rows: input must be [C,gh,gw,gd]");
    const int cch = sh[0];
    const int64_t cells = static_cast<int64_t>(sh[1]) * sh[2] * sh[3];
    Tensor<S> out = Tensor<S>::zeros({static_cast<int>(cells), cch});
    const auto& xv = x.values();
    auto& ov = out.values();
    for (int c = 0; c < cch; ++c)
        for (int64_t r = 0; r < cells; ++r) ov[r * cch + c] = xv[c * cells + r];
    if (detail::will_record(tape, {&x})) {
        out.set_requires_grad(true);
        tape->record([xi = x.impl(), oi = out.impl(), cch, cells] {
            if (oi->g.empty()) return;
            xi->ensure_grad();
            for (int c = 0; c < cch; ++c)
                for (int64_t r = 0; r < cells; ++r) xi->g[c * cells + r] += oi->g[r * cch + c];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// gradient checking
// ---------------------------------------------------------------------------

// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
// f must be a pure function of x (fix any internal seeds).
template <typename S, typename F>
double grad_check(F f, Tensor<S>& x, double eps = 1e-4) {
    x.set_requires_grad(true);
    x.zero_grad();  // discard anything left over from earlier passes
    Tape<S> tape;
    Tensor<S> y = f(&tape, x);
    if (y.size() != 1) throw contract_error("grad_check: f must return a scalar");
    tape.backward(y);
    std::vector<S> analytic = x.grad();

    double worst = 0.0;
    auto& xv = x.values();
    for (size_t i = 0; i < xv.size(); ++i) {
        const S orig = xv[i];
        xv[i] = orig + static_cast<S>(eps);
        const double fp = static_cast<double>(f(nullptr, x).item());
        xv[i] = orig - static_cast<S>(eps);
        const double fm = static_cast<double>(f(nullptr, x).item());
        xv[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw numeric_error("grad_check: f produced a non-finite value at a perturbed point");
        const double fd = (fp - fm) / (2.0 * eps);
        const double err = std::abs(static_cast<double>(analytic[i]) - fd) /
                           std::max(1.0, std::abs(static_cast<double>(analytic[i])));
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace hmim
