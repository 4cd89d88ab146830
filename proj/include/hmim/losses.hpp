#pragma once

// The five pre-training objectives and their weighted combination, all
// differentiable through the tape:
//
//   pr  : mean over target sub-volumes of the L2 norm of the reconstruction
//         error restricted to masked voxels
//   num : 9-class cross-entropy on the per-sub-volume masked-patch count
//   loc : per-octant binary cross-entropy, summed over the 8 octants and
//         averaged over sub-volumes
//   con : 1/2 [ sum_r CE(u_r, thresholded location count)
//               + MSE(sum_k p_rk, argmax of u_r) ]; the hard count and the
//         argmax are treated as constants, so CE trains the number head and
//         MSE trains the location head
//   cl  : normalized temperature-scaled cross-entropy over 2N features,
//         pairs (2i, 2i+1) positive
//
//   total = pr + l1*num + l2*loc + l3*con + l4*cl

#include <string>
#include <vector>

#include "hmim/common.hpp"
#include "hmim/masking.hpp"
#include "hmim/tensor.hpp"

namespace hmim {

struct LossWeights {
    double lambda1 = 0.1;   // num
    double lambda2 = 0.1;   // loc
    double lambda3 = 0.01;  // con
    double lambda4 = 0.1;   // cl
    double temperature = 0.5;

    void validate() const {
        if (lambda1 < 0 || lambda2 < 0 || lambda3 < 0 || lambda4 < 0)
            throw config_error("loss weights must be nonnegative");
        if (temperature <= 0) throw config_error("contrastive temperature must be positive");
    }
};

struct LossOptions {
    bool pr_per_voxel = false;       // divide each sub-volume norm by sqrt(masked voxel count)
    bool pr_full_subvolume = false;  // include unmasked voxels of target sub-volumes
    bool cl_exclude_positive = false;  // denominator over k != i,j instead of k != i
    double log_eps = 1e-12;
};

struct LossReport {
    double pr = 0, num = 0, loc = 0, con = 0, cl = 0, total = 0;
    int64_t l0_diagnostic = 0;
};

namespace detail {
constexpr double kLocThreshold = 0.5;  // strict >, ties predict unmasked
}

// Eq-style partial reconstruction loss. recon and original are [C,H,W,D];
// only sub-volumes in the target region contribute, and within each only its
// masked voxels (unless pr_full_subvolume).
template <typename S>
Tensor<S> loss_pr(Tape<S>* tape, const Tensor<S>& recon, const Tensor<S>& original,
                  const MaskPlan& plan, const TargetRegion& region, const LossOptions& opt = {}) {
    detail::require_same_shape(recon.shape(), original.shape(), "loss_pr");
    const GridSpec& g = plan.grid;
    if (region.grid != g) throw config_error("loss_pr: target region grid does not match plan grid");
    if (region.count() < 1) throw config_error("loss_pr: empty target region");
    const int channels = recon.shape()[0];
    const int s1 = g.sub_volume, s2 = g.patch;

    Tensor<S> acc = Tensor<S>::scalar(S(0));
    for (int rh = region.lo[0]; rh <= region.hi[0]; ++rh)
        for (int rw = region.lo[1]; rw <= region.hi[1]; ++rw)
            for (int rd = region.lo[2]; rd <= region.hi[2]; ++rd) {
                const int64_t r = (static_cast<int64_t>(rh) * g.gw() + rw) * g.gd() + rd;
                // 0/1 weight per voxel of this sub-volume, broadcast over channels
                Tensor<S> sel = Tensor<S>::zeros({channels, s1, s1, s1});
                int64_t on = 0;
                for (int k = 0; k < 8; ++k) {
                    if (!plan.masked(r, k) && !opt.pr_full_subvolume) continue;
                    const int h0 = ((k >> 2) & 1) * s2, w0 = ((k >> 1) & 1) * s2, d0 = (k & 1) * s2;
                    for (int c = 0; c < channels; ++c)
                        for (int h = h0; h < h0 + s2; ++h)
                            for (int w = w0; w < w0 + s2; ++w) {
                                S* row = sel.values().data() +
                                         ((static_cast<int64_t>(c) * s1 + h) * s1 + w) * s1 + d0;
                                std::fill(row, row + s2, S(1));
                            }
                    on += static_cast<int64_t>(channels) * s2 * s2 * s2;
                }
                const std::array<int, 4> off{0, rh * s1, rw * s1, rd * s1};
                const std::array<int, 4> ext{channels, s1, s1, s1};
                Tensor<S> diff = sub(tape, crop(tape, recon, off, ext), crop(tape, original, off, ext));
                Tensor<S> sq = sum_all(tape, mul(tape, mul(tape, diff, diff), sel));
                Tensor<S> norm = sqrt0(tape, sq);
                if (opt.pr_per_voxel)
                    norm = scale(tape, norm, S(1) / std::sqrt(static_cast<S>(std::max<int64_t>(on, 1))));
                acc = add(tape, acc, norm);
            }
    return scale(tape, acc, S(1) / static_cast<S>(region.count()));
}

// u: (R,9) probabilities; labels: (R,9) one-hot. In checked mode rows must
// sum to 1 within 1e-5.
template <typename S>
Tensor<S> loss_num(Tape<S>* tape, const Tensor<S>& u, const Tensor<S>& labels,
                   const LossOptions& opt = {}) {
    const Shape& sh = u.shape();
    if (sh.size() != 2 || sh[1] != 9) throw dimension_error("loss_num: u must be (R,9)");
    detail::require_same_shape(sh, labels.shape(), "loss_num");
    const int64_t rows = sh[0];
    if (checked_mode()) {
        for (int64_t r = 0; r < rows; ++r) {
            S s = 0;
            int ones = 0;
            for (int k = 0; k < 9; ++k) {
                s += u.values()[r * 9 + k];
                const S l = labels.values()[r * 9 + k];
                if (l != S(0) && l != S(1)) throw contract_error("loss_num: labels must be one-hot");
                ones += l == S(1);
            }
            if (ones != 1) throw contract_error("loss_num: labels must be one-hot");
            if (std::abs(static_cast<double>(s) - 1.0) > 1e-5)
                throw contract_error("loss_num: row " + std::to_string(r) + " is not a probability vector");
        }
    }
    Tensor<S> picked = sum_all(tape, mul(tape, log_clamped(tape, u, static_cast<S>(opt.log_eps)), labels));
    return scale(tape, picked, S(-1) / static_cast<S>(rows));
}

// p: (R,8) probabilities in (0,1); labels: (R,8) 0/1. Octants are summed,
// sub-volumes averaged.
template <typename S>
Tensor<S> loss_loc(Tape<S>* tape, const Tensor<S>& p, const Tensor<S>& labels,
                   const LossOptions& opt = {}) {
    const Shape& sh = p.shape();
    if (sh.size() != 2 || sh[1] != 8) throw dimension_error("loss_loc: p must be (R,8)");
    detail::require_same_shape(sh, labels.shape(), "loss_loc");
    const int64_t rows = sh[0];
    const S eps = static_cast<S>(opt.log_eps);
    Tensor<S> one = Tensor<S>::full(sh, S(1));
    Tensor<S> pos = mul(tape, labels, log_clamped(tape, p, eps));
    Tensor<S> neg = mul(tape, sub(tape, one, labels), log_clamped(tape, sub(tape, one, p), eps));
    return scale(tape, sum_all(tape, add(tape, pos, neg)), S(-1) / static_cast<S>(rows));
}

// Non-differentiable mismatch count between the thresholded location
// prediction and the labels; reported as a metric, never optimized.
template <typename S>
int64_t l0_diagnostic(const Tensor<S>& p, const Tensor<S>& labels) {
    const Shape& sh = p.shape();
    if (sh.size() != 2 || sh[1] != 8) throw dimension_error("l0_diagnostic: p must be (R,8)");
    detail::require_same_shape(sh, labels.shape(), "l0_diagnostic");
    int64_t mismatches = 0;
    for (int64_t i = 0; i < p.size(); ++i) {
        const bool pred = static_cast<double>(p.values()[i]) > detail::kLocThreshold;
        const bool truth = labels.values()[i] > S(0.5);
        mismatches += pred != truth;
    }
    return mismatches;
}

// Consistency between the two perception heads. The thresholded location
// count and the argmax class are stop-gradients (first index wins argmax
// ties), so each term only trains its soft argument.
template <typename S>
Tensor<S> loss_con(Tape<S>* tape, const Tensor<S>& u, const Tensor<S>& p,
                   const LossOptions& opt = {}) {
    const Shape& us = u.shape();
    const Shape& ps = p.shape();
    if (us.size() != 2 || us[1] != 9) throw dimension_error("loss_con: u must be (R,9)");
    if (ps.size() != 2 || ps[1] != 8) throw dimension_error("loss_con: p must be (R,8)");
    if (us[0] != ps[0]) throw dimension_error("loss_con: row count mismatch");
    const int64_t rows = us[0];

    // CE(u_r, count of thresholded p_r), summed over r
    Tensor<S> count_onehot = Tensor<S>::zeros(us);
    for (int64_t r = 0; r < rows; ++r) {
        int cnt = 0;
        for (int k = 0; k < 8; ++k) cnt += static_cast<double>(p.values()[r * 8 + k]) > detail::kLocThreshold;
        count_onehot.values()[r * 9 + cnt] = S(1);
        detail::trace_value(static_cast<uint64_t>(cnt));
    }
    Tensor<S> ce = scale(tape, sum_all(tape, mul(tape, log_clamped(tape, u, static_cast<S>(opt.log_eps)),
                                                 count_onehot)),
                         S(-1));

    // MSE(sum_k p_rk, argmax u_r), mean over r
    std::vector<S> argmax_u(rows);
    for (int64_t r = 0; r < rows; ++r) {
        int best = 0;
        for (int k = 1; k < 9; ++k)
            if (u.values()[r * 9 + k] > u.values()[r * 9 + best]) best = k;
        argmax_u[r] = static_cast<S>(best);
        detail::trace_value(static_cast<uint64_t>(best));
    }
    Tensor<S> p4 = reshape(tape, p, {1, 1, static_cast<int>(rows), 8});
    Tensor<S> diff_acc = Tensor<S>::scalar(S(0));
    for (int64_t r = 0; r < rows; ++r) {
        Tensor<S> row_sum = sum_all(tape, crop(tape, p4, {0, 0, static_cast<int>(r), 0}, {1, 1, 1, 8}));
        Tensor<S> d = add_scalar(tape, row_sum, -argmax_u[r]);
        diff_acc = add(tape, diff_acc, mul(tape, d, d));
    }
    Tensor<S> mse = scale(tape, diff_acc, S(1) / static_cast<S>(rows));
    return scale(tape, add(tape, ce, mse), S(0.5));
}

// NT-Xent over 2N L2-normalized features; (2i, 2i+1) are the two encodings
// of sample i. Denominator excludes only k = i by default; the strict
// k != i,j variant sits behind cl_exclude_positive.
template <typename S>
Tensor<S> loss_cl(Tape<S>* tape, const std::vector<Tensor<S>>& features, double temperature,
                  const LossOptions& opt = {}) {
    const size_t m = features.size();
    if (m < 4 || m % 2 != 0)
        throw config_error("loss_cl: needs 2N features with N >= 2, got " + std::to_string(m));
    if (temperature <= 0) throw config_error("loss_cl: temperature must be positive");
    const S inv_t = static_cast<S>(1.0 / temperature);

    // pairwise similarities (cosine, since inputs are unit vectors)
    std::vector<std::vector<Tensor<S>>> sim(m, std::vector<Tensor<S>>(m));
    for (size_t i = 0; i < m; ++i)
        for (size_t j = i + 1; j < m; ++j) {
            Tensor<S> s = dot(tape, features[i], features[j]);
            sim[i][j] = s;
            sim[j][i] = s;
        }

    Tensor<S> acc = Tensor<S>::scalar(S(0));
    for (size_t i = 0; i < m; ++i) {
        const size_t j = i ^ 1;
        Tensor<S> denom = Tensor<S>::scalar(S(0));
        for (size_t k = 0; k < m; ++k) {
            if (k == i) continue;
            if (opt.cl_exclude_positive && k == j) continue;
            denom = add(tape, denom, exp_op(tape, scale(tape, sim[i][k], inv_t)));
        }
        Tensor<S> log_denom = log_clamped(tape, denom, static_cast<S>(opt.log_eps));
        Tensor<S> pos = scale(tape, sim[i][j], inv_t);
        acc = add(tape, acc, sub(tape, log_denom, pos));
    }
    return scale(tape, acc, S(1) / static_cast<S>(m));
}

// Weighted combination; every component is also reported unscaled.
template <typename S>
struct LossBundle {
    Tensor<S> total;
    LossReport report;
};

template <typename S>
LossBundle<S> loss_total(Tape<S>* tape, const Tensor<S>& pr, const Tensor<S>& num,
                         const Tensor<S>& loc, const Tensor<S>& con, const Tensor<S>& cl,
                         int64_t l0, const LossWeights& w) {
    w.validate();
    const double comps[5] = {static_cast<double>(pr.item()), static_cast<double>(num.item()),
                             static_cast<double>(loc.item()), static_cast<double>(con.item()),
                             static_cast<double>(cl.item())};
    static const char* names[5] = {"pr", "num", "loc", "con", "cl"};
    for (int i = 0; i < 5; ++i)
        if (!std::isfinite(comps[i]))
            throw numeric_error(std::string("loss_total: component ") + names[i] + " is non-finite");

    Tensor<S> total = pr;
    total = add(tape, total, scale(tape, num, static_cast<S>(w.lambda1)));
    total = add(tape, total, scale(tape, loc, static_cast<S>(w.lambda2)));
    total = add(tape, total, scale(tape, con, static_cast<S>(w.lambda3)));
    total = add(tape, total, scale(tape, cl, static_cast<S>(w.lambda4)));

    LossBundle<S> out;
    out.total = total;
    out.report.pr = comps[0];
    out.report.num = comps[1];
    out.report.loc = comps[2];
    out.report.con = comps[3];
    out.report.cl = comps[4];
    out.report.total = static_cast<double>(total.item());
    out.report.l0_diagnostic = l0;
    return out;
}

}  // namespace hmim
