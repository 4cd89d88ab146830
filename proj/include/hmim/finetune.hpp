#pragma once

// Segmentation fine-tuning and its metrics.
//
// dice  : 2|A^B| / (|A|+|B|), defined as 1 when both masks are empty
// hd95  : 95th percentile (linear interpolation) of the symmetric
//         surface-distance set; surfaces are 6-connected mask boundaries and
//         distances come from an exact Euclidean distance transform.
//         Undefined (error) when either mask is empty.
//
// Training loss is per-voxel softmax cross-entropy plus soft Dice over the
// foreground classes, equal weights. Best epoch = highest mean validation
// Dice. label_fraction keeps the first round(fraction*n) entries of a
// seed-shuffled index permutation.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "hmim/checkpoint.hpp"
#include "hmim/common.hpp"
#include "hmim/csv.hpp"
#include "hmim/data.hpp"
#include "hmim/losses.hpp"
#include "hmim/model.hpp"
#include "hmim/optim.hpp"
#include "hmim/tensor.hpp"

namespace hmim {

struct BinaryMask {
    int h = 0, w = 0, d = 0;
    std::vector<uint8_t> v;

    static BinaryMask from_labels(const LabelVolume& l, uint8_t cls) {
        BinaryMask m;
        m.h = l.h;
        m.w = l.w;
        m.d = l.d;
        m.v.resize(l.v.size());
        for (size_t i = 0; i < l.v.size(); ++i) m.v[i] = l.v[i] == cls;
        return m;
    }
    int64_t count() const {
        int64_t n = 0;
        for (uint8_t b : v) n += b;
        return n;
    }
    bool at(int i, int j, int k) const { return v[(static_cast<int64_t>(i) * w + j) * d + k]; }
};

inline double dice(const BinaryMask& a, const BinaryMask& b) {
    if (a.h != b.h || a.w != b.w || a.d != b.d) throw dimension_error("dice: mask shapes differ");
    int64_t na = 0, nb = 0, inter = 0;
    for (size_t i = 0; i < a.v.size(); ++i) {
        na += a.v[i];
        nb += b.v[i];
        inter += a.v[i] & b.v[i];
    }
    if (na + nb == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

namespace detail {

// mask voxels with a 6-neighbor outside the mask; volume borders count as
// outside
inline std::vector<std::array<int, 3>> surface_voxels(const BinaryMask& m) {
    std::vector<std::array<int, 3>> out;
    for (int i = 0; i < m.h; ++i)
        for (int j = 0; j < m.w; ++j)
            for (int k = 0; k < m.d; ++k) {
                if (!m.at(i, j, k)) continue;
                const bool boundary =
                    i == 0 || i == m.h - 1 || j == 0 || j == m.w - 1 || k == 0 || k == m.d - 1 ||
                    !m.at(i - 1, j, k) || !m.at(i + 1, j, k) || !m.at(i, j - 1, k) ||
                    !m.at(i, j + 1, k) || !m.at(i, j, k - 1) || !m.at(i, j, k + 1);
                if (boundary) out.push_back({i, j, k});
            }
    return out;
}

// 1-d squared-distance transform (lower envelope of parabolas), positions
// scaled by the axis spacing; infinite cells contribute no parabola
inline void dt1d(std::vector<double>& f, double spacing) {
    const double inf = std::numeric_limits<double>::infinity();
    const int n = static_cast<int>(f.size());
    std::vector<int> v(n);
    std::vector<double> z(n + 1), d(n);
    int k = -1;
    auto pos = [spacing](int i) { return spacing * i; };
    for (int q = 0; q < n; ++q) {
        if (f[q] == inf) continue;
        if (k < 0) {
            k = 0;
            v[0] = q;
            z[0] = -inf;
            z[1] = inf;
            continue;
        }
        double s;
        while (true) {
            const double pq = pos(q), pv = pos(v[k]);
            s = (f[q] + pq * pq - f[v[k]] - pv * pv) / (2 * pq - 2 * pv);
            if (s <= z[k]) {
                --k;  // z[0] = -inf guarantees termination with k >= 0
            } else {
                break;
            }
        }
        ++k;
        v[k] = q;
        z[k] = s;
        z[k + 1] = inf;
    }
    if (k < 0) return;  // no seeds on this line
    k = 0;
    for (int q = 0; q < n; ++q) {
        while (z[k + 1] < pos(q)) ++k;
        const double dx = pos(q) - pos(v[k]);
        d[q] = dx * dx + f[v[k]];
    }
    f = std::move(d);
}

// exact squared EDT to the nearest seed voxel center
inline std::vector<double> edt_sq(const BinaryMask& seeds, const std::array<double, 3>& spacing) {
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> dist(seeds.v.size());
    for (size_t i = 0; i < seeds.v.size(); ++i) dist[i] = seeds.v[i] ? 0.0 : inf;
    const int h = seeds.h, w = seeds.w, d = seeds.d;
    std::vector<double> line;
    // along d
    line.resize(d);
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            double* row = dist.data() + (static_cast<int64_t>(i) * w + j) * d;
            bool any = false;
            for (int k = 0; k < d; ++k) any |= row[k] < inf;
            if (!any) continue;
            line.assign(row, row + d);
            dt1d(line, spacing[2]);
            std::copy(line.begin(), line.end(), row);
        }
    // along w
    line.resize(w);
    for (int i = 0; i < h; ++i)
        for (int k = 0; k < d; ++k) {
            for (int j = 0; j < w; ++j) line[j] = dist[(static_cast<int64_t>(i) * w + j) * d + k];
            dt1d(line, spacing[1]);
            for (int j = 0; j < w; ++j) dist[(static_cast<int64_t>(i) * w + j) * d + k] = line[j];
        }
    // along h
    line.resize(h);
    for (int j = 0; j < w; ++j)
        for (int k = 0; k < d; ++k) {
            for (int i = 0; i < h; ++i) line[i] = dist[(static_cast<int64_t>(i) * w + j) * d + k];
            dt1d(line, spacing[0]);
            for (int i = 0; i < h; ++i) dist[(static_cast<int64_t>(i) * w + j) * d + k] = line[i];
        }
    return dist;
}

inline double percentile_linear(std::vector<double> xs, double q) {
    std::sort(xs.begin(), xs.end());
    const double rank = q * static_cast<double>(xs.size() - 1);
    const size_t lo = static_cast<size_t>(std::floor(rank));
    const size_t hi = static_cast<size_t>(std::ceil(rank));
    const double frac = rank - static_cast<double>(lo);
    return xs[lo] * (1.0 - frac) + xs[hi] * frac;
}

}  // namespace detail

inline double hd95(const BinaryMask& pred, const BinaryMask& truth,
                   const std::array<double, 3>& spacing = {1.0, 1.0, 1.0}) {
    if (pred.h != truth.h || pred.w != truth.w || pred.d != truth.d)
        throw dimension_error("hd95: mask shapes differ");
    if (pred.count() == 0 || truth.count() == 0)
        throw contract_error("hd95: undefined for an empty mask");
    const auto sp = detail::surface_voxels(pred);
    const auto st = detail::surface_voxels(truth);

    BinaryMask pred_surface{pred.h, pred.w, pred.d, std::vector<uint8_t>(pred.v.size(), 0)};
    for (const auto& s : sp) pred_surface.v[(static_cast<int64_t>(s[0]) * pred.w + s[1]) * pred.d + s[2]] = 1;
    BinaryMask truth_surface{truth.h, truth.w, truth.d, std::vector<uint8_t>(truth.v.size(), 0)};
    for (const auto& s : st) truth_surface.v[(static_cast<int64_t>(s[0]) * truth.w + s[1]) * truth.d + s[2]] = 1;

    const auto d_to_truth = detail::edt_sq(truth_surface, spacing);
    const auto d_to_pred = detail::edt_sq(pred_surface, spacing);

    std::vector<double> distances;
    distances.reserve(sp.size() + st.size());
    for (const auto& s : sp)
        distances.push_back(std::sqrt(d_to_truth[(static_cast<int64_t>(s[0]) * pred.w + s[1]) * pred.d + s[2]]));
    for (const auto& s : st)
        distances.push_back(std::sqrt(d_to_pred[(static_cast<int64_t>(s[0]) * truth.w + s[1]) * truth.d + s[2]]));
    return detail::percentile_linear(std::move(distances), 0.95);
}

// ---------------------------------------------------------------------------
// differentiable segmentation losses
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> one_hot_labels(const LabelVolume& l, int classes) {
    Tensor<S> t = Tensor<S>::zeros({classes, l.h, l.w, l.d});
    const int64_t spatial = static_cast<int64_t>(l.h) * l.w * l.d;
    for (int64_t i = 0; i < spatial; ++i) {
        const int cls = l.v[i];
        if (cls >= classes) throw dimension_error("one_hot: label id exceeds class count");
        t.values()[cls * spatial + i] = S(1);
    }
    return t;
}

// probs: [c,H,W,D] channel softmax output; onehot same shape
template <typename S>
Tensor<S> cross_entropy_voxels(Tape<S>* tape, const Tensor<S>& probs, const Tensor<S>& onehot) {
    detail::require_same_shape(probs.shape(), onehot.shape(), "cross_entropy_voxels");
    const int64_t spatial = probs.size() / probs.shape()[0];
    Tensor<S> picked = sum_all(tape, mul(tape, log_clamped(tape, probs, S(1e-12)), onehot));
    return scale(tape, picked, S(-1) / static_cast<S>(spatial));
}

// 1 - (2 sum(p*t) + eps) / (sum(p) + sum(t) + eps), averaged over the given
// classes
template <typename S>
Tensor<S> soft_dice_loss(Tape<S>* tape, const Tensor<S>& probs, const Tensor<S>& onehot,
                         const std::vector<int>& classes, S eps = S(1e-6)) {
    detail::require_same_shape(probs.shape(), onehot.shape(), "soft_dice_loss");
    if (classes.empty()) throw config_error("soft_dice_loss: class list is empty");
    const Shape& sh = probs.shape();
    const std::array<int, 4> ext{1, sh[1], sh[2], sh[3]};
    Tensor<S> acc = Tensor<S>::scalar(S(0));
    for (int cls : classes) {
        const std::array<int, 4> off{cls, 0, 0, 0};
        Tensor<S> p = crop(tape, probs, off, ext);
        Tensor<S> t = crop(tape, onehot, off, ext);
        Tensor<S> inter = sum_all(tape, mul(tape, p, t));
        Tensor<S> denom = add(tape, sum_all(tape, p), sum_all(tape, t));
        Tensor<S> num = add_scalar(tape, scale(tape, inter, S(2)), eps);
        Tensor<S> den = add_scalar(tape, denom, eps);
        Tensor<S> ratio = mul(tape, num, reciprocal(tape, den));
        acc = add(tape, acc, add_scalar(tape, scale(tape, ratio, S(-1)), S(1)));
    }
    return scale(tape, acc, S(1) / static_cast<S>(classes.size()));
}

// ---------------------------------------------------------------------------
// fine-tuning driver
// ---------------------------------------------------------------------------

struct FinetuneConfig {
    std::string init = "scratch";  // "scratch" or a checkpoint path
    int classes = 3;
    int epochs = 4;
    OptimConfig optim;
    bool augment = true;
    double label_fraction = 1.0;
    uint64_t seed = 0;
    ModelConfig model;  // used for scratch init; checkpoint echo wins otherwise

    void validate() const {
        if (classes < 1) throw config_error("finetune: classes must be >= 1");
        if (epochs < 0) throw config_error("finetune: epochs must be >= 0");
        if (label_fraction <= 0 || label_fraction > 1)
            throw config_error("finetune: label_fraction must be in (0,1]");
    }
};

struct SegSample {
    Volume image;
    LabelVolume labels;
};

struct SegMetrics {
    std::vector<double> dice_per_class;  // foreground classes 1..c-1
    std::vector<double> hd95_per_class;  // NaN when undefined
    double mean_dice = 0;
    double mean_hd95 = std::numeric_limits<double>::quiet_NaN();
    int best_epoch = -1;
};

inline std::vector<int64_t> label_fraction_subset(int64_t n, double fraction, uint64_t seed) {
    std::vector<int64_t> perm(n);
    for (int64_t i = 0; i < n; ++i) perm[i] = i;
    Rng rng(derive_seed(seed, 0x667261ULL));
    for (int64_t i = n - 1; i > 0; --i) std::swap(perm[i], perm[rng.uniform_int(0, i)]);
    const int64_t keep = std::max<int64_t>(1, round_half_away(fraction * static_cast<double>(n)));
    perm.resize(std::min(keep, n));
    return perm;
}

template <typename S>
SegMetrics evaluate_segmentation(const UNet3D<S>& model, const std::vector<SegSample>& val, int classes) {
    const int fg = classes - 1;
    std::vector<double> dice_sum(fg, 0.0), hd_sum(fg, 0.0);
    std::vector<int64_t> hd_count(fg, 0);
    for (const auto& sample : val) {
        Tensor<S> logits = model.forward_segment(nullptr, cast<S>(sample.image), false, 0);
        const int64_t spatial = logits.size() / classes;
        LabelVolume pred;
        pred.h = sample.labels.h;
        pred.w = sample.labels.w;
        pred.d = sample.labels.d;
        pred.v.resize(spatial);
        for (int64_t i = 0; i < spatial; ++i) {
            int best = 0;
            for (int c = 1; c < classes; ++c)
                if (logits.values()[c * spatial + i] > logits.values()[best * spatial + i]) best = c;
            pred.v[i] = static_cast<uint8_t>(best);
        }
        for (int c = 1; c < classes; ++c) {
            const BinaryMask pm = BinaryMask::from_labels(pred, static_cast<uint8_t>(c));
            const BinaryMask tm = BinaryMask::from_labels(sample.labels, static_cast<uint8_t>(c));
            dice_sum[c - 1] += dice(pm, tm);
            if (pm.count() > 0 && tm.count() > 0) {
                hd_sum[c - 1] += hd95(pm, tm);
                ++hd_count[c - 1];
            }
        }
    }
    SegMetrics m;
    m.dice_per_class.resize(fg);
    m.hd95_per_class.resize(fg);
    double dsum = 0, hsum = 0;
    int64_t hn = 0;
    for (int c = 0; c < fg; ++c) {
        m.dice_per_class[c] = dice_sum[c] / static_cast<double>(val.size());
        m.hd95_per_class[c] = hd_count[c] ? hd_sum[c] / static_cast<double>(hd_count[c])
                                          : std::numeric_limits<double>::quiet_NaN();
        dsum += m.dice_per_class[c];
        if (hd_count[c]) {
            hsum += m.hd95_per_class[c];
            ++hn;
        }
    }
    m.mean_dice = fg ? dsum / fg : 1.0;
    m.mean_hd95 = hn ? hsum / hn : std::numeric_limits<double>::quiet_NaN();
    return m;
}

struct FinetuneArtifacts {
    SegMetrics best;
    std::string curves_csv_path;
    std::string summary_path;
};

template <typename S = float>
FinetuneArtifacts finetune_run(const FinetuneConfig& cfg, const std::vector<SegSample>& train,
                               const std::vector<SegSample>& val, const std::string& out_dir) {
    cfg.validate();
    if (train.empty()) throw config_error("finetune: training set is empty");
    if (val.empty()) throw config_error("finetune: validation set is empty");
    std::filesystem::create_directories(out_dir);

    // architecture follows the checkpoint echo; dropout stays a caller choice
    // since it changes training behaviour, not weight shapes
    ModelConfig mc = cfg.model;
    std::optional<Checkpoint> ck;
    if (cfg.init != "scratch") {
        ck = read_checkpoint(cfg.init);
        mc.in_channels = std::stoi(ck->config.at("model.in_channels"));
        mc.base_width = std::stoi(ck->config.at("model.base_width"));
        mc.depth = std::stoi(ck->config.at("model.depth"));
        mc.projection_dim = std::stoi(ck->config.at("model.projection_dim"));
        mc.grid.sub_volume = std::stoi(ck->config.at("grid.sub_volume"));
        mc.grid.patch = std::stoi(ck->config.at("grid.patch"));
    }
    mc.grid.h = train[0].image.shape()[1];
    mc.grid.w = train[0].image.shape()[2];
    mc.grid.d = train[0].image.shape()[3];
    UNet3D<S> model(mc, derive_seed(cfg.seed, 0x7363ULL));
    if (ck) load_model(*ck, model);
    model.replace_head(cfg.classes, derive_seed(cfg.seed, 0x68656164ULL));

    const auto subset = label_fraction_subset(static_cast<int64_t>(train.size()), cfg.label_fraction, cfg.seed);
    std::vector<int> fg_classes;
    for (int c = 1; c < cfg.classes; ++c) fg_classes.push_back(c);
    if (fg_classes.empty()) fg_classes.push_back(0);

    OptimConfig oc = cfg.optim;
    oc.total_steps = std::max<int64_t>(1, static_cast<int64_t>(cfg.epochs) * static_cast<int64_t>(subset.size()));
    oc.warmup_steps = std::min(oc.warmup_steps, oc.total_steps - 1);
    AdamW<S> opt(oc);

    FinetuneArtifacts art;
    art.curves_csv_path = out_dir + "/finetune_curves.csv";
    std::vector<std::string> cols = {"epoch", "train_loss"};
    for (int c = 1; c < cfg.classes; ++c) cols.push_back("val_dice_c" + std::to_string(c));
    for (int c = 1; c < cfg.classes; ++c) cols.push_back("val_hd95_c" + std::to_string(c));
    CsvWriter csv(art.curves_csv_path, cols);

    SegMetrics best;
    best.mean_dice = -1.0;
    int64_t step = 0;
    for (int epoch = 0; epoch < std::max(cfg.epochs, 1); ++epoch) {
        double loss_sum = 0;
        int64_t loss_n = 0;
        if (cfg.epochs > 0) {
            std::vector<int64_t> order = subset;
            Rng shuffle_rng(derive_seed(cfg.seed, 0x65706fULL, epoch));
            for (int64_t i = static_cast<int64_t>(order.size()) - 1; i > 0; --i)
                std::swap(order[i], order[shuffle_rng.uniform_int(0, i)]);
            for (size_t oi = 0; oi < order.size(); ++oi) {
                const auto& s = train[order[oi]];
                Volume img = s.image;
                LabelVolume lab = s.labels;
                if (cfg.augment) augment_finetune(img, lab, derive_seed(cfg.seed, 0x617567ULL, epoch, oi));
                Tensor<S> x = cast<S>(img);
                Tensor<S> onehot = one_hot_labels<S>(lab, cfg.classes);

                Tape<S> tape;
                Tensor<S> logits = model.forward_segment(&tape, x, true, derive_seed(cfg.seed, 0xf0ULL, epoch, oi));
                Tensor<S> probs = softmax(&tape, logits, 0);
                Tensor<S> ce = cross_entropy_voxels(&tape, probs, onehot);
                Tensor<S> sd = soft_dice_loss(&tape, probs, onehot, fg_classes);
                Tensor<S> loss = add(&tape, ce, sd);
                model.zero_grad();
                tape.backward(loss);
                opt.step(model.params(), lr_at(std::min(step, oc.total_steps), oc));
                ++step;
                loss_sum += static_cast<double>(loss.item());
                ++loss_n;
            }
        }
        SegMetrics m = evaluate_segmentation(model, val, cfg.classes);
        std::vector<std::string> row = {std::to_string(epoch),
                                        fmt_num(loss_n ? loss_sum / static_cast<double>(loss_n) : 0.0)};
        for (double v : m.dice_per_class) row.push_back(fmt_num(v));
        for (double v : m.hd95_per_class) row.push_back(std::isnan(v) ? "nan" : fmt_num(v));
        csv.row(row);
        if (m.mean_dice > best.mean_dice) {
            best = m;
            best.best_epoch = epoch;
        }
        if (cfg.epochs == 0) break;
    }

    art.best = best;
    art.summary_path = out_dir + "/finetune_summary.json";
    {
        std::ofstream f(art.summary_path);
        if (!f) throw io_error("cannot open " + art.summary_path + " for writing");
        f << "{\n  \"best_epoch\": " << best.best_epoch << ",\n  \"mean_dice\": " << fmt_num(best.mean_dice)
          << ",\n  \"mean_hd95\": " << (std::isnan(best.mean_hd95) ? "null" : fmt_num(best.mean_hd95))
          << ",\n  \"dice_per_class\": [";
        for (size_t i = 0; i < best.dice_per_class.size(); ++i)
            f << (i ? ", " : "") << fmt_num(best.dice_per_class[i]);
        f << "],\n  \"hd95_per_class\": [";
        for (size_t i = 0; i < best.hd95_per_class.size(); ++i)
            f << (i ? ", " : "")
              << (std::isnan(best.hd95_per_class[i]) ? "null" : fmt_num(best.hd95_per_class[i]));
        f << "]\n}\n";
    }
    return art;
}

}  // namespace hmim
