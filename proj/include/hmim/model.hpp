#pragma once

// Multi-scale 3-d UNet encoder-decoder. The encoder downsamples by 2 per
// stage; bottleneck features are pooled onto the sub-volume grid so each
// cell backs one sub-volume for the perception heads. Four outputs:
//   recon      full-shape reconstruction (decoder, optionally restricted to
//              the target-region box and embedded in a zero canvas)
//   num_logits (R,9) masked-patch-count logits per sub-volume
//   loc_probs  (R,8) post-sigmoid masked-octant probabilities
//   feature    L2-normalized contrastive projection
//
// Dropout after every encoder stage makes two same-input forwards differ,
// which is what the contrastive pair construction relies on.

#include <string>
#include <vector>

#include "hmim/common.hpp"
#include "hmim/masking.hpp"
#include "hmim/optim.hpp"
#include "hmim/tensor.hpp"

namespace hmim {

struct ModelConfig {
    int in_channels = 1;
    int base_width = 4;
    int depth = 3;  // number of stride-2 stages
    double dropout_rate = 0.1;
    int projection_dim = 16;
    GridSpec grid;

    void validate() const {
        grid.validate();
        if (in_channels < 1) throw config_error("model: in_channels must be >= 1");
        if (base_width < 1) throw config_error("model: base_width must be >= 1");
        if (depth < 1 || depth > 8) throw config_error("model: depth must be in [1,8]");
        if (dropout_rate < 0 || dropout_rate >= 1) throw config_error("model: dropout_rate must be in [0,1)");
        if (projection_dim < 1) throw config_error("model: projection_dim must be >= 1");
        const int factor = 1 << depth;
        if (factor > grid.sub_volume || grid.sub_volume % factor != 0)
            throw config_error("model: downsample factor " + std::to_string(factor) +
                               " must divide the sub-volume side " + std::to_string(grid.sub_volume));
    }

    int downsample_factor() const { return 1 << depth; }
    int width_at(int level) const { return base_width * (level + 1); }
    int bottleneck_width() const { return width_at(depth); }
};

template <typename S>
struct Predictions {
    Tensor<S> recon;       // [C,H,W,D]
    Tensor<S> num_logits;  // (R,9)
    Tensor<S> loc_probs;   // (R,8)
    Tensor<S> feature;     // (1,projection_dim), unit norm
};

template <typename S>
class UNet3D {
public:
    enum class Head { recon, segment };

    UNet3D(const ModelConfig& cfg, uint64_t seed) : cfg_(cfg) {
        cfg.validate();
        Rng rng(derive_seed(seed, 0x756e6574ULL));
        add_conv("stem", cfg.in_channels, cfg.width_at(0), 3, rng);
        for (int i = 0; i < cfg.depth; ++i) {
            const std::string p = "enc" + std::to_string(i);
            add_conv(p + ".conv", cfg.width_at(i), cfg.width_at(i), 3, rng);
            add_conv(p + ".down", cfg.width_at(i), cfg.width_at(i + 1), 2, rng);
        }
        add_conv("bottleneck", cfg.bottleneck_width(), cfg.bottleneck_width(), 3, rng);
        add_linear("head.num", cfg.bottleneck_width(), 9, rng);
        add_linear("head.loc", cfg.bottleneck_width(), 8, rng);
        add_linear("head.proj", cfg.bottleneck_width(), cfg.projection_dim, rng);
        for (int i = cfg.depth - 1; i >= 0; --i) {
            const std::string p = "dec" + std::to_string(i);
            add_tconv(p + ".up", cfg.width_at(i + 1), cfg.width_at(i), 2, rng);
            add_conv(p + ".conv1", 2 * cfg.width_at(i), cfg.width_at(i), 3, rng);
            add_conv(p + ".conv2", cfg.width_at(i), cfg.width_at(i), 3, rng);
        }
        add_conv("head.recon", cfg.width_at(0), cfg.in_channels, 1, rng);
        head_ = Head::recon;
        out_channels_ = cfg.in_channels;
    }

    const ModelConfig& config() const { return cfg_; }
    Head head() const { return head_; }
    int out_channels() const { return out_channels_; }

    std::vector<NamedParam<S>>& params() { return params_; }
    const std::vector<NamedParam<S>>& params() const { return params_; }

    int64_t param_count() const {
        int64_t n = 0;
        for (const auto& p : params_) n += p.tensor.size();
        return n;
    }

    void zero_grad() {
        for (auto& p : params_) p.tensor.zero_grad();
    }

    Tensor<S> param(const std::string& name) const {
        for (const auto& p : params_)
            if (p.name == name) return p.tensor;
        throw state_error("model: no parameter named " + name);
    }

    // Drop the reconstruction head and attach a fresh c x 1x1x1 convolution.
    // Every other weight is left untouched.
    void replace_head(int classes, uint64_t seed) {
        if (classes < 1) throw config_error("replace_head: class count must be >= 1");
        std::erase_if(params_, [](const NamedParam<S>& p) {
            return p.name == "head.recon.w" || p.name == "head.recon.b" ||
                   p.name == "head.seg.w" || p.name == "head.seg.b";
        });
        Rng rng(derive_seed(seed, 0x73656768ULL));
        add_conv("head.seg", cfg_.width_at(0), classes, 1, rng);
        head_ = Head::segment;
        out_channels_ = classes;
    }

    struct Encoded {
        std::vector<Tensor<S>> skips;  // level i, spatial /2^i
        Tensor<S> bottleneck;          // spatial /2^depth
    };

    Encoded encode(Tape<S>* tape, const Tensor<S>& x, bool training, uint64_t seed) const {
        const Shape& sh = x.shape();
        if (sh.size() != 4 || sh[0] != cfg_.in_channels)
            throw dimension_error("model: input must be [" + std::to_string(cfg_.in_channels) + ",H,W,D], got " +
                                  shape_str(sh));
        if (sh[1] % cfg_.grid.sub_volume || sh[2] % cfg_.grid.sub_volume || sh[3] % cfg_.grid.sub_volume)
            throw dimension_error("model: input extent must be a multiple of the sub-volume side");
        Encoded enc;
        Tensor<S> h = relu(tape, conv3d(tape, x, param("stem.w"), param("stem.b"), 1, 1));
        for (int i = 0; i < cfg_.depth; ++i) {
            const std::string p = "enc" + std::to_string(i);
            h = relu(tape, conv3d(tape, h, param(p + ".conv.w"), param(p + ".conv.b"), 1, 1));
            h = dropout(tape, h, cfg_.dropout_rate, training, derive_seed(seed, 0xd0, i));
            enc.skips.push_back(h);
            h = conv3d(tape, h, param(p + ".down.w"), param(p + ".down.b"), 2, 0);
        }
        h = relu(tape, conv3d(tape, h, param("bottleneck.w"), param("bottleneck.b"), 1, 1));
        h = dropout(tape, h, cfg_.dropout_rate, training, derive_seed(seed, 0xd0, cfg_.depth));
        enc.bottleneck = h;
        return enc;
    }

    // (R, bottleneck_width) rows aligned with the sub-volume index order
    Tensor<S> subvolume_cells(Tape<S>* tape, const Tensor<S>& bottleneck, const GridSpec& grid) const {
        return cells_to_rows(tape, avg_pool_to_grid(tape, bottleneck, grid.gh(), grid.gw(), grid.gd()));
    }

    Tensor<S> contrastive_feature(Tape<S>* tape, const Tensor<S>& bottleneck) const {
        Tensor<S> pooled = reshape(tape, global_avg_pool(tape, bottleneck), {1, cfg_.bottleneck_width()});
        return l2_normalize(tape, linear(tape, pooled, param("head.proj.w"), param("head.proj.b")));
    }

    // Decode the target-region box only; the result is embedded at its voxel
    // offset in a zero canvas of the input shape. A full-extent region makes
    // every crop an identity, so the partial and full paths share this code.
    Tensor<S> decode(Tape<S>* tape, const Encoded& enc, const TargetRegion& region,
                     const Shape& out_shape, const std::string& final_head) const {
        const auto origin = region.box_origin();
        const auto extent = region.box_extent();
        const int df = cfg_.downsample_factor();
        Tensor<S> h = enc.bottleneck;
        if (!region.full())
            h = crop(tape, h, {0, origin[0] / df, origin[1] / df, origin[2] / df},
                     {cfg_.bottleneck_width(), extent[0] / df, extent[1] / df, extent[2] / df});
        for (int i = cfg_.depth - 1; i >= 0; --i) {
            const std::string p = "dec" + std::to_string(i);
            h = conv3d_transpose(tape, h, param(p + ".up.w"), param(p + ".up.b"), 2);
            Tensor<S> skip = enc.skips[i];
            if (!region.full()) {
                const int f = 1 << i;
                skip = crop(tape, skip,
                            {0, origin[0] / f, origin[1] / f, origin[2] / f},
                            {cfg_.width_at(i), extent[0] / f, extent[1] / f, extent[2] / f});
            }
            h = concat_channels(tape, skip, h);
            h = relu(tape, conv3d(tape, h, param(p + ".conv1.w"), param(p + ".conv1.b"), 1, 1));
            h = relu(tape, conv3d(tape, h, param(p + ".conv2.w"), param(p + ".conv2.b"), 1, 1));
        }
        h = conv3d(tape, h, param(final_head + ".w"), param(final_head + ".b"), 1, 0);
        if (!region.full())
            h = embed(tape, h, out_shape, {0, origin[0], origin[1], origin[2]});
        return h;
    }

    Predictions<S> forward_pretrain(Tape<S>* tape, const Tensor<S>& x_masked, bool training,
                                    uint64_t seed, const TargetRegion& region) const {
        if (head_ != Head::recon) throw state_error("forward_pretrain: reconstruction head was replaced");
        const GridSpec& grid = region.grid;
        if (grid.h != x_masked.shape()[1] || grid.w != x_masked.shape()[2] || grid.d != x_masked.shape()[3])
            throw dimension_error("forward_pretrain: target-region grid does not match the input volume");
        Encoded enc = encode(tape, x_masked, training, seed);
        Predictions<S> out;
        Tensor<S> cells = subvolume_cells(tape, enc.bottleneck, grid);
        out.num_logits = linear(tape, cells, param("head.num.w"), param("head.num.b"));
        out.loc_probs = sigmoid(tape, linear(tape, cells, param("head.loc.w"), param("head.loc.b")));
        out.feature = contrastive_feature(tape, enc.bottleneck);
        Shape canvas = x_masked.shape();
        out.recon = decode(tape, enc, region, canvas, "head.recon");
        return out;
    }

    Predictions<S> forward_pretrain(Tape<S>* tape, const Tensor<S>& x_masked, bool training,
                                    uint64_t seed) const {
        const GridSpec g = grid_for(x_masked.shape());
        return forward_pretrain(tape, x_masked, training, seed, select_target_region(g, std::min({g.h, g.w, g.d})));
    }

    // per-voxel class logits [classes,H,W,D]
    Tensor<S> forward_segment(Tape<S>* tape, const Tensor<S>& x, bool training, uint64_t seed) const {
        if (head_ != Head::segment) throw state_error("forward_segment: no segmentation head attached");
        const GridSpec g = grid_for(x.shape());
        Encoded enc = encode(tape, x, training, seed);
        TargetRegion full = select_target_region(g, std::min({g.h, g.w, g.d}));
        return decode(tape, enc, full, {out_channels_, x.shape()[1], x.shape()[2], x.shape()[3]}, "head.seg");
    }

private:
    GridSpec grid_for(const Shape& sh) const {
        GridSpec g = cfg_.grid;
        g.h = sh[1];
        g.w = sh[2];
        g.d = sh[3];
        g.validate();
        return g;
    }

    void add_param(const std::string& name, Tensor<S> t) {
        t.set_requires_grad(true);
        params_.push_back({name, std::move(t)});
    }

    void add_conv(const std::string& name, int cin, int cout, int k, Rng& rng) {
        const S stddev = static_cast<S>(std::sqrt(2.0 / (static_cast<double>(cin) * k * k * k)));
        add_param(name + ".w", Tensor<S>::randn({cout, cin, k, k, k}, rng, stddev));
        add_param(name + ".b", Tensor<S>::zeros({cout}));
    }

    void add_tconv(const std::string& name, int cin, int cout, int k, Rng& rng) {
        const S stddev = static_cast<S>(std::sqrt(2.0 / (static_cast<double>(cin) * k * k * k)));
        add_param(name + ".w", Tensor<S>::randn({cin, cout, k, k, k}, rng, stddev));
        add_param(name + ".b", Tensor<S>::zeros({cout}));
    }

    void add_linear(const std::string& name, int in, int out, Rng& rng) {
        const S stddev = static_cast<S>(std::sqrt(2.0 / static_cast<double>(in)));
        add_param(name + ".w", Tensor<S>::randn({in, out}, rng, stddev));
        add_param(name + ".b", Tensor<S>::zeros({out}));
    }

    ModelConfig cfg_;
    Head head_;
    int out_channels_;
    std::vector<NamedParam<S>> params_;
};

}  // namespace hmim
