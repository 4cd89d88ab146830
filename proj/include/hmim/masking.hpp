#pragma once

// Two-level masking hierarchy: a volume is divided into cubic sub-volumes of
// side s1, each split into its 8 octant patches of side s2 = s1/2. Masking
// picks second-level patches uniformly at random over the whole volume.
//
// Index conventions (fixed, also used by the model heads):
//   sub-volume r = (rh * Gw + rw) * Gd + rd          (d fastest)
//   octant k     = 4*oh + 2*ow + od, o* in {0,1}     (d fastest)

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <vector>

#include "hmim/common.hpp"
#include "hmim/tensor.hpp"

namespace hmim {

struct GridSpec {
    int h = 0, w = 0, d = 0;   // volume extent in voxels
    int sub_volume = 0;        // s1
    int patch = 0;             // s2

    void validate() const {
        if (h < 1 || w < 1 || d < 1) throw config_error("grid: volume extent must be positive");
        if (sub_volume < 2) throw config_error("grid: sub-volume side must be >= 2");
        if (patch * 2 != sub_volume)
            throw config_error("grid: patch side must be half the sub-volume side, got s1=" +
                               std::to_string(sub_volume) + " s2=" + std::to_string(patch));
        if (h % sub_volume || w % sub_volume || d % sub_volume)
            throw config_error("grid: volume " + std::to_string(h) + "x" + std::to_string(w) + "x" +
                               std::to_string(d) + " not divisible by sub-volume side " +
                               std::to_string(sub_volume));
    }

    int gh() const { return h / sub_volume; }
    int gw() const { return w / sub_volume; }
    int gd() const { return d / sub_volume; }
    int64_t sub_volumes() const { return static_cast<int64_t>(gh()) * gw() * gd(); }  // R
    int64_t patches() const { return 8 * sub_volumes(); }                             // 8R

    bool operator==(const GridSpec&) const = default;
};

struct MaskPlan {
    GridSpec grid;
    float ratio = 0.0f;
    std::vector<uint8_t> patch_bits;  // one byte per sub-volume, bit k = octant k masked

    bool masked(int64_t r, int k) const { return (patch_bits[r] >> k) & 1; }
    int count(int64_t r) const { return std::popcount(static_cast<unsigned>(patch_bits[r])); }

    int64_t total_masked() const {
        int64_t n = 0;
        for (uint8_t b : patch_bits) n += std::popcount(static_cast<unsigned>(b));
        return n;
    }

    // one-hot over {0..8} per sub-volume, row-major (R,9)
    template <typename S>
    Tensor<S> count_labels() const {
        const int64_t r = grid.sub_volumes();
        Tensor<S> t = Tensor<S>::zeros({static_cast<int>(r), 9});
        for (int64_t i = 0; i < r; ++i) t.values()[i * 9 + count(i)] = S(1);
        return t;
    }

    // 0/1 per octant, row-major (R,8)
    template <typename S>
    Tensor<S> location_labels() const {
        const int64_t r = grid.sub_volumes();
        Tensor<S> t = Tensor<S>::zeros({static_cast<int>(r), 8});
        for (int64_t i = 0; i < r; ++i)
            for (int k = 0; k < 8; ++k) t.values()[i * 8 + k] = masked(i, k) ? S(1) : S(0);
        return t;
    }
};

// Exactly round-half-away(ratio * 8R) patches, sampled uniformly without
// replacement; deterministic per seed.
inline MaskPlan make_plan(const GridSpec& grid, double ratio, uint64_t seed) {
    grid.validate();
    if (ratio < 0.0 || ratio > 1.0) throw contract_error("make_plan: ratio must be within [0,1]");
    const int64_t total = grid.patches();
    const int64_t want = round_half_away(ratio * static_cast<double>(total));

    std::vector<int64_t> idx(total);
    for (int64_t i = 0; i < total; ++i) idx[i] = i;
    Rng rng(derive_seed(seed, 0x6d61736bULL));
    for (int64_t i = 0; i < want; ++i) {  // partial Fisher-Yates
        const int64_t j = rng.uniform_int(i, total - 1);
        std::swap(idx[i], idx[j]);
    }

    MaskPlan plan;
    plan.grid = grid;
    plan.ratio = static_cast<float>(ratio);
    plan.patch_bits.assign(grid.sub_volumes(), 0);
    for (int64_t i = 0; i < want; ++i) {
        const int64_t r = idx[i] / 8;
        const int k = static_cast<int>(idx[i] % 8);
        plan.patch_bits[r] |= static_cast<uint8_t>(1u << k);
    }
    return plan;
}

// Voxels of masked patches are set to fill (all channels); everything else is
// copied bit-exactly. Input is not mutated.
template <typename S>
Tensor<S> apply_mask(const Tensor<S>& x, const MaskPlan& plan, S fill = S(0)) {
    const Shape& sh = x.shape();
    if (sh.size() != 4) throw dimension_error("apply_mask: volume must be [C,H,W,D]");
    const GridSpec& g = plan.grid;
    if (sh[1] != g.h || sh[2] != g.w || sh[3] != g.d)
        throw dimension_error("apply_mask: volume " + shape_str(sh) + " does not match grid " +
                              std::to_string(g.h) + "x" + std::to_string(g.w) + "x" + std::to_string(g.d));
    Tensor<S> out = Tensor<S>::from(sh, x.values());
    auto& ov = out.values();
    const int s2 = g.patch;
    const int64_t s3 = sh[3], s23 = static_cast<int64_t>(sh[2]) * s3, s123 = static_cast<int64_t>(sh[1]) * s23;
    for (int64_t r = 0; r < g.sub_volumes(); ++r) {
        if (!plan.patch_bits[r]) continue;
        const int rd = static_cast<int>(r % g.gd());
        const int rw = static_cast<int>((r / g.gd()) % g.gw());
        const int rh = static_cast<int>(r / (static_cast<int64_t>(g.gd()) * g.gw()));
        for (int k = 0; k < 8; ++k) {
            if (!plan.masked(r, k)) continue;
            const int h0 = rh * g.sub_volume + ((k >> 2) & 1) * s2;
            const int w0 = rw * g.sub_volume + ((k >> 1) & 1) * s2;
            const int d0 = rd * g.sub_volume + (k & 1) * s2;
            for (int c = 0; c < sh[0]; ++c)
                for (int h = h0; h < h0 + s2; ++h)
                    for (int w = w0; w < w0 + s2; ++w) {
                        S* row = ov.data() + c * s123 + h * s23 + static_cast<int64_t>(w) * s3 + d0;
                        std::fill(row, row + s2, fill);
                    }
        }
    }
    return out;
}

// Sub-volumes whose centers lie inside the centered axis-aligned cube; the
// boundary test is a closed interval, evaluated exactly in integers
// (2*center = (2r+1)*s1 against extent -+ cube).
struct TargetRegion {
    GridSpec grid;
    int cube = 0;
    std::array<int, 3> lo{};  // inclusive sub-volume index range per axis
    std::array<int, 3> hi{};

    int64_t count() const {
        return static_cast<int64_t>(hi[0] - lo[0] + 1) * (hi[1] - lo[1] + 1) * (hi[2] - lo[2] + 1);
    }
    bool contains(int rh, int rw, int rd) const {
        return rh >= lo[0] && rh <= hi[0] && rw >= lo[1] && rw <= hi[1] && rd >= lo[2] && rd <= hi[2];
    }
    bool full() const {
        return lo == std::array<int, 3>{0, 0, 0} &&
               hi == std::array<int, 3>{grid.gh() - 1, grid.gw() - 1, grid.gd() - 1};
    }
    // voxel-space bounding box of the selected sub-volumes
    std::array<int, 3> box_origin() const {
        return {lo[0] * grid.sub_volume, lo[1] * grid.sub_volume, lo[2] * grid.sub_volume};
    }
    std::array<int, 3> box_extent() const {
        return {(hi[0] - lo[0] + 1) * grid.sub_volume, (hi[1] - lo[1] + 1) * grid.sub_volume,
                (hi[2] - lo[2] + 1) * grid.sub_volume};
    }
};

inline TargetRegion select_target_region(const GridSpec& grid, int cube) {
    grid.validate();
    if (cube < grid.sub_volume)
        throw config_error("target region: cube " + std::to_string(cube) +
                           " smaller than one sub-volume (" + std::to_string(grid.sub_volume) + ")");
    if (cube > std::min({grid.h, grid.w, grid.d}))
        throw config_error("target region: cube " + std::to_string(cube) + " exceeds the volume");
    TargetRegion region;
    region.grid = grid;
    region.cube = cube;
    const int extent[3] = {grid.h, grid.w, grid.d};
    const int cells[3] = {grid.gh(), grid.gw(), grid.gd()};
    for (int a = 0; a < 3; ++a) {
        int lo = cells[a], hi = -1;
        for (int r = 0; r < cells[a]; ++r) {
            const int64_t twice_center = static_cast<int64_t>(2 * r + 1) * grid.sub_volume;
            if (twice_center >= extent[a] - cube && twice_center <= extent[a] + cube) {
                lo = std::min(lo, r);
                hi = std::max(hi, r);
            }
        }
        if (hi < lo) throw config_error("target region: empty selection");  // unreachable for cube >= s1
        region.lo[a] = lo;
        region.hi[a] = hi;
    }
    return region;
}

// ---------------------------------------------------------------------------
// compact binary record, for reproducibility audits
// layout: "HMPL" | u16 version | u32 h,w,d,s1 | f32 ratio | one byte per
// sub-volume (octant bitset), little-endian
// ---------------------------------------------------------------------------

namespace detail {
template <typename T>
void put_le(std::string& out, T v) {
    for (size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((static_cast<uint64_t>(v) >> (8 * i)) & 0xff));
}
inline void put_le_f32(std::string& out, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_le(out, bits);
}
template <typename T>
T get_le(const std::string& in, size_t& off) {
    if (off + sizeof(T) > in.size()) throw format_error("plan record truncated at byte " + std::to_string(off));
    uint64_t v = 0;
    for (size_t i = 0; i < sizeof(T); ++i) v |= static_cast<uint64_t>(static_cast<uint8_t>(in[off + i])) << (8 * i);
    off += sizeof(T);
    return static_cast<T>(v);
}
}  // namespace detail

inline std::string serialize_plan(const MaskPlan& plan) {
    std::string out;
    out += "HMPL";
    detail::put_le<uint16_t>(out, 1);
    detail::put_le<uint32_t>(out, plan.grid.h);
    detail::put_le<uint32_t>(out, plan.grid.w);
    detail::put_le<uint32_t>(out, plan.grid.d);
    detail::put_le<uint32_t>(out, plan.grid.sub_volume);
    detail::put_le_f32(out, plan.ratio);
    out.append(reinterpret_cast<const char*>(plan.patch_bits.data()), plan.patch_bits.size());
    return out;
}

inline MaskPlan deserialize_plan(const std::string& bytes) {
    if (bytes.size() < 4 || bytes.compare(0, 4, "HMPL") != 0)
        throw format_error("plan record: bad magic at byte 0");
    size_t off = 4;
    const uint16_t version = detail::get_le<uint16_t>(bytes, off);
    if (version != 1) throw format_error("plan record: unsupported version at byte 4");
    MaskPlan plan;
    plan.grid.h = static_cast<int>(detail::get_le<uint32_t>(bytes, off));
    plan.grid.w = static_cast<int>(detail::get_le<uint32_t>(bytes, off));
    plan.grid.d = static_cast<int>(detail::get_le<uint32_t>(bytes, off));
    plan.grid.sub_volume = static_cast<int>(detail::get_le<uint32_t>(bytes, off));
    plan.grid.patch = plan.grid.sub_volume / 2;
    const uint32_t rbits = detail::get_le<uint32_t>(bytes, off);
    float ratio;
    std::memcpy(&ratio, &rbits, 4);
    plan.ratio = ratio;
    plan.grid.validate();
    const size_t want = static_cast<size_t>(plan.grid.sub_volumes());
    if (bytes.size() - off != want)
        throw format_error("plan record: payload length mismatch at byte " + std::to_string(off));
    plan.patch_bits.assign(bytes.begin() + off, bytes.end());
    return plan;
}

inline void write_plan(const std::string& path, const MaskPlan& plan) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw io_error("cannot open " + path + " for writing");
    const std::string bytes = serialize_plan(plan);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw io_error("write failed: " + path);
}

inline MaskPlan read_plan(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw io_error("cannot open " + path);
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return deserialize_plan(bytes);
}

}  // namespace hmim
