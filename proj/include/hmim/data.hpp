#pragma once

// Procedural phantom volumes (ellipsoid objects over a noisy background),
// cropping and the light fine-tuning augmentations, and the raw-volume file
// format:
//
//   "HMIM" | u16 version | u16 dtype (1 = f32 voxels, 2 = u8 labels)
//   | u32 channels, H, W, D | payload, little-endian
//
// Labels are stored single-channel u8.

#include <array>
#include <cstring>
#include <fstream>
#include <iterator>
#include <optional>
#include <string>
#include <vector>

#include "hmim/common.hpp"
#include "hmim/tensor.hpp"

namespace hmim {

using Volume = Tensor<float>;

struct LabelVolume {
    int h = 0, w = 0, d = 0;
    std::vector<uint8_t> v;

    uint8_t& at(int i, int j, int k) { return v[(static_cast<int64_t>(i) * w + j) * d + k]; }
    uint8_t at(int i, int j, int k) const { return v[(static_cast<int64_t>(i) * w + j) * d + k]; }
    int64_t size() const { return static_cast<int64_t>(v.size()); }
};

struct EllipsoidSpec {
    double ch, cw, cd;  // center
    double ah, aw, ad;  // semi-axes
    float intensity;
};

struct PhantomSpec {
    int h = 32, w = 32, d = 32;
    int n_objects = 2;
    // one intensity-offset range per object class; object i belongs to class
    // (i mod classes) + 1, so the list length sets the class count
    std::vector<std::pair<float, float>> intensity_range = {{0.5f, 0.7f}, {0.25f, 0.4f}};
    float background = 0.1f;
    float noise_sigma = 0.03f;
    uint64_t seed = 0;
    // when nonempty these objects are rasterized as-is (object i -> label i+1)
    std::vector<EllipsoidSpec> explicit_objects;
};

struct Phantom {
    Volume image;        // [1,H,W,D]
    LabelVolume labels;  // voxel = object id in 1..n_objects, 0 background
};

// Ellipsoids are axis-aligned, fully inside the volume, with non-overlapping
// bounding boxes so label masks stay disjoint. Deterministic per seed.
inline Phantom generate_phantom(const PhantomSpec& spec) {
    if (spec.n_objects < 1) throw config_error("phantom: n_objects must be >= 1");
    if (spec.intensity_range.empty()) throw config_error("phantom: intensity_range must be nonempty");
    Rng rng(derive_seed(spec.seed, 0x70686e74ULL));

    Phantom out;
    out.image = Volume::full({1, spec.h, spec.w, spec.d}, spec.background);
    out.labels.h = spec.h;
    out.labels.w = spec.w;
    out.labels.d = spec.d;
    out.labels.v.assign(static_cast<size_t>(spec.h) * spec.w * spec.d, 0);

    std::vector<EllipsoidSpec> objs;
    if (!spec.explicit_objects.empty()) {
        objs = spec.explicit_objects;
        for (const auto& o : objs)
            if (o.ch - o.ah < 0 || o.ch + o.ah > spec.h || o.cw - o.aw < 0 || o.cw + o.aw > spec.w ||
                o.cd - o.ad < 0 || o.cd + o.ad > spec.d)
                throw error("phantom: explicit object does not fit inside the volume");
    } else {
        const int min_extent = std::min({spec.h, spec.w, spec.d});
        // rejection-sample all objects together; when a configuration cannot
        // be completed, restart with a smaller size range before giving up
        double amax = std::max(3.0, min_extent / 4.0);
        for (int round = 0; round < 8; ++round, amax = std::max(3.0, amax * 0.8)) {
            objs.clear();
            bool all_placed = true;
            for (int i = 0; i < spec.n_objects && all_placed; ++i) {
                bool placed = false;
                for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
                    EllipsoidSpec o;
                    o.ah = rng.uniform(3.0, amax);
                    o.aw = rng.uniform(3.0, amax);
                    o.ad = rng.uniform(3.0, amax);
                    if (2 * o.ah > spec.h || 2 * o.aw > spec.w || 2 * o.ad > spec.d) continue;
                    o.ch = rng.uniform(o.ah, spec.h - o.ah);
                    o.cw = rng.uniform(o.aw, spec.w - o.aw);
                    o.cd = rng.uniform(o.ad, spec.d - o.ad);
                    const auto& range = spec.intensity_range[i % spec.intensity_range.size()];
                    o.intensity = static_cast<float>(rng.uniform(range.first, range.second));
                    bool overlap = false;
                    for (const EllipsoidSpec& q : objs)
                        if (std::abs(o.ch - q.ch) < o.ah + q.ah && std::abs(o.cw - q.cw) < o.aw + q.aw &&
                            std::abs(o.cd - q.cd) < o.ad + q.ad)
                            overlap = true;
                    if (!overlap) {
                        objs.push_back(o);
                        placed = true;
                    }
                }
                all_placed = placed;
            }
            if (all_placed) break;
            if (round == 7)
                throw error("phantom: " + std::to_string(spec.n_objects) +
                            " objects cannot fit without overlap");
        }
    }

    auto& img = out.image.values();
    for (size_t i = 0; i < objs.size(); ++i) {
        const EllipsoidSpec& o = objs[i];
        const uint8_t label = spec.explicit_objects.empty()
                                  ? static_cast<uint8_t>(i % spec.intensity_range.size() + 1)
                                  : static_cast<uint8_t>(i + 1);
        const int h0 = static_cast<int>(std::floor(o.ch - o.ah)), h1 = static_cast<int>(std::ceil(o.ch + o.ah));
        const int w0 = static_cast<int>(std::floor(o.cw - o.aw)), w1 = static_cast<int>(std::ceil(o.cw + o.aw));
        const int d0 = static_cast<int>(std::floor(o.cd - o.ad)), d1 = static_cast<int>(std::ceil(o.cd + o.ad));
        for (int h = std::max(0, h0); h <= std::min(spec.h - 1, h1); ++h)
            for (int w = std::max(0, w0); w <= std::min(spec.w - 1, w1); ++w)
                for (int d = std::max(0, d0); d <= std::min(spec.d - 1, d1); ++d) {
                    const double q = std::pow((h - o.ch) / o.ah, 2) + std::pow((w - o.cw) / o.aw, 2) +
                                     std::pow((d - o.cd) / o.ad, 2);
                    if (q <= 1.0) {
                        img[(static_cast<int64_t>(h) * spec.w + w) * spec.d + d] += o.intensity;
                        out.labels.at(h, w, d) = label;
                    }
                }
    }
    if (spec.noise_sigma > 0)
        for (auto& x : img) x += static_cast<float>(rng.normal()) * spec.noise_sigma;
    return out;
}

// ---------------------------------------------------------------------------
// cropping and augmentation
// ---------------------------------------------------------------------------

inline std::array<int, 3> random_crop_origin(const Shape& vol_shape, const std::array<int, 3>& size,
                                             uint64_t seed) {
    if (vol_shape.size() != 4) throw dimension_error("random_crop: volume must be [C,H,W,D]");
    for (int a = 0; a < 3; ++a)
        if (size[a] < 1 || size[a] > vol_shape[a + 1])
            throw config_error("random_crop: size exceeds volume on axis " + std::to_string(a));
    Rng rng(derive_seed(seed, 0x63726f70ULL));
    std::array<int, 3> origin{};
    for (int a = 0; a < 3; ++a)
        origin[a] = static_cast<int>(rng.uniform_int(0, vol_shape[a + 1] - size[a]));
    return origin;
}

inline Volume crop_volume(const Volume& x, const std::array<int, 3>& origin, const std::array<int, 3>& size) {
    return crop<float>(nullptr, x, {0, origin[0], origin[1], origin[2]},
                       {x.shape()[0], size[0], size[1], size[2]});
}

inline LabelVolume crop_labels(const LabelVolume& l, const std::array<int, 3>& origin,
                               const std::array<int, 3>& size) {
    LabelVolume out;
    out.h = size[0];
    out.w = size[1];
    out.d = size[2];
    out.v.resize(static_cast<size_t>(size[0]) * size[1] * size[2]);
    for (int h = 0; h < size[0]; ++h)
        for (int w = 0; w < size[1]; ++w)
            for (int d = 0; d < size[2]; ++d)
                out.at(h, w, d) = l.at(origin[0] + h, origin[1] + w, origin[2] + d);
    return out;
}

struct CropPair {
    Volume image;
    std::optional<LabelVolume> labels;
    std::array<int, 3> origin;
};

inline CropPair random_crop(const Volume& x, const std::optional<LabelVolume>& labels,
                            const std::array<int, 3>& size, uint64_t seed) {
    CropPair out;
    out.origin = random_crop_origin(x.shape(), size, seed);
    out.image = crop_volume(x, out.origin, size);
    if (labels) out.labels = crop_labels(*labels, out.origin, size);
    return out;
}

// axis: 0=H 1=W 2=D
inline Volume flip_volume(const Volume& x, int axis) {
    const Shape& sh = x.shape();
    Volume out = Volume::zeros(sh);
    const auto& xv = x.values();
    auto& ov = out.values();
    for (int c = 0; c < sh[0]; ++c)
        for (int h = 0; h < sh[1]; ++h)
            for (int w = 0; w < sh[2]; ++w)
                for (int d = 0; d < sh[3]; ++d) {
                    const int sh2 = axis == 0 ? sh[1] - 1 - h : h;
                    const int sw2 = axis == 1 ? sh[2] - 1 - w : w;
                    const int sd2 = axis == 2 ? sh[3] - 1 - d : d;
                    ov[((static_cast<int64_t>(c) * sh[1] + h) * sh[2] + w) * sh[3] + d] =
                        xv[((static_cast<int64_t>(c) * sh[1] + sh2) * sh[2] + sw2) * sh[3] + sd2];
                }
    return out;
}

inline LabelVolume flip_labels(const LabelVolume& l, int axis) {
    LabelVolume out = l;
    for (int h = 0; h < l.h; ++h)
        for (int w = 0; w < l.w; ++w)
            for (int d = 0; d < l.d; ++d)
                out.at(h, w, d) = l.at(axis == 0 ? l.h - 1 - h : h, axis == 1 ? l.w - 1 - w : w,
                                       axis == 2 ? l.d - 1 - d : d);
    return out;
}

// 90-degree turns in the plane of two spatial axes; the plane must be square
inline Volume rotate90_volume(const Volume& x, int axis_a, int axis_b, int turns) {
    const Shape& sh = x.shape();
    if (sh[axis_a + 1] != sh[axis_b + 1])
        throw config_error("rotate90: plane axes must have equal extent");
    turns = ((turns % 4) + 4) % 4;
    Volume cur = x;
    for (int t = 0; t < turns; ++t) {
        Volume nxt = Volume::zeros(sh);
        const int n = sh[axis_a + 1];
        for (int c = 0; c < sh[0]; ++c)
            for (int h = 0; h < sh[1]; ++h)
                for (int w = 0; w < sh[2]; ++w)
                    for (int d = 0; d < sh[3]; ++d) {
                        int idx[3] = {h, w, d};
                        const int a = idx[axis_a], b = idx[axis_b];
                        idx[axis_a] = b;
                        idx[axis_b] = n - 1 - a;
                        nxt.values()[((static_cast<int64_t>(c) * sh[1] + h) * sh[2] + w) * sh[3] + d] =
                            cur.values()[((static_cast<int64_t>(c) * sh[1] + idx[0]) * sh[2] + idx[1]) * sh[3] + idx[2]];
                    }
        cur = nxt;
    }
    return cur;
}

inline LabelVolume rotate90_labels(const LabelVolume& l, int axis_a, int axis_b, int turns) {
    const int dims[3] = {l.h, l.w, l.d};
    if (dims[axis_a] != dims[axis_b])
        throw config_error("rotate90: plane axes must have equal extent");
    turns = ((turns % 4) + 4) % 4;
    LabelVolume cur = l;
    for (int t = 0; t < turns; ++t) {
        LabelVolume nxt = cur;
        const int n = dims[axis_a];
        for (int h = 0; h < l.h; ++h)
            for (int w = 0; w < l.w; ++w)
                for (int d = 0; d < l.d; ++d) {
                    int idx[3] = {h, w, d};
                    const int a = idx[axis_a], b = idx[axis_b];
                    idx[axis_a] = b;
                    idx[axis_b] = n - 1 - a;
                    nxt.at(h, w, d) = cur.at(idx[0], idx[1], idx[2]);
                }
        cur = nxt;
    }
    return cur;
}

struct AugmentProbs {
    double flip = 0.2;
    double rotate = 0.2;
    double intensity_scale = 0.1;
    double intensity_shift = 0.1;
};

// Flip/rotation apply to image and labels alike; intensity ops to the image
// only. Scale factor is uniform in [0.9,1.1]; shift is uniform in +-10% of
// the image's value range. Each augmentation fires independently.
inline void augment_finetune(Volume& image, LabelVolume& labels, uint64_t seed,
                             const AugmentProbs& probs = {}) {
    Rng rng(derive_seed(seed, 0x61756746ULL));
    if (rng.u01() < probs.flip) {
        const int axis = static_cast<int>(rng.uniform_int(0, 2));
        image = flip_volume(image, axis);
        labels = flip_labels(labels, axis);
    }
    if (rng.u01() < probs.rotate) {
        // pick a square plane; fall back to a half-turn on a random plane
        static const int planes[3][2] = {{0, 1}, {0, 2}, {1, 2}};
        const int dims[3] = {image.shape()[1], image.shape()[2], image.shape()[3]};
        std::vector<int> square;
        for (int i = 0; i < 3; ++i)
            if (dims[planes[i][0]] == dims[planes[i][1]]) square.push_back(i);
        int plane, turns;
        if (!square.empty()) {
            plane = square[rng.uniform_int(0, static_cast<int64_t>(square.size()) - 1)];
            turns = static_cast<int>(rng.uniform_int(1, 3));
        } else {
            plane = static_cast<int>(rng.uniform_int(0, 2));
            turns = 2;
        }
        image = rotate90_volume(image, planes[plane][0], planes[plane][1], turns);
        labels = rotate90_labels(labels, planes[plane][0], planes[plane][1], turns);
    }
    if (rng.u01() < probs.intensity_scale) {
        const float f = static_cast<float>(rng.uniform(0.9, 1.1));
        for (auto& v : image.values()) v *= f;
    }
    if (rng.u01() < probs.intensity_shift) {
        float lo = image.values()[0], hi = lo;
        for (float v : image.values()) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        const float shift = static_cast<float>(rng.uniform(-0.1, 0.1)) * (hi - lo);
        for (auto& v : image.values()) v += shift;
    }
}

// ---------------------------------------------------------------------------
// raw-volume file format
// ---------------------------------------------------------------------------

namespace rawvol {
constexpr uint16_t kVersion = 1;
constexpr uint16_t kDtypeF32 = 1;
constexpr uint16_t kDtypeU8 = 2;
}  // namespace rawvol

namespace detail {
template <typename T>
void write_le(std::ofstream& f, T v) {
    char buf[sizeof(T)];
    for (size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<char>((static_cast<uint64_t>(v) >> (8 * i)) & 0xff);
    f.write(buf, sizeof(T));
}
template <typename T>
T read_le(std::ifstream& f, size_t& off) {
    char buf[sizeof(T)];
    f.read(buf, sizeof(T));
    if (f.gcount() != sizeof(T)) throw format_error("volume file truncated at byte " + std::to_string(off));
    off += sizeof(T);
    uint64_t v = 0;
    for (size_t i = 0; i < sizeof(T); ++i) v |= static_cast<uint64_t>(static_cast<uint8_t>(buf[i])) << (8 * i);
    return static_cast<T>(v);
}
}  // namespace detail

inline void write_volume(const std::string& path, const Volume& v) {
    const Shape& sh = v.shape();
    if (sh.size() != 4) throw dimension_error("write_volume: volume must be [C,H,W,D]");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw io_error("cannot open " + path + " for writing");
    f.write("HMIM", 4);
    detail::write_le<uint16_t>(f, rawvol::kVersion);
    detail::write_le<uint16_t>(f, rawvol::kDtypeF32);
    for (int a = 0; a < 4; ++a) detail::write_le<uint32_t>(f, static_cast<uint32_t>(sh[a]));
    static_assert(sizeof(float) == 4);
    for (float x : v.values()) {
        uint32_t bits;
        std::memcpy(&bits, &x, 4);
        detail::write_le<uint32_t>(f, bits);
    }
    if (!f) throw io_error("write failed: " + path);
}

inline void write_labels(const std::string& path, const LabelVolume& l) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw io_error("cannot open " + path + " for writing");
    f.write("HMIM", 4);
    detail::write_le<uint16_t>(f, rawvol::kVersion);
    detail::write_le<uint16_t>(f, rawvol::kDtypeU8);
    detail::write_le<uint32_t>(f, 1);
    detail::write_le<uint32_t>(f, static_cast<uint32_t>(l.h));
    detail::write_le<uint32_t>(f, static_cast<uint32_t>(l.w));
    detail::write_le<uint32_t>(f, static_cast<uint32_t>(l.d));
    f.write(reinterpret_cast<const char*>(l.v.data()), static_cast<std::streamsize>(l.v.size()));
    if (!f) throw io_error("write failed: " + path);
}

struct VolumeHeader {
    uint16_t version = 0;
    uint16_t dtype = 0;
    uint32_t channels = 0, h = 0, w = 0, d = 0;
};

inline VolumeHeader read_volume_header(std::ifstream& f, const std::string& path, size_t& off) {
    char magic[4];
    f.read(magic, 4);
    if (f.gcount() != 4 || std::memcmp(magic, "HMIM", 4) != 0)
        throw format_error(path + ": bad magic at byte 0");
    off = 4;
    VolumeHeader hd;
    hd.version = detail::read_le<uint16_t>(f, off);
    if (hd.version != rawvol::kVersion)
        throw format_error(path + ": unsupported version at byte 4");
    hd.dtype = detail::read_le<uint16_t>(f, off);
    if (hd.dtype != rawvol::kDtypeF32 && hd.dtype != rawvol::kDtypeU8)
        throw format_error(path + ": unknown dtype code at byte 6");
    hd.channels = detail::read_le<uint32_t>(f, off);
    hd.h = detail::read_le<uint32_t>(f, off);
    hd.w = detail::read_le<uint32_t>(f, off);
    hd.d = detail::read_le<uint32_t>(f, off);
    return hd;
}

inline Volume read_volume(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw io_error("cannot open " + path);
    size_t off = 0;
    const VolumeHeader hd = read_volume_header(f, path, off);
    if (hd.dtype != rawvol::kDtypeF32) throw format_error(path + ": expected f32 voxels at byte 6");
    Volume v = Volume::zeros({static_cast<int>(hd.channels), static_cast<int>(hd.h),
                              static_cast<int>(hd.w), static_cast<int>(hd.d)});
    for (auto& x : v.values()) {
        const uint32_t bits = detail::read_le<uint32_t>(f, off);
        std::memcpy(&x, &bits, 4);
    }
    char extra;
    if (f.read(&extra, 1))
        throw format_error(path + ": trailing bytes at byte " + std::to_string(off));
    return v;
}

inline LabelVolume read_labels(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw io_error("cannot open " + path);
    size_t off = 0;
    const VolumeHeader hd = read_volume_header(f, path, off);
    if (hd.dtype != rawvol::kDtypeU8) throw format_error(path + ": expected u8 labels at byte 6");
    if (hd.channels != 1) throw format_error(path + ": labels must be single-channel at byte 8");
    LabelVolume l;
    l.h = static_cast<int>(hd.h);
    l.w = static_cast<int>(hd.w);
    l.d = static_cast<int>(hd.d);
    l.v.resize(static_cast<size_t>(l.h) * l.w * l.d);
    f.read(reinterpret_cast<char*>(l.v.data()), static_cast<std::streamsize>(l.v.size()));
    if (f.gcount() != static_cast<std::streamsize>(l.v.size()))
        throw format_error(path + ": payload truncated at byte " + std::to_string(off + f.gcount()));
    off += l.v.size();
    char extra;
    if (f.read(&extra, 1))
        throw format_error(path + ": trailing bytes at byte " + std::to_string(off));
    return l;
}

// ---------------------------------------------------------------------------
// dataset manifest: one "path,split[,label_path]" record per line
// ---------------------------------------------------------------------------

struct ManifestEntry {
    std::string path;
    std::string split;  // "train" or "val"
    std::string label_path;
};

inline std::vector<ManifestEntry> read_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw io_error("cannot open manifest " + path);
    std::vector<ManifestEntry> entries;
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        ManifestEntry e;
        const size_t c1 = line.find(',');
        if (c1 == std::string::npos)
            throw format_error("manifest " + path + ": line " + std::to_string(lineno) + " needs path,split");
        e.path = line.substr(0, c1);
        const size_t c2 = line.find(',', c1 + 1);
        if (c2 == std::string::npos) {
            e.split = line.substr(c1 + 1);
        } else {
            e.split = line.substr(c1 + 1, c2 - c1 - 1);
            e.label_path = line.substr(c2 + 1);
        }
        if (e.split != "train" && e.split != "val")
            throw format_error("manifest " + path + ": line " + std::to_string(lineno) +
                               " split must be train or val");
        entries.push_back(std::move(e));
    }
    return entries;
}

inline void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
    std::ofstream f(path);
    if (!f) throw io_error("cannot open manifest " + path + " for writing");
    for (const auto& e : entries) {
        f << e.path << "," << e.split;
        if (!e.label_path.empty()) f << "," << e.label_path;
        f << "\n";
    }
}

}  // namespace hmim
