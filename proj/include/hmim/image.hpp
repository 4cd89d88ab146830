#pragma once

// Tiny grayscale image writer (binary PGM) for the mask-preview panels.

#include <algorithm>
#include <fstream>
#include <string>
#include <vector>

#include "hmim/common.hpp"
#include "hmim/data.hpp"
#include "hmim/masking.hpp"

namespace hmim {

struct GrayImage {
    int rows = 0, cols = 0;
    std::vector<uint8_t> px;

    uint8_t& at(int r, int c) { return px[static_cast<size_t>(r) * cols + c]; }
};

inline void write_pgm(const std::string& path, const GrayImage& img) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw io_error("cannot open " + path + " for writing");
    f << "P5\n" << img.cols << " " << img.rows << "\n255\n";
    f.write(reinterpret_cast<const char*>(img.px.data()), static_cast<std::streamsize>(img.px.size()));
    if (!f) throw io_error("write failed: " + path);
}

// mid-depth slice of channel 0, min/max normalized
inline GrayImage mid_slice(const Volume& v, float lo, float hi) {
    const Shape& sh = v.shape();
    GrayImage img;
    img.rows = sh[1];
    img.cols = sh[2];
    img.px.resize(static_cast<size_t>(img.rows) * img.cols);
    const int dz = sh[3] / 2;
    const float span = hi > lo ? hi - lo : 1.0f;
    for (int h = 0; h < sh[1]; ++h)
        for (int w = 0; w < sh[2]; ++w) {
            const float x = v.values()[(static_cast<int64_t>(h) * sh[2] + w) * sh[3] + dz];
            img.at(h, w) = static_cast<uint8_t>(std::clamp((x - lo) / span, 0.0f, 1.0f) * 255.0f);
        }
    return img;
}

// three panels side by side: original | masked | mask bitmap
inline GrayImage mask_preview_panels(const Volume& original, const Volume& masked, const MaskPlan& plan) {
    float lo = original.values()[0], hi = lo;
    for (float x : original.values()) {
        lo = std::min(lo, x);
        hi = std::max(hi, x);
    }
    GrayImage a = mid_slice(original, lo, hi);
    GrayImage b = mid_slice(masked, lo, hi);

    // bitmap of the mask at the same slice: 255 = masked
    const GridSpec& g = plan.grid;
    GrayImage c;
    c.rows = g.h;
    c.cols = g.w;
    c.px.assign(static_cast<size_t>(g.h) * g.w, 0);
    const int dz = g.d / 2;
    for (int h = 0; h < g.h; ++h)
        for (int w = 0; w < g.w; ++w) {
            const int rh = h / g.sub_volume, rw = w / g.sub_volume, rd = dz / g.sub_volume;
            const int64_t r = (static_cast<int64_t>(rh) * g.gw() + rw) * g.gd() + rd;
            const int k = 4 * ((h % g.sub_volume) / g.patch) + 2 * ((w % g.sub_volume) / g.patch) +
                          ((dz % g.sub_volume) / g.patch);
            if (plan.masked(r, k)) c.at(h, w) = 255;
        }

    const int gap = 2;
    GrayImage out;
    out.rows = a.rows;
    out.cols = a.cols + b.cols + c.cols + 2 * gap;
    out.px.assign(static_cast<size_t>(out.rows) * out.cols, 128);
    for (int r = 0; r < out.rows; ++r) {
        for (int col = 0; col < a.cols; ++col) out.at(r, col) = a.at(r, col);
        for (int col = 0; col < b.cols; ++col) out.at(r, a.cols + gap + col) = b.at(r, col);
        for (int col = 0; col < c.cols; ++col) out.at(r, a.cols + b.cols + 2 * gap + col) = c.at(r, col);
    }
    return out;
}

}  // namespace hmim
