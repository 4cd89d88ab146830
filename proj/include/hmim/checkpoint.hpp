#pragma once

// Checkpoint container: named binary blobs plus a config echo, all
// little-endian.
//
//   "HMCK" | u16 version | u32 config_len | config text (key=value lines)
//   | u32 blob_count | blobs
//   blob: u32 name_len | name | u16 dtype (1=f32, 2=i64) | u32 ndim
//         | u32 dims[ndim] | payload
//
// Model weights are stored as 32-bit floats regardless of the training
// scalar type; optimizer moments and counters ride along so a resumed run
// continues the exact trajectory.

#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "hmim/common.hpp"
#include "hmim/model.hpp"
#include "hmim/optim.hpp"

namespace hmim {

struct Blob {
    uint16_t dtype = 1;  // 1=f32, 2=i64
    std::vector<uint32_t> dims;
    std::vector<float> f32;
    std::vector<int64_t> i64;
};

struct Checkpoint {
    std::map<std::string, std::string> config;  // echoed key=value pairs
    std::vector<std::pair<std::string, Blob>> blobs;

    Blob* find(const std::string& name) {
        for (auto& [n, b] : blobs)
            if (n == name) return &b;
        return nullptr;
    }
    const Blob* find(const std::string& name) const {
        for (const auto& [n, b] : blobs)
            if (n == name) return &b;
        return nullptr;
    }

    void put_f32(const std::string& name, const Shape& shape, const std::vector<float>& data) {
        Blob b;
        b.dtype = 1;
        for (int d : shape) b.dims.push_back(static_cast<uint32_t>(d));
        b.f32 = data;
        blobs.emplace_back(name, std::move(b));
    }
    void put_i64(const std::string& name, int64_t value) {
        Blob b;
        b.dtype = 2;
        b.dims = {1};
        b.i64 = {value};
        blobs.emplace_back(name, std::move(b));
    }
    int64_t get_i64(const std::string& name) const {
        const Blob* b = find(name);
        if (!b || b->dtype != 2 || b->i64.size() != 1)
            throw format_error("checkpoint: missing counter " + name);
        return b->i64[0];
    }
};

namespace detail {
template <typename T>
void ck_write(std::ofstream& f, T v) {
    char buf[sizeof(T)];
    for (size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<char>((static_cast<uint64_t>(v) >> (8 * i)) & 0xff);
    f.write(buf, sizeof(T));
}
template <typename T>
T ck_read(std::ifstream& f, const std::string& path) {
    char buf[sizeof(T)];
    f.read(buf, sizeof(T));
    if (f.gcount() != sizeof(T)) throw format_error("checkpoint " + path + ": truncated");
    uint64_t v = 0;
    for (size_t i = 0; i < sizeof(T); ++i) v |= static_cast<uint64_t>(static_cast<uint8_t>(buf[i])) << (8 * i);
    return static_cast<T>(v);
}
}  // namespace detail

inline void write_checkpoint(const std::string& path, const Checkpoint& ck) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw io_error("cannot open checkpoint " + path + " for writing");
    f.write("HMCK", 4);
    detail::ck_write<uint16_t>(f, 1);
    std::string cfg;
    for (const auto& [k, v] : ck.config) cfg += k + "=" + v + "\n";
    detail::ck_write<uint32_t>(f, static_cast<uint32_t>(cfg.size()));
    f.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
    detail::ck_write<uint32_t>(f, static_cast<uint32_t>(ck.blobs.size()));
    for (const auto& [name, b] : ck.blobs) {
        detail::ck_write<uint32_t>(f, static_cast<uint32_t>(name.size()));
        f.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::ck_write<uint16_t>(f, b.dtype);
        detail::ck_write<uint32_t>(f, static_cast<uint32_t>(b.dims.size()));
        for (uint32_t d : b.dims) detail::ck_write<uint32_t>(f, d);
        if (b.dtype == 1) {
            for (float x : b.f32) {
                uint32_t bits;
                std::memcpy(&bits, &x, 4);
                detail::ck_write<uint32_t>(f, bits);
            }
        } else {
            for (int64_t x : b.i64) detail::ck_write<uint64_t>(f, static_cast<uint64_t>(x));
        }
    }
    if (!f) throw io_error("checkpoint write failed: " + path);
}

inline Checkpoint read_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw io_error("cannot open checkpoint " + path);
    char magic[4];
    f.read(magic, 4);
    if (f.gcount() != 4 || std::memcmp(magic, "HMCK", 4) != 0)
        throw format_error("checkpoint " + path + ": bad magic");
    const uint16_t version = detail::ck_read<uint16_t>(f, path);
    if (version != 1) throw format_error("checkpoint " + path + ": unsupported version");
    Checkpoint ck;
    const uint32_t cfg_len = detail::ck_read<uint32_t>(f, path);
    std::string cfg(cfg_len, '\0');
    f.read(cfg.data(), cfg_len);
    if (f.gcount() != static_cast<std::streamsize>(cfg_len))
        throw format_error("checkpoint " + path + ": truncated config");
    size_t pos = 0;
    while (pos < cfg.size()) {
        const size_t nl = cfg.find('\n', pos);
        const std::string line = cfg.substr(pos, nl - pos);
        pos = nl == std::string::npos ? cfg.size() : nl + 1;
        const size_t eq = line.find('=');
        if (eq != std::string::npos) ck.config[line.substr(0, eq)] = line.substr(eq + 1);
    }
    const uint32_t count = detail::ck_read<uint32_t>(f, path);
    for (uint32_t i = 0; i < count; ++i) {
        const uint32_t name_len = detail::ck_read<uint32_t>(f, path);
        std::string name(name_len, '\0');
        f.read(name.data(), name_len);
        if (f.gcount() != static_cast<std::streamsize>(name_len))
            throw format_error("checkpoint " + path + ": truncated blob name");
        Blob b;
        b.dtype = detail::ck_read<uint16_t>(f, path);
        const uint32_t ndim = detail::ck_read<uint32_t>(f, path);
        int64_t n = 1;
        for (uint32_t d = 0; d < ndim; ++d) {
            b.dims.push_back(detail::ck_read<uint32_t>(f, path));
            n *= b.dims.back();
        }
        if (b.dtype == 1) {
            b.f32.resize(n);
            for (auto& x : b.f32) {
                const uint32_t bits = detail::ck_read<uint32_t>(f, path);
                std::memcpy(&x, &bits, 4);
            }
        } else if (b.dtype == 2) {
            b.i64.resize(n);
            for (auto& x : b.i64) x = static_cast<int64_t>(detail::ck_read<uint64_t>(f, path));
        } else {
            throw format_error("checkpoint " + path + ": unknown blob dtype");
        }
        ck.blobs.emplace_back(std::move(name), std::move(b));
    }
    return ck;
}

// ---------------------------------------------------------------------------
// model / optimizer round trips
// ---------------------------------------------------------------------------

inline std::map<std::string, std::string> model_config_echo(const ModelConfig& cfg) {
    return {
        {"model.in_channels", std::to_string(cfg.in_channels)},
        {"model.base_width", std::to_string(cfg.base_width)},
        {"model.depth", std::to_string(cfg.depth)},
        {"model.dropout", std::to_string(cfg.dropout_rate)},
        {"model.projection_dim", std::to_string(cfg.projection_dim)},
        {"grid.sub_volume", std::to_string(cfg.grid.sub_volume)},
        {"grid.patch", std::to_string(cfg.grid.patch)},
    };
}

template <typename S>
void save_model(Checkpoint& ck, const UNet3D<S>& model) {
    for (const auto& [k, v] : model_config_echo(model.config())) ck.config[k] = v;
    for (const auto& p : model.params()) {
        std::vector<float> data(p.tensor.values().begin(), p.tensor.values().end());
        ck.put_f32("model." + p.name, p.tensor.shape(), data);
    }
}

// Architecture compatibility is judged by parameter names and shapes; a
// mismatch lists every offending tensor.
template <typename S>
void load_model(const Checkpoint& ck, UNet3D<S>& model) {
    std::string mismatches;
    for (auto& p : model.params()) {
        const Blob* b = ck.find("model." + p.name);
        if (!b) {
            mismatches += "  missing " + p.name + "\n";
            continue;
        }
        Shape have;
        for (uint32_t d : b->dims) have.push_back(static_cast<int>(d));
        if (have != p.tensor.shape()) {
            mismatches += "  " + p.name + ": checkpoint " + shape_str(have) + " vs model " +
                          shape_str(p.tensor.shape()) + "\n";
            continue;
        }
        for (size_t i = 0; i < b->f32.size(); ++i) p.tensor.values()[i] = static_cast<S>(b->f32[i]);
    }
    if (!mismatches.empty())
        throw format_error("checkpoint incompatible with model:\n" + mismatches);
}

template <typename S>
void save_optimizer(Checkpoint& ck, AdamW<S>& opt, const std::vector<NamedParam<S>>& params) {
    ck.put_i64("optim.t", opt.steps_taken());
    auto& m = opt.moments1();
    auto& v = opt.moments2();
    for (size_t i = 0; i < m.size(); ++i) {
        ck.put_f32("optim.m." + params[i].name, params[i].tensor.shape(),
                   std::vector<float>(m[i].begin(), m[i].end()));
        ck.put_f32("optim.v." + params[i].name, params[i].tensor.shape(),
                   std::vector<float>(v[i].begin(), v[i].end()));
    }
}

template <typename S>
void load_optimizer(const Checkpoint& ck, AdamW<S>& opt, const std::vector<NamedParam<S>>& params) {
    const int64_t t = ck.get_i64("optim.t");
    std::vector<std::vector<S>> m(params.size()), v(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
        const Blob* bm = ck.find("optim.m." + params[i].name);
        const Blob* bv = ck.find("optim.v." + params[i].name);
        if (!bm || !bv) throw format_error("checkpoint: missing optimizer state for " + params[i].name);
        m[i].assign(bm->f32.begin(), bm->f32.end());
        v[i].assign(bv->f32.begin(), bv->f32.end());
        if (static_cast<int64_t>(m[i].size()) != params[i].tensor.size())
            throw format_error("checkpoint: optimizer state size mismatch for " + params[i].name);
    }
    opt.restore(t, std::move(m), std::move(v));
}

}  // namespace hmim
