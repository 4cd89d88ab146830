#pragma once

// Shared plumbing: error types, deterministic RNG, numeric-check switch.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace hmim {

struct error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct dimension_error : error { using error::error; };
struct config_error : error { using error::error; };
struct contract_error : error { using error::error; };
struct numeric_error : error { using error::error; };
struct format_error : error { using error::error; };
struct state_error : error { using error::error; };
struct io_error : error { using error::error; };

using Shape = std::vector<int>;

inline int64_t numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

// When enabled, every forward op scans its output for NaN/Inf and throws.
inline std::atomic<bool>& checked_mode_flag() {
    static std::atomic<bool> f{false};
    return f;
}
inline void set_checked_mode(bool on) { checked_mode_flag().store(on); }
inline bool checked_mode() { return checked_mode_flag().load(std::memory_order_relaxed); }

inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Mix a base seed with stream ids so sub-streams are independent and the
// whole run is a pure function of the top-level seed.
inline uint64_t derive_seed(uint64_t base, uint64_t a = 0, uint64_t b = 0, uint64_t c = 0) {
    uint64_t s = base;
    splitmix64(s);
    s ^= 0x6a09e667f3bcc909ULL + a;
    splitmix64(s);
    s ^= 0xbb67ae8584caa73bULL + b;
    splitmix64(s);
    s ^= 0x3c6ef372fe94f82bULL + c;
    return splitmix64(s);
}

// Self-contained generator: identical sequences on every platform.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {
        // burn a few draws so nearby seeds decorrelate
        splitmix64(state_);
        splitmix64(state_);
    }

    uint64_t next() { return splitmix64(state_); }

    double u01() {  // uniform in [0,1)
        return static_cast<double>(next() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * u01(); }

    // inclusive bounds
    int64_t uniform_int(int64_t lo, int64_t hi) {
        uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        return lo + static_cast<int64_t>(next() % span);
    }

    double normal() {
        double u1 = u01(), u2 = u01();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

private:
    uint64_t state_;
};

// round-half-away-from-zero, used for the masked-patch count
inline int64_t round_half_away(double x) { return std::llround(x); }

}  // namespace hmim
