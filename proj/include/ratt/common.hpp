#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace ratt {

// Error taxonomy mirrored by the CLI exit codes: usage -> 1, data -> 2,
// numeric -> 3.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Deterministic RNG. All randomness of a command flows from one seeded
// generator; helpers below avoid std::*_distribution so sequences are
// reproducible bit-for-bit.
// ---------------------------------------------------------------------------
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ull) {}

    std::uint64_t next_u64() {
        // xorshift* variant: small, fast, well distributed.
        std::uint64_t x = state_;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        state_ = x;
        return x * 0x2545f4914f6cdd1dull;
    }

    // Uniform in [0, n). n must be > 0.
    std::size_t next_index(std::size_t n) {
        return static_cast<std::size_t>(next_u64() % n);
    }

    // Uniform in [0, 1).
    double next_double() {
        return static_cast<double>(next_u64() >> 11) * (1.0 / 9007199254740992.0);
    }

    // Standard normal via Box-Muller (no cached spare, keeps state minimal).
    double next_gauss() {
        double u1 = next_double();
        double u2 = next_double();
        while (u1 <= 1e-300) u1 = next_double();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = next_index(i);
            std::swap(v[i - 1], v[j]);
        }
    }

  private:
    std::uint64_t state_;
};

// ---------------------------------------------------------------------------
// Little-endian binary IO for the on-disk formats (RATTBM25 / RATTCKPT /
// RATTIDX1). Host is assumed little-endian; the writers serialize through
// fixed-width types so the layout is explicit.
// ---------------------------------------------------------------------------
namespace io {

inline void write_bytes(std::ostream& os, const void* p, std::size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

inline void read_bytes(std::istream& is, void* p, std::size_t n) {
    is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (!is) throw DataError("unexpected end of file");
}

inline void write_u32(std::ostream& os, std::uint32_t v) { write_bytes(os, &v, 4); }
inline void write_u64(std::ostream& os, std::uint64_t v) { write_bytes(os, &v, 8); }
inline void write_f32(std::ostream& os, float v) { write_bytes(os, &v, 4); }
inline void write_f64(std::ostream& os, double v) { write_bytes(os, &v, 8); }

inline std::uint32_t read_u32(std::istream& is) {
    std::uint32_t v;
    read_bytes(is, &v, 4);
    return v;
}
inline std::uint64_t read_u64(std::istream& is) {
    std::uint64_t v;
    read_bytes(is, &v, 8);
    return v;
}
inline float read_f32(std::istream& is) {
    float v;
    read_bytes(is, &v, 4);
    return v;
}
inline double read_f64(std::istream& is) {
    double v;
    read_bytes(is, &v, 8);
    return v;
}

inline void write_string(std::ostream& os, std::string_view s) {
    write_u32(os, static_cast<std::uint32_t>(s.size()));
    write_bytes(os, s.data(), s.size());
}

inline std::string read_string(std::istream& is) {
    std::uint32_t n = read_u32(is);
    std::string s(n, '\0');
    if (n) read_bytes(is, s.data(), n);
    return s;
}

inline void expect_magic(std::istream& is, std::string_view magic, std::string_view path = "") {
    std::string got(magic.size(), '\0');
    read_bytes(is, got.data(), got.size());
    if (got != magic) {
        std::string where = path.empty() ? "" : std::string(path) + ": ";
        throw DataError(where + "bad file magic: expected " + std::string(magic));
    }
}

} // namespace io

// FNV-1a over a byte span; used for input/checkpoint fingerprints.
inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t fingerprint_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open file: " + path);
    std::uint64_t h = 0xcbf29ce484222325ull;
    char buf[1 << 16];
    while (in) {
        in.read(buf, sizeof(buf));
        h = fnv1a(buf, static_cast<std::size_t>(in.gcount()), h);
    }
    return h;
}

// ---------------------------------------------------------------------------
// Logging: RATT_LOG=debug|info controls verbosity (default: warnings only).
// ---------------------------------------------------------------------------
enum class LogLevel { debug = 0, info = 1, warn = 2 };

inline LogLevel log_level() {
    static LogLevel lvl = [] {
        const char* v = std::getenv("RATT_LOG");
        if (!v) return LogLevel::warn;
        std::string_view s(v);
        if (s == "debug") return LogLevel::debug;
        if (s == "info") return LogLevel::info;
        return LogLevel::warn;
    }();
    return lvl;
}

inline void log(LogLevel lvl, const std::string& msg) {
    if (static_cast<int>(lvl) < static_cast<int>(log_level())) return;
    const char* tag = lvl == LogLevel::debug ? "debug" : lvl == LogLevel::info ? "info" : "warn";
    std::fprintf(stderr, "[ratt:%s] %s\n", tag, msg.c_str());
}

inline void log_debug(const std::string& msg) { log(LogLevel::debug, msg); }
inline void log_info(const std::string& msg) { log(LogLevel::info, msg); }
inline void log_warn(const std::string& msg) { log(LogLevel::warn, msg); }

} // namespace ratt
