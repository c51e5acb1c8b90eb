#pragma once

// Shared scalar types, error base, deterministic RNG, config store, and
// small utilities used across the library.

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cctype>
#include <cstdint>
#include <cstdlib>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace fieldchain {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat3 = Eigen::Matrix3d;
using Mat6 = Eigen::Matrix<double, 6, 6>;

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

inline double softplus(double x) {
    // log(1+exp(x)) without overflow for large |x|
    if (x > 30.0) return x;
    if (x < -30.0) return std::exp(x);
    return std::log1p(std::exp(x));
}

inline double logistic(double x) {
    if (x >= 0.0) {
        const double e = std::exp(-x);
        return 1.0 / (1.0 + e);
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

// Deterministic counter-free RNG (splitmix64 core). Uniform/normal draws are
// hand-rolled so streams do not depend on the standard library's
// distribution implementations.
struct Rng {
    uint64_t state = 0x9e3779b97f4a7c15ull;

    explicit Rng(uint64_t seed = 1) { reseed(seed); }

    void reseed(uint64_t seed) {
        state = seed + 0x9e3779b97f4a7c15ull;
        next();  // decorrelate adjacent seeds
    }

    uint64_t next() {
        uint64_t z = (state += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1)
    double uniform() { return double(next() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller; one value per call, no cached spare (keeps streams simple)
    double normal() {
        double u1 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    Vec3 unit_vector() {
        // rejection-free: normal components normalized
        Vec3 v(normal(), normal(), normal());
        double n = v.norm();
        while (n < 1e-12) {
            v = Vec3(normal(), normal(), normal());
            n = v.norm();
        }
        return v / n;
    }
};

// Stable stream seed from structured coordinates (frame, pixel, iteration).
inline uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c = 0, uint64_t d = 0) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (uint64_t x : {a, b, c, d}) {
        h ^= x;
        h *= 0x100000001b3ull;
        h ^= h >> 29;
    }
    return h;
}

// FNV-1a over raw bytes; used for field freeze checksums.
inline uint64_t fnv1a(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

// Runs fn(chunk, begin, end) over [0, n) split into n_chunks contiguous
// chunks. The chunk decomposition is fixed by n_chunks alone, so per-chunk
// accumulation followed by an in-order reduce is bit-reproducible regardless
// of the number of hardware threads.
template <class F>
void parallel_chunks(int n, int n_chunks, F&& fn) {
    if (n <= 0) return;
    n_chunks = std::max(1, std::min(n_chunks, n));
    if (n_chunks == 1) {
        fn(0, 0, n);
        return;
    }
    std::vector<std::thread> workers;
    std::vector<std::exception_ptr> errors(static_cast<size_t>(n_chunks));
    workers.reserve(n_chunks);
    const int base = n / n_chunks, rem = n % n_chunks;
    int begin = 0;
    for (int c = 0; c < n_chunks; ++c) {
        const int len = base + (c < rem ? 1 : 0);
        const int end = begin + len;
        workers.emplace_back([&fn, &errors, c, begin, end] {
            try {
                fn(c, begin, end);
            } catch (...) {
                errors[size_t(c)] = std::current_exception();
            }
        });
        begin = end;
    }
    for (auto& w : workers) w.join();
    for (const auto& e : errors)
        if (e) std::rethrow_exception(e);
}

// Flat key-value configuration: file format is `key = value` lines with `#`
// comments. Every key can be overridden by an environment variable
// FIELDCHAIN_<KEY-upper-cased> and then by explicit set() calls (CLI flags).
class Config {
  public:
    void set(const std::string& key, const std::string& value) { values_[key] = value; }

    bool has(const std::string& key) const { return values_.count(key) > 0; }

    std::string get_str(const std::string& key, const std::string& fallback) const {
        auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }

    double get_double(const std::string& key, double fallback) const {
        auto it = values_.find(key);
        return it == values_.end() ? fallback : std::stod(it->second);
    }

    int get_int(const std::string& key, int fallback) const {
        auto it = values_.find(key);
        return it == values_.end() ? fallback : std::stoi(it->second);
    }

    uint64_t get_u64(const std::string& key, uint64_t fallback) const {
        auto it = values_.find(key);
        return it == values_.end() ? fallback : std::stoull(it->second);
    }

    bool get_bool(const std::string& key, bool fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        return it->second == "1" || it->second == "true" || it->second == "yes" || it->second == "on";
    }

    const std::map<std::string, std::string>& entries() const { return values_; }

    void apply_env_overrides(const char* prefix = "FIELDCHAIN_");

    static Config from_file(const std::string& path);
    static Config from_text(const std::string& text);

    std::string to_text() const {
        std::string out;
        for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
        return out;
    }

  private:
    std::map<std::string, std::string> values_;
};

namespace detail {
inline std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}
}  // namespace detail

inline Config Config::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("config file not readable: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return from_text(ss.str());
}

inline void Config::apply_env_overrides(const char* prefix) {
    // Every known key may be overridden via FIELDCHAIN_<KEY> (upper-cased).
    for (auto& [key, value] : values_) {
        std::string env_name = prefix;
        for (char c : key) env_name += char(std::toupper(static_cast<unsigned char>(c)));
        if (const char* env = std::getenv(env_name.c_str())) value = env;
    }
}

inline Config Config::from_text(const std::string& text) {
    Config cfg;
    size_t pos = 0;
    while (pos <= text.size()) {
        size_t nl = text.find('\n', pos);
        std::string line = text.substr(pos, nl == std::string::npos ? std::string::npos : nl - pos);
        pos = nl == std::string::npos ? text.size() + 1 : nl + 1;
        size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        size_t eq = line.find('=');
        if (eq == std::string::npos) continue;
        std::string key = detail::trim(line.substr(0, eq));
        std::string val = detail::trim(line.substr(eq + 1));
        if (!key.empty()) cfg.set(key, val);
    }
    return cfg;
}

}  // namespace fieldchain
