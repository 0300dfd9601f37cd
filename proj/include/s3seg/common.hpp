#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace s3seg {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
    using Error::Error;
};
struct DomainError : Error {
    using Error::Error;
};
struct ContractError : Error {
    using Error::Error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct EvalError : Error {
    using Error::Error;
};
struct DegenerateTransformError : Error {
    using Error::Error;
};
struct NonFiniteError : Error {
    using Error::Error;
};
struct IoError : Error {
    using Error::Error;
};

/// Deterministic RNG. The uniform mapping is fixed here (not delegated to
/// std::uniform_real_distribution) so streams are reproducible independent of
/// the standard library build.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t next_u64() { return eng_(); }

    double uniform01() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double a, double b) { return a + (b - a) * uniform01(); }

private:
    std::mt19937_64 eng_;
};

/// H x W integer cluster assignment. Negative ids are sentinels for pixels
/// excluded from a loss (e.g. warped from outside the image).
struct LabelMap {
    std::int64_t h = 0;
    std::int64_t w = 0;
    std::vector<std::int32_t> ids;

    LabelMap() = default;
    LabelMap(std::int64_t height, std::int64_t width, std::int32_t fill = 0)
        : h(height), w(width), ids(static_cast<std::size_t>(height * width), fill) {}

    std::int64_t size() const { return h * w; }

    std::int32_t at(std::int64_t r, std::int64_t c) const {
        return ids[static_cast<std::size_t>(r * w + c)];
    }
    std::int32_t& at(std::int64_t r, std::int64_t c) {
        return ids[static_cast<std::size_t>(r * w + c)];
    }

    std::int64_t unique_count() const;

    bool operator==(const LabelMap& o) const = default;
};

/// H x W boolean mask.
struct Mask {
    std::int64_t h = 0;
    std::int64_t w = 0;
    std::vector<std::uint8_t> on;

    Mask() = default;
    Mask(std::int64_t height, std::int64_t width, bool fill = false)
        : h(height), w(width), on(static_cast<std::size_t>(height * width), fill ? 1 : 0) {}

    std::int64_t size() const { return h * w; }

    bool at(std::int64_t r, std::int64_t c) const {
        return on[static_cast<std::size_t>(r * w + c)] != 0;
    }
    void set(std::int64_t r, std::int64_t c, bool v = true) {
        on[static_cast<std::size_t>(r * w + c)] = v ? 1 : 0;
    }

    std::int64_t count() const;

    bool operator==(const Mask& o) const = default;
};

inline bool all_finite(const std::vector<double>& v) {
    for (double x : v) {
        if (!std::isfinite(x)) {
            return false;
        }
    }
    return true;
}

/// Formats a value with 4 significant digits for human-readable output.
std::string fmt4(double v);

/// FNV-1a, used to stamp reports with a config fingerprint.
std::uint64_t fnv1a(const std::string& s);

}  // namespace s3seg
