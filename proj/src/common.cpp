#include "s3seg/common.hpp"

#include <algorithm>
#include <cstdio>

namespace s3seg {

std::int64_t LabelMap::unique_count() const {
    std::vector<std::int32_t> seen(ids);
    std::sort(seen.begin(), seen.end());
    seen.erase(std::unique(seen.begin(), seen.end()), seen.end());
    return static_cast<std::int64_t>(seen.size());
}

std::int64_t Mask::count() const {
    std::int64_t n = 0;
    for (std::uint8_t v : on) {
        n += (v != 0);
    }
    return n;
}

std::string fmt4(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.4g", v);
    return std::string(buf);
}

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace s3seg
