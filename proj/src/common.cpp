#include "proper/common.hpp"

#include <cmath>
#include <cstring>

namespace proper {

double Rng::normal() {
    // Draw until u1 is nonzero so log() is finite.
    double u1 = 0.0;
    do {
        u1 = uniform();
    } while (u1 <= 0.0);
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

std::uint64_t Rng::next_below(std::uint64_t n) {
    if (n == 0)
        throw contract_error("Rng::next_below: n must be positive");
    // modulo bias is negligible for the small n used here
    return next_u64() % n;
}

std::uint64_t mix_seed(std::uint64_t seed, const std::string& tag) {
    std::uint64_t h = fnv1a(tag.data(), tag.size());
    return mix_seed(seed, h);
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
    Rng r(seed ^ (salt * 0x9e3779b97f4a7c15ULL));
    return r.next_u64();
}

std::uint64_t fnv1a(const void* data, std::size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::uint64_t checksum(const std::vector<double>& v) {
    return fnv1a(v.data(), v.size() * sizeof(double));
}

std::string checksum_hex(const std::vector<double>& v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(checksum(v)));
    return std::string(buf);
}

} // namespace proper
