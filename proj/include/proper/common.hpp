#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace proper {

// Error taxonomy shared by every module. The CLI maps these onto exit codes.
struct shape_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct contract_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct index_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct numeric_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct format_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct config_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct data_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct prereq_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Deterministic, platform-independent RNG. std:: distributions are
// implementation-defined, so sampling is hand-rolled on top of splitmix64.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller without caching the spare, so the stream is stateless per call pair.
    double normal();

    std::uint64_t next_below(std::uint64_t n);

  private:
    std::uint64_t state_;
};

// Stable seed derivation for independent substreams.
std::uint64_t mix_seed(std::uint64_t seed, const std::string& tag);
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt);

// FNV-1a over raw bytes; used for freeze-integrity checksums and merge receipts.
std::uint64_t fnv1a(const void* data, std::size_t len);
std::uint64_t checksum(const std::vector<double>& v);
std::string checksum_hex(const std::vector<double>& v);

} // namespace proper
