#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>
#include <utility>

namespace ctok {

/// Mixes a base seed with a named stream and up to two indices into an independent seed.
/// Every random consumer in the library draws from its own derived stream so that
/// changing one (e.g. the Gumbel stream) never perturbs another (e.g. the shuffle stream).
std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream, std::uint64_t a = 0,
                          std::uint64_t b = 0);

/// Portable random source. The engine is the standardized mt19937_64; all transforms
/// (uniform, normal, Gumbel, shuffling) are implemented here so results are identical
/// across standard libraries.
class Rng {
 public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform on [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    /// Uniform on the open interval (0, 1).
    double uniform_open() {
        return (static_cast<double>(engine_() >> 11) + 0.5) * 0x1.0p-53;
    }

    double normal();

    /// Standard Gumbel(0, 1) sample.
    double gumbel();

    /// Uniform integer in [0, n). n must be positive.
    std::size_t index(std::size_t n);

    template <typename T>
    void shuffle(std::span<T> values) {
        for (std::size_t i = values.size(); i > 1; --i) {
            std::swap(values[i - 1], values[index(i)]);
        }
    }

 private:
    std::mt19937_64 engine_;
    double spare_normal_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace ctok
