#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace fedtok {

// Seed mixing for deriving independent child streams from a master seed.
uint64_t splitmix64(uint64_t x);

// Stable 64-bit FNV-1a. Used wherever a hash must not vary across
// platforms or runs (user ids, artifact fingerprints).
uint64_t fnv1a64(std::string_view bytes);

inline uint64_t derive_seed(uint64_t base, uint64_t stream) {
    return splitmix64(base ^ splitmix64(stream + 0x9e3779b97f4a7c15ULL));
}

// Deterministic RNG: mt19937_64 engine with hand-rolled distributions.
// std::uniform_*_distribution sequences are implementation-defined, so all
// draws go through the explicit methods below to keep runs reproducible
// across standard libraries.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform01() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    // Uniform integer in [0, n), rejection sampling, n > 0.
    uint64_t uniform_below(uint64_t n);

    // Gaussian via Box-Muller, one spare cached.
    double normal(double mean, double stddev);

    // Index i with probability weights[i] / sum(weights). Weights must be
    // nonnegative with a positive sum.
    size_t pick_weighted(const std::vector<double>& weights);

    // Fisher-Yates using this engine.
    template <typename T>
    void shuffle(std::vector<T>& items) {
        for (size_t i = items.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(uniform_below(i));
            std::swap(items[i - 1], items[j]);
        }
    }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace fedtok
