#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string_view>

namespace memaudit {

// xoshiro256** seeded through SplitMix64. Self-contained so that every draw
// is reproducible across platforms and standard libraries; std::
// distributions are implementation-defined and would break manifest
// determinism.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) {
        std::uint64_t x = seed;
        for (auto& word : state_) {
            word = splitmix64(x);
        }
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Uniform in [0, 1) with 53 bits of precision.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). Rejection sampling keeps the draw unbiased
    // and the stream consumption deterministic for a fixed n sequence.
    std::uint64_t uniform_int(std::uint64_t n) {
        if (n == 0) {
            return 0;
        }
        const std::uint64_t threshold = (0 - n) % n;
        for (;;) {
            const std::uint64_t r = next_u64();
            if (r >= threshold) {
                return r % n;
            }
        }
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Box-Muller; one fresh pair per two calls.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) {
            u1 = uniform();
        }
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    static std::uint64_t splitmix64(std::uint64_t& x) {
        x += 0x9e3779b97f4a7c15ULL;
        std::uint64_t z = x;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

  private:
    static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    std::array<std::uint64_t, 4> state_{};
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// Named sub-seed derivation. A run holds one root seed; every consumer of
// randomness (init, shuffle, dropout, augment, patches, ...) draws from its
// own named stream so adding a consumer never perturbs the others.
class SeedTree {
  public:
    explicit SeedTree(std::uint64_t root) : root_(root) {}

    std::uint64_t seed(std::string_view name) const {
        std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a over the name
        for (const char c : name) {
            h ^= static_cast<std::uint8_t>(c);
            h *= 0x100000001b3ULL;
        }
        std::uint64_t x = root_ ^ h;
        return Rng::splitmix64(x);
    }

    std::uint64_t seed(std::string_view name, std::uint64_t index) const {
        std::uint64_t x = seed(name) ^ (0x9e3779b97f4a7c15ULL * (index + 1));
        return Rng::splitmix64(x);
    }

    Rng stream(std::string_view name) const { return Rng(seed(name)); }
    Rng stream(std::string_view name, std::uint64_t index) const { return Rng(seed(name, index)); }

    std::uint64_t root() const { return root_; }

  private:
    std::uint64_t root_;
};

}  // namespace memaudit
