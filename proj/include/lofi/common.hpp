#pragma once

#include <cstdint>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace lofi {

// Deterministic splitmix64-based PRNG. std:: distributions are
// implementation-defined, so all sampling goes through this.
struct Rng {
    uint64_t state;

    explicit Rng(uint64_t seed) : state(seed) {}

    uint64_t next() {
        uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // uniform in [0,1)
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // inclusive integer range
    int64_t uniform_int(int64_t lo, int64_t hi) {
        if (hi < lo) throw std::invalid_argument("uniform_int: empty range");
        uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        return lo + static_cast<int64_t>(next() % span);
    }

    double normal() {
        // Box-Muller, one value per call (spare discarded for simplicity)
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    // derive an independent stream for a sub-task
    Rng fork(uint64_t stream) const {
        uint64_t z = state ^ (0x9e3779b97f4a7c15ULL * (stream + 0x632be59bd9b4e019ULL));
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        return Rng(z ^ (z >> 27));
    }
};

// mix several integers into one seed
inline uint64_t mix_seed(uint64_t a, uint64_t b = 0, uint64_t c = 0) {
    Rng r(a ^ 0x1234567890abcdefULL);
    r.state ^= b * 0x9e3779b97f4a7c15ULL;
    r.next();
    r.state ^= c * 0xc2b2ae3d27d4eb4fULL;
    r.next();
    return r.next();
}

// FNV-1a over a byte buffer, used for checkpoint/manifest digests
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hex64(uint64_t v);

// Fixed-partition parallel loop. Work item i goes to thread i*T/n; results
// must be accumulated per index (or per thread and reduced in thread order)
// to stay deterministic.
void parallel_for(int64_t n, const std::function<void(int64_t)>& fn);

int num_threads();

}  // namespace lofi
