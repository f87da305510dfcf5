#pragma once

#include <array>
#include <cmath>
#include <cstdint>

namespace cfdiff {

// Counter-based RNG (Philox4x32-10). Every draw is a pure function of
// (key, counter), so independent streams are carved out by assigning each
// consumer a disjoint (stream, counter) domain. This is what makes training,
// sampling and phantom generation reproducible and order-independent.
namespace rng {

// Stream ids. Keep values stable: they are part of the reproducibility
// contract (checkpoints and corpora regenerate bit-identically).
enum class Stream : uint32_t {
    SamplerInit = 1,
    SamplerKnown = 2,
    SamplerGuided = 3,
    TrainBatch = 4,
    TrainTimestep = 5,
    TrainEps = 6,
    TrainCondDrop = 7,
    ParamInit = 8,
    PhantomBrain = 9,
    PhantomTexture = 10,
    PhantomTumor = 11,
    PhantomLabel = 12,
    SiteMask = 13,
    Generic = 14,
};

struct Block {
    std::array<uint32_t, 4> x;
};

namespace detail {

inline void mulhilo(uint32_t a, uint32_t b, uint32_t& hi, uint32_t& lo) {
    uint64_t p = static_cast<uint64_t>(a) * b;
    hi = static_cast<uint32_t>(p >> 32);
    lo = static_cast<uint32_t>(p);
}

}  // namespace detail

// Philox4x32-10: counter (c0..c3), key (k0,k1), ten rounds.
inline Block philox(uint64_t key, uint64_t ctr_hi, uint64_t ctr_lo) {
    constexpr uint32_t M0 = 0xD2511F53u, M1 = 0xCD9E8D57u;
    constexpr uint32_t W0 = 0x9E3779B9u, W1 = 0xBB67AE85u;
    uint32_t c0 = static_cast<uint32_t>(ctr_lo);
    uint32_t c1 = static_cast<uint32_t>(ctr_lo >> 32);
    uint32_t c2 = static_cast<uint32_t>(ctr_hi);
    uint32_t c3 = static_cast<uint32_t>(ctr_hi >> 32);
    uint32_t k0 = static_cast<uint32_t>(key);
    uint32_t k1 = static_cast<uint32_t>(key >> 32);
    for (int round = 0; round < 10; ++round) {
        uint32_t hi0, lo0, hi1, lo1;
        detail::mulhilo(M0, c0, hi0, lo0);
        detail::mulhilo(M1, c2, hi1, lo1);
        uint32_t n0 = hi1 ^ c1 ^ k0;
        uint32_t n1 = lo1;
        uint32_t n2 = hi0 ^ c3 ^ k1;
        uint32_t n3 = lo0;
        c0 = n0;
        c1 = n1;
        c2 = n2;
        c3 = n3;
        k0 += W0;
        k1 += W1;
    }
    return Block{{c0, c1, c2, c3}};
}

inline uint64_t make_ctr_hi(Stream s, uint64_t tag) {
    return (static_cast<uint64_t>(s) << 48) ^ (tag & 0xFFFFFFFFFFFFull);
}

// Uniform in (0,1): (x + 0.5) / 2^32 never hits the endpoints.
inline double u01(uint32_t x) {
    return (static_cast<double>(x) + 0.5) * (1.0 / 4294967296.0);
}

// One standard Gaussian per counter via Box-Muller (lanes 0 and 1).
inline double gaussian(uint64_t key, Stream s, uint64_t tag, uint64_t index) {
    Block b = philox(key, make_ctr_hi(s, tag), index);
    double u1 = u01(b.x[0]);
    double u2 = u01(b.x[1]);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

inline double uniform(uint64_t key, Stream s, uint64_t tag, uint64_t index) {
    Block b = philox(key, make_ctr_hi(s, tag), index);
    return u01(b.x[0]);
}

// Uniform integer in [0, n).
inline uint64_t uniform_index(uint64_t key, Stream s, uint64_t tag, uint64_t index, uint64_t n) {
    Block b = philox(key, make_ctr_hi(s, tag), index);
    uint64_t x = (static_cast<uint64_t>(b.x[0]) << 32) | b.x[1];
    return x % n;
}

// Derives a sub-seed for a nested stage (e.g. the two passes of tumor
// transfer) so stages never share counter domains.
inline uint64_t derive_seed(uint64_t seed, uint64_t stage) {
    Block b = philox(seed, 0x5EEDDE21Cull, stage);
    return (static_cast<uint64_t>(b.x[0]) << 32) | b.x[1];
}

}  // namespace rng
}  // namespace cfdiff
