#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <sstream>
#include <string>

namespace vlm3d {

// All randomness in the project flows through seeded mt19937_64 instances so
// that every run is reproducible and RNG state can be checkpointed as text.
using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t seed) { return Rng(seed); }

// Stable per-item derivation: mixes a stream tag into the base seed so that
// sample i's randomness does not depend on how many samples precede it.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
    std::uint64_t x = base + 0x9e3779b97f4a7c15ULL * (stream + 1);
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ULL;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebULL;
    x ^= x >> 31;
    return x;
}

inline std::string rng_state_to_string(const Rng& rng) {
    std::ostringstream os;
    os << rng;
    return os.str();
}

inline Rng rng_state_from_string(const std::string& s) {
    Rng rng;
    std::istringstream is(s);
    is >> rng;
    return rng;
}

template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>
normal_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> m(rows, cols);
    // Row-major fill so the layout of the draw stream matches serialization order.
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c)
            m(r, c) = static_cast<Scalar>(dist(rng));
    return m;
}

template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>
uniform_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double lo, double hi) {
    std::uniform_real_distribution<double> dist(lo, hi);
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c)
            m(r, c) = static_cast<Scalar>(dist(rng));
    return m;
}

} // namespace vlm3d
