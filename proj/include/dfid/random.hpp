#pragma once
// Seeded randomness. Every stochastic component takes an explicit seed; child
// seeds are derived by hashing (parent, tag, index) so that work split across
// threads or reordered still sees identical streams.

#include <cstdint>
#include <initializer_list>
#include <random>

#include <Eigen/Dense>

namespace dfid {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t parent, std::initializer_list<std::uint64_t> path) {
    std::uint64_t s = splitmix64(parent);
    for (std::uint64_t p : path) s = splitmix64(s ^ splitmix64(p + 0x632BE59BD9B4E019ULL));
    return s;
}

// Stable small integer tags for derive_seed paths.
enum class SeedTag : std::uint64_t {
    population = 1,
    authentic,
    deepfake,
    split,
    recon,
    teacher,
    student,
    detector,
    fold,
    theory,
    monte_carlo,
    ablation,
    pool,
    test,
    probe,
};

inline std::uint64_t derive_seed(std::uint64_t parent, SeedTag tag, std::uint64_t index = 0) {
    return derive_seed(parent, {static_cast<std::uint64_t>(tag), index});
}

inline Eigen::VectorXd standard_normal_vector(Eigen::Index n, Rng& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    Eigen::VectorXd v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = normal(rng);
    return v;
}

inline Eigen::MatrixXd standard_normal_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index c = 0; c < cols; ++c)
        for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = normal(rng);
    return m;
}

}  // namespace dfid
