#pragma once

#include "conjlab/types.hpp"

#include <cmath>
#include <random>

namespace conjlab {

/// Where and how densely a check samples the state space.
struct SamplingSpec {
    std::uint64_t seed = 7;
    std::size_t points = 1000;
    std::size_t pairs = 10000;
    double radius = 10.0;
};

/// Seeded source of sample points. Every check owns its own Sampler, so
/// results depend only on the seed.
class Sampler {
public:
    explicit Sampler(std::uint64_t seed) : rng_(seed) {}

    double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }
    double normal() { return normal_(rng_); }
    Time time(Time lo, Time hi) { return std::uniform_int_distribution<Time>(lo, hi)(rng_); }
    std::size_t index(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng_); }

    /// Uniform direction on the Euclidean unit sphere.
    Vec unit(int dim)
    {
        Vec v(dim);
        do {
            for (int i = 0; i < dim; ++i) v(i) = normal();
        } while (v.norm() == 0.0);
        return v / v.norm();
    }

    /// Uniform point in the closed Euclidean ball of the given radius.
    Vec in_ball(int dim, double radius)
    {
        const double r = radius * std::pow(uniform(0.0, 1.0), 1.0 / dim);
        return r * unit(dim);
    }

    std::mt19937_64& engine() { return rng_; }

private:
    std::mt19937_64 rng_;
    std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace conjlab
