#pragma once

#include <cstdint>
#include <iosfwd>
#include <random>

#include "anf/tensor.hpp"

namespace anf {

/// Seeded random stream. Normal draws use Box-Muller on top of mt19937_64,
/// so the value sequence is reproducible across standard libraries (the
/// distribution adapters in <random> are not portable).
class Rng {
public:
    explicit Rng(std::uint64_t seed);

    std::uint64_t seed() const { return seed_; }

    /// Uniform in [0, 1).
    double uniform();
    /// Standard normal draw.
    double normal();
    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n);

    Tensor normal_tensor(Shape shape);

    /// Independent stream derived from (seed, tag); deterministic.
    Rng substream(std::uint64_t tag) const;

    /// Full state round-trip (engine + cached spare), textual.
    void save_state(std::ostream& os) const;
    void load_state(std::istream& is);

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace anf
