#include "anf/rng.hpp"

#include <cmath>
#include <istream>
#include <ostream>

namespace anf {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

}  // namespace

Rng::Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

double Rng::uniform() {
    // 53-bit mantissa draw in [0, 1)
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
}

std::uint64_t Rng::below(std::uint64_t n) {
    // modulo with rejection of the biased tail
    std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
        x = engine_();
    } while (x >= limit);
    return x % n;
}

Tensor Rng::normal_tensor(Shape shape) {
    std::size_t n = numel(shape);
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = normal();
    return Tensor::from(std::move(shape), std::move(v));
}

Rng Rng::substream(std::uint64_t tag) const {
    return Rng(splitmix64(seed_ ^ splitmix64(tag)));
}

void Rng::save_state(std::ostream& os) const {
    os << engine_ << ' ' << (has_spare_ ? 1 : 0) << ' ';
    os.precision(17);
    os << spare_;
}

void Rng::load_state(std::istream& is) {
    int spare_flag = 0;
    is >> engine_ >> spare_flag >> spare_;
    has_spare_ = spare_flag != 0;
}

}  // namespace anf
