#include "dcac/tensor.hpp"

#include <cmath>
#include <sstream>

namespace dcac {

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
}

bool Tensor::all_finite() const {
    for (float v : data)
        if (!std::isfinite(v)) return false;
    return true;
}

// splitmix64 step; full-period, passes BigCrush as a mixer.
std::uint64_t Rng::next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

double Rng::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

int Rng::uniform_int(int lo, int hi) {
    if (hi < lo) throw ConfigError("uniform_int: empty range");
    std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(next_u64() % span);
}

double Rng::normal() {
    // Box-Muller; discard the second deviate to keep the stream position simple.
    double u1 = uniform(), u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

std::uint64_t Rng::mix(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

std::string Rng::state_str() const { return std::to_string(state_); }

void Rng::restore_state(const std::string& s) { state_ = std::stoull(s); }

Tensor randn(std::vector<int> shape, Rng& rng, float sigma) {
    Tensor t(std::move(shape));
    for (auto& v : t.data) v = static_cast<float>(rng.normal()) * sigma;
    return t;
}

Tensor rand_uniform(std::vector<int> shape, Rng& rng, float lo, float hi) {
    Tensor t(std::move(shape));
    for (auto& v : t.data) v = static_cast<float>(rng.uniform(lo, hi));
    return t;
}

}  // namespace dcac
