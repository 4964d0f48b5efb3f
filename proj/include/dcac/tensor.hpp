#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dcac/error.hpp"

namespace dcac {

// Dense row-major float32 tensor. Layout convention for feature maps is
// [batch, channels, (depth,) height, width]; vectors are [batch, features].
struct Tensor {
    std::vector<int> shape;
    std::vector<float> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(numel_of(shape), 0.f) {}
    Tensor(std::vector<int> s, float fill) : shape(std::move(s)), data(numel_of(shape), fill) {}
    Tensor(std::vector<int> s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<std::int64_t>(data.size()) != numel_of(shape))
            throw ShapeError("tensor data size does not match shape");
    }

    static std::int64_t numel_of(const std::vector<int>& s) {
        std::int64_t n = 1;
        for (int d : s) {
            if (d < 0) throw ShapeError("negative dimension");
            n *= d;
        }
        return n;
    }

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    int dim(int i) const { return shape.at(static_cast<size_t>(i)); }
    int rank() const { return static_cast<int>(shape.size()); }

    float* ptr() { return data.data(); }
    const float* ptr() const { return data.data(); }

    // Spatial helpers for [B, C, spatial...] tensors.
    int batch() const { return dim(0); }
    int channels() const { return dim(1); }
    int spatial_rank() const { return rank() - 2; }
    std::int64_t spatial_numel() const {
        std::int64_t n = 1;
        for (int i = 2; i < rank(); ++i) n *= dim(i);
        return n;
    }
    std::vector<int> spatial_dims() const { return {shape.begin() + 2, shape.end()}; }

    Tensor reshaped(std::vector<int> s) const {
        if (numel_of(s) != numel()) throw ShapeError("reshape changes element count");
        Tensor t;
        t.shape = std::move(s);
        t.data = data;
        return t;
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
    std::string shape_str() const;

    void fill(float v) { std::fill(data.begin(), data.end(), v); }
    bool all_finite() const;
};

// Deterministic RNG. Distribution mapping is hand-rolled (53-bit uniforms,
// Box-Muller normals) so byte-identical streams do not depend on the
// standard library implementation.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ull) {}

    std::uint64_t next_u64();
    double uniform();                       // [0, 1)
    double uniform(double lo, double hi);   // [lo, hi)
    int uniform_int(int lo, int hi);        // inclusive bounds
    double normal();                        // standard normal
    double normal(double mean, double sigma) { return mean + sigma * normal(); }

    // Derive an independent stream, e.g. per (domain, case).
    static std::uint64_t mix(std::uint64_t a, std::uint64_t b);

    std::string state_str() const;
    void restore_state(const std::string& s);

private:
    std::uint64_t state_;
};

Tensor randn(std::vector<int> shape, Rng& rng, float sigma = 1.f);
Tensor rand_uniform(std::vector<int> shape, Rng& rng, float lo, float hi);

}  // namespace dcac
