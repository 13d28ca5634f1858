#ifndef ASDM_TENSOR_HPP
#define ASDM_TENSOR_HPP

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace asdm {

// Dense row-major float32 tensor, rank 1..4. Feature maps use N,C,H,W.
struct Tensor {
    std::vector<int> shape;
    std::vector<float> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> shp, float fill = 0.0f);

    static Tensor zeros(std::vector<int> shp) { return Tensor(std::move(shp)); }
    static Tensor full(std::vector<int> shp, float v) { return Tensor(std::move(shp), v); }
    static Tensor scalar(float v) { return Tensor({1}, v); }

    int rank() const { return (int)shape.size(); }
    long long numel() const;
    bool same_shape(const Tensor& o) const { return shape == o.shape; }
    bool empty() const { return data.empty(); }

    int dim(int i) const { return shape[(size_t)i]; }

    float& at2(int r, int c) { return data[(size_t)r * shape[1] + c]; }
    float at2(int r, int c) const { return data[(size_t)r * shape[1] + c]; }
    float& at4(int n, int c, int y, int x) {
        return data[(((size_t)n * shape[1] + c) * shape[2] + y) * shape[3] + x];
    }
    float at4(int n, int c, int y, int x) const {
        return data[(((size_t)n * shape[1] + c) * shape[2] + y) * shape[3] + x];
    }

    std::string shape_str() const;
    bool all_finite() const;
    bool bit_equal(const Tensor& o) const;
};

long long shape_numel(const std::vector<int>& shape);

// Deterministic RNG. mt19937_64 plus an explicit Box-Muller keeps the byte
// stream independent of the standard library's distribution implementations.
struct Rng {
    std::mt19937_64 gen;
    bool have_spare = false;
    double spare = 0.0;

    explicit Rng(uint64_t seed) : gen(seed) {}

    double uniform();                 // [0, 1)
    float gaussian();                 // N(0, 1)
    int uniform_int(int lo, int hi);  // [lo, hi] inclusive

    Tensor gaussian_tensor(std::vector<int> shape, float scale = 1.0f);
};

uint64_t fnv1a64(const void* bytes, size_t n);
uint64_t tensor_digest(const Tensor& t);

float max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace asdm

#endif
