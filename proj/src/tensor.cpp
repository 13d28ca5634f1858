#include "asdm/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

namespace asdm {

long long shape_numel(const std::vector<int>& shape) {
    long long n = 1;
    for (int d : shape) n *= d;
    return n;
}

Tensor::Tensor(std::vector<int> shp, float fill) : shape(std::move(shp)) {
    if (shape.empty() || shape.size() > 4) {
        throw std::invalid_argument("tensor rank must be 1..4");
    }
    for (int d : shape) {
        if (d <= 0) throw std::invalid_argument("tensor extents must be positive");
    }
    data.assign((size_t)shape_numel(shape), fill);
}

long long Tensor::numel() const {
    return (long long)data.size();
}

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); i++) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

bool Tensor::all_finite() const {
    for (float v : data) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

bool Tensor::bit_equal(const Tensor& o) const {
    if (shape != o.shape) return false;
    return std::memcmp(data.data(), o.data.data(), data.size() * sizeof(float)) == 0;
}

double Rng::uniform() {
    // 53-bit mantissa from the raw 64-bit draw
    return (double)(gen() >> 11) * (1.0 / 9007199254740992.0);
}

float Rng::gaussian() {
    if (have_spare) {
        have_spare = false;
        return (float)spare;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * 3.14159265358979323846 * u2;
    spare = r * std::sin(a);
    have_spare = true;
    return (float)(r * std::cos(a));
}

int Rng::uniform_int(int lo, int hi) {
    uint64_t span = (uint64_t)(hi - lo) + 1;
    return lo + (int)(gen() % span);
}

Tensor Rng::gaussian_tensor(std::vector<int> shape, float scale) {
    Tensor t(std::move(shape));
    for (float& v : t.data) v = gaussian() * scale;
    return t;
}

uint64_t fnv1a64(const void* bytes, size_t n) {
    const uint8_t* p = (const uint8_t*)bytes;
    uint64_t h = 1469598103934665603ull;
    for (size_t i = 0; i < n; i++) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

uint64_t tensor_digest(const Tensor& t) {
    uint64_t h = fnv1a64(t.data.data(), t.data.size() * sizeof(float));
    for (int d : t.shape) h = fnv1a64(&d, sizeof(d)) ^ (h * 1099511628211ull);
    return h;
}

float max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape) throw std::invalid_argument("max_abs_diff: shape mismatch");
    float m = 0.0f;
    for (size_t i = 0; i < a.data.size(); i++) {
        float d = std::fabs(a.data[i] - b.data[i]);
        if (d > m) m = d;
    }
    return m;
}

}  // namespace asdm
