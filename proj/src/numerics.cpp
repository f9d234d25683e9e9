#include "mote/numerics.hpp"

#include <cmath>
#include <string>

namespace mote {

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows)
        throw ValidationError("matmul: inner dimensions differ (" + std::to_string(a.cols) +
                              " vs " + std::to_string(b.rows) + ")");
    Matrix out(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        for (std::size_t k = 0; k < a.cols; ++k) {
            double aik = a.at(i, k);
            if (aik == 0.0) continue;
            for (std::size_t j = 0; j < b.cols; ++j)
                out.at(i, j) += aik * b.at(k, j);
        }
    }
    return out;
}

Vector vec_mat(const Vector& v, const Matrix& m) {
    if (v.size() != m.rows)
        throw ValidationError("vec_mat: vector length " + std::to_string(v.size()) +
                              " does not match matrix rows " + std::to_string(m.rows));
    Vector out(m.cols, 0.0);
    for (std::size_t k = 0; k < m.rows; ++k) {
        double vk = v[k];
        if (vk == 0.0) continue;
        for (std::size_t j = 0; j < m.cols; ++j)
            out[j] += vk * m.at(k, j);
    }
    return out;
}

Vector mat_vec(const Matrix& m, const Vector& v) {
    if (v.size() != m.cols)
        throw ValidationError("mat_vec: vector length " + std::to_string(v.size()) +
                              " does not match matrix cols " + std::to_string(m.cols));
    Vector out(m.rows, 0.0);
    for (std::size_t i = 0; i < m.rows; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < m.cols; ++j)
            acc += m.at(i, j) * v[j];
        out[i] = acc;
    }
    return out;
}

double dot(const Vector& a, const Vector& b) {
    if (a.size() != b.size())
        throw ValidationError("dot: length mismatch (" + std::to_string(a.size()) + " vs " +
                              std::to_string(b.size()) + ")");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        acc += a[i] * b[i];
    return acc;
}

double norm(const Vector& v) {
    return std::sqrt(dot(v, v));
}

double cosine(const Vector& a, const Vector& b) {
    return cosine_with_norm(a, norm(a), b);
}

double cosine_with_norm(const Vector& a, double na, const Vector& b) {
    double nb = norm(b);
    if (na < kNormEps || nb < kNormEps)
        throw ValidationError("cosine: zero-norm vector");
    return dot(a, b) / (na * nb);
}

Vector softmax(const Vector& z) {
    if (z.empty()) throw ValidationError("softmax: empty input");
    double m = z[0];
    for (double v : z)
        if (v > m) m = v;
    Vector out(z.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
        out[i] = std::exp(z[i] - m);
        sum += out[i];
    }
    for (double& v : out) v /= sum;
    return out;
}

Vector relu(const Vector& v) {
    Vector out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i)
        out[i] = v[i] > 0.0 ? v[i] : 0.0;
    return out;
}

void check_finite(const Vector& v, const char* what) {
    for (double x : v)
        if (!std::isfinite(x))
            throw InternalError(std::string("non-finite value in ") + what);
}

void check_finite(const Matrix& m, const char* what) {
    for (double x : m.data)
        if (!std::isfinite(x))
            throw InternalError(std::string("non-finite value in ") + what);
}

namespace {

constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ULL;

std::uint64_t fmix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

}  // namespace

std::uint64_t SeededRng::next_u64() {
    state_ += kGamma;
    return fmix64(state_);
}

double SeededRng::next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double SeededRng::normal() {
    if (has_cached_) {
        has_cached_ = false;
        return cached_;
    }
    double u1 = next_double();
    while (u1 <= 0.0) u1 = next_double();
    double u2 = next_double();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * 3.14159265358979323846 * u2;
    cached_ = r * std::sin(theta);
    has_cached_ = true;
    return r * std::cos(theta);
}

std::uint64_t SeededRng::next_below(std::uint64_t n) {
    if (n == 0) throw ValidationError("next_below: n must be positive");
    // Rejection sampling over the largest multiple of n below 2^64.
    std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return x % n;
}

std::uint64_t SeededRng::mix(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
    // Offsets keep (a, b) = (0, 0) distinct from the raw seed.
    return fmix64(seed + kGamma * (a + 1) + 0xD1B54A32D192ED03ULL * (b + 1));
}

}  // namespace mote
