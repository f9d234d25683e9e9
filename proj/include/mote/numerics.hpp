#pragma once

#include <cstddef>
#include <cstdint>
#include <utility>
#include <vector>

#include "mote/error.hpp"

namespace mote {

using Vector = std::vector<double>;

inline constexpr double kNormEps = 1e-12;

// Row-major dense matrix of doubles.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

    double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    bool operator==(const Matrix&) const = default;
};

// Standard product with a fixed left-to-right summation order over the inner index.
Matrix matmul(const Matrix& a, const Matrix& b);

// (1 x n) row vector times (n x m) matrix.
Vector vec_mat(const Vector& v, const Matrix& m);

// (n x m) matrix times (m x 1) column vector.
Vector mat_vec(const Matrix& m, const Vector& v);

double dot(const Vector& a, const Vector& b);
double norm(const Vector& v);

// v1.v2 / (|v1| |v2|); throws ValidationError on zero-norm input.
double cosine(const Vector& a, const Vector& b);

// Same value as cosine() when na == norm(a); lets callers hoist the query norm.
double cosine_with_norm(const Vector& a, double na, const Vector& b);

// Max-shifted exponentiation; entries sum to 1.
Vector softmax(const Vector& z);

Vector relu(const Vector& v);

void check_finite(const Vector& v, const char* what);
void check_finite(const Matrix& m, const char* what);

// Deterministic counter-based generator (splitmix64). Identical seeds give
// identical streams on every platform; split() derives an independent stream.
class SeededRng {
public:
    explicit SeededRng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64();

    // Uniform in [0, 1), 53 bits of precision.
    double next_double();

    // Standard normal via Box-Muller; the second draw of each pair is cached.
    double normal();

    // Uniform in [0, n) without modulo bias.
    std::uint64_t next_below(std::uint64_t n);

    SeededRng split() { return SeededRng(next_u64()); }

    template <typename T>
    void shuffle(std::vector<T>& items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(next_below(i));
            std::swap(items[i - 1], items[j]);
        }
    }

    // Stable combination of a seed with stream labels, for derived per-entity streams.
    static std::uint64_t mix(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

private:
    std::uint64_t state_ = 0;
    bool has_cached_ = false;
    double cached_ = 0.0;
};

}  // namespace mote
