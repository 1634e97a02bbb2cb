#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace floral {

// Dimension mismatch between operands.
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Requested rank outside [1, min(rows, cols)].
struct RankError : std::domain_error {
    using std::domain_error::domain_error;
};

// Iteration failure, nonpositive variance, singular system, and the like.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Dense row-major matrix of 64-bit floats.
class Matrix {
public:
    Matrix() = default;
    Matrix(int rows, int cols) : rows_(rows), cols_(cols), data_(check_dims(rows, cols)) {}
    Matrix(int rows, int cols, std::vector<double> data);

    static Matrix identity(int n);

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }

    double &operator()(int i, int j) { return data_[std::size_t(i) * cols_ + j]; }
    double operator()(int i, int j) const { return data_[std::size_t(i) * cols_ + j]; }

    std::span<double> data() { return data_; }
    std::span<const double> data() const { return data_; }

    bool same_shape(const Matrix &o) const { return rows_ == o.rows_ && cols_ == o.cols_; }
    bool all_finite() const;

    Matrix &operator+=(const Matrix &o);
    Matrix &operator-=(const Matrix &o);
    Matrix &operator*=(double s);
    // this += s * o
    void add_scaled(const Matrix &o, double s);

private:
    static std::size_t check_dims(int rows, int cols);

    int rows_ = 0, cols_ = 0;
    std::vector<double> data_;
};

Matrix operator+(Matrix a, const Matrix &b);
Matrix operator-(Matrix a, const Matrix &b);
Matrix operator*(Matrix a, double s);

Matrix matmul(const Matrix &a, const Matrix &b);
// a * b^T and a^T * b; avoids materializing transposes in the hot paths.
Matrix matmul_nt(const Matrix &a, const Matrix &b);
Matrix matmul_tn(const Matrix &a, const Matrix &b);
Matrix transpose(const Matrix &a);
// Frobenius inner product and norm.
double dot(const Matrix &a, const Matrix &b);
double frobenius_norm(const Matrix &a);
Matrix relu(const Matrix &a);

// Kernel/activation tensor, dense layout (c_out, c_in, k1, k2).
// Activations reuse the c_out slot as the batch dimension.
struct Tensor4 {
    int c_out = 0, c_in = 0, k1 = 0, k2 = 0;
    std::vector<double> data;

    Tensor4() = default;
    Tensor4(int co, int ci, int h, int w);

    double &operator()(int o, int i, int a, int b) {
        return data[((std::size_t(o) * c_in + i) * k1 + a) * k2 + b];
    }
    double operator()(int o, int i, int a, int b) const {
        return data[((std::size_t(o) * c_in + i) * k1 + a) * k2 + b];
    }
    std::size_t size() const { return data.size(); }
    bool all_finite() const;
};

// Valid (no padding, stride 1) cross-correlation. `input` is (batch, channels, h, w).
Tensor4 conv2d_valid(const Tensor4 &kernel, const Tensor4 &input);

struct SvdResult {
    Matrix u;               // rows x r, orthonormal columns
    std::vector<double> s;  // r, descending, nonnegative
    Matrix v;               // cols x r, orthonormal columns
    int sweeps = 0;
};

// Best rank-r approximation a ~= u * diag(s) * v^T via one-sided Jacobi.
SvdResult truncated_svd(const Matrix &a, int r);

// Cholesky factor (lower) of a symmetric positive-definite matrix.
Matrix cholesky(const Matrix &spd);
// b * m^-1 for symmetric positive-definite m.
Matrix solve_right_spd(const Matrix &b, const Matrix &m);

// Seeded random stream. Identical (seed, stream) gives identical draws on any
// platform: mt19937_64 is fully specified, and uniform/normal are derived from
// its raw output without implementation-defined distributions.
class RngStream {
public:
    RngStream(std::uint64_t seed, std::uint64_t stream);

    std::uint64_t seed() const { return seed_; }
    std::uint64_t stream() const { return stream_; }

    std::uint64_t next_u64() { return gen_(); }
    double uniform();  // [0, 1)
    double normal();   // standard normal, Box-Muller
    int uniform_int(int n);  // unbiased in [0, n)

private:
    std::uint64_t seed_ = 0, stream_ = 0;
    std::mt19937_64 gen_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace floral
