#include "floral/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace floral {

namespace {

void require(bool ok, const char *msg) {
    if (!ok) throw ShapeError(msg);
}

constexpr double kTwoPi = 6.283185307179586476925286766559;

}  // namespace

std::size_t Matrix::check_dims(int rows, int cols) {
    if (rows < 0 || cols < 0) throw ShapeError("matrix dimensions must be nonnegative");
    return std::size_t(rows) * std::size_t(cols);
}

Matrix::Matrix(int rows, int cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != check_dims(rows, cols))
        throw ShapeError("matrix data length does not match rows*cols");
}

Matrix Matrix::identity(int n) {
    Matrix m(n, n);
    for (int i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

bool Matrix::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

Matrix &Matrix::operator+=(const Matrix &o) {
    require(same_shape(o), "matrix += shape mismatch");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
}

Matrix &Matrix::operator-=(const Matrix &o) {
    require(same_shape(o), "matrix -= shape mismatch");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
}

Matrix &Matrix::operator*=(double s) {
    for (double &x : data_) x *= s;
    return *this;
}

void Matrix::add_scaled(const Matrix &o, double s) {
    require(same_shape(o), "add_scaled shape mismatch");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += s * o.data_[i];
}

Matrix operator+(Matrix a, const Matrix &b) { return a += b; }
Matrix operator-(Matrix a, const Matrix &b) { return a -= b; }
Matrix operator*(Matrix a, double s) { return a *= s; }

Matrix matmul(const Matrix &a, const Matrix &b) {
    require(a.cols() == b.rows(), "matmul: a.cols != b.rows");
    Matrix c(a.rows(), b.cols());
    const int n = b.cols();
    for (int i = 0; i < a.rows(); ++i) {
        for (int k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            for (int j = 0; j < n; ++j) c(i, j) += aik * b(k, j);
        }
    }
    return c;
}

Matrix matmul_nt(const Matrix &a, const Matrix &b) {
    require(a.cols() == b.cols(), "matmul_nt: inner dimensions differ");
    Matrix c(a.rows(), b.rows());
    for (int i = 0; i < a.rows(); ++i) {
        for (int j = 0; j < b.rows(); ++j) {
            double s = 0.0;
            for (int k = 0; k < a.cols(); ++k) s += a(i, k) * b(j, k);
            c(i, j) = s;
        }
    }
    return c;
}

Matrix matmul_tn(const Matrix &a, const Matrix &b) {
    require(a.rows() == b.rows(), "matmul_tn: inner dimensions differ");
    Matrix c(a.cols(), b.cols());
    for (int k = 0; k < a.rows(); ++k) {
        for (int i = 0; i < a.cols(); ++i) {
            const double aki = a(k, i);
            if (aki == 0.0) continue;
            for (int j = 0; j < b.cols(); ++j) c(i, j) += aki * b(k, j);
        }
    }
    return c;
}

Matrix transpose(const Matrix &a) {
    Matrix t(a.cols(), a.rows());
    for (int i = 0; i < a.rows(); ++i)
        for (int j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
    return t;
}

double dot(const Matrix &a, const Matrix &b) {
    require(a.same_shape(b), "dot: shape mismatch");
    double s = 0.0;
    auto da = a.data(), db = b.data();
    for (std::size_t i = 0; i < da.size(); ++i) s += da[i] * db[i];
    return s;
}

double frobenius_norm(const Matrix &a) { return std::sqrt(dot(a, a)); }

Matrix relu(const Matrix &a) {
    Matrix r = a;
    for (double &x : r.data()) x = x > 0.0 ? x : 0.0;
    return r;
}

Tensor4::Tensor4(int co, int ci, int h, int w) : c_out(co), c_in(ci), k1(h), k2(w) {
    if (co < 0 || ci < 0 || h < 0 || w < 0) throw ShapeError("tensor dimensions must be nonnegative");
    data.assign(std::size_t(co) * ci * h * w, 0.0);
}

bool Tensor4::all_finite() const {
    return std::all_of(data.begin(), data.end(), [](double x) { return std::isfinite(x); });
}

Tensor4 conv2d_valid(const Tensor4 &kernel, const Tensor4 &input) {
    require(input.c_in == kernel.c_in, "conv2d_valid: channel counts differ");
    require(input.k1 >= kernel.k1 && input.k2 >= kernel.k2,
            "conv2d_valid: input spatial dims smaller than kernel");
    const int batch = input.c_out;
    const int oh = input.k1 - kernel.k1 + 1;
    const int ow = input.k2 - kernel.k2 + 1;
    Tensor4 out(batch, kernel.c_out, oh, ow);
    for (int n = 0; n < batch; ++n)
        for (int o = 0; o < kernel.c_out; ++o)
            for (int y = 0; y < oh; ++y)
                for (int x = 0; x < ow; ++x) {
                    double s = 0.0;
                    for (int i = 0; i < kernel.c_in; ++i)
                        for (int a = 0; a < kernel.k1; ++a)
                            for (int b = 0; b < kernel.k2; ++b)
                                s += kernel(o, i, a, b) * input(n, i, y + a, x + b);
                    out(n, o, y, x) = s;
                }
    return out;
}

namespace {

double column_dot(const Matrix &m, int p, int q) {
    double s = 0.0;
    for (int i = 0; i < m.rows(); ++i) s += m(i, p) * m(i, q);
    return s;
}

// Fill column j of u with a unit vector orthogonal to columns [0, j).
void orthonormal_fill(Matrix &u, int j) {
    for (int basis = 0; basis < u.rows(); ++basis) {
        std::vector<double> cand(u.rows(), 0.0);
        cand[basis] = 1.0;
        for (int k = 0; k < j; ++k) {
            double proj = 0.0;
            for (int i = 0; i < u.rows(); ++i) proj += cand[i] * u(i, k);
            for (int i = 0; i < u.rows(); ++i) cand[i] -= proj * u(i, k);
        }
        double nrm = 0.0;
        for (double x : cand) nrm += x * x;
        nrm = std::sqrt(nrm);
        if (nrm > 1e-6) {
            for (int i = 0; i < u.rows(); ++i) u(i, j) = cand[i] / nrm;
            return;
        }
    }
    throw NumericError("svd: could not complete orthonormal basis");
}

}  // namespace

SvdResult truncated_svd(const Matrix &a, int r) {
    if (a.rows() < 1 || a.cols() < 1) throw ShapeError("svd: empty matrix");
    if (!a.all_finite()) throw NumericError("svd: input has non-finite entries");
    if (r < 1 || r > std::min(a.rows(), a.cols()))
        throw RankError("svd: rank must be in [1, min(rows, cols)]");

    const bool transposed = a.rows() < a.cols();
    Matrix t = transposed ? transpose(a) : a;  // tall: rows >= cols
    const int n = t.cols();
    Matrix v = Matrix::identity(n);

    constexpr int kMaxSweeps = 60;
    constexpr double kTol = 1e-14;
    int sweep = 0;
    for (; sweep < kMaxSweeps; ++sweep) {
        bool rotated = false;
        for (int p = 0; p < n - 1; ++p) {
            for (int q = p + 1; q < n; ++q) {
                const double app = column_dot(t, p, p);
                const double aqq = column_dot(t, q, q);
                const double apq = column_dot(t, p, q);
                if (std::abs(apq) <= kTol * std::sqrt(app * aqq)) continue;
                rotated = true;
                const double tau = (aqq - app) / (2.0 * apq);
                const double sign = tau >= 0.0 ? 1.0 : -1.0;
                const double tt = sign / (std::abs(tau) + std::sqrt(1.0 + tau * tau));
                const double c = 1.0 / std::sqrt(1.0 + tt * tt);
                const double s = c * tt;
                for (int i = 0; i < t.rows(); ++i) {
                    const double tp = t(i, p), tq = t(i, q);
                    t(i, p) = c * tp - s * tq;
                    t(i, q) = s * tp + c * tq;
                }
                for (int i = 0; i < n; ++i) {
                    const double vp = v(i, p), vq = v(i, q);
                    v(i, p) = c * vp - s * vq;
                    v(i, q) = s * vp + c * vq;
                }
            }
        }
        if (!rotated) break;
    }
    if (sweep == kMaxSweeps)
        throw NumericError("svd: Jacobi iteration did not converge after " +
                           std::to_string(kMaxSweeps) + " sweeps");

    std::vector<double> sigma(n);
    for (int j = 0; j < n; ++j) sigma[j] = std::sqrt(column_dot(t, j, j));
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int i, int j) { return sigma[i] > sigma[j]; });

    SvdResult out;
    out.sweeps = sweep;
    out.s.resize(r);
    Matrix uu(t.rows(), r), vv(n, r);
    for (int j = 0; j < r; ++j) {
        const int src = order[j];
        out.s[j] = sigma[src];
        for (int i = 0; i < n; ++i) vv(i, j) = v(i, src);
        if (sigma[src] > 0.0) {
            for (int i = 0; i < t.rows(); ++i) uu(i, j) = t(i, src) / sigma[src];
        } else {
            orthonormal_fill(uu, j);
        }
    }
    if (transposed) {
        out.u = std::move(vv);
        out.v = std::move(uu);
    } else {
        out.u = std::move(uu);
        out.v = std::move(vv);
    }
    return out;
}

Matrix cholesky(const Matrix &spd) {
    require(spd.rows() == spd.cols(), "cholesky: matrix not square");
    const int n = spd.rows();
    Matrix l(n, n);
    for (int j = 0; j < n; ++j) {
        double d = spd(j, j);
        for (int k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
        if (d <= 0.0) throw NumericError("cholesky: matrix not positive definite");
        l(j, j) = std::sqrt(d);
        for (int i = j + 1; i < n; ++i) {
            double s = spd(i, j);
            for (int k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
            l(i, j) = s / l(j, j);
        }
    }
    return l;
}

Matrix solve_right_spd(const Matrix &b, const Matrix &m) {
    require(b.cols() == m.rows(), "solve_right_spd: shape mismatch");
    const Matrix l = cholesky(m);
    const int n = m.rows();
    Matrix x = b;
    // Solve x * (L L^T) = b row by row: forward then backward substitution
    // on the transposed system.
    for (int i = 0; i < x.rows(); ++i) {
        for (int j = 0; j < n; ++j) {
            double s = x(i, j);
            for (int k = 0; k < j; ++k) s -= l(j, k) * x(i, k);
            x(i, j) = s / l(j, j);
        }
        for (int j = n - 1; j >= 0; --j) {
            double s = x(i, j);
            for (int k = j + 1; k < n; ++k) s -= l(k, j) * x(i, k);
            x(i, j) = s / l(j, j);
        }
    }
    return x;
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

}  // namespace

RngStream::RngStream(std::uint64_t seed, std::uint64_t stream)
    : seed_(seed), stream_(stream),
      gen_(splitmix64(splitmix64(seed) ^ splitmix64(stream * 0xA24BAED4963EE407ULL + 1))) {}

double RngStream::uniform() {
    return double(next_u64() >> 11) * 0x1.0p-53;
}

double RngStream::normal() {
    if (have_spare_) {
        have_spare_ = false;
        return spare_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    const double rad = std::sqrt(-2.0 * std::log(u1));
    const double ang = kTwoPi * u2;
    spare_ = rad * std::sin(ang);
    have_spare_ = true;
    return rad * std::cos(ang);
}

int RngStream::uniform_int(int n) {
    if (n <= 0) throw std::invalid_argument("uniform_int: n must be positive");
    const std::uint64_t un = std::uint64_t(n);
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    std::uint64_t x;
    do {
        x = next_u64();
    } while (x >= limit);
    return int(x % un);
}

}  // namespace floral
