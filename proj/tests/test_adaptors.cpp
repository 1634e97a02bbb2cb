#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "floral/adaptors.hpp"

using namespace floral;

namespace {

Matrix random_matrix(int rows, int cols, RngStream &rng, double scale = 1.0) {
    Matrix m(rows, cols);
    for (double &x : m.data()) x = scale * rng.normal();
    return m;
}

void randomize(Tensor4 &t, RngStream &rng) {
    for (double &x : t.data) x = rng.normal();
}

double max_abs_diff(const Matrix &a, const Matrix &b) {
    double m = 0.0;
    auto da = a.data(), db = b.data();
    for (std::size_t i = 0; i < da.size(); ++i) m = std::max(m, std::abs(da[i] - db[i]));
    return m;
}

double max_abs_diff(const Tensor4 &a, const Tensor4 &b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i)
        m = std::max(m, std::abs(a.data[i] - b.data[i]));
    return m;
}

// Column-space projector via modified Gram-Schmidt; independent of the SVD
// and Cholesky paths in the library.
Matrix projector_oracle(const Matrix &a) {
    Matrix q = a;
    const int r = a.cols();
    for (int j = 0; j < r; ++j) {
        for (int k = 0; k < j; ++k) {
            double p = 0.0;
            for (int i = 0; i < q.rows(); ++i) p += q(i, k) * q(i, j);
            for (int i = 0; i < q.rows(); ++i) q(i, j) -= p * q(i, k);
        }
        double nrm = 0.0;
        for (int i = 0; i < q.rows(); ++i) nrm += q(i, j) * q(i, j);
        nrm = std::sqrt(nrm);
        REQUIRE(nrm > 1e-12);
        for (int i = 0; i < q.rows(); ++i) q(i, j) /= nrm;
    }
    return matmul_nt(q, q);
}

std::size_t closed_form_params(const ConvShape &s, ConvVariant variant, const ConvRankPlan &p) {
    switch (variant) {
        case ConvVariant::channel:
        case ConvVariant::reshaped_linear:
            return std::size_t(s.c_out * s.k1 * s.k2 + s.c_in) * std::size_t(p.r_c);
        case ConvVariant::filter:
            return std::size_t(s.c_out * s.k2 + s.c_in * s.k1) * std::size_t(s.c_out) *
                   std::size_t(p.r_c);
        case ConvVariant::channel_filter: {
            const int vk = p.v_carries_k1 ? s.k1 : s.k2;
            const int uk = p.v_carries_k1 ? s.k2 : s.k1;
            return std::size_t(s.c_in * vk + s.c_out * uk) * std::size_t(p.r_c * p.r_f);
        }
    }
    return 0;
}

}  // namespace

TEST_CASE("linear rank budget formula and min-rank clamp") {
    CHECK(linear_rank_for_budget(64, 64, {0.1}) == 3);
    CHECK(linear_rank_for_budget(32, 32, {0.01}) == 1);
    CHECK(linear_rank_for_budget(100, 10, {0.1}) == 1);
}

TEST_CASE("budget respected whenever the unclamped rank is at least 1") {
    RngStream rng(1, 0);
    for (int trial = 0; trial < 200; ++trial) {
        const int m = 2 + rng.uniform_int(200);
        const int n = 2 + rng.uniform_int(200);
        const double rho = 0.02 + 0.2 * rng.uniform();
        const int r = linear_rank_for_budget(m, n, {rho});
        const double budget = rho * double(m) * double(n);
        if (double(m + n) <= budget)  // unclamped case
            CHECK(double((m + n) * r) <= budget);
    }
}

TEST_CASE("conv rank budget for the square balanced case") {
    // c = 16, k = 3, rho = 0.1: r <= rho * c * k / 2 = 2.4 -> 2.
    ConvRankPlan plan = conv_rank_for_budget({16, 16, 3, 3}, {0.1}, ConvVariant::channel_filter);
    CHECK(plan.r_c == 2);
    CHECK(plan.r_f == 1);
}

TEST_CASE("conv parameter counts match the closed forms") {
    RngStream rng(2, 0);
    ConvLoRA channel = make_conv_lora({8, 16, 3, 3}, ConvVariant::channel, {2, 1, true}, rng);
    CHECK(channel.param_count() == std::size_t((8 * 9 + 16) * 2));
    CHECK(channel.param_count() == 176);

    for (ConvVariant variant : {ConvVariant::channel, ConvVariant::filter,
                                ConvVariant::channel_filter, ConvVariant::reshaped_linear}) {
        for (int trial = 0; trial < 8; ++trial) {
            ConvShape s{1 + rng.uniform_int(6), 1 + rng.uniform_int(6), 1 + rng.uniform_int(4),
                        1 + rng.uniform_int(4)};
            ConvRankPlan plan = conv_rank_for_budget(s, {0.5}, variant);
            ConvLoRA a = make_conv_lora(s, variant, plan, rng);
            CHECK(a.param_count() == closed_form_params(s, variant, plan));
        }
    }
}

TEST_CASE("no clamp when the budget naturally allows rank >= 1") {
    ConvRankPlan plan = conv_rank_for_budget({32, 32, 3, 3}, {0.5}, ConvVariant::channel);
    const double budget = 0.5 * 32 * 32 * 9;
    CHECK(double((32 * 9 + 32) * plan.r_c) <= budget);
    CHECK(plan.r_c >= 1);
}

TEST_CASE("merged kernel is zero for a zero factor") {
    RngStream rng(3, 0);
    ConvLoRA a = make_conv_lora({3, 4, 3, 3}, ConvVariant::channel, {2, 1, true}, rng);
    Tensor4 merged = merge_conv_lora(a);  // v is zero at construction
    for (double x : merged.data) CHECK(x == 0.0);
}

TEST_CASE("channel variant with identity mixing reproduces u") {
    RngStream rng(4, 0);
    const int c = 3;
    ConvLoRA a = make_conv_lora({c, c, 3, 3}, ConvVariant::channel, {c, 1, true}, rng);
    for (int m = 0; m < c; ++m)
        for (int j = 0; j < c; ++j) a.v(m, j, 0, 0) = m == j ? 1.0 : 0.0;
    Tensor4 merged = merge_conv_lora(a);
    CHECK(max_abs_diff(merged, a.u) == 0.0);
}

TEST_CASE("merged kernel equals sequential convolution for every variant") {
    RngStream rng(5, 0);
    for (ConvVariant variant : {ConvVariant::channel, ConvVariant::filter,
                                ConvVariant::channel_filter, ConvVariant::reshaped_linear}) {
        for (int trial = 0; trial < 5; ++trial) {
            ConvShape s{1 + rng.uniform_int(4), 1 + rng.uniform_int(4), 1 + rng.uniform_int(3),
                        1 + rng.uniform_int(3)};
            ConvRankPlan plan = conv_rank_for_budget(s, {0.3}, variant);
            ConvLoRA a = make_conv_lora(s, variant, plan, rng);
            randomize(a.v, rng);

            Tensor4 input(1 + rng.uniform_int(2), s.c_in, s.k1 + 4, s.k2 + 4);
            randomize(input, rng);
            Tensor4 via_merge = conv2d_valid(merge_conv_lora(a), input);
            Tensor4 via_stages = conv2d_valid(a.u, conv2d_valid(a.v, input));
            REQUIRE(via_merge.size() == via_stages.size());
            CHECK(max_abs_diff(via_merge, via_stages) < 1e-10);
        }
    }
}

TEST_CASE("fresh linear adaptor is an exact no-op") {
    RngStream rng(6, 0);
    LinearLoRA lora = make_linear_lora(5, 7, 2, rng);
    CHECK(frobenius_norm(materialize(lora)) == 0.0);
}

TEST_CASE("preconditioning with orthonormal v leaves g_u almost unchanged") {
    RngStream rng(7, 0);
    Matrix u = random_matrix(6, 2, rng);
    Matrix v = random_matrix(8, 2, rng);
    for (int j = 0; j < 2; ++j) {
        for (int k = 0; k < j; ++k) {
            double p = 0.0;
            for (int i = 0; i < 8; ++i) p += v(i, k) * v(i, j);
            for (int i = 0; i < 8; ++i) v(i, j) -= p * v(i, k);
        }
        double nrm = 0.0;
        for (int i = 0; i < 8; ++i) nrm += v(i, j) * v(i, j);
        for (int i = 0; i < 8; ++i) v(i, j) /= std::sqrt(nrm);
    }
    Matrix gu = random_matrix(6, 2, rng), gv = random_matrix(8, 2, rng);
    auto [pu, pv] = precondition_lora_grads(u, v, gu, gv, 1e-12);
    CHECK(max_abs_diff(pu, gu) < 1e-9);
}

TEST_CASE("preconditioning with u = 0 scales g_v by 1/eps") {
    RngStream rng(8, 0);
    Matrix u(6, 2);
    Matrix v = random_matrix(8, 2, rng);
    Matrix gu(6, 2);
    Matrix gv = random_matrix(8, 2, rng);
    const double eps = 1e-4;
    auto [pu, pv] = precondition_lora_grads(u, v, gu, gv, eps);
    Matrix expect = gv;
    expect *= 1.0 / eps;
    CHECK(max_abs_diff(pv, expect) < 1e-9);
    CHECK_THROWS_AS(precondition_lora_grads(u, v, gu, gv, 0.0), std::invalid_argument);
}

TEST_CASE("preconditioned update direction matches the projector form") {
    RngStream rng(9, 0);
    for (int trial = 0; trial < 5; ++trial) {
        const int m = 5 + rng.uniform_int(4), n = 6 + rng.uniform_int(4), r = 2;
        Matrix u = random_matrix(m, r, rng), v = random_matrix(n, r, rng);
        Matrix g = random_matrix(m, n, rng);
        Matrix gu = matmul(g, v), gv = matmul_tn(g, u);
        auto [pu, pv] = precondition_lora_grads(u, v, gu, gv, 1e-8);
        Matrix direction = matmul_nt(pu, v) + matmul_nt(u, pv);
        Matrix expect = matmul(projector_oracle(u), g) + matmul(g, projector_oracle(v));
        CHECK(max_abs_diff(direction, expect) / frobenius_norm(expect) < 1e-6);
    }
}

TEST_CASE("conv preconditioning scales by gram frobenius norms") {
    RngStream rng(10, 0);
    ConvLoRA a = make_conv_lora({3, 4, 3, 3}, ConvVariant::channel, {2, 1, true}, rng);
    randomize(a.v, rng);
    Tensor4 gu = a.u, gv = a.v;
    randomize(gu, rng);
    randomize(gv, rng);
    auto [pu, pv] = precondition_conv_grads(a.u, a.v, gu, gv, 1e-8);
    CHECK(pu.size() == gu.size());
    CHECK(pv.size() == gv.size());
    // Zero factor: the scale degenerates to 1/eps.
    Tensor4 zero_u(3, 2, 3, 3);
    auto [qu, qv] = precondition_conv_grads(zero_u, a.v, gu, gv, 1e-4);
    for (std::size_t i = 0; i < gv.data.size(); ++i)
        CHECK(qv.data[i] == doctest::Approx(gv.data[i] * 1e4));
}

TEST_CASE("centering the scalar example") {
    // u = 5 with adaptors (4, 6) becomes u = 10 with adaptors (-1, 1).
    Matrix base(1, 1, {5.0});
    std::vector<LinearLoRA> loras;
    loras.push_back({Matrix(1, 1, {4.0}), Matrix(1, 1, {1.0})});
    loras.push_back({Matrix(1, 1, {6.0}), Matrix(1, 1, {1.0})});
    std::vector<double> probs{0.5, 0.5};
    center_loras(base, loras, probs);
    CHECK(base(0, 0) == doctest::Approx(10.0));
    CHECK(materialize(loras[0])(0, 0) == doctest::Approx(-1.0));
    CHECK(materialize(loras[1])(0, 0) == doctest::Approx(1.0));
}

TEST_CASE("centering identical adaptors zeroes them out") {
    RngStream rng(11, 0);
    LinearLoRA proto = make_linear_lora(4, 5, 2, rng);
    for (double &x : proto.v.data()) x = rng.normal();
    std::vector<LinearLoRA> loras{proto, proto, proto};
    Matrix base = random_matrix(4, 5, rng);
    Matrix merged_before = base + materialize(proto);
    std::vector<double> probs{1.0 / 3, 1.0 / 3, 1.0 / 3};
    center_loras(base, loras, probs);
    for (const auto &l : loras) CHECK(frobenius_norm(materialize(l)) < 1e-12);
    CHECK(max_abs_diff(base, merged_before) < 1e-12);
}

TEST_CASE("centering preserves merged weights when residuals stay within rank") {
    RngStream rng(12, 0);
    // Shared left factor keeps every centered difference rank-1.
    Matrix shared_u = random_matrix(6, 1, rng);
    std::vector<LinearLoRA> loras;
    for (int c = 0; c < 2; ++c) loras.push_back({shared_u, random_matrix(5, 1, rng)});
    Matrix base = random_matrix(6, 5, rng);
    std::vector<double> probs{0.5, 0.5};

    std::vector<Matrix> deltas;
    for (const auto &l : loras) deltas.push_back(materialize(l));
    Matrix base_before = base;

    center_loras(base, loras, probs);

    RngStream mix_rng(13, 0);
    for (int trial = 0; trial < 5; ++trial) {
        const double p0 = mix_rng.uniform();
        const std::vector<double> pi{p0, 1.0 - p0};
        Matrix before = base_before;
        Matrix after = base;
        for (int c = 0; c < 2; ++c) {
            before.add_scaled(deltas[std::size_t(c)], pi[std::size_t(c)]);
            after.add_scaled(materialize(loras[std::size_t(c)]), pi[std::size_t(c)]);
        }
        CHECK(max_abs_diff(before, after) < 1e-9);
    }
}

TEST_CASE("centering rejects inconsistent shapes and exponents") {
    RngStream rng(14, 0);
    std::vector<LinearLoRA> loras{make_linear_lora(4, 5, 2, rng), make_linear_lora(4, 6, 2, rng)};
    Matrix base(4, 5);
    std::vector<double> probs{0.5, 0.5};
    CHECK_THROWS_AS(center_loras(base, loras, probs), ShapeError);
    std::vector<LinearLoRA> ok{make_linear_lora(4, 5, 2, rng), make_linear_lora(4, 5, 2, rng)};
    CHECK_THROWS_AS(center_loras(base, ok, probs, 2.0, 3.0), std::invalid_argument);
}

TEST_CASE("batchnora trivial cases") {
    RngStream rng(15, 0);
    const int n = 4, d = 3;
    Matrix x = random_matrix(n, d, rng);
    BatchStats base{{0.1, -0.2, 0.3}, {1.0, 2.0, 0.5}};
    BatchStats adapt{{0.4, 0.0, -0.1}, {0.7, 1.5, 2.0}};
    std::vector<double> gamma{1.0, 2.0, 0.5}, beta{0.0, -1.0, 0.25};
    std::vector<double> zeros(std::size_t(d), 0.0);

    // Zero adaptor: plain batch norm.
    Matrix out = batchnora_forward(x, base, adapt, gamma, beta, zeros, zeros, 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) {
            const double bn = (x(i, j) - base.mean[std::size_t(j)]) /
                                  std::sqrt(base.var[std::size_t(j)]) * gamma[std::size_t(j)] +
                              beta[std::size_t(j)];
            CHECK(out(i, j) == doctest::Approx(bn).epsilon(1e-12));
        }

    // Equal statistics: the reparameterization is the identity on (gamma_i, beta_i).
    std::vector<double> gi{0.3, -0.4, 0.2}, bi{0.1, 0.2, -0.3};
    Matrix out2 = batchnora_forward(x, base, base, gamma, beta, gi, bi, 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) {
            const double expect = (x(i, j) - base.mean[std::size_t(j)]) /
                                      std::sqrt(base.var[std::size_t(j)]) *
                                      (gamma[std::size_t(j)] + gi[std::size_t(j)]) +
                                  beta[std::size_t(j)] + bi[std::size_t(j)];
            CHECK(out2(i, j) == doctest::Approx(expect).epsilon(1e-12));
        }
}

TEST_CASE("batchnora two-term form equals the single-term identity") {
    RngStream rng(16, 0);
    const int n = 4, d = 3;
    Matrix x = random_matrix(n, d, rng);
    BatchStats base{{0.5, -1.0, 2.0}, {1.3, 0.4, 2.5}};
    BatchStats adapt{{-0.2, 0.7, 1.0}, {0.9, 1.8, 0.6}};
    std::vector<double> gamma{1.1, 0.9, -0.5}, beta{0.2, -0.1, 0.7};
    std::vector<double> gi{0.4, -0.6, 0.3}, bi{-0.2, 0.5, 0.1};

    Matrix out = batchnora_forward(x, base, adapt, gamma, beta, gi, bi, 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) {
            const double norm =
                (x(i, j) - base.mean[std::size_t(j)]) / std::sqrt(base.var[std::size_t(j)]);
            const double expect = norm * (gamma[std::size_t(j)] + gi[std::size_t(j)]) +
                                  beta[std::size_t(j)] + bi[std::size_t(j)];
            CHECK(std::abs(out(i, j) - expect) < 1e-10);
        }
}

TEST_CASE("batchnora rejects nonpositive variance") {
    Matrix x(2, 1, {0.0, 1.0});
    BatchStats bad{{0.0}, {0.0}};
    BatchStats good{{0.0}, {1.0}};
    std::vector<double> one{1.0}, zero{0.0};
    CHECK_THROWS_AS(batchnora_forward(x, bad, good, one, zero, zero, zero, 0.0), NumericError);
    CHECK_THROWS_AS(batchnora_forward(x, good, bad, one, zero, zero, zero, 0.0), NumericError);
}

TEST_CASE("bias and norm adaptors start at zero") {
    BiasAdaptor b(5);
    NormAdaptor nm(4);
    CHECK(std::all_of(b.delta.begin(), b.delta.end(), [](double x) { return x == 0.0; }));
    CHECK(std::all_of(nm.gamma_delta.begin(), nm.gamma_delta.end(),
                      [](double x) { return x == 0.0; }));
    CHECK(std::all_of(nm.beta_delta.begin(), nm.beta_delta.end(),
                      [](double x) { return x == 0.0; }));
}

namespace {

// Singular values via two-sided Jacobi on the Gram matrix; an independent
// route to the spectrum for the truncation-energy check.
std::vector<double> singular_values_oracle(const Matrix &a) {
    const int n = a.cols();
    Matrix g = matmul_tn(a, a);
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (int p = 0; p < n - 1; ++p)
            for (int q = p + 1; q < n; ++q) off = std::max(off, std::abs(g(p, q)));
        if (off < 1e-14) break;
        for (int p = 0; p < n - 1; ++p)
            for (int q = p + 1; q < n; ++q) {
                if (std::abs(g(p, q)) < 1e-300) continue;
                const double theta = 0.5 * std::atan2(2.0 * g(p, q), g(q, q) - g(p, p));
                const double c = std::cos(theta), s = std::sin(theta);
                for (int i = 0; i < n; ++i) {
                    const double gip = g(i, p), giq = g(i, q);
                    g(i, p) = c * gip - s * giq;
                    g(i, q) = s * gip + c * giq;
                }
                for (int i = 0; i < n; ++i) {
                    const double gpi = g(p, i), gqi = g(q, i);
                    g(p, i) = c * gpi - s * gqi;
                    g(q, i) = s * gpi + c * gqi;
                }
            }
    }
    std::vector<double> sv(std::size_t(n), 0.0);
    for (int i = 0; i < n; ++i) sv[std::size_t(i)] = std::sqrt(std::max(0.0, g(i, i)));
    std::sort(sv.begin(), sv.end(), std::greater<>());
    return sv;
}

}  // namespace

TEST_CASE("centering error beyond the rank equals the tail singular energy") {
    RngStream rng(20, 0);
    const int m = 7, n = 6, r = 2;
    std::vector<LinearLoRA> loras;
    for (int c = 0; c < 2; ++c) {
        LinearLoRA l = make_linear_lora(m, n, r, rng);
        l.v = random_matrix(n, r, rng);
        loras.push_back(std::move(l));
    }
    Matrix base = random_matrix(m, n, rng);
    Matrix base_before = base;
    std::vector<Matrix> deltas{materialize(loras[0]), materialize(loras[1])};

    // Residuals (L_c - mean) have rank up to 2r > r here, so centering
    // truncates; for a one-hot mixture the merged drift is exactly the
    // dropped tail energy of that cluster's residual.
    Matrix mean = deltas[0];
    mean += deltas[1];
    mean *= 0.5;
    std::vector<double> probs{0.5, 0.5};
    center_loras(base, loras, probs);

    for (int c = 0; c < 2; ++c) {
        Matrix resid = deltas[std::size_t(c)];
        resid -= mean;
        const auto sv = singular_values_oracle(resid);
        double tail = 0.0;
        for (std::size_t i = std::size_t(r); i < sv.size(); ++i) tail += sv[i] * sv[i];
        tail = std::sqrt(tail);
        REQUIRE(tail > 1e-6);  // genuinely truncated

        Matrix before = base_before + deltas[std::size_t(c)];
        Matrix after = base + materialize(loras[std::size_t(c)]);
        CHECK(frobenius_norm(before - after) == doctest::Approx(tail).epsilon(1e-9));
    }
}
