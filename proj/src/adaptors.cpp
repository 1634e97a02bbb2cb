#include "floral/adaptors.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace floral {

namespace {

void check_budget(const BudgetSpec &spec) {
    if (!(spec.rho > 0.0) || spec.rho > 1.0)
        throw std::invalid_argument("budget: rho must be in (0, 1]");
}

Matrix init_normal(int rows, int cols, double stddev, RngStream &rng) {
    Matrix m(rows, cols);
    for (double &x : m.data()) x = stddev * rng.normal();
    return m;
}

Tensor4 init_normal(int co, int ci, int h, int w, double stddev, RngStream &rng) {
    Tensor4 t(co, ci, h, w);
    for (double &x : t.data) x = stddev * rng.normal();
    return t;
}

}  // namespace

int linear_rank_for_budget(int m, int n, const BudgetSpec &spec) {
    if (m < 1 || n < 1) throw ShapeError("rank budget: dimensions must be >= 1");
    check_budget(spec);
    const int r = int(std::floor(spec.rho * double(m) * double(n) / double(m + n)));
    return std::max(1, r);
}

LinearLoRA make_linear_lora(int m, int n, int r, RngStream &rng) {
    if (m < 1 || n < 1 || r < 1) throw ShapeError("lora: dimensions and rank must be >= 1");
    LinearLoRA lora;
    lora.u = init_normal(m, r, 1.0 / std::sqrt(double(n)), rng);
    lora.v = Matrix(n, r);
    return lora;
}

Matrix materialize(const LinearLoRA &lora) { return matmul_nt(lora.u, lora.v); }

ConvRankPlan conv_rank_for_budget(const ConvShape &s, const BudgetSpec &spec,
                                  ConvVariant variant) {
    if (s.c_out < 1 || s.c_in < 1 || s.k1 < 1 || s.k2 < 1)
        throw ShapeError("conv budget: dimensions must be >= 1");
    check_budget(spec);
    const double total = spec.rho * double(s.c_in) * s.c_out * s.k1 * s.k2;

    ConvRankPlan plan;
    switch (variant) {
        case ConvVariant::channel:
        case ConvVariant::reshaped_linear: {
            const double cost = double(s.c_out) * s.k1 * s.k2 + s.c_in;
            plan.r_c = std::max(1, int(std::floor(total / cost)));
            break;
        }
        case ConvVariant::filter: {
            const double cost = (double(s.c_out) * s.k2 + double(s.c_in) * s.k1) * s.c_out;
            plan.r_c = std::max(1, int(std::floor(total / cost)));
            break;
        }
        case ConvVariant::channel_filter: {
            // The factor touching the smaller channel count carries the larger
            // kernel dimension; ties resolve the same way, so the choice is
            // deterministic.
            const bool v_smaller = s.c_in <= s.c_out;
            plan.v_carries_k1 = v_smaller ? (s.k1 >= s.k2) : (s.k2 > s.k1);
            const int vk = plan.v_carries_k1 ? s.k1 : s.k2;
            const int uk = plan.v_carries_k1 ? s.k2 : s.k1;
            const double cost = double(s.c_in) * vk + double(s.c_out) * uk;
            plan.r_f = 1;
            plan.r_c = std::max(1, int(std::floor(total / cost)));
            break;
        }
    }
    return plan;
}

ConvLoRA make_conv_lora(const ConvShape &shape, ConvVariant variant, const ConvRankPlan &plan,
                        RngStream &rng) {
    if (plan.r_c < 1 || plan.r_f < 1) throw ShapeError("conv lora: ranks must be >= 1");
    ConvLoRA a;
    a.variant = variant;
    a.shape = shape;
    a.r_c = plan.r_c;
    a.r_f = plan.r_f;
    const double conv_std = 1.0 / std::sqrt(double(shape.c_in) * shape.k1 * shape.k2);
    switch (variant) {
        case ConvVariant::channel:
            a.u = init_normal(shape.c_out, plan.r_c, shape.k1, shape.k2, conv_std, rng);
            a.v = Tensor4(plan.r_c, shape.c_in, 1, 1);
            break;
        case ConvVariant::reshaped_linear:
            // Linear LoRA on the matricized kernel, stored in kernel layout;
            // u follows the linear init with fan-in c_in.
            a.u = init_normal(shape.c_out, plan.r_c, shape.k1, shape.k2,
                              1.0 / std::sqrt(double(shape.c_in)), rng);
            a.v = Tensor4(plan.r_c, shape.c_in, 1, 1);
            break;
        case ConvVariant::filter: {
            const int mid = plan.r_c * shape.c_out;
            a.u = init_normal(shape.c_out, mid, 1, shape.k2, conv_std, rng);
            a.v = Tensor4(mid, shape.c_in, shape.k1, 1);
            break;
        }
        case ConvVariant::channel_filter: {
            const int mid = plan.r_c * plan.r_f;
            const int vk = plan.v_carries_k1 ? shape.k1 : shape.k2;
            const int uk = plan.v_carries_k1 ? shape.k2 : shape.k1;
            const int u_k1 = plan.v_carries_k1 ? 1 : uk;
            const int u_k2 = plan.v_carries_k1 ? uk : 1;
            const int v_k1 = plan.v_carries_k1 ? vk : 1;
            const int v_k2 = plan.v_carries_k1 ? 1 : vk;
            a.u = init_normal(shape.c_out, mid, u_k1, u_k2, conv_std, rng);
            a.v = Tensor4(mid, shape.c_in, v_k1, v_k2);
            break;
        }
    }
    return a;
}

Tensor4 merge_conv_lora(const ConvLoRA &a) {
    if (a.u.c_in != a.v.c_out) throw ShapeError("merge_conv_lora: mid-channel counts differ");
    const int kh = a.u.k1 + a.v.k1 - 1;
    const int kw = a.u.k2 + a.v.k2 - 1;
    if (a.u.c_out != a.shape.c_out || a.v.c_in != a.shape.c_in || kh != a.shape.k1 ||
        kw != a.shape.k2)
        throw ShapeError("merge_conv_lora: factors do not compose to the base kernel shape");
    // Composition of two valid cross-correlations: the equivalent kernel sums
    // U and V over the mid channel at every additive split of the offsets.
    Tensor4 out(a.shape.c_out, a.shape.c_in, kh, kw);
    for (int o = 0; o < a.u.c_out; ++o)
        for (int m = 0; m < a.u.c_in; ++m)
            for (int g = 0; g < a.u.k1; ++g)
                for (int d = 0; d < a.u.k2; ++d) {
                    const double uval = a.u(o, m, g, d);
                    if (uval == 0.0) continue;
                    for (int j = 0; j < a.v.c_in; ++j)
                        for (int al = 0; al < a.v.k1; ++al)
                            for (int be = 0; be < a.v.k2; ++be)
                                out(o, j, g + al, d + be) += uval * a.v(m, j, al, be);
                }
    return out;
}

std::pair<Matrix, Matrix> precondition_lora_grads(const Matrix &u, const Matrix &v,
                                                  const Matrix &g_u, const Matrix &g_v,
                                                  double eps) {
    if (!(eps > 0.0)) throw std::invalid_argument("precondition: eps must be positive");
    if (!g_u.same_shape(u) || !g_v.same_shape(v))
        throw ShapeError("precondition: gradient shapes must match factors");
    auto gram_plus = [&](const Matrix &m) {
        Matrix g = matmul_tn(m, m);
        for (int i = 0; i < g.rows(); ++i) g(i, i) += eps;
        return g;
    };
    return {solve_right_spd(g_u, gram_plus(v)), solve_right_spd(g_v, gram_plus(u))};
}

namespace {

// Frobenius norm of M M^T where M matricizes the factor over its mid-channel
// index (c_out slot for V, c_in slot for U).
double gram_fro_norm(const Tensor4 &t, bool mid_is_first) {
    const int mid = mid_is_first ? t.c_out : t.c_in;
    const int rest = int(t.size()) / std::max(1, mid);
    Matrix m(mid, rest);
    if (mid_is_first) {
        std::copy(t.data.begin(), t.data.end(), m.data().begin());
    } else {
        // t(o, m, a, b) -> m(m, (o, a, b))
        const int spatial = t.k1 * t.k2;
        for (int o = 0; o < t.c_out; ++o)
            for (int i = 0; i < t.c_in; ++i)
                for (int s = 0; s < spatial; ++s)
                    m(i, o * spatial + s) = t.data[(std::size_t(o) * t.c_in + i) * spatial + s];
    }
    return frobenius_norm(matmul_nt(m, m));
}

}  // namespace

std::pair<Tensor4, Tensor4> precondition_conv_grads(const Tensor4 &u, const Tensor4 &v,
                                                    const Tensor4 &g_u, const Tensor4 &g_v,
                                                    double eps) {
    if (!(eps > 0.0)) throw std::invalid_argument("precondition: eps must be positive");
    const double su = 1.0 / (gram_fro_norm(v, /*mid_is_first=*/true) + eps);
    const double sv = 1.0 / (gram_fro_norm(u, /*mid_is_first=*/false) + eps);
    Tensor4 out_u = g_u, out_v = g_v;
    for (double &x : out_u.data) x *= su;
    for (double &x : out_v.data) x *= sv;
    return {std::move(out_u), std::move(out_v)};
}

void center_loras(Matrix &base, std::vector<LinearLoRA> &loras,
                  std::span<const double> cluster_probs, double p_exp, double q_exp) {
    if (loras.empty()) return;
    if (cluster_probs.size() != loras.size())
        throw ShapeError("center_loras: probs length must match cluster count");
    if (std::abs(1.0 / p_exp + 1.0 / q_exp - 1.0) > 1e-12)
        throw std::invalid_argument("center_loras: exponents must satisfy 1/p + 1/q = 1");
    double psum = 0.0;
    for (double p : cluster_probs) {
        if (p < -1e-12) throw std::invalid_argument("center_loras: negative probability");
        psum += p;
    }
    if (std::abs(psum - 1.0) > 1e-9)
        throw std::invalid_argument("center_loras: probabilities must sum to 1");

    const int m = loras.front().u.rows();
    const int n = loras.front().v.rows();
    const int r = loras.front().rank();
    for (const auto &l : loras)
        if (l.u.rows() != m || l.v.rows() != n || l.rank() != r)
            throw ShapeError("center_loras: adaptors must share shape and rank");
    if (base.rows() != m || base.cols() != n)
        throw ShapeError("center_loras: base shape does not match adaptors");

    Matrix mean(m, n);
    std::vector<Matrix> mats;
    mats.reserve(loras.size());
    for (std::size_t c = 0; c < loras.size(); ++c) {
        mats.push_back(materialize(loras[c]));
        mean.add_scaled(mats.back(), cluster_probs[c]);
    }
    base += mean;
    for (std::size_t c = 0; c < loras.size(); ++c) {
        Matrix resid = mats[c];
        resid -= mean;
        SvdResult svd = truncated_svd(resid, r);
        for (int j = 0; j < r; ++j) {
            const double su = std::pow(svd.s[j], 1.0 / p_exp);
            const double sv = std::pow(svd.s[j], 1.0 / q_exp);
            for (int i = 0; i < m; ++i) svd.u(i, j) *= su;
            for (int i = 0; i < n; ++i) svd.v(i, j) *= sv;
        }
        loras[c].u = std::move(svd.u);
        loras[c].v = std::move(svd.v);
    }
}

Matrix batchnora_forward(const Matrix &x, const BatchStats &base_stats,
                         const BatchStats &adaptor_stats, std::span<const double> gamma,
                         std::span<const double> beta, std::span<const double> gamma_i,
                         std::span<const double> beta_i, double eps) {
    const std::size_t d = std::size_t(x.cols());
    if (base_stats.mean.size() != d || base_stats.var.size() != d ||
        adaptor_stats.mean.size() != d || adaptor_stats.var.size() != d ||
        gamma.size() != d || beta.size() != d || gamma_i.size() != d || beta_i.size() != d)
        throw ShapeError("batchnora: parameter lengths must match feature dimension");
    for (std::size_t j = 0; j < d; ++j)
        if (!(base_stats.var[j] > 0.0) || !(adaptor_stats.var[j] > 0.0))
            throw NumericError("batchnora: variances must be positive");

    Matrix out(x.rows(), x.cols());
    for (std::size_t j = 0; j < d; ++j) {
        const double sd = std::sqrt(base_stats.var[j] + eps);
        const double sd_i = std::sqrt(adaptor_stats.var[j] + eps);
        // Reparameterization: scale by the relative deviation, shift by the
        // normalized mean shift (gamma_i gradient-stopped in the shift).
        const double gamma_tilde = (sd_i / sd) * gamma_i[j];
        const double beta_tilde =
            beta_i[j] + (adaptor_stats.mean[j] - base_stats.mean[j]) / sd * gamma_i[j];
        for (int i = 0; i < x.rows(); ++i) {
            const double base_term = (x(i, int(j)) - base_stats.mean[j]) / sd * gamma[j] + beta[j];
            const double adapt_term =
                (x(i, int(j)) - adaptor_stats.mean[j]) / sd_i * gamma_tilde + beta_tilde;
            out(i, int(j)) = base_term + adapt_term;
        }
    }
    return out;
}

}  // namespace floral
