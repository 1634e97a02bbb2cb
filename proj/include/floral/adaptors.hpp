#pragma once

#include <span>
#include <utility>
#include <vector>

#include "floral/numerics.hpp"

namespace floral {

// Relative parameter budget per adaptor, e.g. 0.01 for a 1% size increase.
struct BudgetSpec {
    double rho = 0.1;
};

// Largest rank with (m+n)*r <= rho*m*n, clamped to a minimum of 1 so small
// layers still get an adaptor.
int linear_rank_for_budget(int m, int n, const BudgetSpec &spec);

// Additive low-rank term L = U V^T over an m x n base weight. Fresh adaptors
// have V = 0, so the merged layer starts exactly at the base.
struct LinearLoRA {
    Matrix u;  // m x r
    Matrix v;  // n x r

    int rank() const { return u.cols(); }
    std::size_t param_count() const { return u.size() + v.size(); }
};

// u ~ normal with std 1/sqrt(fan_in) (the base layer's init), v = 0.
LinearLoRA make_linear_lora(int m, int n, int r, RngStream &rng);
Matrix materialize(const LinearLoRA &lora);

enum class ConvVariant { channel, filter, channel_filter, reshaped_linear };

struct ConvShape {
    int c_out = 1, c_in = 1, k1 = 1, k2 = 1;
};

// Rank assignment for a conv adaptor under a budget. For channel_filter the
// kernel split is chosen adaptively: the factor touching the smaller channel
// count carries the larger kernel dimension, which minimizes the cost.
struct ConvRankPlan {
    int r_c = 1;
    int r_f = 1;
    bool v_carries_k1 = true;  // V holds (k1,1) filters, U holds (1,k2); else swapped
};

ConvRankPlan conv_rank_for_budget(const ConvShape &shape, const BudgetSpec &spec,
                                  ConvVariant variant);

// Two-stage convolution adaptor; the merged kernel is zero at construction.
struct ConvLoRA {
    ConvVariant variant = ConvVariant::channel;
    ConvShape shape;
    Tensor4 u;
    Tensor4 v;
    int r_c = 1;
    int r_f = 1;

    std::size_t param_count() const { return u.size() + v.size(); }
};

ConvLoRA make_conv_lora(const ConvShape &shape, ConvVariant variant, const ConvRankPlan &plan,
                        RngStream &rng);

// Single kernel L with conv(L, x) == conv(U, conv(V, x)) under valid padding.
Tensor4 merge_conv_lora(const ConvLoRA &adaptor);

// Additive bias term, zero at construction.
struct BiasAdaptor {
    std::vector<double> delta;

    explicit BiasAdaptor(int n = 0) : delta(std::size_t(n), 0.0) {}
};

// Additive scale/shift for normalization layers, zero at construction.
struct NormAdaptor {
    std::vector<double> gamma_delta;
    std::vector<double> beta_delta;

    explicit NormAdaptor(int n = 0) : gamma_delta(std::size_t(n), 0.0), beta_delta(std::size_t(n), 0.0) {}
};

// Scaled-GD preconditioning for linear LoRA factor gradients:
//   G_U <- G_U (V^T V + eps I)^-1,   G_V <- G_V (U^T U + eps I)^-1.
// As eps -> 0 the induced update on U V^T matches P_U G + G P_V, the dynamics
// of the base weight restricted to the factor column spaces.
std::pair<Matrix, Matrix> precondition_lora_grads(const Matrix &u, const Matrix &v,
                                                  const Matrix &g_u, const Matrix &g_v,
                                                  double eps);

// Convolution factors skip the inverse and divide by the Frobenius norm of the
// Gram matrix over the contracted (mid-channel) index instead.
std::pair<Tensor4, Tensor4> precondition_conv_grads(const Tensor4 &u, const Tensor4 &v,
                                                    const Tensor4 &g_u, const Tensor4 &g_v,
                                                    double eps);

// Absorb the probability-weighted mean adaptor into the base and re-factor
// each residual U_c V_c^T - E[U V^T] by a rank-r truncated SVD, splitting the
// singular values as U <- U S^(1/p), V <- V S^(1/q) with 1/p + 1/q = 1.
// Any mixture's merged weight changes only by the rank-truncation error.
void center_loras(Matrix &base, std::vector<LinearLoRA> &loras,
                  std::span<const double> cluster_probs, double p_exp = 2.0,
                  double q_exp = 2.0);

struct BatchStats {
    std::vector<double> mean;
    std::vector<double> var;
};

// Batch-norm adaptor forward, evaluated as the reparameterized two-term form
//   BN(x; gamma, beta)  +  BN_i(x; s_i * gamma_i, beta_i + m_i * gamma_i)
// where BN_i normalizes with the adaptor statistics. With eps = 0 this equals
// normalize(x; base_stats) * (gamma + gamma_i) + (beta + beta_i) exactly, so
// the adaptor is invariant to its local batch statistics. gamma_i enters the
// shift as a constant (gradient-stopped); forward values are unaffected.
Matrix batchnora_forward(const Matrix &x, const BatchStats &base_stats,
                         const BatchStats &adaptor_stats, std::span<const double> gamma,
                         std::span<const double> beta, std::span<const double> gamma_i,
                         std::span<const double> beta_i, double eps);

}  // namespace floral
