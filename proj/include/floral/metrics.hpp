#pragma once

#include <span>
#include <vector>

#include "floral/numerics.hpp"

namespace floral {

// Probability model induced by routers and sample counts:
//   p(k,c) = (N^k / N) pi^k_c,   p(c) = sum_k p(k,c),
//   p(k|c) = pi^k_c N^k / sum_k' pi^k'_c N^k'.
// A cluster with zero mass gets an all-zero p(k|c) column, flagged.
struct ClusterProbs {
    Matrix p_joint;        // K x C
    std::vector<double> p_cluster;
    Matrix p_client_given_cluster;  // K x C, column c valid iff defined[c]
    std::vector<bool> defined;
};

ClusterProbs cluster_probs(const std::vector<std::vector<double>> &pi, std::span<const int> n);

// Aggregation mismatch: per-cluster total variation between estimated and true
// client-given-cluster distributions, and per-client L1 router error.
struct MismatchReport {
    std::vector<double> per_cluster_l1;  // ||delta_c||_1 in [0, 2]
    std::vector<double> per_client_l1;   // ||delta^k||_1 in [0, 2]
    std::vector<bool> flagged;           // cluster had zero estimated mass
};

MismatchReport tv_mismatch(const std::vector<std::vector<double>> &pi_hat,
                           const std::vector<std::vector<double>> &pi_star,
                           std::span<const int> n);

// Fraction of clients whose argmax cluster matches, maximized over cluster
// relabelings (exhaustive assignment; cluster counts may differ).
double router_accuracy(const std::vector<std::vector<double>> &pi_hat,
                       const std::vector<std::vector<double>> &pi_star);

// Stored-parameter audit relative to a single base model.
struct ParamAudit {
    long long base_params = 0;    // one plain copy of the model
    long long added_params = 0;   // extra trainable entries beyond the base
    double ratio = 0.0;           // added / base
    long long budget_params = 0;  // C * rho * (adapted weight entries), floral only
    long long clamp_excess = 0;   // overshoot from the min-rank-1 clamp
    long long bias_params = 0;    // per-cluster bias-delta entries
};

}  // namespace floral
