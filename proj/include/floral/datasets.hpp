#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "floral/mixed_model.hpp"
#include "floral/numerics.hpp"

namespace floral {

// Invalid task/run parameters and malformed configs or files.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ClientSplit {
    Matrix x_train, y_train;
    Matrix x_test, y_test;

    int train_count() const { return x_train.rows(); }
};

// Clustered regression task with ground-truth low-rank structure. Client k
// belongs to cluster k mod C (diagonal assignment); targets are exactly
// realizable by the ground-truth model.
struct SyntheticTask {
    Family family = Family::linear;
    int clients = 0;         // K
    int clusters = 0;        // C
    int d_x = 0, d_y = 0, d_h = 0;
    int r_true = 0;
    int width_mult = 1;      // trained mlp2 hidden width = width_mult * d_h
    double alpha = 0.0;      // linear family only
    std::uint64_t seed = 0;

    Matrix w_true;
    Matrix phi_true;                 // mlp2 only
    std::vector<Matrix> u_true, v_true;
    std::vector<ClientSplit> splits;

    int cluster_of(int k) const { return k % clusters; }
    int model_hidden() const { return width_mult * d_h; }
    std::vector<double> pi_star(int k) const;
    std::vector<int> train_counts() const;
};

inline constexpr int kTestSamplesPerClient = 256;

// y = (W + alpha * U_c V_c^T) x with x ~ N(0, I); N^k = round(0.25 * d_x * d_y).
SyntheticTask gen_linear_task(int clients, int clusters, int d_x, int d_y, int r_true,
                              double alpha, std::uint64_t seed);

// y = Phi * relu((W + U_c V_c^T) x); N^k = round(0.5 * d_h * d_x); the trained
// model is wider than the generator by width_mult.
SyntheticTask gen_mlp_task(int clients, int clusters, int d_x, int d_h, int d_y, int r_true,
                           int width_mult, std::uint64_t seed);

// Fills per-client data for a task whose ground-truth parameters are already
// set; exposed so constructed ground truths can be sampled directly.
void sample_client_data(SyntheticTask &task, int train_per_client, int test_per_client);

// Truncates each client's training set to ceil(keep_fraction * N^k), at least
// one sample; test sets are untouched.
SyntheticTask reduce_data(const SyntheticTask &task, double keep_fraction);

// Versioned little-endian binary archive for exact replay.
void save_task(const SyntheticTask &task, const std::string &path);
SyntheticTask load_task(const std::string &path);

}  // namespace floral
