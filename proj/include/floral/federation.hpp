#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "floral/datasets.hpp"
#include "floral/metrics.hpp"
#include "floral/mixed_model.hpp"

namespace floral {

// A client whose loss went non-finite; aborts the run loudly.
struct DivergedError : std::runtime_error {
    int round;
    int client;
    DivergedError(int round_, int client_)
        : std::runtime_error("client " + std::to_string(client_) + " diverged in round " +
                             std::to_string(round_)),
          round(round_), client(client_) {}
};

struct MethodSpec {
    enum class Kind { floral, fedavg, ensemble, local_adaptor };

    Kind kind = Kind::floral;
    double rho = 0.25;            // floral / local_adaptor budget
    int clusters = 2;             // floral / ensemble mixture size
    bool opt_router = false;      // freeze routers to the diagonal ground truth
    bool adaptors_enabled = true; // floral only; off recovers FedAvg exactly

    static MethodSpec parse(const std::string &name, double rho, int clusters,
                            bool adaptors_enabled = true);
    std::string name() const;
    bool has_router() const { return kind == Kind::floral || kind == Kind::ensemble; }
    int model_clusters() const;
};

struct LrSchedule {
    enum class Kind { constant, inv_decay };
    Kind kind = Kind::constant;
    double s = 100.0;  // eta_t = eta * s / (t + s)

    double at(double eta, int round) const {
        return kind == Kind::constant ? eta : eta * s / (double(round) + s);
    }
};

struct RunOptions {
    int rounds = 500;
    int local_steps = 10;
    double eta = 0.5;
    LrSchedule schedule;
    double cohort_fraction = 1.0;
    std::uint64_t seed = 1;
    RouterMode router_mode = RouterMode::softmax_sgd;
    bool stateless_router = false;
    bool precondition = false;
    double precondition_eps = 1e-8;
    int centering_every = 0;  // 0 = off
    int workers = 1;
};

struct ClientState {
    int id = 0;
    int n_train = 0;
    Router router;
    // Local-Adaptor baseline: the adaptor lives here and never reaches the server.
    std::vector<LinearLoRA> local_loras;
};

struct ServerState {
    MixedModel model;
    int round = 0;
};

struct RoundReport {
    int round = 0;  // 1-based, after aggregation
    std::vector<int> cohort;
    std::vector<double> client_train_loss;  // aligned with cohort
    double mean_train_loss = 0.0;
    double test_mse = 0.0;  // mean per-client test MSE, each with its own router
    std::vector<std::vector<double>> routers;  // all K mixtures after the round
    std::vector<double> tv_per_cluster;  // empty when model C != task C
    double router_accuracy = 0.0;
    double wall_time_sec = 0.0;  // informational; never serialized
};

// Uniform sample without replacement of size round(p*K), at least 1, returned
// in ascending id order. Full participation consumes no randomness.
std::vector<int> sample_cohort(int clients, double fraction, RngStream &rng);

// Builds the server-side model for a method on a task's dimensions.
MixedModel build_model(const SyntheticTask &task, const MethodSpec &method);

// Per-client initial state (router mode, optimal-routing freeze, local adaptors).
std::vector<ClientState> build_clients(const SyntheticTask &task, const MethodSpec &method,
                                       const RunOptions &opts);

struct LocalResult {
    MixedModel model;
    std::vector<double> theta;
    double final_loss = 0.0;
};

// H simultaneous SGD steps on weights and router over the client's fixed
// training sample. Stateless clients reset their logits first.
LocalResult local_train(const ClientState &client, MixedModel model, const ClientSplit &data,
                        int steps, double eta, const RunOptions &opts, int round);

struct ClientReturn {
    int id = 0;
    int n_train = 0;
    std::vector<double> pi;  // post-training mixture
    const MixedModel *model = nullptr;
};

// Synchronization step: the base is the N-weighted mean, each adaptor is the
// pi*N-weighted mean over the cohort; a cluster with zero mass keeps its
// previous adaptor. A cohort that returns the broadcast weights unchanged
// leaves the server state exactly unchanged, and a one-hot handover is exact.
void aggregate(ServerState &server, const std::vector<ClientReturn> &returns);

// Freezes every client's router to the diagonal ground-truth assignment.
void optimal_router_override(const SyntheticTask &task, const MethodSpec &method,
                             std::vector<ClientState> &clients);

ParamAudit param_audit(const SyntheticTask &task, const MethodSpec &method);

// The full protocol: T rounds of sample / local-train / aggregate / evaluate.
// Deterministic given the options; clients may train on `workers` threads.
std::vector<RoundReport> run_experiment(const SyntheticTask &task, const MethodSpec &method,
                                        const RunOptions &opts);

}  // namespace floral
