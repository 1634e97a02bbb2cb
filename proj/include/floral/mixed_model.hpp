#pragma once

#include <optional>
#include <span>
#include <vector>

#include "floral/adaptors.hpp"
#include "floral/numerics.hpp"

namespace floral {

enum class Family { linear, mlp2 };

enum class RouterMode { softmax_sgd, exp_weights };

// Numerically shifted softmax; entries sum to 1 and are shift-invariant in
// the logits up to rounding.
std::vector<double> softmax(std::span<const double> logits);

// Throws std::invalid_argument unless pi is on the simplex (within 1e-9).
void validate_simplex(std::span<const double> pi);

// Per-client mixture state: logits theta in R^C with pi = Softmax(theta).
// Logits start at zero (uniform mixture). A frozen router returns an exact
// one-hot and ignores updates (optimal-routing baselines).
class Router {
public:
    Router() = default;
    Router(int clusters, RouterMode mode);

    int clusters() const { return int(theta_.size()); }
    RouterMode mode() const { return mode_; }
    bool frozen() const { return frozen_.has_value(); }
    std::span<const double> theta() const { return theta_; }

    std::vector<double> pi() const;
    void reset();                       // theta = 0 (stateless clients)
    void freeze_onehot(int cluster);

    // softmax_sgd: theta -= eta * grad.
    void step_logits(std::span<const double> grad, double eta);
    // exp_weights: theta_c -= eta * loss_c, i.e. pi <- pi ∘ exp(-eta loss).
    void step_exp_weights(std::span<const double> per_cluster_losses, double eta);

    void set_theta(std::vector<double> theta);

private:
    std::vector<double> theta_;
    RouterMode mode_ = RouterMode::softmax_sgd;
    std::optional<int> frozen_;
};

// One fresh-pi step of the multiplicative-weights update,
//   pi_new ∝ pi_prev ∘ exp(-eta * loss),
// max-shifted before exponentiation so finite inputs never overflow.
// Stateless restart passes a uniform pi_prev.
std::vector<double> router_step_exp_weights(std::span<const double> pi_prev,
                                            std::span<const double> per_cluster_losses,
                                            double eta);

// Gradient of f(sum_c pi_c w_c) in the logits:
//   d f / d theta_c = pi_c * (<grad, w_c> - sum_c' pi_c' <grad, w_c'>),
// taking the per-cluster inner products <grad f(w_hat), w_c> as input.
std::vector<double> router_logit_grad(std::span<const double> pi,
                                      std::span<const double> cluster_inner);

enum class AdaptorKind { none, lora, dense };

// A dense layer with an optional per-cluster additive adaptor. `dense` holds
// full per-cluster matrices (the Ensemble baseline mixes whole copies, with
// the base frozen at zero); `lora` holds low-rank factors.
struct DenseLayer {
    Matrix weight;  // out x in
    bool train_base = true;
    AdaptorKind kind = AdaptorKind::none;
    std::vector<LinearLoRA> loras;
    std::vector<Matrix> dense;
    std::optional<std::vector<double>> bias;
    std::vector<std::vector<double>> bias_deltas;  // per cluster, when bias is set

    int out_dim() const { return weight.rows(); }
    int in_dim() const { return weight.cols(); }
    int cluster_count() const;
    Matrix cluster_delta(int c) const;  // materialized adaptor term for cluster c
    Matrix merged_weight(std::span<const double> pi) const;
    std::vector<double> merged_bias(std::span<const double> pi) const;
};

// The merged-weights (FML) model: one forward pass on w_hat = sum_c pi_c w_c.
// linear:  Y = X W_eff^T (+ bias);  mlp2:  Y = relu(X W1_eff^T (+ b1)) Phi^T (+ b2).
struct MixedModel {
    Family family = Family::linear;
    int clusters = 1;
    DenseLayer l1;
    std::optional<DenseLayer> l2;  // Phi for mlp2

    int input_dim() const { return l1.in_dim(); }
    int output_dim() const { return l2 ? l2->out_dim() : l1.out_dim(); }
};

struct LayerGrads {
    Matrix base;
    std::vector<LinearLoRA> loras;  // factor grads in .u/.v slots
    std::vector<Matrix> dense;
    std::vector<double> bias;
    std::vector<std::vector<double>> bias_deltas;
};

// Shapes mirror the model exactly; theta holds the router-logit gradient.
struct GradientBundle {
    double loss = 0.0;
    LayerGrads g1;
    std::optional<LayerGrads> g2;
    std::vector<double> theta;
};

struct LossOptions {
    bool precondition = false;
    double precondition_eps = 1e-8;
};

Matrix merge_weights(const DenseLayer &layer, std::span<const double> pi);
Matrix forward(const MixedModel &model, std::span<const double> pi, const Matrix &x);
double mse(const Matrix &pred, const Matrix &y);

// Mean-over-samples-and-outputs MSE with analytic gradients for the base,
// every adaptor factor, biases, and the router logits.
GradientBundle loss_and_grad(const MixedModel &model, std::span<const double> pi,
                             const Matrix &x, const Matrix &y, const LossOptions &opts = {});

// Mixture of losses sum_c pi_c f(w_c), evaluated with C one-hot forwards.
// For convex families this upper-bounds the merged (FML) loss.
double mfl_objective(const MixedModel &model, std::span<const double> pi, const Matrix &x,
                     const Matrix &y);

// f(w_c) for each cluster (one-hot merges); feeds the exp-weights router.
std::vector<double> per_cluster_losses(const MixedModel &model, const Matrix &x,
                                       const Matrix &y);

// In-place SGD step on all trainable weights; the router is stepped separately.
void sgd_step(MixedModel &model, const GradientBundle &g, double eta);

}  // namespace floral
