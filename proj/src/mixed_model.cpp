#include "floral/mixed_model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace floral {

std::vector<double> softmax(std::span<const double> logits) {
    if (logits.empty()) throw std::invalid_argument("softmax: empty logits");
    std::vector<double> out(logits.begin(), logits.end());
    const double mx = *std::max_element(out.begin(), out.end());
    double z = 0.0;
    for (double &x : out) {
        x = std::exp(x - mx);
        z += x;
    }
    for (double &x : out) x /= z;
    return out;
}

void validate_simplex(std::span<const double> pi) {
    if (pi.empty()) throw std::invalid_argument("simplex: empty mixture");
    double sum = 0.0;
    for (double p : pi) {
        if (!(p >= -1e-12)) throw std::invalid_argument("simplex: negative entry");
        sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw std::invalid_argument("simplex: entries must sum to 1");
}

Router::Router(int clusters, RouterMode mode) : theta_(std::size_t(clusters), 0.0), mode_(mode) {
    if (clusters < 1) throw std::invalid_argument("router: cluster count must be >= 1");
}

std::vector<double> Router::pi() const {
    if (frozen_) {
        std::vector<double> p(theta_.size(), 0.0);
        p[std::size_t(*frozen_)] = 1.0;
        return p;
    }
    return softmax(theta_);
}

void Router::reset() {
    if (frozen_) return;
    std::fill(theta_.begin(), theta_.end(), 0.0);
}

void Router::freeze_onehot(int cluster) {
    if (cluster < 0 || cluster >= clusters())
        throw std::invalid_argument("router: frozen cluster out of range");
    frozen_ = cluster;
}

void Router::step_logits(std::span<const double> grad, double eta) {
    if (frozen_) return;
    if (grad.size() != theta_.size()) throw ShapeError("router: gradient length mismatch");
    for (std::size_t c = 0; c < theta_.size(); ++c) theta_[c] -= eta * grad[c];
}

void Router::step_exp_weights(std::span<const double> losses, double eta) {
    if (frozen_) return;
    if (losses.size() != theta_.size()) throw ShapeError("router: loss vector length mismatch");
    for (std::size_t c = 0; c < theta_.size(); ++c) theta_[c] -= eta * losses[c];
}

void Router::set_theta(std::vector<double> theta) {
    if (frozen_) return;
    if (theta.size() != theta_.size()) throw ShapeError("router: theta length mismatch");
    theta_ = std::move(theta);
}

std::vector<double> router_step_exp_weights(std::span<const double> pi_prev,
                                            std::span<const double> losses, double eta) {
    validate_simplex(pi_prev);
    if (losses.size() != pi_prev.size())
        throw ShapeError("exp_weights: loss vector length mismatch");
    if (!(eta > 0.0)) throw std::invalid_argument("exp_weights: eta must be positive");
    // Work in log space and shift by the max so the normalizer never
    // underflows to zero for finite inputs.
    std::vector<double> logw(pi_prev.size());
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < pi_prev.size(); ++c) {
        if (!std::isfinite(losses[c])) throw NumericError("exp_weights: non-finite loss");
        logw[c] = (pi_prev[c] > 0.0 ? std::log(pi_prev[c]) : -std::numeric_limits<double>::infinity()) -
                  eta * losses[c];
        mx = std::max(mx, logw[c]);
    }
    std::vector<double> out(pi_prev.size());
    double z = 0.0;
    for (std::size_t c = 0; c < out.size(); ++c) {
        out[c] = std::exp(logw[c] - mx);
        z += out[c];
    }
    for (double &p : out) p /= z;
    return out;
}

std::vector<double> router_logit_grad(std::span<const double> pi,
                                      std::span<const double> cluster_inner) {
    if (pi.size() != cluster_inner.size())
        throw ShapeError("router_logit_grad: length mismatch");
    double mixed = 0.0;
    for (std::size_t c = 0; c < pi.size(); ++c) mixed += pi[c] * cluster_inner[c];
    std::vector<double> g(pi.size());
    for (std::size_t c = 0; c < pi.size(); ++c) g[c] = pi[c] * (cluster_inner[c] - mixed);
    return g;
}

int DenseLayer::cluster_count() const {
    switch (kind) {
        case AdaptorKind::lora: return int(loras.size());
        case AdaptorKind::dense: return int(dense.size());
        case AdaptorKind::none: return 0;
    }
    return 0;
}

Matrix DenseLayer::cluster_delta(int c) const {
    switch (kind) {
        case AdaptorKind::lora: return materialize(loras[std::size_t(c)]);
        case AdaptorKind::dense: return dense[std::size_t(c)];
        case AdaptorKind::none: break;
    }
    throw ShapeError("cluster_delta: layer has no adaptors");
}

Matrix DenseLayer::merged_weight(std::span<const double> pi) const {
    if (kind == AdaptorKind::none) return weight;
    Matrix w = weight;
    for (int c = 0; c < cluster_count(); ++c) {
        if (pi[std::size_t(c)] == 0.0) continue;
        w.add_scaled(cluster_delta(c), pi[std::size_t(c)]);
    }
    return w;
}

std::vector<double> DenseLayer::merged_bias(std::span<const double> pi) const {
    std::vector<double> b = *bias;
    for (std::size_t c = 0; c < bias_deltas.size(); ++c) {
        if (pi[c] == 0.0) continue;
        for (std::size_t i = 0; i < b.size(); ++i) b[i] += pi[c] * bias_deltas[c][i];
    }
    return b;
}

Matrix merge_weights(const DenseLayer &layer, std::span<const double> pi) {
    validate_simplex(pi);
    const int cc = layer.cluster_count();
    if (cc > 0 && int(pi.size()) != cc)
        throw std::invalid_argument("merge_weights: mixture length must match cluster count");
    return layer.merged_weight(pi);
}

namespace {

void check_mixture(const MixedModel &model, std::span<const double> pi) {
    validate_simplex(pi);
    if (int(pi.size()) != model.clusters)
        throw std::invalid_argument("mixture length must match model cluster count");
}

Matrix affine(const Matrix &x, const Matrix &w, const std::vector<double> *b) {
    Matrix out = matmul_nt(x, w);
    if (b) {
        for (int i = 0; i < out.rows(); ++i)
            for (int j = 0; j < out.cols(); ++j) out(i, j) += (*b)[std::size_t(j)];
    }
    return out;
}

}  // namespace

Matrix forward(const MixedModel &model, std::span<const double> pi, const Matrix &x) {
    check_mixture(model, pi);
    if (x.cols() != model.input_dim()) throw ShapeError("forward: input dimension mismatch");
    const Matrix w1 = model.l1.merged_weight(pi);
    std::vector<double> b1;
    if (model.l1.bias) b1 = model.l1.merged_bias(pi);
    Matrix h = affine(x, w1, model.l1.bias ? &b1 : nullptr);
    if (model.family == Family::linear) return h;

    h = relu(h);
    const Matrix w2 = model.l2->merged_weight(pi);
    std::vector<double> b2;
    if (model.l2->bias) b2 = model.l2->merged_bias(pi);
    return affine(h, w2, model.l2->bias ? &b2 : nullptr);
}

double mse(const Matrix &pred, const Matrix &y) {
    if (!pred.same_shape(y)) throw ShapeError("mse: shape mismatch");
    if (pred.size() == 0) throw std::invalid_argument("mse: empty matrices");
    double s = 0.0;
    auto dp = pred.data(), dy = y.data();
    for (std::size_t i = 0; i < dp.size(); ++i) {
        const double d = dp[i] - dy[i];
        s += d * d;
    }
    return s / double(dp.size());
}

namespace {

LayerGrads grads_like(const DenseLayer &layer) {
    LayerGrads g;
    g.base = Matrix(layer.out_dim(), layer.in_dim());
    if (layer.kind == AdaptorKind::lora)
        for (const auto &l : layer.loras)
            g.loras.push_back({Matrix(l.u.rows(), l.u.cols()), Matrix(l.v.rows(), l.v.cols())});
    if (layer.kind == AdaptorKind::dense)
        for (const auto &d : layer.dense) g.dense.emplace_back(d.rows(), d.cols());
    if (layer.bias) g.bias.assign(layer.bias->size(), 0.0);
    for (const auto &bd : layer.bias_deltas) g.bias_deltas.emplace_back(bd.size(), 0.0);
    return g;
}

// Distribute the merged-weight gradient g_w onto base and per-cluster pieces,
// and accumulate the per-cluster inner products <g, w_c> used by the router.
void backprop_layer(const DenseLayer &layer, std::span<const double> pi, const Matrix &g_w,
                    const std::vector<double> &g_b, LayerGrads &out,
                    std::vector<double> &cluster_inner, const LossOptions &opts) {
    if (layer.train_base) out.base = g_w;
    if (layer.bias) out.bias = g_b;
    for (int c = 0; c < layer.cluster_count(); ++c) {
        const double w = pi[std::size_t(c)];
        if (layer.kind == AdaptorKind::lora) {
            const LinearLoRA &l = layer.loras[std::size_t(c)];
            Matrix gu = matmul(g_w, l.v);       // G V
            Matrix gv = matmul_tn(g_w, l.u);    // G^T U
            gu *= w;
            gv *= w;
            if (opts.precondition) {
                auto [pu, pv] = precondition_lora_grads(l.u, l.v, gu, gv, opts.precondition_eps);
                gu = std::move(pu);
                gv = std::move(pv);
            }
            out.loras[std::size_t(c)].u = std::move(gu);
            out.loras[std::size_t(c)].v = std::move(gv);
            cluster_inner[std::size_t(c)] += dot(g_w, materialize(l));
        } else if (layer.kind == AdaptorKind::dense) {
            Matrix gd = g_w;
            gd *= w;
            out.dense[std::size_t(c)] = std::move(gd);
            cluster_inner[std::size_t(c)] += dot(g_w, layer.dense[std::size_t(c)]);
        }
    }
    for (std::size_t c = 0; c < layer.bias_deltas.size(); ++c) {
        for (std::size_t i = 0; i < g_b.size(); ++i) {
            out.bias_deltas[c][i] = pi[c] * g_b[i];
            cluster_inner[c] += g_b[i] * layer.bias_deltas[c][i];
        }
    }
}

std::vector<double> column_sums(const Matrix &m) {
    std::vector<double> s(std::size_t(m.cols()), 0.0);
    for (int i = 0; i < m.rows(); ++i)
        for (int j = 0; j < m.cols(); ++j) s[std::size_t(j)] += m(i, j);
    return s;
}

}  // namespace

GradientBundle loss_and_grad(const MixedModel &model, std::span<const double> pi, const Matrix &x,
                             const Matrix &y, const LossOptions &opts) {
    check_mixture(model, pi);
    if (x.rows() != y.rows()) throw ShapeError("loss: X and Y row counts differ");
    if (x.rows() == 0) throw std::invalid_argument("loss: empty batch");
    if (x.cols() != model.input_dim() || y.cols() != model.output_dim())
        throw ShapeError("loss: data dimensions do not match model");

    GradientBundle g;
    g.g1 = grads_like(model.l1);
    if (model.l2) g.g2 = grads_like(*model.l2);
    std::vector<double> cluster_inner(std::size_t(model.clusters), 0.0);

    const Matrix w1 = model.l1.merged_weight(pi);
    std::vector<double> b1;
    if (model.l1.bias) b1 = model.l1.merged_bias(pi);
    const Matrix pre1 = affine(x, w1, model.l1.bias ? &b1 : nullptr);

    if (model.family == Family::linear) {
        Matrix resid = pre1;
        resid -= y;
        g.loss = dot(resid, resid) / double(resid.size());
        resid *= 2.0 / double(resid.size());
        const Matrix g_w1 = matmul_tn(resid, x);
        backprop_layer(model.l1, pi, g_w1, column_sums(resid), g.g1, cluster_inner, opts);
    } else {
        const Matrix h = relu(pre1);
        const Matrix w2 = model.l2->merged_weight(pi);
        std::vector<double> b2;
        if (model.l2->bias) b2 = model.l2->merged_bias(pi);
        Matrix resid = affine(h, w2, model.l2->bias ? &b2 : nullptr);
        resid -= y;
        g.loss = dot(resid, resid) / double(resid.size());
        resid *= 2.0 / double(resid.size());

        const Matrix g_w2 = matmul_tn(resid, h);
        backprop_layer(*model.l2, pi, g_w2, column_sums(resid), *g.g2, cluster_inner, opts);

        Matrix g_h = matmul(resid, w2);
        for (int i = 0; i < g_h.rows(); ++i)
            for (int j = 0; j < g_h.cols(); ++j)
                if (pre1(i, j) <= 0.0) g_h(i, j) = 0.0;
        const Matrix g_w1 = matmul_tn(g_h, x);
        backprop_layer(model.l1, pi, g_w1, column_sums(g_h), g.g1, cluster_inner, opts);
    }

    g.theta = router_logit_grad(pi, cluster_inner);
    return g;
}

std::vector<double> per_cluster_losses(const MixedModel &model, const Matrix &x, const Matrix &y) {
    std::vector<double> losses(std::size_t(model.clusters));
    std::vector<double> onehot(std::size_t(model.clusters), 0.0);
    for (int c = 0; c < model.clusters; ++c) {
        onehot[std::size_t(c)] = 1.0;
        losses[std::size_t(c)] = mse(forward(model, onehot, x), y);
        onehot[std::size_t(c)] = 0.0;
    }
    return losses;
}

double mfl_objective(const MixedModel &model, std::span<const double> pi, const Matrix &x,
                     const Matrix &y) {
    check_mixture(model, pi);
    const std::vector<double> losses = per_cluster_losses(model, x, y);
    double obj = 0.0;
    for (std::size_t c = 0; c < losses.size(); ++c) obj += pi[c] * losses[c];
    return obj;
}

namespace {

void step_layer(DenseLayer &layer, const LayerGrads &g, double eta) {
    if (layer.train_base) layer.weight.add_scaled(g.base, -eta);
    if (layer.kind == AdaptorKind::lora)
        for (std::size_t c = 0; c < layer.loras.size(); ++c) {
            layer.loras[c].u.add_scaled(g.loras[c].u, -eta);
            layer.loras[c].v.add_scaled(g.loras[c].v, -eta);
        }
    if (layer.kind == AdaptorKind::dense)
        for (std::size_t c = 0; c < layer.dense.size(); ++c)
            layer.dense[c].add_scaled(g.dense[c], -eta);
    if (layer.bias)
        for (std::size_t i = 0; i < layer.bias->size(); ++i) (*layer.bias)[i] -= eta * g.bias[i];
    for (std::size_t c = 0; c < layer.bias_deltas.size(); ++c)
        for (std::size_t i = 0; i < layer.bias_deltas[c].size(); ++i)
            layer.bias_deltas[c][i] -= eta * g.bias_deltas[c][i];
}

}  // namespace

void sgd_step(MixedModel &model, const GradientBundle &g, double eta) {
    step_layer(model.l1, g.g1, eta);
    if (model.l2) step_layer(*model.l2, *g.g2, eta);
}

}  // namespace floral
