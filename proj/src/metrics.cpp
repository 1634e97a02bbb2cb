#include "floral/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "floral/mixed_model.hpp"

namespace floral {

ClusterProbs cluster_probs(const std::vector<std::vector<double>> &pi, std::span<const int> n) {
    const int k_count = int(pi.size());
    if (k_count == 0 || n.size() != pi.size())
        throw std::invalid_argument("cluster_probs: need one router and sample count per client");
    const int c_count = int(pi.front().size());
    double total = 0.0;
    for (int k = 0; k < k_count; ++k) {
        if (int(pi[std::size_t(k)].size()) != c_count)
            throw ShapeError("cluster_probs: router lengths differ");
        validate_simplex(pi[std::size_t(k)]);
        if (n[std::size_t(k)] < 1)
            throw std::invalid_argument("cluster_probs: sample counts must be >= 1");
        total += double(n[std::size_t(k)]);
    }

    ClusterProbs out;
    out.p_joint = Matrix(k_count, c_count);
    out.p_cluster.assign(std::size_t(c_count), 0.0);
    out.p_client_given_cluster = Matrix(k_count, c_count);
    out.defined.assign(std::size_t(c_count), false);

    for (int k = 0; k < k_count; ++k)
        for (int c = 0; c < c_count; ++c) {
            out.p_joint(k, c) = double(n[std::size_t(k)]) / total * pi[std::size_t(k)][std::size_t(c)];
            out.p_cluster[std::size_t(c)] += out.p_joint(k, c);
        }
    for (int c = 0; c < c_count; ++c) {
        double mass = 0.0;
        for (int k = 0; k < k_count; ++k)
            mass += pi[std::size_t(k)][std::size_t(c)] * double(n[std::size_t(k)]);
        if (mass <= 0.0) continue;  // zero-mass cluster: flagged, column stays zero
        out.defined[std::size_t(c)] = true;
        for (int k = 0; k < k_count; ++k)
            out.p_client_given_cluster(k, c) =
                pi[std::size_t(k)][std::size_t(c)] * double(n[std::size_t(k)]) / mass;
    }
    return out;
}

MismatchReport tv_mismatch(const std::vector<std::vector<double>> &pi_hat,
                           const std::vector<std::vector<double>> &pi_star,
                           std::span<const int> n) {
    if (pi_hat.size() != pi_star.size())
        throw ShapeError("tv_mismatch: client counts differ");
    const ClusterProbs est = cluster_probs(pi_hat, n);
    const ClusterProbs opt = cluster_probs(pi_star, n);
    if (est.p_joint.cols() != opt.p_joint.cols())
        throw ShapeError("tv_mismatch: cluster counts differ");

    const int k_count = est.p_joint.rows();
    const int c_count = est.p_joint.cols();
    MismatchReport rep;
    rep.per_cluster_l1.assign(std::size_t(c_count), 0.0);
    rep.flagged.assign(std::size_t(c_count), false);
    for (int c = 0; c < c_count; ++c) {
        // A collapsed cluster is measured against the zero measure so the
        // metric stays total; it is flagged rather than an error.
        rep.flagged[std::size_t(c)] = !est.defined[std::size_t(c)];
        double l1 = 0.0;
        for (int k = 0; k < k_count; ++k)
            l1 += std::abs(est.p_client_given_cluster(k, c) - opt.p_client_given_cluster(k, c));
        rep.per_cluster_l1[std::size_t(c)] = l1;
    }
    rep.per_client_l1.assign(std::size_t(k_count), 0.0);
    for (int k = 0; k < k_count; ++k) {
        double l1 = 0.0;
        for (int c = 0; c < c_count; ++c)
            l1 += std::abs(pi_star[std::size_t(k)][std::size_t(c)] -
                           pi_hat[std::size_t(k)][std::size_t(c)]);
        rep.per_client_l1[std::size_t(k)] = l1;
    }
    return rep;
}

namespace {

int argmax(std::span<const double> v) {
    return int(std::max_element(v.begin(), v.end()) - v.begin());
}

// O(n^3) Hungarian algorithm (potentials form) for a max-weight assignment.
long long max_assignment(const std::vector<std::vector<long long>> &weight) {
    const int n = int(weight.size());
    long long wmax = 0;
    for (const auto &row : weight)
        for (long long w : row) wmax = std::max(wmax, w);
    // Minimize cost = wmax - weight.
    std::vector<long long> u(std::size_t(n) + 1, 0), v(std::size_t(n) + 1, 0);
    std::vector<int> match(std::size_t(n) + 1, 0), way(std::size_t(n) + 1, 0);
    constexpr long long kInf = (1LL << 62);
    for (int i = 1; i <= n; ++i) {
        match[0] = i;
        int j0 = 0;
        std::vector<long long> minv(std::size_t(n) + 1, kInf);
        std::vector<bool> used(std::size_t(n) + 1, false);
        do {
            used[std::size_t(j0)] = true;
            const int i0 = match[std::size_t(j0)];
            long long delta = kInf;
            int j1 = 0;
            for (int j = 1; j <= n; ++j) {
                if (used[std::size_t(j)]) continue;
                const long long cur = (wmax - weight[std::size_t(i0 - 1)][std::size_t(j - 1)]) -
                                      u[std::size_t(i0)] - v[std::size_t(j)];
                if (cur < minv[std::size_t(j)]) {
                    minv[std::size_t(j)] = cur;
                    way[std::size_t(j)] = j0;
                }
                if (minv[std::size_t(j)] < delta) {
                    delta = minv[std::size_t(j)];
                    j1 = j;
                }
            }
            for (int j = 0; j <= n; ++j) {
                if (used[std::size_t(j)]) {
                    u[std::size_t(match[std::size_t(j)])] += delta;
                    v[std::size_t(j)] -= delta;
                } else {
                    minv[std::size_t(j)] -= delta;
                }
            }
            j0 = j1;
        } while (match[std::size_t(j0)] != 0);
        do {
            const int j1 = way[std::size_t(j0)];
            match[std::size_t(j0)] = match[std::size_t(j1)];
            j0 = j1;
        } while (j0 != 0);
    }
    long long total = 0;
    for (int j = 1; j <= n; ++j)
        if (match[std::size_t(j)] > 0)
            total += weight[std::size_t(match[std::size_t(j)] - 1)][std::size_t(j - 1)];
    return total;
}

}  // namespace

double router_accuracy(const std::vector<std::vector<double>> &pi_hat,
                       const std::vector<std::vector<double>> &pi_star) {
    if (pi_hat.empty() || pi_hat.size() != pi_star.size())
        throw std::invalid_argument("router_accuracy: client counts differ");
    const int c_hat = int(pi_hat.front().size());
    const int c_star = int(pi_star.front().size());
    const int side = std::max(c_hat, c_star);

    // Confusion counts padded to a square; exhaustive assignment over
    // relabelings (cluster counts are small in every experiment).
    std::vector<std::vector<long long>> conf(std::size_t(side),
                                             std::vector<long long>(std::size_t(side), 0));
    for (std::size_t k = 0; k < pi_hat.size(); ++k)
        conf[std::size_t(argmax(pi_hat[k]))][std::size_t(argmax(pi_star[k]))] += 1;

    long long best = 0;
    if (side <= 8) {
        std::vector<int> perm(std::size_t(side), 0);
        std::iota(perm.begin(), perm.end(), 0);
        do {
            long long hits = 0;
            for (int a = 0; a < side; ++a)
                hits += conf[std::size_t(a)][std::size_t(perm[std::size_t(a)])];
            best = std::max(best, hits);
        } while (std::next_permutation(perm.begin(), perm.end()));
    } else {
        best = max_assignment(conf);
    }
    return double(best) / double(pi_hat.size());
}

}  // namespace floral
