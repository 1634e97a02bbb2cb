#include "floral/federation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <exception>
#include <thread>

namespace floral {

namespace {

// Stream ids for model/run randomness; client data uses 1000+k in datasets.cpp.
constexpr std::uint64_t kStreamModelInit = 2;
constexpr std::uint64_t kStreamCohort = 3;
constexpr std::uint64_t kStreamLocalInit = 500000;

}  // namespace

MethodSpec MethodSpec::parse(const std::string &name, double rho, int clusters,
                             bool adaptors_enabled) {
    MethodSpec m;
    m.rho = rho;
    m.clusters = clusters;
    m.adaptors_enabled = adaptors_enabled;
    if (name == "floral") {
        m.kind = Kind::floral;
    } else if (name == "floral_opt_router") {
        m.kind = Kind::floral;
        m.opt_router = true;
    } else if (name == "fedavg") {
        m.kind = Kind::fedavg;
    } else if (name == "ensemble") {
        m.kind = Kind::ensemble;
    } else if (name == "ensemble_opt_router") {
        m.kind = Kind::ensemble;
        m.opt_router = true;
    } else if (name == "local_adaptor") {
        m.kind = Kind::local_adaptor;
    } else {
        throw ConfigError("unknown method: " + name);
    }
    return m;
}

std::string MethodSpec::name() const {
    switch (kind) {
        case Kind::floral: return opt_router ? "floral_opt_router" : "floral";
        case Kind::fedavg: return "fedavg";
        case Kind::ensemble: return opt_router ? "ensemble_opt_router" : "ensemble";
        case Kind::local_adaptor: return "local_adaptor";
    }
    return "?";
}

int MethodSpec::model_clusters() const {
    switch (kind) {
        case Kind::floral: return adaptors_enabled ? clusters : 1;
        case Kind::ensemble: return clusters;
        case Kind::fedavg:
        case Kind::local_adaptor: return 1;
    }
    return 1;
}

std::vector<int> sample_cohort(int clients, double fraction, RngStream &rng) {
    if (!(fraction > 0.0) || fraction > 1.0)
        throw ConfigError("cohort fraction must be in (0, 1]");
    const int want = std::max(1, int(std::llround(fraction * double(clients))));
    std::vector<int> ids(std::size_t(clients), 0);
    for (int k = 0; k < clients; ++k) ids[std::size_t(k)] = k;
    if (want >= clients) return ids;
    // Partial Fisher-Yates, then ascending order for schedule independence.
    for (int i = 0; i < want; ++i)
        std::swap(ids[std::size_t(i)], ids[std::size_t(i + rng.uniform_int(clients - i))]);
    ids.resize(std::size_t(want));
    std::sort(ids.begin(), ids.end());
    return ids;
}

namespace {

Matrix init_weight(int rows, int cols, RngStream &rng) {
    Matrix w(rows, cols);
    const double stddev = 1.0 / std::sqrt(double(cols));
    for (double &x : w.data()) x = stddev * rng.normal();
    return w;
}

struct LayerDims {
    int out = 0, in = 0;
    bool adapted = true;  // floral/local_adaptor attach low-rank terms here
};

std::vector<LayerDims> layer_dims(const SyntheticTask &task) {
    if (task.family == Family::linear) return {{task.d_y, task.d_x, true}};
    // The trained mlp2 mirrors the generator: adaptors on the first layer,
    // the readout Phi is shared.
    return {{task.model_hidden(), task.d_x, true}, {task.d_y, task.model_hidden(), false}};
}

DenseLayer make_layer(const LayerDims &dims, const MethodSpec &method, RngStream &rng) {
    DenseLayer layer;
    switch (method.kind) {
        case MethodSpec::Kind::fedavg:
        case MethodSpec::Kind::local_adaptor:
            layer.weight = init_weight(dims.out, dims.in, rng);
            break;
        case MethodSpec::Kind::floral:
            layer.weight = init_weight(dims.out, dims.in, rng);
            if (method.adaptors_enabled && dims.adapted) {
                layer.kind = AdaptorKind::lora;
                const int r = linear_rank_for_budget(dims.out, dims.in, {method.rho});
                for (int c = 0; c < method.clusters; ++c)
                    layer.loras.push_back(make_linear_lora(dims.out, dims.in, r, rng));
            }
            break;
        case MethodSpec::Kind::ensemble:
            // C full copies mixed by the router; the shared slot is a frozen zero.
            layer.weight = Matrix(dims.out, dims.in);
            layer.train_base = false;
            layer.kind = AdaptorKind::dense;
            for (int c = 0; c < method.clusters; ++c)
                layer.dense.push_back(init_weight(dims.out, dims.in, rng));
            break;
    }
    return layer;
}

}  // namespace

MixedModel build_model(const SyntheticTask &task, const MethodSpec &method) {
    MixedModel model;
    model.family = task.family;
    model.clusters = method.model_clusters();
    RngStream rng(task.seed, kStreamModelInit);
    const auto dims = layer_dims(task);
    model.l1 = make_layer(dims[0], method, rng);
    if (task.family == Family::mlp2) model.l2 = make_layer(dims[1], method, rng);
    return model;
}

std::vector<ClientState> build_clients(const SyntheticTask &task, const MethodSpec &method,
                                       const RunOptions &opts) {
    std::vector<ClientState> clients;
    clients.reserve(std::size_t(task.clients));
    for (int k = 0; k < task.clients; ++k) {
        ClientState c;
        c.id = k;
        c.n_train = task.splits[std::size_t(k)].train_count();
        c.router = Router(method.model_clusters(), opts.router_mode);
        if (method.kind == MethodSpec::Kind::local_adaptor) {
            RngStream rng(task.seed, kStreamLocalInit + std::uint64_t(k));
            for (const auto &dims : layer_dims(task))
                if (dims.adapted) {
                    const int r = linear_rank_for_budget(dims.out, dims.in, {method.rho});
                    c.local_loras.push_back(make_linear_lora(dims.out, dims.in, r, rng));
                }
        }
        clients.push_back(std::move(c));
    }
    if (method.opt_router) optimal_router_override(task, method, clients);
    return clients;
}

void optimal_router_override(const SyntheticTask &task, const MethodSpec &method,
                             std::vector<ClientState> &clients) {
    if (!method.has_router())
        throw ConfigError("optimal routing requires a method with routers");
    for (auto &c : clients)
        c.router.freeze_onehot(task.cluster_of(c.id) % method.model_clusters());
}

namespace {

// Attach/detach the Local-Adaptor baseline's per-client adaptor. The server
// model has no adaptor slots; the client's factors ride along during training.
void attach_local_loras(MixedModel &model, const ClientState &client) {
    model.l1.kind = AdaptorKind::lora;
    model.l1.loras = {client.local_loras.front()};
}

std::vector<LinearLoRA> detach_local_loras(MixedModel &model) {
    std::vector<LinearLoRA> out;
    if (model.l1.kind == AdaptorKind::lora) {
        out = std::move(model.l1.loras);
        model.l1.kind = AdaptorKind::none;
        model.l1.loras.clear();
    }
    return out;
}

}  // namespace

LocalResult local_train(const ClientState &client, MixedModel model, const ClientSplit &data,
                        int steps, double eta, const RunOptions &opts, int round) {
    Router router = client.router;
    if (opts.stateless_router) router.reset();

    LossOptions lopts;
    lopts.precondition = opts.precondition;
    lopts.precondition_eps = opts.precondition_eps;

    for (int h = 0; h < steps; ++h) {
        const std::vector<double> pi = router.pi();
        GradientBundle g = loss_and_grad(model, pi, data.x_train, data.y_train, lopts);
        if (!std::isfinite(g.loss)) throw DivergedError(round, client.id);
        sgd_step(model, g, eta);
        if (router.mode() == RouterMode::exp_weights) {
            router.step_exp_weights(per_cluster_losses(model, data.x_train, data.y_train), eta);
        } else {
            router.step_logits(g.theta, eta);
        }
    }

    LocalResult out;
    out.final_loss = mse(forward(model, router.pi(), data.x_train), data.y_train);
    if (!std::isfinite(out.final_loss)) throw DivergedError(round, client.id);
    out.theta.assign(router.theta().begin(), router.theta().end());
    out.model = std::move(model);
    return out;
}

namespace {

// Weighted mean over the cohort with pre-normalized weights; zero-weight
// contributions are skipped and an unchanged cohort short-circuits, so
// disjoint handovers and the conservation fixed point are exact.
void weighted_mean(std::span<double> server, const std::vector<std::span<const double>> &clients,
                   const std::vector<double> &weights) {
    bool all_same = true;
    for (std::size_t k = 0; k < clients.size() && all_same; ++k) {
        if (weights[k] == 0.0) continue;
        for (std::size_t i = 0; i < server.size(); ++i)
            if (clients[k][i] != server[i]) {
                all_same = false;
                break;
            }
    }
    if (all_same) return;
    std::vector<double> acc(server.size(), 0.0);
    for (std::size_t k = 0; k < clients.size(); ++k) {
        if (weights[k] == 0.0) continue;
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += weights[k] * clients[k][i];
    }
    std::copy(acc.begin(), acc.end(), server.begin());
}

void aggregate_layer(DenseLayer &server, const std::vector<ClientReturn> &returns,
                     const std::vector<const DenseLayer *> &client_layers) {
    double total_n = 0.0;
    for (const auto &r : returns) total_n += double(r.n_train);
    std::vector<double> base_w;
    for (const auto &r : returns) base_w.push_back(double(r.n_train) / total_n);

    if (server.train_base) {
        std::vector<std::span<const double>> views;
        for (const auto *l : client_layers) views.push_back(l->weight.data());
        weighted_mean(server.weight.data(), views, base_w);
    }
    if (server.bias) {
        std::vector<std::span<const double>> views;
        for (const auto *l : client_layers) views.push_back(*l->bias);
        weighted_mean(*server.bias, views, base_w);
    }

    for (int c = 0; c < server.cluster_count(); ++c) {
        double mass = 0.0;
        for (const auto &r : returns) mass += r.pi[std::size_t(c)] * double(r.n_train);
        if (mass <= 0.0) continue;  // empty cluster: adaptor carried over unchanged
        std::vector<double> w;
        for (const auto &r : returns) w.push_back(r.pi[std::size_t(c)] * double(r.n_train) / mass);

        auto mean_of = [&](std::span<double> server_span, auto get_client) {
            std::vector<std::span<const double>> views;
            for (std::size_t i = 0; i < returns.size(); ++i) views.push_back(get_client(i));
            weighted_mean(server_span, views, w);
        };
        if (server.kind == AdaptorKind::lora) {
            mean_of(server.loras[std::size_t(c)].u.data(),
                    [&](std::size_t i) { return client_layers[i]->loras[std::size_t(c)].u.data(); });
            mean_of(server.loras[std::size_t(c)].v.data(),
                    [&](std::size_t i) { return client_layers[i]->loras[std::size_t(c)].v.data(); });
        } else if (server.kind == AdaptorKind::dense) {
            mean_of(server.dense[std::size_t(c)].data(),
                    [&](std::size_t i) { return client_layers[i]->dense[std::size_t(c)].data(); });
        }
        if (!server.bias_deltas.empty()) {
            mean_of(std::span<double>(server.bias_deltas[std::size_t(c)]), [&](std::size_t i) {
                return std::span<const double>(client_layers[i]->bias_deltas[std::size_t(c)]);
            });
        }
    }
}

}  // namespace

void aggregate(ServerState &server, const std::vector<ClientReturn> &returns) {
    if (returns.empty()) throw std::invalid_argument("aggregate: empty cohort");
    for (const auto &r : returns) {
        if (r.n_train < 1) throw std::invalid_argument("aggregate: client sample count < 1");
        if (int(r.pi.size()) != server.model.clusters)
            throw ShapeError("aggregate: mixture length mismatch");
    }
    std::vector<const DenseLayer *> l1s, l2s;
    for (const auto &r : returns) {
        l1s.push_back(&r.model->l1);
        if (server.model.l2) l2s.push_back(&*r.model->l2);
    }
    aggregate_layer(server.model.l1, returns, l1s);
    if (server.model.l2) aggregate_layer(*server.model.l2, returns, l2s);
    server.round += 1;
}

ParamAudit param_audit(const SyntheticTask &task, const MethodSpec &method) {
    ParamAudit audit;
    const auto dims = layer_dims(task);
    for (const auto &d : dims) audit.base_params += (long long)(d.out) * d.in;

    switch (method.kind) {
        case MethodSpec::Kind::fedavg:
            break;
        case MethodSpec::Kind::ensemble:
            audit.added_params = (long long)(method.clusters - 1) * audit.base_params;
            break;
        case MethodSpec::Kind::floral:
        case MethodSpec::Kind::local_adaptor: {
            if (method.kind == MethodSpec::Kind::floral && !method.adaptors_enabled) break;
            // Local-Adaptor stores one adaptor per client; the audit reports
            // the per-client cost.
            const int copies = method.kind == MethodSpec::Kind::floral ? method.clusters : 1;
            for (const auto &d : dims) {
                if (!d.adapted) continue;
                const long long entries = (long long)(d.out) * d.in;
                const double per_adaptor_budget = method.rho * double(entries);
                const int r = linear_rank_for_budget(d.out, d.in, {method.rho});
                const long long stored = (long long)(d.out + d.in) * r;
                audit.added_params += copies * stored;
                audit.budget_params += (long long)(copies * std::floor(per_adaptor_budget));
                if (double(stored) > per_adaptor_budget)
                    audit.clamp_excess +=
                        copies * (stored - (long long)std::floor(per_adaptor_budget));
            }
            break;
        }
    }
    audit.ratio = audit.base_params > 0 ? double(audit.added_params) / double(audit.base_params) : 0.0;
    return audit;
}

namespace {

double evaluate_clients(const MixedModel &model, const SyntheticTask &task,
                        const std::vector<ClientState> &clients, const MethodSpec &method) {
    double total = 0.0;
    for (const auto &client : clients) {
        const auto &split = task.splits[std::size_t(client.id)];
        if (method.kind == MethodSpec::Kind::local_adaptor) {
            MixedModel personalized = model;
            attach_local_loras(personalized, client);
            total += mse(forward(personalized, client.router.pi(), split.x_test), split.y_test);
        } else {
            total += mse(forward(model, client.router.pi(), split.x_test), split.y_test);
        }
    }
    return total / double(clients.size());
}

void maybe_center(MixedModel &model, const RunOptions &opts, int round) {
    if (opts.centering_every <= 0 || (round + 1) % opts.centering_every != 0) return;
    if (model.l1.kind != AdaptorKind::lora) return;
    // Cluster weights for the mean are uniform; see App-level notes in README.
    std::vector<double> probs(model.l1.loras.size(), 1.0 / double(model.l1.loras.size()));
    center_loras(model.l1.weight, model.l1.loras, probs);
}

}  // namespace

std::vector<RoundReport> run_experiment(const SyntheticTask &task, const MethodSpec &method,
                                        const RunOptions &opts) {
    if (opts.rounds < 0 || opts.local_steps < 1) throw ConfigError("run: bad rounds/local_steps");
    if (opts.workers < 1) throw ConfigError("run: workers must be >= 1");

    ServerState server{build_model(task, method), 0};
    std::vector<ClientState> clients = build_clients(task, method, opts);
    RngStream cohort_rng(opts.seed, kStreamCohort);

    std::vector<std::vector<double>> pi_star;
    for (int k = 0; k < task.clients; ++k) pi_star.push_back(task.pi_star(k));
    const std::vector<int> n_all = task.train_counts();

    std::vector<RoundReport> reports;
    reports.reserve(std::size_t(opts.rounds));

    for (int round = 0; round < opts.rounds; ++round) {
        const auto t0 = std::chrono::steady_clock::now();
        const double eta_t = opts.schedule.at(opts.eta, round);
        const std::vector<int> cohort = sample_cohort(task.clients, opts.cohort_fraction, cohort_rng);

        std::vector<LocalResult> results(cohort.size());
        std::vector<std::exception_ptr> errors(cohort.size());
        auto train_one = [&](std::size_t i) {
            const int k = cohort[i];
            const ClientState &client = clients[std::size_t(k)];
            MixedModel model = server.model;
            if (method.kind == MethodSpec::Kind::local_adaptor)
                attach_local_loras(model, client);
            results[i] = local_train(client, std::move(model), task.splits[std::size_t(k)],
                                     opts.local_steps, eta_t, opts, round);
        };
        if (opts.workers == 1 || cohort.size() == 1) {
            for (std::size_t i = 0; i < cohort.size(); ++i) train_one(i);
        } else {
            // Static round-robin assignment; each worker writes its own slots,
            // so the outcome is independent of thread scheduling.
            const int workers = std::min<int>(opts.workers, int(cohort.size()));
            std::vector<std::thread> pool;
            pool.reserve(std::size_t(workers));
            for (int w = 0; w < workers; ++w)
                pool.emplace_back([&, w] {
                    for (std::size_t i = std::size_t(w); i < cohort.size(); i += std::size_t(workers)) {
                        try {
                            train_one(i);
                        } catch (...) {
                            errors[i] = std::current_exception();
                        }
                    }
                });
            for (auto &t : pool) t.join();
            for (const auto &err : errors)
                if (err) std::rethrow_exception(err);
        }

        RoundReport report;
        report.round = round + 1;
        report.cohort = cohort;
        double train_sum = 0.0;
        std::vector<ClientReturn> returns;
        returns.reserve(cohort.size());
        for (std::size_t i = 0; i < cohort.size(); ++i) {
            const int k = cohort[i];
            ClientState &client = clients[std::size_t(k)];
            client.router.set_theta(results[i].theta);
            if (method.kind == MethodSpec::Kind::local_adaptor)
                client.local_loras = detach_local_loras(results[i].model);
            report.client_train_loss.push_back(results[i].final_loss);
            train_sum += results[i].final_loss;
            returns.push_back({k, client.n_train, client.router.pi(), &results[i].model});
        }
        report.mean_train_loss = train_sum / double(cohort.size());

        aggregate(server, returns);
        maybe_center(server.model, opts, round);

        for (const auto &client : clients) report.routers.push_back(client.router.pi());
        report.test_mse = evaluate_clients(server.model, task, clients, method);
        report.router_accuracy = router_accuracy(report.routers, pi_star);
        if (server.model.clusters == task.clusters)
            report.tv_per_cluster = tv_mismatch(report.routers, pi_star, n_all).per_cluster_l1;
        report.wall_time_sec =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        reports.push_back(std::move(report));
    }
    return reports;
}

}  // namespace floral
