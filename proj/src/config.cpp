#include "floral/config.hpp"

#include <cmath>
#include <fstream>
#include <set>

namespace floral {

using nlohmann::json;

SyntheticTask TaskConfig::build() const {
    SyntheticTask task;
    if (family == "linear") {
        task = gen_linear_task(clients, clusters, d_x, d_y, r_true, alpha, seed);
    } else if (family == "mlp2") {
        task = gen_mlp_task(clients, clusters, d_x, d_h, d_y, r_true, width_mult, seed);
    } else {
        throw ConfigError("task.family must be \"linear\" or \"mlp2\"");
    }
    if (keep_fraction < 1.0) task = reduce_data(task, keep_fraction);
    return task;
}

RunOptions TrainingConfig::build(std::uint64_t seed) const {
    RunOptions opts;
    opts.rounds = rounds;
    opts.local_steps = local_steps;
    opts.eta = eta;
    if (schedule == "constant") {
        opts.schedule.kind = LrSchedule::Kind::constant;
    } else if (schedule == "inv_decay") {
        opts.schedule.kind = LrSchedule::Kind::inv_decay;
    } else {
        throw ConfigError("training.schedule must be \"constant\" or \"inv_decay\"");
    }
    opts.schedule.s = decay_s;
    opts.cohort_fraction = cohort_fraction;
    opts.seed = seed;
    if (router_mode == "softmax_sgd") {
        opts.router_mode = RouterMode::softmax_sgd;
    } else if (router_mode == "exp_weights") {
        opts.router_mode = RouterMode::exp_weights;
    } else {
        throw ConfigError("training.router_mode must be \"softmax_sgd\" or \"exp_weights\"");
    }
    opts.stateless_router = stateless_router;
    opts.precondition = precondition;
    opts.precondition_eps = precondition_eps;
    opts.centering_every = centering_every;
    opts.workers = workers;
    return opts;
}

namespace {

class Reader {
public:
    Reader(const json &j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j.is_object()) throw ConfigError(path_ + ": expected an object");
    }

    ~Reader() = default;

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key()))
                throw ConfigError(path_ + ": unknown key \"" + it.key() + "\"");
    }

    bool has(const std::string &key) {
        seen_.insert(key);
        return j_.contains(key);
    }

    template <typename T>
    void get(const std::string &key, T &out) {
        if (!has(key)) return;
        try {
            out = j_.at(key).get<T>();
        } catch (const json::exception &) {
            throw ConfigError(path_ + "." + key + ": wrong type");
        }
    }

    const json &child(const std::string &key) {
        seen_.insert(key);
        return j_.at(key);
    }

private:
    const json &j_;
    std::string path_;
    std::set<std::string> seen_;
};

TaskConfig parse_task(const json &j) {
    TaskConfig t;
    Reader r(j, "task");
    r.get("family", t.family);
    r.get("clients", t.clients);
    r.get("clusters", t.clusters);
    r.get("d_x", t.d_x);
    r.get("d_y", t.d_y);
    r.get("d_h", t.d_h);
    r.get("r_true", t.r_true);
    r.get("width_mult", t.width_mult);
    r.get("alpha", t.alpha);
    r.get("seed", t.seed);
    r.get("keep_fraction", t.keep_fraction);
    r.finish();
    if (t.family != "linear" && t.family != "mlp2")
        throw ConfigError("task.family must be \"linear\" or \"mlp2\"");
    if (t.clients < 1 || t.clusters < 1 || t.clusters > t.clients)
        throw ConfigError("task: need 1 <= clusters <= clients");
    if (!(t.keep_fraction > 0.0) || t.keep_fraction > 1.0)
        throw ConfigError("task.keep_fraction must be in (0, 1]");
    return t;
}

MethodConfig parse_method(const json &j, const std::string &path) {
    MethodConfig m;
    Reader r(j, path);
    r.get("name", m.name);
    r.get("rho", m.rho);
    r.get("clusters", m.clusters);
    r.get("adaptors_enabled", m.adaptors_enabled);
    r.finish();
    if (!(m.rho > 0.0) || m.rho > 1.0) throw ConfigError(path + ".rho must be in (0, 1]");
    if (m.clusters < 1) throw ConfigError(path + ".clusters must be >= 1");
    m.build();  // validates the name
    return m;
}

TrainingConfig parse_training(const json &j) {
    TrainingConfig t;
    Reader r(j, "training");
    r.get("rounds", t.rounds);
    r.get("local_steps", t.local_steps);
    r.get("eta", t.eta);
    r.get("schedule", t.schedule);
    r.get("decay_s", t.decay_s);
    r.get("cohort_fraction", t.cohort_fraction);
    r.get("router_mode", t.router_mode);
    r.get("stateless_router", t.stateless_router);
    r.get("precondition", t.precondition);
    r.get("precondition_eps", t.precondition_eps);
    r.get("centering_every", t.centering_every);
    r.get("workers", t.workers);
    r.finish();
    if (t.rounds < 0) throw ConfigError("training.rounds must be >= 0");
    if (t.local_steps < 1) throw ConfigError("training.local_steps must be >= 1");
    if (!(t.eta >= 0.0)) throw ConfigError("training.eta must be >= 0");
    if (!(t.cohort_fraction > 0.0) || t.cohort_fraction > 1.0)
        throw ConfigError("training.cohort_fraction must be in (0, 1]");
    if (!(t.precondition_eps > 0.0)) throw ConfigError("training.precondition_eps must be > 0");
    if (t.workers < 1) throw ConfigError("training.workers must be >= 1");
    if (t.centering_every < 0) throw ConfigError("training.centering_every must be >= 0");
    t.build(0);  // validates schedule/router_mode strings
    return t;
}

OutputConfig parse_output(const json &j) {
    OutputConfig o;
    Reader r(j, "output");
    r.get("dir", o.dir);
    r.get("name", o.name);
    r.finish();
    if (o.name.empty()) throw ConfigError("output.name must be nonempty");
    return o;
}

}  // namespace

RunConfig parse_config(const json &j) {
    RunConfig config;
    Reader r(j, "config");
    if (r.has("schema_version")) {
        int v = -1;
        r.get("schema_version", v);
        if (v != kConfigSchemaVersion)
            throw ConfigError("schema_version " + std::to_string(v) + " unsupported (expected " +
                              std::to_string(kConfigSchemaVersion) + ")");
    }
    if (r.has("task")) config.task = parse_task(r.child("task"));
    const bool has_method = r.has("method");
    const bool has_methods = r.has("methods");
    if (has_method && has_methods)
        throw ConfigError("config: provide either \"method\" or \"methods\", not both");
    if (has_methods) {
        const json &list = r.child("methods");
        if (!list.is_array() || list.empty())
            throw ConfigError("methods: expected a nonempty array");
        for (std::size_t i = 0; i < list.size(); ++i)
            config.methods.push_back(parse_method(list[i], "methods[" + std::to_string(i) + "]"));
    } else if (has_method) {
        config.methods.push_back(parse_method(r.child("method"), "method"));
    } else {
        config.methods.push_back(MethodConfig{});
    }
    if (r.has("training")) config.training = parse_training(r.child("training"));
    if (r.has("output")) config.output = parse_output(r.child("output"));
    r.finish();
    return config;
}

RunConfig load_config(const std::string &path, const std::vector<std::string> &overrides) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config: " + path);
    json j;
    try {
        j = json::parse(is);
    } catch (const json::exception &e) {
        throw ConfigError("config parse error in " + path + ": " + e.what());
    }
    for (const auto &assignment : overrides) apply_override(j, assignment);
    return parse_config(j);
}

void apply_override(json &j, const std::string &assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0)
        throw ConfigError("override must look like key.path=value: " + assignment);
    const std::string path = assignment.substr(0, eq);
    const std::string value = assignment.substr(eq + 1);
    try {
        json *node = &j;
        std::size_t start = 0;
        while (true) {
            const auto dotpos = path.find('.', start);
            const std::string key = path.substr(start, dotpos - start);
            if (key.empty())
                throw ConfigError("override has an empty path segment: " + assignment);
            if (dotpos == std::string::npos) {
                json parsed = json::parse(value, nullptr, false);
                (*node)[key] = parsed.is_discarded() ? json(value) : parsed;
                return;
            }
            node = &(*node)[key];
            start = dotpos + 1;
        }
    } catch (const json::exception &e) {
        throw ConfigError("cannot apply override " + assignment + ": " + e.what());
    }
}

nlohmann::json effective_json(const RunConfig &config) {
    json j;
    j["schema_version"] = kConfigSchemaVersion;
    j["task"] = {{"family", config.task.family},
                 {"clients", config.task.clients},
                 {"clusters", config.task.clusters},
                 {"d_x", config.task.d_x},
                 {"d_y", config.task.d_y},
                 {"d_h", config.task.d_h},
                 {"r_true", config.task.r_true},
                 {"width_mult", config.task.width_mult},
                 {"alpha", config.task.alpha},
                 {"seed", config.task.seed},
                 {"keep_fraction", config.task.keep_fraction}};
    json methods = json::array();
    for (const auto &m : config.methods)
        methods.push_back({{"name", m.name},
                           {"rho", m.rho},
                           {"clusters", m.clusters},
                           {"adaptors_enabled", m.adaptors_enabled}});
    j["methods"] = methods;
    j["training"] = {{"rounds", config.training.rounds},
                     {"local_steps", config.training.local_steps},
                     {"eta", config.training.eta},
                     {"schedule", config.training.schedule},
                     {"decay_s", config.training.decay_s},
                     {"cohort_fraction", config.training.cohort_fraction},
                     {"router_mode", config.training.router_mode},
                     {"stateless_router", config.training.stateless_router},
                     {"precondition", config.training.precondition},
                     {"precondition_eps", config.training.precondition_eps},
                     {"centering_every", config.training.centering_every},
                     {"workers", config.training.workers}};
    j["output"] = {{"dir", config.output.dir}, {"name", config.output.name}};
    return j;
}

std::string config_hash_hex(const nlohmann::json &j) {
    const std::string dump = j.dump();
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : dump) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace floral
