#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "floral/federation.hpp"

namespace floral {

inline constexpr int kConfigSchemaVersion = 1;
inline constexpr int kMetricsSchemaVersion = 1;
inline constexpr const char *kOutputDirEnv = "FLORAL_OUT_DIR";

struct TaskConfig {
    std::string family = "linear";
    int clients = 10;
    int clusters = 2;  // ground-truth C
    int d_x = 16, d_y = 16, d_h = 16;
    int r_true = 2;
    int width_mult = 2;
    double alpha = 4.0;
    std::uint64_t seed = 1234;
    double keep_fraction = 1.0;

    SyntheticTask build() const;
};

struct MethodConfig {
    std::string name = "floral";
    double rho = 0.25;
    int clusters = 2;
    bool adaptors_enabled = true;

    MethodSpec build() const { return MethodSpec::parse(name, rho, clusters, adaptors_enabled); }
};

struct TrainingConfig {
    int rounds = 500;
    int local_steps = 10;
    double eta = 0.5;
    std::string schedule = "constant";  // or "inv_decay"
    double decay_s = 100.0;
    double cohort_fraction = 1.0;
    std::string router_mode = "softmax_sgd";  // or "exp_weights"
    bool stateless_router = false;
    bool precondition = true;
    double precondition_eps = 1e-8;
    int centering_every = 0;
    int workers = 1;

    RunOptions build(std::uint64_t seed) const;
};

struct OutputConfig {
    std::string dir;          // empty: flag, then $FLORAL_OUT_DIR, then "."
    std::string name = "run"; // file prefix
};

// Validated run description. Every field has a default; unknown keys are
// rejected with the offending path.
struct RunConfig {
    TaskConfig task;
    std::vector<MethodConfig> methods;  // singular "method" or a sweep list
    TrainingConfig training;
    OutputConfig output;
};

RunConfig parse_config(const nlohmann::json &j);
RunConfig load_config(const std::string &path, const std::vector<std::string> &overrides);
nlohmann::json effective_json(const RunConfig &config);

// key=value with a dotted path, e.g. training.eta=0.1; the value is parsed as
// a JSON literal when possible and as a string otherwise.
void apply_override(nlohmann::json &j, const std::string &assignment);

// FNV-1a over the canonical dump of the effective config.
std::string config_hash_hex(const nlohmann::json &j);

}  // namespace floral
