#include "floral/runner.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

namespace floral {

using nlohmann::json;
namespace fs = std::filesystem;

std::string resolve_out_dir(const std::string &flag_dir, const std::string &config_dir) {
    if (!flag_dir.empty()) return flag_dir;
    if (!config_dir.empty()) return config_dir;
    if (const char *env = std::getenv(kOutputDirEnv); env && *env) return env;
    return ".";
}

namespace {

struct MethodSummary {
    std::string method;
    std::string metrics_path;
    int rounds = 0;
    double final_test = 0.0, best_test = 0.0;
    double final_train = 0.0;
    double router_accuracy = 0.0;
    long long params_base = 0, params_added = 0;
    std::string config_hash;
};

json record_json(const RoundReport &r, const std::string &method, const std::string &hash,
                 const ParamAudit &audit) {
    json rec;
    rec["schema_version"] = kMetricsSchemaVersion;
    rec["config_hash"] = hash;
    rec["method"] = method;
    rec["round"] = r.round;
    rec["train_loss"] = r.mean_train_loss;
    rec["test_loss"] = r.test_mse;
    rec["router_accuracy"] = r.router_accuracy;
    rec["tv_mismatch"] = r.tv_per_cluster;
    rec["params_base"] = audit.base_params;
    rec["params_added"] = audit.added_params;
    return rec;
}

void write_summary_csv(const std::string &path, const TaskConfig &task,
                       std::vector<MethodSummary> rows) {
    std::sort(rows.begin(), rows.end(),
              [](const MethodSummary &a, const MethodSummary &b) {
                  if (a.final_test != b.final_test) return a.final_test < b.final_test;
                  return a.method < b.method;
              });
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::ios_base::failure("cannot write summary: " + path);
    os << "method,task,keep_fraction,rounds,final_test_loss,best_test_loss,final_train_loss,"
          "router_accuracy,params_base,params_added,config_hash\n";
    for (const auto &r : rows) {
        os << r.method << ',' << task.family << ',' << json(task.keep_fraction).dump() << ','
           << r.rounds << ',' << json(r.final_test).dump() << ',' << json(r.best_test).dump()
           << ',' << json(r.final_train).dump() << ',' << json(r.router_accuracy).dump() << ','
           << r.params_base << ',' << r.params_added << ',' << r.config_hash << '\n';
    }
    if (!os) throw std::ios_base::failure("failed writing summary: " + path);
}

void print_table(const std::vector<MethodSummary> &rows) {
    std::printf("%-20s %8s %14s %14s %10s %12s\n", "method", "rounds", "final_test",
                "best_test", "router_acc", "params_added");
    for (const auto &r : rows)
        std::printf("%-20s %8d %14.6g %14.6g %10.3f %12lld\n", r.method.c_str(), r.rounds,
                    r.final_test, r.best_test, r.router_accuracy, r.params_added);
}

}  // namespace

RunArtifacts execute_run(const RunConfig &config, const std::string &out_dir,
                         bool print_summary) {
    fs::create_directories(out_dir);
    const json effective = effective_json(config);
    const std::string hash = config_hash_hex(effective);

    RunArtifacts artifacts;
    artifacts.effective_config_path =
        (fs::path(out_dir) / (config.output.name + ".effective.json")).string();
    {
        std::ofstream os(artifacts.effective_config_path, std::ios::binary);
        if (!os) throw std::ios_base::failure("cannot write " + artifacts.effective_config_path);
        os << effective.dump(2) << '\n';
    }

    SyntheticTask task = config.task.build();

    std::vector<MethodSummary> summaries;
    for (const auto &method_cfg : config.methods) {
        const MethodSpec method = method_cfg.build();
        const RunOptions opts = config.training.build(config.task.seed);
        const ParamAudit audit = param_audit(task, method);
        const auto reports = run_experiment(task, method, opts);

        const std::string metrics_path =
            (fs::path(out_dir) / (config.output.name + "." + method.name() + ".metrics.jsonl"))
                .string();
        std::ofstream os(metrics_path, std::ios::binary);
        if (!os) throw std::ios_base::failure("cannot write metrics: " + metrics_path);
        for (const auto &r : reports)
            os << record_json(r, method.name(), hash, audit).dump() << '\n';
        if (!os) throw std::ios_base::failure("failed writing metrics: " + metrics_path);
        artifacts.metrics_paths.push_back(metrics_path);

        MethodSummary s;
        s.method = method.name();
        s.metrics_path = metrics_path;
        s.rounds = int(reports.size());
        s.config_hash = hash;
        s.params_base = audit.base_params;
        s.params_added = audit.added_params;
        if (!reports.empty()) {
            s.final_test = reports.back().test_mse;
            s.final_train = reports.back().mean_train_loss;
            s.router_accuracy = reports.back().router_accuracy;
            s.best_test = reports.front().test_mse;
            for (const auto &r : reports) s.best_test = std::min(s.best_test, r.test_mse);
        }
        summaries.push_back(std::move(s));
    }

    artifacts.summary_path = (fs::path(out_dir) / (config.output.name + ".summary.csv")).string();
    write_summary_csv(artifacts.summary_path, config.task, summaries);
    if (print_summary) {
        std::sort(summaries.begin(), summaries.end(),
                  [](const MethodSummary &a, const MethodSummary &b) {
                      if (a.final_test != b.final_test) return a.final_test < b.final_test;
                      return a.method < b.method;
                  });
        print_table(summaries);
    }
    return artifacts;
}

int run_command(const std::string &config_path, const std::vector<std::string> &overrides,
                const std::string &out_dir_flag) {
    try {
        const RunConfig config = load_config(config_path, overrides);
        execute_run(config, resolve_out_dir(out_dir_flag, config.output.dir));
        return kExitOk;
    } catch (const DivergedError &e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitDiverged;
    } catch (const ConfigError &e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const std::ios_base::failure &e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitIo;
    } catch (const fs::filesystem_error &e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitIo;
    }
}

namespace {

struct FileSummary {
    std::string path;
    std::string method;
    int rounds = 0;
    double final_test = 0.0, best_test = 0.0, final_train = 0.0;
    double router_accuracy = 0.0;
    std::string config_hash;
};

FileSummary summarize_metrics(const std::string &path) {
    std::ifstream is(path);
    if (!is) throw std::ios_base::failure("cannot open metrics: " + path);
    FileSummary s;
    s.path = path;
    std::string line;
    int lineno = 0;
    int version = -1;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        json rec = json::parse(line, nullptr, false);
        if (rec.is_discarded() || !rec.is_object())
            throw ConfigError(path + ":" + std::to_string(lineno) + ": malformed metrics record");
        try {
            const int v = rec.at("schema_version").get<int>();
            if (version == -1) version = v;
            if (v != kMetricsSchemaVersion || v != version)
                throw ConfigError(path + ":" + std::to_string(lineno) +
                                  ": metrics schema version " + std::to_string(v) +
                                  " (expected " + std::to_string(kMetricsSchemaVersion) + ")");
            s.method = rec.at("method").get<std::string>();
            s.config_hash = rec.at("config_hash").get<std::string>();
            s.final_test = rec.at("test_loss").get<double>();
            s.final_train = rec.at("train_loss").get<double>();
            s.router_accuracy = rec.at("router_accuracy").get<double>();
            s.best_test = s.rounds == 0 ? s.final_test : std::min(s.best_test, s.final_test);
            s.rounds += 1;
        } catch (const json::exception &e) {
            throw ConfigError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    if (s.rounds == 0) throw ConfigError(path + ":1: no records");
    return s;
}

}  // namespace

int compare_command(const std::vector<std::string> &metrics_files, const std::string &csv_out) {
    try {
        std::vector<FileSummary> rows;
        for (const auto &path : metrics_files) rows.push_back(summarize_metrics(path));
        std::sort(rows.begin(), rows.end(), [](const FileSummary &a, const FileSummary &b) {
            if (a.final_test != b.final_test) return a.final_test < b.final_test;
            return a.path < b.path;
        });
        std::printf("%-20s %8s %14s %14s %14s %10s  %s\n", "method", "rounds", "final_test",
                    "best_test", "final_train", "router_acc", "file");
        for (const auto &r : rows)
            std::printf("%-20s %8d %14.6g %14.6g %14.6g %10.3f  %s\n", r.method.c_str(), r.rounds,
                        r.final_test, r.best_test, r.final_train, r.router_accuracy,
                        r.path.c_str());
        if (!csv_out.empty()) {
            std::ofstream os(csv_out, std::ios::binary);
            if (!os) throw std::ios_base::failure("cannot write csv: " + csv_out);
            os << "method,rounds,final_test_loss,best_test_loss,final_train_loss,router_accuracy,"
                  "config_hash,file\n";
            for (const auto &r : rows)
                os << r.method << ',' << r.rounds << ',' << json(r.final_test).dump() << ','
                   << json(r.best_test).dump() << ',' << json(r.final_train).dump() << ','
                   << json(r.router_accuracy).dump() << ',' << r.config_hash << ',' << r.path
                   << '\n';
            if (!os) throw std::ios_base::failure("failed writing csv: " + csv_out);
        }
        return kExitOk;
    } catch (const ConfigError &e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const std::ios_base::failure &e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitIo;
    }
}

}  // namespace floral
