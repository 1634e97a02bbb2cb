#pragma once

#include <string>
#include <vector>

#include "floral/config.hpp"

namespace floral {

// Exit codes for the command-line tool.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitDiverged = 3;
inline constexpr int kExitIo = 4;

struct RunArtifacts {
    std::string effective_config_path;
    std::vector<std::string> metrics_paths;  // one per method
    std::string summary_path;
};

// Resolution order for the output directory: --out-dir flag, config value,
// $FLORAL_OUT_DIR, current directory.
std::string resolve_out_dir(const std::string &flag_dir, const std::string &config_dir);

// Executes the configured run(s): one metrics JSONL per method (one record per
// round), the effective config, and a summary CSV sorted by final test loss.
RunArtifacts execute_run(const RunConfig &config, const std::string &out_dir,
                         bool print_summary = true);

// CLI entry points; map errors to exit codes and print diagnostics to stderr.
int run_command(const std::string &config_path, const std::vector<std::string> &overrides,
                const std::string &out_dir_flag);
int compare_command(const std::vector<std::string> &metrics_files, const std::string &csv_out);

}  // namespace floral
