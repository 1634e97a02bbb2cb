#include <string>
#include <vector>

#include <CLI11.hpp>

#include "floral/runner.hpp"

int main(int argc, char **argv) {
    CLI::App app{"FLoRAL federated-learning simulator"};
    app.require_subcommand(1);

    std::string config_path, out_dir_flag;
    std::vector<std::string> overrides;
    auto *run = app.add_subcommand("run", "execute a configured experiment (single or sweep)");
    run->add_option("--config", config_path, "JSON run config")->required();
    run->add_option("--out-dir", out_dir_flag,
                    "output directory (overrides the config value and $FLORAL_OUT_DIR)");
    run->add_option("overrides", overrides, "config overrides of the form key.path=value");

    std::vector<std::string> metrics_files;
    std::string csv_out;
    auto *compare = app.add_subcommand("compare", "summarize metrics files side by side");
    compare->add_option("files", metrics_files, "metrics JSONL files")->required();
    compare->add_option("--csv", csv_out, "also write the table as CSV");

    CLI11_PARSE(app, argc, argv);

    if (run->parsed()) return floral::run_command(config_path, overrides, out_dir_flag);
    return floral::compare_command(metrics_files, csv_out);
}
