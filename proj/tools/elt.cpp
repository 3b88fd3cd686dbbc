// Command-line front end for the elastic-transformer lab.
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "elt/run.hpp"

namespace {

struct CommonArgs {
    std::string config_path;
    std::string out_dir;
    std::uint64_t seed = 0;
    bool seed_set = false;
    int threads = 0;
};

void add_common(CLI::App* cmd, CommonArgs& args, bool config_required) {
    auto* c = cmd->add_option("--config", args.config_path, "JSON run configuration");
    if (config_required) c->required();
    cmd->add_option("--out", args.out_dir, "output directory (overrides config)");
    cmd->add_option("--seed", args.seed, "master seed (overrides config)")
        ->each([&args](const std::string&) { args.seed_set = true; });
    cmd->add_option("--threads", args.threads, "kernel threads, 1 = serial (overrides config)");
}

void write_error_record(const std::string& out_dir, const std::string& type,
                        const std::string& message) {
    if (out_dir.empty()) return;
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) return;
    nlohmann::json j;
    j["error"]["type"] = type;
    j["error"]["message"] = message;
    std::ofstream out(std::filesystem::path(out_dir) / "error.json",
                      std::ios::binary | std::ios::trunc);
    out << j.dump(2) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"elastic transformer laboratory"};
    app.require_subcommand(1);

    const std::vector<std::pair<std::string, std::string>> commands = {
        {"pretrain-teacher", "train and freeze a teacher model"},
        {"distill", "train routers/adapters against a frozen teacher"},
        {"sweep", "capacity sweep: one distillation run per grid cell"},
        {"prune", "structured-removal redundancy analysis"},
        {"compare-routers", "router similarity across checkpoints"},
        {"eval", "evaluate a teacher (and optional routed student)"},
        {"report", "merge run artifacts into one JSON report"},
    };
    std::map<std::string, CommonArgs> args;
    for (const auto& [name, desc] : commands) {
        auto* cmd = app.add_subcommand(name, desc);
        // `report` can run on a bare output directory without a config
        add_common(cmd, args[name], name != "report");
    }

    CLI11_PARSE(app, argc, argv);
    const std::string name = app.get_subcommands().at(0)->get_name();
    CommonArgs& a = args[name];

    std::string out_dir = a.out_dir;
    try {
        elt::RunConfig cfg;
        if (!a.config_path.empty()) cfg = elt::load_run_config(a.config_path);
        if (!a.out_dir.empty()) cfg.out_dir = a.out_dir;
        if (a.seed_set) cfg.seed = a.seed;
        if (a.threads != 0) cfg.threads = a.threads;
        out_dir = cfg.out_dir;
        elt::run_command(name, cfg);
        return 0;
    } catch (const elt::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        write_error_record(out_dir, "config", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        write_error_record(out_dir, "runtime", e.what());
        return 1;
    }
}
