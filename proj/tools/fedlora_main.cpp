// Command-line driver for the federated continual-learning simulator.
//
//   fedlora run      --config cfg.json [--seed N] [--ablation smcf=off ...] --out DIR
//   fedlora sweep    --config cfg.json [--out DIR]
//   fedlora diagnose --config cfg.json [--seed N] [--out FILE]

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "fedlora/federation.hpp"

namespace {

using namespace fedlora;

FederationConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("config " + path + " is not valid JSON: " + e.what());
    }
    return FederationConfig::from_json(j);
}

void apply_ablation_flags(FederationConfig& cfg, const std::vector<std::string>& flags) {
    for (const std::string& flag : flags) {
        const auto eq = flag.find('=');
        if (eq == std::string::npos) throw ConfigError("ablation flag '" + flag + "' must look like smcf=off");
        const std::string key = flag.substr(0, eq);
        const std::string value = flag.substr(eq + 1);
        bool on;
        if (value == "on")
            on = true;
        else if (value == "off")
            on = false;
        else
            throw ConfigError("ablation value '" + value + "' must be on or off");
        if (key == "collab")
            cfg.ablations.collab = on;
        else if (key == "smcf")
            cfg.ablations.smcf = on;
        else if (key == "o2d")
            cfg.ablations.o2d = on;
        else
            throw ConfigError("unknown ablation component '" + key + "' (collab|smcf|o2d)");
    }
}

void write_outputs(const ResultBundle& bundle, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    {
        std::ofstream f(dir / "results.json");
        f << bundle.to_json().dump(2) << '\n';
    }
    {
        std::ofstream f(dir / "metrics.csv", std::ios::binary);
        write_metrics_csv(f, bundle);
    }
    {
        std::ofstream f(dir / "events.jsonl");
        write_events_jsonl(f, bundle.events);
    }
}

nlohmann::ordered_json consensus_json(const ResultBundle& bundle) {
    nlohmann::ordered_json out;
    out["seed"] = bundle.seed;
    auto rounds = nlohmann::ordered_json::array();
    for (const auto& r : bundle.round_reports) rounds.push_back(r.to_json());
    out["server_rounds"] = rounds;
    auto final_round = nlohmann::ordered_json::array();
    for (const auto& [client, points] : bundle.final_consensus) {
        nlohmann::ordered_json e;
        e["client"] = client;
        auto arr = nlohmann::ordered_json::array();
        for (const auto& p : points) {
            nlohmann::ordered_json pj;
            pj["source_client"] = p.source_client;
            pj["row"] = p.row;
            pj["dist_to_mean"] = p.dist_to_mean;
            pj["in_bbox"] = p.in_bbox;
            arr.push_back(pj);
        }
        e["points"] = arr;
        final_round.push_back(e);
    }
    out["final_round_points"] = final_round;
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale federated continual learning simulator"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir = "out";
    std::uint64_t seed = 0;
    bool seed_given = false;
    std::vector<std::string> ablation_flags;

    auto add_common = [&](CLI::App* cmd, bool with_seed, bool with_ablation) {
        cmd->add_option("--config", config_path, "configuration file (JSON)")->required();
        cmd->add_option("--out", out_dir, "output directory");
        if (with_seed)
            cmd->add_option_function<std::uint64_t>(
                   "--seed",
                   [&](const std::uint64_t& v) {
                       seed = v;
                       seed_given = true;
                   },
                   "random seed (defaults to the first configured seed)");
        if (with_ablation)
            cmd->add_option("--ablation", ablation_flags, "toggle a component, e.g. smcf=off")->take_all();
    };

    CLI::App* run_cmd = app.add_subcommand("run", "run one experiment and write results");
    add_common(run_cmd, true, true);
    CLI::App* sweep_cmd = app.add_subcommand("sweep", "run every configured seed and aggregate");
    add_common(sweep_cmd, false, true);
    CLI::App* diag_cmd = app.add_subcommand("diagnose", "run once and emit server consensus reports");
    add_common(diag_cmd, true, false);

    CLI11_PARSE(app, argc, argv);

    try {
        FederationConfig cfg = load_config(config_path);
        apply_ablation_flags(cfg, ablation_flags);

        if (run_cmd->parsed()) {
            const std::uint64_t s = seed_given ? seed : cfg.seeds.front();
            ResultBundle bundle = run_experiment(cfg, s);
            write_outputs(bundle, out_dir);
            std::cout << "seed " << s << ": mean final back-test accuracy " << bundle.mean_final_backtest()
                      << " (" << bundle.wall_seconds << " s)\n"
                      << "outputs in " << out_dir << "\n";
        } else if (sweep_cmd->parsed()) {
            SweepResult sweep = run_seed_sweep(cfg);
            std::filesystem::create_directories(out_dir);
            for (const ResultBundle& b : sweep.bundles)
                write_outputs(b, std::filesystem::path(out_dir) / ("seed_" + std::to_string(b.seed)));
            {
                std::ofstream f(std::filesystem::path(out_dir) / "summary.json");
                f << sweep.summary.dump(2) << '\n';
            }
            {
                std::ofstream f(std::filesystem::path(out_dir) / "metrics.csv", std::ios::binary);
                f << "seed,client,after_task,eval_task,accuracy\n";
                for (const ResultBundle& b : sweep.bundles) {
                    std::ostringstream one;
                    write_metrics_csv(one, b);
                    const std::string s = one.str();
                    f << s.substr(s.find('\n') + 1);
                }
            }
            std::cout << "swept " << sweep.bundles.size() << " seeds; mean final back-test "
                      << sweep.summary["mean_final_backtest"]["mean"] << " +- "
                      << sweep.summary["mean_final_backtest"]["std"] << "\n"
                      << "outputs in " << out_dir << "\n";
        } else if (diag_cmd->parsed()) {
            const std::uint64_t s = seed_given ? seed : cfg.seeds.front();
            ResultBundle bundle = run_experiment(cfg, s);
            auto j = consensus_json(bundle);
            if (diag_cmd->count("--out") > 0) {
                std::filesystem::create_directories(out_dir);
                std::ofstream f(std::filesystem::path(out_dir) / "consensus.json");
                f << j.dump(2) << '\n';
                std::cout << "consensus report in " << out_dir << "/consensus.json\n";
            } else {
                std::cout << j.dump(2) << '\n';
            }
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
