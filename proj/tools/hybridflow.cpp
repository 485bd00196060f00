// hybridflow command line: run, compare, gen-corpus, impute, assign.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "hybridflow/harness.hpp"

using namespace hybridflow;
namespace fs = std::filesystem;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open '" + path + "'");
    std::stringstream s;
    s << in.rdbuf();
    return s.str();
}

void spit(const std::string& path, const std::string& content) {
    const auto parent = fs::path(path).parent_path();
    if (!parent.empty()) fs::create_directories(parent);
    std::ofstream out(path);
    if (!out) throw Error("cannot write '" + path + "'");
    out << content;
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream in(s);
    std::string part;
    while (std::getline(in, part, ','))
        if (!part.empty()) out.push_back(part);
    return out;
}

// edge,offset_m rows, header optional.
std::vector<NetworkPosition> read_targets(const std::string& path) {
    std::istringstream in(slurp(path));
    std::string line;
    std::vector<NetworkPosition> out;
    while (std::getline(in, line)) {
        if (line.empty() || line.rfind("edge,", 0) == 0) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos) throw Error("targets: expected 'edge,offset_m' in '" + line + "'");
        out.push_back({line.substr(0, comma), std::stod(line.substr(comma + 1))});
    }
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"hybridflow: hybrid traffic co-simulation toolkit"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kToolkitVersion);

    std::string config_path, out_dir;
    std::optional<std::uint64_t> seed;
    auto* run = app.add_subcommand("run", "Run an experiment config and write report.json");
    run->add_option("--config", config_path, "Experiment JSON")->required()->check(CLI::ExistingFile);
    run->add_option("--seed", seed, "Master seed (default: the config's)");
    run->add_option("--out", out_dir, "Output directory (default: the config's output_dir, else ./out)");

    std::string policies, seeds = "1..10", compare_out;
    auto* compare = app.add_subcommand("compare", "Compare policies over seeds (mean and sample stddev)");
    compare->add_option("--config", config_path, "Experiment JSON")->required()->check(CLI::ExistingFile);
    compare->add_option("--policies", policies, "Comma list of transfer kinds and/or split sources")->required();
    compare->add_option("--seeds", seeds, "Seed range a..b or comma list");
    compare->add_option("--out", compare_out, "Also write the table as JSON here");

    CorpusOptions corpus;
    std::string corpus_dir;
    auto* gen = app.add_subcommand("gen-corpus", "Generate a synthetic fingerprint corpus");
    gen->add_option("--out", corpus_dir, "Output directory")->required();
    gen->add_option("--traces", corpus.traces, "Number of traces");
    gen->add_option("--truck-share", corpus.truck_share, "Share of truck-like traces")->check(CLI::Range(0.0, 1.0));
    gen->add_option("--noise", corpus.noise_sigma_db, "RSSI noise sigma in dB");
    gen->add_option("--seed", corpus.seed, "Corpus seed");

    std::string network_path, observations_path, targets_path, predictions_out;
    std::optional<double> length_scale;
    std::size_t knn_k = 3;
    auto* imp = app.add_subcommand("impute", "GPR and kNN volume estimates at target locations");
    imp->add_option("--network", network_path, "Network JSON")->required()->check(CLI::ExistingFile);
    imp->add_option("--observations", observations_path, "CSV edge,offset_m,day,flow")
        ->required()
        ->check(CLI::ExistingFile);
    imp->add_option("--targets", targets_path, "CSV edge,offset_m")->required()->check(CLI::ExistingFile);
    imp->add_option("--out", predictions_out, "Predictions CSV")->required();
    imp->add_option("--length-scale", length_scale, "Kernel length scale in m");
    imp->add_option("--knn", knn_k, "k for the kNN column printed to stdout");

    std::string scenario_path, method = "bmp", assign_out;
    std::uint64_t assign_seed = 1;
    auto* assign = app.add_subcommand("assign", "Calibrate a routing scenario and compute route splits");
    assign->add_option("--scenario", scenario_path, "Routing scenario JSON")->required()->check(CLI::ExistingFile);
    assign->add_option("--method", method, "wardrop, bmp or combined")
        ->check(CLI::IsMember({"wardrop", "bmp", "combined"}));
    assign->add_option("--seed", assign_seed, "Probe seed");
    assign->add_option("--out", assign_out, "Assignment JSON (default: stdout)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*run) {
            const auto config = load_experiment(config_path);
            if (out_dir.empty()) out_dir = config.output_dir.empty() ? "out" : config.output_dir;
            const auto rep = run_experiment(config, seed.value_or(config.seed), out_dir);
            std::cout << "wrote " << (fs::path(out_dir) / "report.json").string() << " ("
                      << rep.artifacts.size() << " artifacts)\n";
        } else if (*compare) {
            const auto config = load_experiment(config_path);
            const auto table = compare_policies(config, split_list(policies), parse_seed_list(seeds));
            std::cout << table.to_csv();
            if (!compare_out.empty()) spit(compare_out, table.to_json().dump(2) + "\n");
        } else if (*gen) {
            const auto traces = generate_corpus(corpus);
            write_corpus(traces, corpus_dir);
            std::cout << "wrote " << traces.size() << " traces to " << corpus_dir << "\n";
        } else if (*imp) {
            auto net = std::make_shared<RoadNetwork>(load_network(network_path));
            const auto obs = observations_from_csv(slurp(observations_path));
            const auto targets = read_targets(targets_path);
            auto kernel = default_kernel(obs);
            if (length_scale) kernel.length_scale_m = *length_scale;
            const auto model = fit_gpr(net, obs, kernel);
            const auto pred = model.predict(targets);
            spit(predictions_out, predictions_csv(targets, pred));
            NetworkDistance dist(net);
            std::cout << "edge,offset_m,gpr_mean,knn\n";
            for (std::size_t i = 0; i < targets.size(); ++i)
                std::cout << targets[i].edge << ',' << targets[i].offset_m << ',' << pred[i].mean << ','
                          << knn_estimate(dist, obs, targets[i], std::min(knn_k, obs.size())) << '\n';
            if (model.distance_fallback())
                std::cerr << "note: network kernel not positive definite, used euclidean distance\n";
        } else if (*assign) {
            const auto sc = load_routing_scenario(scenario_path);
            const auto cal = calibrate(sc, assign_seed);
            const auto problem = routing_problem(sc, cal);
            const auto split = method == "wardrop" ? assign_wardrop(problem)
                               : method == "bmp"   ? assign_bmp(problem)
                                                   : assign_combined(problem, sc.lambda);
            nlohmann::json out = {{"calibration", cal.to_json()}, {"assignment", split.to_json(problem)}};
            if (assign_out.empty()) std::cout << out.dump(2) << "\n";
            else spit(assign_out, out.dump(2) + "\n");
            if (!split.feasible) std::cerr << "note: demand exceeds the total critical flow\n";
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
