#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hybridflow/fingerprint.hpp"
#include "hybridflow/impute.hpp"
#include "hybridflow/routing_opt.hpp"
#include "hybridflow/traffic_ca.hpp"
#include "hybridflow/transfer.hpp"

namespace hybridflow {

/// Routing scenario file: network_ref (relative to the file), origin, dest,
/// demand_veh_h, routes, and the optional RoutingScenario knobs.
RoutingScenario parse_routing_scenario(const nlohmann::json& j, const std::string& base_dir);
RoutingScenario load_routing_scenario(const std::string& path);

struct TrafficStage {
    std::shared_ptr<const RoadNetwork> net;
    ScenarioConfig scenario;
};

struct RoutingStage {
    RoutingScenario scenario;
    std::vector<SplitSource> sources;
};

struct ImputeStage {
    std::shared_ptr<const RoadNetwork> net;
    std::vector<VolumeObservation> observations;
    std::vector<NetworkPosition> targets;
    KernelParams kernel;
    std::size_t knn_k = 3;
    std::optional<TemporalWeighting> temporal;
};

struct TransferStage {
    std::string scenario = "two_phase";
    std::vector<TransferPolicy> policies;
};

struct FingerprintStage {
    CorpusOptions corpus;
    bool corpus_seed_given = false;
    std::vector<Regularization> regularizations = {Regularization::l1, Regularization::l2};
    TrainOptions train;
    double train_fraction = 0.8;
    std::size_t class_share_window = 100;
};

/// Everything a run needs, loaded and validated up front.
struct ExperimentConfig {
    std::string name;
    std::uint64_t seed = 1;
    std::string output_dir;
    nlohmann::json echo;
    std::optional<TrafficStage> traffic;
    std::optional<ImputeStage> impute;
    std::optional<RoutingStage> routing;
    std::optional<TransferStage> transfer;
    std::optional<FingerprintStage> fingerprint;
};

ExperimentConfig parse_experiment(const nlohmann::json& j, const std::string& base_dir);
ExperimentConfig load_experiment(const std::string& path);

/// Stage failure; the report written so far is kept.
class StageError : public Error {
public:
    StageError(std::string stage, const std::string& cause)
        : Error("stage '" + stage + "' failed: " + cause), stage_(std::move(stage)) {}
    const std::string& stage() const { return stage_; }

private:
    std::string stage_;
};

struct ExperimentReport {
    nlohmann::json doc;
    std::vector<std::pair<std::string, std::string>> artifacts;  // file name, content

    std::string serialized() const { return doc.dump(2) + "\n"; }
};

/// Runs the enabled stages in order (traffic, impute, routing, transfer,
/// fingerprint). Each stage draws from its own sub-stream of `seed`. If
/// `out_dir` is non-empty, artifacts and report.json are written there; on a
/// stage failure the partial report is written before StageError is thrown.
ExperimentReport run_experiment(const ExperimentConfig& config, std::uint64_t seed,
                                const std::string& out_dir = {});

struct Summary {
    double mean = 0.0;
    double stddev = 0.0;  // sample standard deviation, 0 for one value
    std::size_t n = 0;
};
Summary summarize(const std::vector<double>& values);

struct ComparisonRow {
    std::string policy;
    std::optional<Summary> goodput_mbps;
    std::optional<Summary> energy_j;
    std::optional<Summary> dwell_s;
};

struct ComparisonTable {
    std::vector<ComparisonRow> rows;
    nlohmann::json to_json() const;
    std::string to_csv() const;
};

/// Names are transfer policy kinds (run on the transfer stage's drive) or
/// split sources (run on the routing stage's scenario). Seeds run in parallel.
ComparisonTable compare_policies(const ExperimentConfig& config, const std::vector<std::string>& policies,
                                 const std::vector<std::uint64_t>& seeds);

/// "1..10" or "1,2,5".
std::vector<std::uint64_t> parse_seed_list(const std::string& text);

}  // namespace hybridflow
