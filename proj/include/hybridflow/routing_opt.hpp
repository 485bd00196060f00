#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hybridflow/road_net.hpp"
#include "hybridflow/traffic_ca.hpp"

namespace hybridflow {

/// Route latency in seconds as a function of route inflow in veh/h.
struct LatencyFunction {
    enum class Kind { bpr, affine };
    Kind kind = Kind::bpr;
    double t0 = 0.0;
    double a = 0.15;       // bpr
    double b = 4.0;        // bpr
    double q_ref = 1.0;    // bpr capacity reference
    double slope = 0.0;    // affine: t0 + slope * q

    static LatencyFunction bpr(double t0, double q_ref, double a = 0.15, double b = 4.0);
    static LatencyFunction affine(double t0, double slope);

    double operator()(double q) const;
    double derivative(double q) const;
    /// Integral from 0 to q (Beckmann term).
    double integral(double q) const;
    /// Smallest q >= 0 with latency >= tau.
    double inverse(double tau) const;
};

struct RouteChoice {
    std::vector<std::string> edges;
    LatencyFunction latency;
    double q_crit_veh_h = 1.0;
};

struct OdDemand {
    std::string od;
    double demand_veh_h = 0.0;
    std::vector<RouteChoice> routes;
};

struct AssignmentProblem {
    std::vector<OdDemand> ods;
    void validate() const;
};

struct FlowSplit {
    std::vector<std::vector<double>> flows;  // per OD, per route, veh/h
    double objective = 0.0;
    bool converged = true;
    bool feasible = true;  // bmp family: demand below total critical flow
    std::size_t iterations = 0;
    std::string method;

    /// Split proportions of one OD (uniform when its demand is zero).
    std::vector<double> proportions(const AssignmentProblem& p, std::size_t od) const;
    nlohmann::json to_json(const AssignmentProblem& p) const;
};

struct WardropOptions {
    enum class Method { gradient_projection, msa };
    std::size_t max_iterations = 500;
    double tol_s = 0.01;
    Method method = Method::gradient_projection;
};

FlowSplit assign_wardrop(const AssignmentProblem& problem, const WardropOptions& options = {});
FlowSplit assign_bmp(const AssignmentProblem& problem);
/// Maximizes min margin - lambda * (Beckmann potential / demand), per OD.
FlowSplit assign_combined(const AssignmentProblem& problem, double lambda = 0.01);

/// Per OD: max latency over used routes minus min latency over all routes.
std::vector<double> wardrop_gap(const AssignmentProblem& problem, const FlowSplit& split);
/// Per OD: min over routes of q_crit - q.
std::vector<double> min_margins(const AssignmentProblem& problem, const FlowSplit& split);

struct Bottleneck {
    std::string edge;
    std::string detector;
    double onset_t = 0.0;
    double measured_flow_veh_h = 0.0;  // flow in the onset window
    double q_crit_veh_h = 0.0;         // max flow observed before onset
};

/// Flags detectors whose occupancy stays above `density_crit` for at least
/// `sustain_s` (consecutive windows). One entry per detector, first episode.
std::vector<Bottleneck> detect_bottlenecks(
    const std::map<std::string, std::vector<FlowObservation>>& observations,
    const RoadNetwork& net, double density_crit = 0.5, double sustain_s = 60.0);

// --- evaluation loop against the CA ---------------------------------------

enum class SplitSource { fixed, wardrop, bmp, combined };
std::string to_string(SplitSource s);
SplitSource parse_split_source(const std::string& name);

struct RoutingScenario {
    std::shared_ptr<const RoadNetwork> net;
    std::vector<VehicleClass> classes;
    std::string origin;
    std::string dest;
    double demand_veh_h = 0.0;
    std::vector<std::vector<std::string>> routes;  // candidate routes, shortest first
    std::vector<double> fixed_splits;              // empty: all on routes[0]
    double duration_s = 1800.0;
    double lambda = 0.01;
    double probe_demand_veh_h = 3000.0;
    double probe_duration_s = 900.0;
    double density_crit = 0.5;
    double sustain_s = 120.0;
};

struct Calibration {
    std::vector<double> q_crit_veh_h;  // per route
    std::vector<double> free_flow_s;   // per route
    std::vector<std::vector<Bottleneck>> bottlenecks;

    nlohmann::json to_json() const;
};

/// One probe run per route with all probe demand on it.
Calibration calibrate(const RoutingScenario& scenario, std::uint64_t seed);
AssignmentProblem routing_problem(const RoutingScenario& scenario, const Calibration& cal);

struct Evaluation {
    SplitSource source = SplitSource::fixed;
    std::vector<double> splits;
    std::optional<FlowSplit> assignment;
    std::optional<double> mean_dwell_s;
    std::size_t trips = 0;
    nlohmann::json to_json() const;
};

Evaluation evaluate_policy(const RoutingScenario& scenario, SplitSource source,
                           std::uint64_t seed, const Calibration* calibration = nullptr);

}  // namespace hybridflow
