#pragma once

#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hybridflow/rng.hpp"
#include "hybridflow/road_net.hpp"

namespace hybridflow {

/// Brake-light CA parameters of one vehicle class. Velocities and lengths are
/// in cells per step (1 s) and cells.
struct VehicleClass {
    std::string name = "car";
    int v_max_cells = 20;
    int length_cells = 5;
    double p_dawdle = 0.1;
    double p_brake = 0.94;
    double p_standstill = 0.5;
    int horizon_steps = 6;
    int security_gap_cells = 7;
    bool connected = false;
    /// Relative share among generated vehicles when a demand entry has no mix.
    double share = 1.0;
};

VehicleClass default_car();
VehicleClass default_truck();
VehicleClass default_automated_car();
/// Looks up one of the built-in classes ("car", "truck", "automated_car").
VehicleClass default_class(const std::string& name);
/// Built-in class named by "name", overridden field by field.
VehicleClass parse_class(const nlohmann::json& j);
nlohmann::json class_to_json(const VehicleClass& c);

struct DemandEntry {
    std::string origin;
    std::string dest;
    double rate_veh_h = 0.0;
    /// Route split proportions; must sum to 1. Routes default to the first
    /// splits.size() route_candidates between origin and dest.
    std::vector<double> splits{1.0};
    std::vector<std::vector<std::string>> routes;
    /// Optional class-name -> share override.
    std::map<std::string, double> class_mix;
};

struct LanePolicySpec {
    std::string edge;
    std::vector<std::vector<std::string>> lanes;
};

struct ScenarioOptions {
    /// Reduces the update to the classic Nagel-Schreckenberg CA
    /// (no anticipation, no brake lights, single dawdle probability).
    bool nasch_degenerate = false;
    double detector_window_s = 60.0;
    /// Records positions of connected vehicles (at most this many).
    std::size_t record_trajectories = 0;
};

struct VehicleState {
    std::uint64_t id = 0;
    std::size_t cls = 0;
    std::size_t route = 0;  // index into SimState::routes()
    std::size_t progress = 0;
    std::size_t edge = 0;
    int lane = 0;
    int front = 0;  // front cell on `edge`
    int velocity = 0;
    bool brake_light = false;
    double spawn_time_s = 0.0;
    // Edge/lane holding the part of the body behind cell 0, if any.
    std::size_t prev_edge = 0;
    int prev_lane = -1;
    int blocked_steps = 0;

    int tail(int length) const { return front - length + 1; }
};

struct CompletedTrip {
    std::uint64_t id = 0;
    std::size_t cls = 0;
    std::size_t route = 0;
    double spawn_time_s = 0.0;
    double exit_time_s = 0.0;
    double dwell_s() const { return exit_time_s - spawn_time_s; }
};

struct FlowObservation {
    std::string detector;
    double t0 = 0.0;
    double t1 = 0.0;
    std::size_t count = 0;
    std::optional<double> mean_speed_mps;  // empty when nothing crossed
    std::map<std::string, std::size_t> per_class;
    double occupancy = 0.0;

    double flow_veh_h() const { return t1 > t0 ? count * 3600.0 / (t1 - t0) : 0.0; }
};

struct ClassThroughput {
    std::size_t trips = 0;
    std::optional<double> mean_dwell_s;
};

struct TrafficMetrics {
    std::optional<double> mean_dwell_s;
    std::size_t trips = 0;
    std::map<std::string, ClassThroughput> per_class;
    std::map<std::string, std::vector<FlowObservation>> observations;

    nlohmann::json summary_json() const;
};

struct TimedPosition {
    double t = 0.0;
    Point position;
    double speed_mps = 0.0;
};

/// Full microscopic traffic state. Single-threaded; distinct instances are
/// independent.
class SimState {
public:
    SimState(std::shared_ptr<const RoadNetwork> net, std::vector<VehicleClass> classes,
             std::uint64_t seed, ScenarioOptions options = {});

    const RoadNetwork& network() const { return *net_; }
    std::shared_ptr<const RoadNetwork> network_ptr() const { return net_; }
    const std::vector<VehicleClass>& classes() const { return classes_; }
    std::size_t class_index(const std::string& name) const;
    const std::vector<Route>& routes() const { return routes_; }
    const std::vector<VehicleState>& vehicles() const { return vehicles_; }
    const std::vector<CompletedTrip>& trips() const { return trips_; }
    double clock_s() const { return static_cast<double>(clock_); }
    std::uint64_t injected() const { return injected_; }
    std::uint64_t exited() const { return exited_; }
    std::size_t queued() const;
    const ScenarioOptions& options() const { return options_; }
    const std::map<std::uint64_t, std::vector<TimedPosition>>& trajectories() const {
        return trajectories_;
    }

    std::size_t add_route(Route route);
    void add_demand(const DemandEntry& entry);

    /// Places a vehicle directly (ring and oracle scenarios). Throws if the
    /// cells are taken or the lane is forbidden for the class.
    std::uint64_t place_vehicle(const std::string& cls, std::size_t route, std::size_t progress,
                                int lane, int front, int velocity = 0);

    /// Restricts which classes may use each lane of an edge. Empty inner
    /// lists are rejected only if every lane ends up closed to every class.
    void apply_lane_policy(const std::string& edge, const std::vector<std::vector<std::string>>& lanes);
    bool lane_allowed(std::size_t edge, int lane, std::size_t cls) const;

    /// Advances one 1 s step.
    void step();
    TrafficMetrics run(double duration_s);

    FlowObservation detector_readout(const std::string& detector, double t0, double t1) const;

    /// Hash of clock and every vehicle's position/velocity/brake light.
    std::uint64_t state_hash() const;

    /// Id of some vehicle sharing a cell with another one, if any.
    std::optional<std::uint64_t> find_collision() const;

private:
    struct DemandProcess {
        DemandEntry entry;
        std::vector<std::size_t> routes;
        std::vector<double> cumulative_split;
        std::vector<double> cumulative_class;
        double probability = 0.0;
    };
    struct Pending {
        std::uint64_t id;
        std::size_t cls;
        std::size_t route;
        double spawn_time_s;
    };
    struct Obstacle {
        int gap = 0;
        int vehicle = -1;  // index into vehicles_, -1 for walls/sinks
    };
    struct Crossing {
        double t;
        double speed_mps;
        std::size_t cls;
    };

    void arrivals();
    void inject();
    void change_lanes();
    void grant_junctions();
    std::vector<Obstacle> obstacles(std::size_t vi) const;
    void update_velocities();
    void move();
    void rebuild_lanes();
    void record_detectors(const std::vector<VehicleState>& before);
    int lane_index(std::size_t edge, int lane) const { return lane_offset_[edge] + lane; }
    bool cells_free(std::size_t edge, int lane, int from, int to, int ignore) const;
    int entry_lane(std::size_t edge, int lane, std::size_t cls) const;
    std::optional<std::size_t> next_edge(const VehicleState& v) const;
    int vmax(const VehicleState& v) const;

    std::shared_ptr<const RoadNetwork> net_;
    std::vector<VehicleClass> classes_;
    ScenarioOptions options_;
    Rng traffic_rng_;
    Rng injection_rng_;
    std::int64_t clock_ = 0;
    std::uint64_t next_id_ = 0;
    std::uint64_t injected_ = 0;
    std::uint64_t exited_ = 0;

    std::vector<Route> routes_;
    std::vector<DemandProcess> demand_;
    std::map<std::size_t, std::deque<Pending>> queues_;  // keyed by first edge
    std::vector<VehicleState> vehicles_;                 // ascending id
    std::vector<CompletedTrip> trips_;

    std::vector<int> lane_offset_;
    std::vector<std::vector<int>> lanes_;       // vehicle indices by front, per lane slot
    std::vector<std::vector<int>> spill_in_;    // vehicles whose tail reaches into a lane slot
    std::vector<std::uint32_t> lane_mask_;      // allowed-class bitmask per lane slot
    std::vector<char> granted_;                 // per vehicle, crossing allowed this step
    std::vector<int> raw_gap_;

    std::vector<std::vector<Crossing>> crossings_;   // per detector
    std::vector<std::vector<float>> occupancy_;      // per detector, per step
    std::map<std::uint64_t, std::vector<TimedPosition>> trajectories_;
};

struct ScenarioConfig {
    std::string network_ref;
    std::vector<VehicleClass> classes;
    std::vector<DemandEntry> demand;
    std::uint64_t seed = 1;
    double duration_s = 3600.0;
    std::vector<LanePolicySpec> lane_policies;
    ScenarioOptions options;
};

ScenarioConfig parse_scenario(const nlohmann::json& j);
nlohmann::json scenario_to_json(const ScenarioConfig& config);

/// Empty network with queued Bernoulli arrival processes for each demand entry.
SimState init_scenario(std::shared_ptr<const RoadNetwork> net,
                       const std::vector<DemandEntry>& demand,
                       std::vector<VehicleClass> classes, std::uint64_t seed,
                       ScenarioOptions options = {});
SimState init_scenario(std::shared_ptr<const RoadNetwork> net, const ScenarioConfig& config);

/// Per-detector CSV: t0,t1,count,mean_speed,<class counts>,occupancy.
std::string observations_csv(const std::vector<FlowObservation>& obs,
                             const std::vector<VehicleClass>& classes);

}  // namespace hybridflow
