#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hybridflow/common.hpp"

namespace hybridflow {

inline constexpr double kDefaultCellLengthM = 1.5;

struct Node {
    std::string id;
    Point position;
};

struct Edge {
    std::string id;
    std::size_t from = 0;  // node index
    std::size_t to = 0;
    double length_m = 0.0;
    int lanes = 1;
    double v_max_kmh = 0.0;
    int v_max_cells = 1;
    int cell_count = 1;
    /// Per lane, the class names allowed on it. Empty: all lanes open to all.
    std::vector<std::vector<std::string>> lane_policy;
};

struct Detector {
    std::string id;
    std::size_t edge = 0;
    int cell = 0;
    /// Monitored lanes; empty means every lane of the edge.
    std::vector<int> lanes;
};

struct Route {
    std::vector<std::size_t> edges;  // edge indices
    double free_flow_time_s = 0.0;
    /// Ring routes wrap from the last edge back to the first and never exit.
    bool cyclic = false;
};

/// Directed multi-lane road graph discretized into CA cells.
/// Immutable once built, except for detector registration during setup.
class RoadNetwork {
public:
    RoadNetwork() = default;
    explicit RoadNetwork(double cell_length_m) : cell_length_m_(cell_length_m) {}

    std::size_t add_node(std::string id, Point position);
    std::size_t add_edge(std::string id, const std::string& from, const std::string& to,
                         double length_m, int lanes, double v_max_kmh);

    /// Registers a detector; returns its id. Throws on out-of-range cell/lanes.
    std::string place_detector(const std::string& edge_id, int cell,
                               std::vector<int> lanes = {}, std::string id = {});

    double cell_length_m() const { return cell_length_m_; }
    const std::vector<Node>& nodes() const { return nodes_; }
    const std::vector<Edge>& edges() const { return edges_; }
    const std::vector<Detector>& detectors() const { return detectors_; }

    const Edge& edge(std::size_t i) const { return edges_.at(i); }
    Edge& mutable_edge(std::size_t i) { return edges_.at(i); }
    std::size_t node_index(const std::string& id) const;
    std::size_t edge_index(const std::string& id) const;
    std::size_t detector_index(const std::string& id) const;
    bool has_node(const std::string& id) const { return node_ids_.count(id) != 0; }
    bool has_edge(const std::string& id) const { return edge_ids_.count(id) != 0; }

    std::vector<std::size_t> out_edges(std::size_t node) const;

    /// Free-flow traversal time of an edge: length / (v_max_cells * cell_length).
    double free_flow_time(std::size_t edge) const;
    double free_flow_time(const std::vector<std::size_t>& edges) const;

    /// Planar position of a point at `offset_m` along an edge.
    Point position_on(std::size_t edge, double offset_m) const;

    std::vector<std::string> edge_ids(const Route& route) const;
    Route make_route(const std::vector<std::string>& edge_ids, bool cyclic = false) const;

    nlohmann::json to_json() const;

private:
    double cell_length_m_ = kDefaultCellLengthM;
    std::vector<Node> nodes_;
    std::vector<Edge> edges_;
    std::vector<Detector> detectors_;
    std::map<std::string, std::size_t> node_ids_;
    std::map<std::string, std::size_t> edge_ids_;
    std::map<std::string, std::size_t> detector_ids_;
};

/// Cells per step reachable at a speed limit, at least 1.
int speed_to_cells(double v_max_kmh, double cell_length_m);

/// Builds a network from a version-1 network document. Unknown fields are
/// rejected; errors name the offending edge, node or detector.
RoadNetwork build_network(const nlohmann::json& spec);
RoadNetwork load_network(const std::string& path);

/// Up to k loop-free routes ordered by free-flow time, ties broken by the
/// lexicographic edge-id sequence. Empty when dest is unreachable.
std::vector<Route> route_candidates(const RoadNetwork& net, const std::string& origin,
                                    const std::string& dest, std::size_t k);

/// Upper bound on simple paths enumerated exhaustively before route_candidates
/// switches to Yen's algorithm.
inline constexpr std::size_t kExhaustivePathLimit = 10000;

/// Yen's k-shortest loop-free paths (repeated Dijkstra with edge exclusion).
std::vector<Route> yen_k_shortest(const RoadNetwork& net, std::size_t origin,
                                  std::size_t dest, std::size_t k);

}  // namespace hybridflow
