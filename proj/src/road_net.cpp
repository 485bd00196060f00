#include "hybridflow/road_net.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <queue>
#include <set>

#include "hybridflow/json_util.hpp"

namespace hybridflow {

using nlohmann::json;

int speed_to_cells(double v_max_kmh, double cell_length_m) {
    const double cells = v_max_kmh / 3.6 / cell_length_m;
    return std::max(1, static_cast<int>(std::floor(cells + 1e-9)));
}

std::size_t RoadNetwork::add_node(std::string id, Point position) {
    if (node_ids_.count(id)) throw Error("duplicate node id '" + id + "'");
    node_ids_.emplace(id, nodes_.size());
    nodes_.push_back({std::move(id), position});
    return nodes_.size() - 1;
}

std::size_t RoadNetwork::add_edge(std::string id, const std::string& from,
                                  const std::string& to, double length_m, int lanes,
                                  double v_max_kmh) {
    if (edge_ids_.count(id)) throw Error("duplicate edge id '" + id + "'");
    if (!node_ids_.count(from))
        throw Error("edge '" + id + "' references unknown node '" + from + "'");
    if (!node_ids_.count(to))
        throw Error("edge '" + id + "' references unknown node '" + to + "'");
    if (!(length_m > 0.0) || !std::isfinite(length_m))
        throw Error("edge '" + id + "' has non-positive length");
    if (lanes < 1) throw Error("edge '" + id + "' has zero lanes");
    if (!(v_max_kmh > 0.0)) throw Error("edge '" + id + "' has non-positive v_max_kmh");

    Edge e;
    e.id = id;
    e.from = node_ids_.at(from);
    e.to = node_ids_.at(to);
    e.length_m = length_m;
    e.lanes = lanes;
    e.v_max_kmh = v_max_kmh;
    e.v_max_cells = speed_to_cells(v_max_kmh, cell_length_m_);
    e.cell_count = std::max(1, static_cast<int>(std::ceil(length_m / cell_length_m_ - 1e-9)));
    edge_ids_.emplace(std::move(id), edges_.size());
    edges_.push_back(std::move(e));
    return edges_.size() - 1;
}

std::string RoadNetwork::place_detector(const std::string& edge_id, int cell,
                                        std::vector<int> lanes, std::string id) {
    const std::size_t e = edge_index(edge_id);
    const Edge& edge = edges_[e];
    if (cell < 0 || cell >= edge.cell_count) {
        throw Error("detector cell " + std::to_string(cell) + " out of range for edge '" +
                    edge_id + "' (" + std::to_string(edge.cell_count) + " cells)");
    }
    for (int l : lanes) {
        if (l < 0 || l >= edge.lanes)
            throw Error("detector lane " + std::to_string(l) + " out of range on edge '" +
                        edge_id + "'");
    }
    std::sort(lanes.begin(), lanes.end());
    lanes.erase(std::unique(lanes.begin(), lanes.end()), lanes.end());
    if (id.empty()) id = "det" + std::to_string(detectors_.size());
    if (detector_ids_.count(id)) throw Error("duplicate detector id '" + id + "'");
    detector_ids_.emplace(id, detectors_.size());
    detectors_.push_back({id, e, cell, std::move(lanes)});
    return id;
}

std::size_t RoadNetwork::node_index(const std::string& id) const {
    auto it = node_ids_.find(id);
    if (it == node_ids_.end()) throw Error("unknown node '" + id + "'");
    return it->second;
}

std::size_t RoadNetwork::edge_index(const std::string& id) const {
    auto it = edge_ids_.find(id);
    if (it == edge_ids_.end()) throw Error("unknown edge '" + id + "'");
    return it->second;
}

std::size_t RoadNetwork::detector_index(const std::string& id) const {
    auto it = detector_ids_.find(id);
    if (it == detector_ids_.end()) throw Error("unknown detector '" + id + "'");
    return it->second;
}

std::vector<std::size_t> RoadNetwork::out_edges(std::size_t node) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < edges_.size(); ++i)
        if (edges_[i].from == node) out.push_back(i);
    return out;
}

double RoadNetwork::free_flow_time(std::size_t e) const {
    const Edge& edge = edges_.at(e);
    return edge.length_m / (edge.v_max_cells * cell_length_m_);
}

double RoadNetwork::free_flow_time(const std::vector<std::size_t>& edges) const {
    double t = 0.0;
    for (std::size_t e : edges) t += free_flow_time(e);
    return t;
}

Point RoadNetwork::position_on(std::size_t e, double offset_m) const {
    const Edge& edge = edges_.at(e);
    const Point a = nodes_[edge.from].position;
    const Point b = nodes_[edge.to].position;
    const double f = std::clamp(offset_m / edge.length_m, 0.0, 1.0);
    return {a.x + f * (b.x - a.x), a.y + f * (b.y - a.y)};
}

std::vector<std::string> RoadNetwork::edge_ids(const Route& route) const {
    std::vector<std::string> ids;
    ids.reserve(route.edges.size());
    for (std::size_t e : route.edges) ids.push_back(edges_.at(e).id);
    return ids;
}

Route RoadNetwork::make_route(const std::vector<std::string>& ids, bool cyclic) const {
    if (ids.empty()) throw Error("route has no edges");
    Route r;
    r.cyclic = cyclic;
    for (const auto& id : ids) r.edges.push_back(edge_index(id));
    for (std::size_t i = 1; i < r.edges.size(); ++i) {
        if (edges_[r.edges[i - 1]].to != edges_[r.edges[i]].from)
            throw Error("route edges '" + ids[i - 1] + "' and '" + ids[i] +
                        "' do not share a node");
    }
    if (cyclic && edges_[r.edges.back()].to != edges_[r.edges.front()].from)
        throw Error("cyclic route does not close on itself");
    std::set<std::size_t> seen(r.edges.begin(), r.edges.end());
    if (seen.size() != r.edges.size()) throw Error("route repeats an edge");
    r.free_flow_time_s = free_flow_time(r.edges);
    return r;
}

json RoadNetwork::to_json() const {
    json j;
    j["version"] = 1;
    j["cell_length_m"] = cell_length_m_;
    j["nodes"] = json::array();
    for (const auto& n : nodes_)
        j["nodes"].push_back({{"id", n.id}, {"x", n.position.x}, {"y", n.position.y}});
    j["edges"] = json::array();
    for (const auto& e : edges_) {
        json je = {{"id", e.id},
                   {"from", nodes_[e.from].id},
                   {"to", nodes_[e.to].id},
                   {"length_m", e.length_m},
                   {"lanes", e.lanes},
                   {"v_max_kmh", e.v_max_kmh}};
        if (!e.lane_policy.empty()) je["lane_policy"] = e.lane_policy;
        j["edges"].push_back(std::move(je));
    }
    j["detectors"] = json::array();
    for (const auto& d : detectors_) {
        j["detectors"].push_back(
            {{"id", d.id}, {"edge", edges_[d.edge].id}, {"cell", d.cell}, {"lanes", d.lanes}});
    }
    return j;
}

namespace {

template <class T>
T required(const json& obj, const char* key, const std::string& where) {
    if (!obj.contains(key)) throw Error(where + ": missing field '" + key + "'");
    try {
        return obj.at(key).get<T>();
    } catch (const json::exception&) {
        throw Error(where + ": field '" + key + "' has the wrong type");
    }
}

}  // namespace

RoadNetwork build_network(const json& spec) {
    reject_unknown(spec, {"version", "cell_length_m", "nodes", "edges", "detectors"},
                   "network");
    const int version = required<int>(spec, "version", "network");
    if (version != 1) throw Error("network: unsupported version " + std::to_string(version));
    const double cell = spec.contains("cell_length_m")
                            ? required<double>(spec, "cell_length_m", "network")
                            : kDefaultCellLengthM;
    if (!(cell > 0.0)) throw Error("network: cell_length_m must be positive");

    RoadNetwork net(cell);
    for (const auto& n : required<json>(spec, "nodes", "network")) {
        reject_unknown(n, {"id", "x", "y"}, "node");
        const auto id = required<std::string>(n, "id", "node");
        net.add_node(id, {required<double>(n, "x", "node '" + id + "'"),
                          required<double>(n, "y", "node '" + id + "'")});
    }
    for (const auto& e : required<json>(spec, "edges", "network")) {
        reject_unknown(e, {"id", "from", "to", "length_m", "lanes", "v_max_kmh", "lane_policy"},
                       "edge");
        const auto id = required<std::string>(e, "id", "edge");
        const std::string where = "edge '" + id + "'";
        const std::size_t idx = net.add_edge(
            id, required<std::string>(e, "from", where), required<std::string>(e, "to", where),
            required<double>(e, "length_m", where), required<int>(e, "lanes", where),
            required<double>(e, "v_max_kmh", where));
        if (e.contains("lane_policy")) {
            auto policy = required<std::vector<std::vector<std::string>>>(e, "lane_policy", where);
            if (static_cast<int>(policy.size()) != net.edge(idx).lanes)
                throw Error(where + ": lane_policy length must equal lane count");
            net.mutable_edge(idx).lane_policy = std::move(policy);
        }
    }
    if (spec.contains("detectors")) {
        for (const auto& d : spec.at("detectors")) {
            reject_unknown(d, {"id", "edge", "cell", "lanes"}, "detector");
            const auto id = required<std::string>(d, "id", "detector");
            const std::string where = "detector '" + id + "'";
            const auto edge = required<std::string>(d, "edge", where);
            if (!net.has_edge(edge))
                throw Error(where + " references unknown edge '" + edge + "'");
            std::vector<int> lanes;
            if (d.contains("lanes")) lanes = required<std::vector<int>>(d, "lanes", where);
            net.place_detector(edge, required<int>(d, "cell", where), std::move(lanes), id);
        }
    }
    return net;
}

RoadNetwork load_network(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open network file '" + path + "'");
    json spec;
    try {
        in >> spec;
    } catch (const json::exception& e) {
        throw Error("network file '" + path + "' does not parse: " + e.what());
    }
    return build_network(spec);
}

namespace {

bool route_less(const RoadNetwork& net, const Route& a, const Route& b) {
    const double tol = 1e-9 * std::max(1.0, std::max(a.free_flow_time_s, b.free_flow_time_s));
    if (std::fabs(a.free_flow_time_s - b.free_flow_time_s) > tol)
        return a.free_flow_time_s < b.free_flow_time_s;
    return net.edge_ids(a) < net.edge_ids(b);
}

// Returns false if the enumeration exceeded `limit` paths.
bool enumerate_simple_paths(const RoadNetwork& net, std::size_t origin, std::size_t dest,
                            std::size_t limit, std::vector<Route>& out) {
    std::vector<char> on_path(net.nodes().size(), 0);
    std::vector<std::size_t> path;
    std::vector<std::vector<std::size_t>> adjacency(net.nodes().size());
    for (std::size_t i = 0; i < net.edges().size(); ++i)
        adjacency[net.edges()[i].from].push_back(i);

    bool overflow = false;
    std::function<void(std::size_t)> dfs = [&](std::size_t node) {
        if (overflow) return;
        if (node == dest) {
            if (out.size() >= limit) {
                overflow = true;
                return;
            }
            out.push_back({path, net.free_flow_time(path), false});
            return;
        }
        on_path[node] = 1;
        for (std::size_t e : adjacency[node]) {
            const std::size_t next = net.edges()[e].to;
            if (on_path[next]) continue;
            path.push_back(e);
            dfs(next);
            path.pop_back();
        }
        on_path[node] = 0;
    };
    dfs(origin);
    return !overflow;
}

struct DijkstraResult {
    std::vector<std::size_t> edges;
    bool found = false;
};

DijkstraResult dijkstra(const RoadNetwork& net, std::size_t origin, std::size_t dest,
                        const std::vector<char>& banned_edge,
                        const std::vector<char>& banned_node) {
    const std::size_t n = net.nodes().size();
    std::vector<double> dist(n, std::numeric_limits<double>::infinity());
    std::vector<std::size_t> via(n, static_cast<std::size_t>(-1));
    using Item = std::pair<double, std::size_t>;
    std::priority_queue<Item, std::vector<Item>, std::greater<>> pq;
    dist[origin] = 0.0;
    pq.push({0.0, origin});
    while (!pq.empty()) {
        auto [d, u] = pq.top();
        pq.pop();
        if (d > dist[u]) continue;
        if (u == dest) break;
        for (std::size_t e : net.out_edges(u)) {
            if (banned_edge[e]) continue;
            const std::size_t v = net.edges()[e].to;
            if (banned_node[v]) continue;
            const double nd = d + net.free_flow_time(e);
            const bool better = nd < dist[v] ||
                                (nd == dist[v] && via[v] != static_cast<std::size_t>(-1) &&
                                 net.edges()[e].id < net.edges()[via[v]].id);
            if (better) {
                dist[v] = nd;
                via[v] = e;
                pq.push({nd, v});
            }
        }
    }
    DijkstraResult r;
    if (!std::isfinite(dist[dest])) return r;
    for (std::size_t v = dest; v != origin;) {
        const std::size_t e = via[v];
        r.edges.push_back(e);
        v = net.edges()[e].from;
    }
    std::reverse(r.edges.begin(), r.edges.end());
    r.found = true;
    return r;
}

}  // namespace

std::vector<Route> yen_k_shortest(const RoadNetwork& net, std::size_t origin, std::size_t dest,
                                  std::size_t k) {
    std::vector<Route> accepted;
    if (k == 0 || origin == dest) return accepted;
    const std::size_t ne = net.edges().size();
    const std::size_t nn = net.nodes().size();
    auto first = dijkstra(net, origin, dest, std::vector<char>(ne, 0), std::vector<char>(nn, 0));
    if (!first.found) return accepted;
    accepted.push_back({first.edges, net.free_flow_time(first.edges), false});

    std::vector<Route> candidates;
    std::set<std::vector<std::size_t>> known{first.edges};
    while (accepted.size() < k) {
        const Route& last = accepted.back();
        for (std::size_t i = 0; i < last.edges.size(); ++i) {
            std::vector<std::size_t> root(last.edges.begin(), last.edges.begin() + i);
            const std::size_t spur = i == 0 ? origin : net.edges()[last.edges[i - 1]].to;
            std::vector<char> banned_edge(ne, 0), banned_node(nn, 0);
            for (const Route& r : accepted) {
                if (r.edges.size() > i && std::equal(root.begin(), root.end(), r.edges.begin()))
                    banned_edge[r.edges[i]] = 1;
            }
            for (std::size_t e : root) banned_node[net.edges()[e].from] = 1;
            auto spur_path = dijkstra(net, spur, dest, banned_edge, banned_node);
            if (!spur_path.found) continue;
            std::vector<std::size_t> total = root;
            total.insert(total.end(), spur_path.edges.begin(), spur_path.edges.end());
            if (known.insert(total).second)
                candidates.push_back({total, net.free_flow_time(total), false});
        }
        if (candidates.empty()) break;
        auto best = std::min_element(candidates.begin(), candidates.end(),
                                     [&](const Route& a, const Route& b) {
                                         return route_less(net, a, b);
                                     });
        accepted.push_back(*best);
        candidates.erase(best);
    }
    return accepted;
}

std::vector<Route> route_candidates(const RoadNetwork& net, const std::string& origin,
                                    const std::string& dest, std::size_t k) {
    const std::size_t o = net.node_index(origin);
    const std::size_t d = net.node_index(dest);
    if (o == d) throw Error("route_candidates: origin equals destination '" + origin + "'");
    if (k == 0) return {};

    std::vector<Route> all;
    if (!enumerate_simple_paths(net, o, d, kExhaustivePathLimit, all))
        return yen_k_shortest(net, o, d, k);
    std::sort(all.begin(), all.end(),
              [&](const Route& a, const Route& b) { return route_less(net, a, b); });
    if (all.size() > k) all.resize(k);
    return all;
}

}  // namespace hybridflow
