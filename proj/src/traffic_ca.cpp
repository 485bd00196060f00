#include "hybridflow/traffic_ca.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <tuple>

#include "hybridflow/json_util.hpp"

namespace hybridflow {

using nlohmann::json;

namespace {

constexpr int kOpenRoad = 1 << 20;

}  // namespace

VehicleClass default_car() { return VehicleClass{}; }

VehicleClass default_truck() {
    VehicleClass c;
    c.name = "truck";
    c.v_max_cells = 12;
    c.length_cells = 8;
    return c;
}

// Automated vehicles drive deterministically with a shorter security gap.
VehicleClass default_automated_car() {
    VehicleClass c;
    c.name = "automated_car";
    c.p_dawdle = 0.0;
    c.p_standstill = 0.0;
    c.security_gap_cells = 5;
    c.connected = true;
    return c;
}

VehicleClass default_class(const std::string& name) {
    if (name == "car") return default_car();
    if (name == "truck") return default_truck();
    if (name == "automated_car") return default_automated_car();
    throw Error("unknown vehicle class '" + name + "'");
}

namespace {

void validate_class(const VehicleClass& c) {
    auto prob = [&](double p, const char* what) {
        if (!(p >= 0.0 && p <= 1.0))
            throw Error("class '" + c.name + "': " + what + " must be in [0,1]");
    };
    prob(c.p_dawdle, "p_dawdle");
    prob(c.p_brake, "p_brake");
    prob(c.p_standstill, "p_standstill");
    if (c.v_max_cells < 1) throw Error("class '" + c.name + "': v_max_cells must be >= 1");
    if (c.length_cells < 1) throw Error("class '" + c.name + "': length_cells must be >= 1");
    if (c.horizon_steps < 0 || c.security_gap_cells < 0)
        throw Error("class '" + c.name + "': negative horizon or security gap");
    if (!(c.share >= 0.0)) throw Error("class '" + c.name + "': negative share");
}

}  // namespace

SimState::SimState(std::shared_ptr<const RoadNetwork> net, std::vector<VehicleClass> classes,
                   std::uint64_t seed, ScenarioOptions options)
    : net_(std::move(net)),
      classes_(std::move(classes)),
      options_(options),
      traffic_rng_(seed, "traffic"),
      injection_rng_(seed, "injection") {
    if (!net_) throw Error("SimState: null network");
    if (classes_.empty()) throw Error("SimState: no vehicle classes");
    if (classes_.size() > 32) throw Error("SimState: at most 32 vehicle classes");
    for (std::size_t i = 0; i < classes_.size(); ++i) {
        validate_class(classes_[i]);
        for (std::size_t j = 0; j < i; ++j)
            if (classes_[j].name == classes_[i].name)
                throw Error("duplicate vehicle class '" + classes_[i].name + "'");
        if (options_.nasch_degenerate) {
            auto& c = classes_[i];
            c.horizon_steps = 0;
            c.p_brake = c.p_dawdle;
            c.p_standstill = c.p_dawdle;
        }
    }

    lane_offset_.resize(net_->edges().size());
    int slots = 0;
    for (std::size_t e = 0; e < net_->edges().size(); ++e) {
        lane_offset_[e] = slots;
        slots += net_->edge(e).lanes;
    }
    lanes_.assign(slots, {});
    spill_in_.assign(slots, {});
    lane_mask_.assign(slots, ~0u);
    for (std::size_t e = 0; e < net_->edges().size(); ++e) {
        if (!net_->edge(e).lane_policy.empty())
            apply_lane_policy(net_->edge(e).id, net_->edge(e).lane_policy);
    }
    crossings_.assign(net_->detectors().size(), {});
    occupancy_.assign(net_->detectors().size(), {});
}

std::size_t SimState::class_index(const std::string& name) const {
    for (std::size_t i = 0; i < classes_.size(); ++i)
        if (classes_[i].name == name) return i;
    throw Error("unknown vehicle class '" + name + "'");
}

std::size_t SimState::queued() const {
    std::size_t n = 0;
    for (const auto& [_, q] : queues_) n += q.size();
    return n;
}

std::size_t SimState::add_route(Route route) {
    if (route.edges.empty()) throw Error("route has no edges");
    int longest = 0;
    for (const auto& c : classes_) longest = std::max(longest, c.length_cells);
    for (std::size_t e : route.edges) {
        if (net_->edge(e).cell_count < longest)
            throw Error("edge '" + net_->edge(e).id + "' is shorter than the longest vehicle");
    }
    routes_.push_back(std::move(route));
    return routes_.size() - 1;
}

void SimState::add_demand(const DemandEntry& entry) {
    if (!(entry.rate_veh_h >= 0.0))
        throw Error("demand " + entry.origin + "->" + entry.dest + ": negative rate");
    if (entry.rate_veh_h > 3600.0)
        throw Error("demand " + entry.origin + "->" + entry.dest +
                    ": rate exceeds one vehicle per step");
    if (entry.splits.empty())
        throw Error("demand " + entry.origin + "->" + entry.dest + ": no splits");
    double total = 0.0;
    for (double s : entry.splits) {
        if (!(s >= 0.0))
            throw Error("demand " + entry.origin + "->" + entry.dest + ": negative split");
        total += s;
    }
    if (std::fabs(total - 1.0) > 1e-9)
        throw Error("demand " + entry.origin + "->" + entry.dest + ": splits sum to " +
                    std::to_string(total) + ", not 1");

    DemandProcess proc;
    proc.entry = entry;
    std::vector<Route> routes;
    if (!entry.routes.empty()) {
        for (const auto& ids : entry.routes) routes.push_back(net_->make_route(ids));
    } else {
        routes = route_candidates(*net_, entry.origin, entry.dest, entry.splits.size());
    }
    if (routes.size() != entry.splits.size())
        throw Error("demand " + entry.origin + "->" + entry.dest + ": " +
                    std::to_string(entry.splits.size()) + " splits but " +
                    std::to_string(routes.size()) + " routes");
    for (auto& r : routes) proc.routes.push_back(add_route(std::move(r)));

    double acc = 0.0;
    for (double s : entry.splits) proc.cumulative_split.push_back(acc += s);
    proc.cumulative_split.back() = 1.0;

    std::vector<double> weights(classes_.size(), 0.0);
    if (!entry.class_mix.empty()) {
        for (const auto& [name, w] : entry.class_mix) {
            if (!(w >= 0.0)) throw Error("demand class_mix: negative share for '" + name + "'");
            weights[class_index(name)] = w;
        }
    } else {
        for (std::size_t i = 0; i < classes_.size(); ++i) weights[i] = classes_[i].share;
    }
    const double wsum = std::accumulate(weights.begin(), weights.end(), 0.0);
    if (!(wsum > 0.0)) throw Error("demand " + entry.origin + "->" + entry.dest + ": empty class mix");
    acc = 0.0;
    for (double w : weights) proc.cumulative_class.push_back(acc += w / wsum);
    proc.cumulative_class.back() = 1.0;

    proc.probability = entry.rate_veh_h / 3600.0;
    demand_.push_back(std::move(proc));
}

void SimState::apply_lane_policy(const std::string& edge_id,
                                 const std::vector<std::vector<std::string>>& lanes) {
    const std::size_t e = net_->edge_index(edge_id);
    const int n = net_->edge(e).lanes;
    if (static_cast<int>(lanes.size()) != n)
        throw Error("lane policy for edge '" + edge_id + "' has " +
                    std::to_string(lanes.size()) + " entries for " + std::to_string(n) +
                    " lanes");
    std::vector<std::uint32_t> masks(n, 0);
    std::uint32_t any = 0;
    for (int l = 0; l < n; ++l) {
        for (const auto& name : lanes[l]) masks[l] |= 1u << class_index(name);
        any |= masks[l];
    }
    if (any == 0) throw Error("lane policy for edge '" + edge_id + "' excludes every class");
    for (int l = 0; l < n; ++l) lane_mask_[lane_index(e, l)] = masks[l];
}

bool SimState::lane_allowed(std::size_t edge, int lane, std::size_t cls) const {
    const std::uint32_t bit = 1u << cls;
    if (lane_mask_[lane_index(edge, lane)] & bit) return true;
    // A class closed out of every lane is not restricted on this edge.
    for (int l = 0; l < net_->edge(edge).lanes; ++l)
        if (lane_mask_[lane_index(edge, l)] & bit) return false;
    return true;
}

int SimState::entry_lane(std::size_t edge, int lane, std::size_t cls) const {
    const int n = net_->edge(edge).lanes;
    const int base = std::min(lane, n - 1);
    for (int d = 0; d < n; ++d) {
        if (base - d >= 0 && lane_allowed(edge, base - d, cls)) return base - d;
        if (base + d < n && lane_allowed(edge, base + d, cls)) return base + d;
    }
    return base;
}

std::optional<std::size_t> SimState::next_edge(const VehicleState& v) const {
    const Route& r = routes_[v.route];
    if (v.progress + 1 < r.edges.size()) return r.edges[v.progress + 1];
    if (r.cyclic) return r.edges.front();
    return std::nullopt;
}

int SimState::vmax(const VehicleState& v) const {
    return std::min(classes_[v.cls].v_max_cells, net_->edge(v.edge).v_max_cells);
}

std::uint64_t SimState::place_vehicle(const std::string& cls_name, std::size_t route,
                                      std::size_t progress, int lane, int front, int velocity) {
    const std::size_t cls = class_index(cls_name);
    if (route >= routes_.size()) throw Error("place_vehicle: unknown route");
    const Route& r = routes_[route];
    if (progress >= r.edges.size()) throw Error("place_vehicle: progress beyond route");
    const std::size_t e = r.edges[progress];
    const Edge& edge = net_->edge(e);
    const int len = classes_[cls].length_cells;
    if (lane < 0 || lane >= edge.lanes) throw Error("place_vehicle: lane out of range");
    if (front < len - 1 || front >= edge.cell_count)
        throw Error("place_vehicle: vehicle does not fit on edge '" + edge.id + "'");
    if (!lane_allowed(e, lane, cls)) throw Error("place_vehicle: lane forbidden for class");
    if (velocity < 0 || velocity > classes_[cls].v_max_cells)
        throw Error("place_vehicle: velocity out of range");
    rebuild_lanes();
    if (!cells_free(e, lane, front - len + 1, front, -1))
        throw Error("place_vehicle: cells already occupied");

    VehicleState v;
    v.id = next_id_++;
    v.cls = cls;
    v.route = route;
    v.progress = progress;
    v.edge = e;
    v.lane = lane;
    v.front = front;
    v.velocity = velocity;
    v.spawn_time_s = clock_s();
    vehicles_.push_back(v);
    ++injected_;
    rebuild_lanes();
    return v.id;
}

void SimState::rebuild_lanes() {
    for (auto& l : lanes_) l.clear();
    for (auto& l : spill_in_) l.clear();
    for (std::size_t i = 0; i < vehicles_.size(); ++i) {
        const auto& v = vehicles_[i];
        lanes_[lane_index(v.edge, v.lane)].push_back(static_cast<int>(i));
        if (v.tail(classes_[v.cls].length_cells) < 0 && v.prev_lane >= 0)
            spill_in_[lane_index(v.prev_edge, v.prev_lane)].push_back(static_cast<int>(i));
    }
    for (auto& l : lanes_) {
        std::sort(l.begin(), l.end(),
                  [&](int a, int b) { return vehicles_[a].front < vehicles_[b].front; });
    }
}

bool SimState::cells_free(std::size_t edge, int lane, int from, int to, int ignore) const {
    const int slot = lane_index(edge, lane);
    const int cells = net_->edge(edge).cell_count;
    for (int i : lanes_[slot]) {
        if (i == ignore) continue;
        const auto& v = vehicles_[i];
        const int tail = std::max(0, v.tail(classes_[v.cls].length_cells));
        if (tail <= to && v.front >= from) return false;
    }
    for (int i : spill_in_[slot]) {
        if (i == ignore) continue;
        const auto& v = vehicles_[i];
        const int start = cells + v.tail(classes_[v.cls].length_cells);
        if (start <= to) return false;
    }
    return true;
}

void SimState::arrivals() {
    for (auto& proc : demand_) {
        if (!injection_rng_.bernoulli(proc.probability)) continue;
        const double ur = injection_rng_.uniform();
        const double uc = injection_rng_.uniform();
        const auto ri = static_cast<std::size_t>(
            std::upper_bound(proc.cumulative_split.begin(), proc.cumulative_split.end(), ur) -
            proc.cumulative_split.begin());
        const auto ci = static_cast<std::size_t>(
            std::upper_bound(proc.cumulative_class.begin(), proc.cumulative_class.end(), uc) -
            proc.cumulative_class.begin());
        const std::size_t route = proc.routes[std::min(ri, proc.routes.size() - 1)];
        const std::size_t cls = std::min(ci, classes_.size() - 1);
        queues_[routes_[route].edges.front()].push_back({next_id_++, cls, route, clock_s()});
    }
}

void SimState::inject() {
    bool added = false;
    for (auto& [edge, queue] : queues_) {
        const Edge& e = net_->edge(edge);
        while (!queue.empty()) {
            const Pending& p = queue.front();
            const int len = classes_[p.cls].length_cells;
            int best_lane = -1;
            int best_space = -1;
            for (int l = 0; l < e.lanes; ++l) {
                if (!lane_allowed(edge, l, p.cls)) continue;
                if (!cells_free(edge, l, 0, len - 1, -1)) continue;
                int space = kOpenRoad;
                const auto& lane = lanes_[lane_index(edge, l)];
                if (!lane.empty()) {
                    const auto& first = vehicles_[lane.front()];
                    space = first.tail(classes_[first.cls].length_cells);
                }
                if (space > best_space) {
                    best_space = space;
                    best_lane = l;
                }
            }
            if (best_lane < 0) break;

            VehicleState v;
            v.id = p.id;
            v.cls = p.cls;
            v.route = p.route;
            v.edge = edge;
            v.lane = best_lane;
            v.front = len - 1;
            v.spawn_time_s = p.spawn_time_s;
            vehicles_.push_back(v);
            auto& lane = lanes_[lane_index(edge, best_lane)];
            lane.insert(lane.begin(), static_cast<int>(vehicles_.size() - 1));
            ++injected_;
            added = true;
            if (classes_[p.cls].connected &&
                trajectories_.size() < options_.record_trajectories) {
                trajectories_[p.id] = {};
            }
            queue.pop_front();
        }
    }
    if (added) {
        std::sort(vehicles_.begin(), vehicles_.end(),
                  [](const VehicleState& a, const VehicleState& b) { return a.id < b.id; });
    }
}

void SimState::change_lanes() {
    // Gap ahead on one lane of the current edge; the edge end counts as open.
    auto lane_gap = [&](std::size_t edge, int lane, int front, int self) {
        const int cells = net_->edge(edge).cell_count;
        int gap = kOpenRoad;
        const int slot = lane_index(edge, lane);
        for (int i : lanes_[slot]) {
            if (i == self) continue;
            const auto& o = vehicles_[i];
            if (o.front > front) {
                gap = std::min(gap, o.tail(classes_[o.cls].length_cells) - front - 1);
            }
        }
        for (int i : spill_in_[slot]) {
            const auto& o = vehicles_[i];
            gap = std::min(gap, cells + o.tail(classes_[o.cls].length_cells) - front - 1);
        }
        return gap;
    };

    for (std::size_t vi = 0; vi < vehicles_.size(); ++vi) {
        auto& v = vehicles_[vi];
        const Edge& edge = net_->edge(v.edge);
        if (edge.lanes < 2) continue;
        const VehicleClass& cls = classes_[v.cls];
        const int tail = v.tail(cls.length_cells);
        if (tail < 0) continue;

        const bool forced = !lane_allowed(v.edge, v.lane, v.cls);
        const int here = lane_gap(v.edge, v.lane, v.front, static_cast<int>(vi));
        const bool want = forced || here < std::min(v.velocity + 1, vmax(v));
        if (!want) continue;

        int forced_dir = 0;
        if (forced) {
            const int target = entry_lane(v.edge, v.lane, v.cls);
            forced_dir = target > v.lane ? 1 : (target < v.lane ? -1 : 0);
        }

        int best = -1;
        int best_gap = forced ? std::numeric_limits<int>::min() : here;
        for (int dir : {-1, 1}) {
            const int target = v.lane + dir;
            if (target < 0 || target >= edge.lanes) continue;
            if (forced ? dir != forced_dir : !lane_allowed(v.edge, target, v.cls)) continue;
            if (!cells_free(v.edge, target, tail, v.front, static_cast<int>(vi))) continue;
            // Follower on the target lane must have room to stop.
            bool safe = true;
            for (int i : lanes_[lane_index(v.edge, target)]) {
                const auto& o = vehicles_[i];
                if (o.front < tail) {
                    const int back_gap = tail - o.front - 1;
                    const int o_vmax = std::min(classes_[o.cls].v_max_cells, edge.v_max_cells);
                    if (back_gap < o_vmax) safe = false;
                }
            }
            if (!safe) continue;
            const int gap = lane_gap(v.edge, target, v.front, static_cast<int>(vi));
            if (gap > best_gap) {
                best_gap = gap;
                best = target;
            }
        }
        if (best < 0) continue;

        auto& from = lanes_[lane_index(v.edge, v.lane)];
        from.erase(std::find(from.begin(), from.end(), static_cast<int>(vi)));
        v.lane = best;
        auto& to = lanes_[lane_index(v.edge, best)];
        const auto pos = std::lower_bound(to.begin(), to.end(), v.front, [&](int i, int f) {
            return vehicles_[i].front < f;
        });
        to.insert(pos, static_cast<int>(vi));
    }
}

void SimState::grant_junctions() {
    granted_.assign(vehicles_.size(), 0);
    // target slot -> (priority, source slot)
    using Priority = std::tuple<int, int, std::int64_t>;
    std::map<std::pair<int, int>, Priority> groups;  // (target, source) -> best priority
    std::vector<char> candidate(vehicles_.size(), 0);
    std::vector<int> target_of(vehicles_.size(), -1);

    for (std::size_t i = 0; i < vehicles_.size(); ++i) {
        const auto& v = vehicles_[i];
        const auto next = next_edge(v);
        if (!next) continue;
        const int cells = net_->edge(v.edge).cell_count;
        const int target = lane_index(*next, entry_lane(*next, v.lane, v.cls));
        target_of[i] = target;
        if (v.front + std::min(v.velocity + 1, vmax(v)) <= cells - 1) continue;
        candidate[i] = 1;
        const Priority p{v.blocked_steps, v.front, -static_cast<std::int64_t>(v.id)};
        const auto key = std::make_pair(target, lane_index(v.edge, v.lane));
        auto it = groups.find(key);
        if (it == groups.end() || it->second < p) groups[key] = p;
    }

    std::map<int, std::pair<Priority, int>> winner;  // target -> (priority, source)
    for (const auto& [key, p] : groups) {
        auto it = winner.find(key.first);
        if (it == winner.end() || it->second.first < p) winner[key.first] = {p, key.second};
    }
    for (std::size_t i = 0; i < vehicles_.size(); ++i) {
        if (target_of[i] < 0) continue;
        auto it = winner.find(target_of[i]);
        const int source = lane_index(vehicles_[i].edge, vehicles_[i].lane);
        granted_[i] = it != winner.end() && it->second.second == source;
        if (candidate[i]) {
            vehicles_[i].blocked_steps = granted_[i] ? 0 : vehicles_[i].blocked_steps + 1;
        }
    }
}

std::vector<SimState::Obstacle> SimState::obstacles(std::size_t vi) const {
    const auto& v = vehicles_[vi];
    const int cells = net_->edge(v.edge).cell_count;
    const int slot = lane_index(v.edge, v.lane);
    std::vector<Obstacle> out;

    const auto& lane = lanes_[slot];
    for (int i : lane) {
        const auto& o = vehicles_[i];
        if (o.front > v.front) {
            out.push_back({o.tail(classes_[o.cls].length_cells) - v.front - 1, i});
            break;
        }
    }
    for (int i : spill_in_[slot]) {
        const auto& o = vehicles_[i];
        out.push_back({cells + o.tail(classes_[o.cls].length_cells) - v.front - 1, i});
    }

    const auto next = next_edge(v);
    if (next) {
        const int to_end = cells - 1 - v.front;
        if (!granted_[vi]) {
            out.push_back({to_end, -1});
        } else {
            const std::size_t e2 = *next;
            const int cells2 = net_->edge(e2).cell_count;
            const int slot2 = lane_index(e2, entry_lane(e2, v.lane, v.cls));
            if (!lanes_[slot2].empty()) {
                const int i = lanes_[slot2].front();
                const auto& o = vehicles_[i];
                out.push_back({to_end + o.tail(classes_[o.cls].length_cells), i});
            }
            for (int i : spill_in_[slot2]) {
                const auto& o = vehicles_[i];
                out.push_back({to_end + cells2 + o.tail(classes_[o.cls].length_cells), i});
            }
            // Movement never skips past the end of the next edge.
            out.push_back({to_end + cells2, -1});
        }
    }
    for (auto& o : out) o.gap = std::max(o.gap, 0);
    return out;
}

void SimState::update_velocities() {
    const std::size_t n = vehicles_.size();
    std::vector<std::vector<Obstacle>> obs(n);
    raw_gap_.assign(n, kOpenRoad);
    for (std::size_t i = 0; i < n; ++i) {
        obs[i] = obstacles(i);
        for (const auto& o : obs[i]) raw_gap_[i] = std::min(raw_gap_[i], o.gap);
    }

    std::vector<int> new_v(n);
    std::vector<char> new_b(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& veh = vehicles_[i];
        const VehicleClass& c = classes_[veh.cls];
        const int v = veh.velocity;
        const int gap = raw_gap_[i];

        int leader = -1;
        int leader_gap = kOpenRoad;
        int effective = kOpenRoad;
        for (const auto& o : obs[i]) {
            int anticipation = 0;
            if (o.vehicle >= 0 && !options_.nasch_degenerate) {
                const auto& l = vehicles_[o.vehicle];
                anticipation =
                    std::max(std::min(raw_gap_[o.vehicle], l.velocity) - c.security_gap_cells, 0);
            }
            effective = std::min(effective, o.gap + anticipation);
            if (o.vehicle >= 0 && o.gap < leader_gap) {
                leader_gap = o.gap;
                leader = o.vehicle;
            }
        }
        const bool leader_brake = leader >= 0 && vehicles_[leader].brake_light;

        // (0) randomization parameter
        const double headway = v > 0 ? static_cast<double>(gap) / v
                                     : std::numeric_limits<double>::infinity();
        const double horizon = std::min(v, c.horizon_steps);
        double p = c.p_dawdle;
        bool brake_branch = false;
        if (leader_brake && headway < horizon) {
            p = c.p_brake;
            brake_branch = true;
        } else if (v == 0) {
            p = c.p_standstill;
        }
        bool brake = false;

        // (1) acceleration
        int nv = v;
        if ((!leader_brake && !veh.brake_light) || headway >= horizon) {
            nv = std::min(v + 1, vmax(veh));
        }
        // (2) braking
        nv = std::min(nv, effective);
        if (nv < v) brake = true;
        // (3) randomization; one draw per vehicle per step, ascending id
        if (traffic_rng_.uniform() < p) {
            nv = std::max(nv - 1, 0);
            if (brake_branch) brake = true;
        }
        new_v[i] = nv;
        new_b[i] = brake;
    }
    for (std::size_t i = 0; i < n; ++i) {
        vehicles_[i].velocity = new_v[i];
        vehicles_[i].brake_light = new_b[i];
    }
}

void SimState::move() {
    const auto& dets = net_->detectors();
    const double t = clock_s();
    const double cell = net_->cell_length_m();

    auto detect = [&](std::size_t edge, int lane, int after, int upto, const VehicleState& v) {
        for (std::size_t d = 0; d < dets.size(); ++d) {
            const auto& det = dets[d];
            if (det.edge != edge || det.cell <= after || det.cell > upto) continue;
            if (!det.lanes.empty() &&
                std::find(det.lanes.begin(), det.lanes.end(), lane) == det.lanes.end())
                continue;
            crossings_[d].push_back({t, v.velocity * cell, v.cls});
        }
    };

    std::vector<VehicleState> kept;
    kept.reserve(vehicles_.size());
    for (auto& v : vehicles_) {
        const int cells = net_->edge(v.edge).cell_count;
        const int nf = v.front + v.velocity;
        if (v.velocity > 0 && nf <= cells - 1) {
            detect(v.edge, v.lane, v.front, nf, v);
            v.front = nf;
        } else if (nf > cells - 1) {
            detect(v.edge, v.lane, v.front, cells - 1, v);
            const auto next = next_edge(v);
            if (!next) {
                trips_.push_back({v.id, v.cls, v.route, v.spawn_time_s, t + 1.0});
                ++exited_;
                continue;
            }
            const int lane2 = entry_lane(*next, v.lane, v.cls);
            const int front2 = nf - cells;
            if (front2 >= net_->edge(*next).cell_count)
                throw std::logic_error("vehicle skipped an entire edge");
            v.prev_edge = v.edge;
            v.prev_lane = v.lane;
            v.edge = *next;
            v.lane = lane2;
            v.front = front2;
            v.progress = (v.progress + 1) % routes_[v.route].edges.size();
            detect(v.edge, v.lane, -1, v.front, v);
        }
        kept.push_back(v);
    }
    vehicles_ = std::move(kept);
}

void SimState::record_detectors(const std::vector<VehicleState>&) {
    const auto& dets = net_->detectors();
    for (std::size_t d = 0; d < dets.size(); ++d) {
        const auto& det = dets[d];
        const int nl = det.lanes.empty() ? net_->edge(det.edge).lanes
                                         : static_cast<int>(det.lanes.size());
        int occupied = 0;
        for (int k = 0; k < nl; ++k) {
            const int lane = det.lanes.empty() ? k : det.lanes[k];
            if (!cells_free(det.edge, lane, det.cell, det.cell, -1)) ++occupied;
        }
        occupancy_[d].push_back(static_cast<float>(occupied) / static_cast<float>(nl));
    }
}

void SimState::step() {
    arrivals();
    rebuild_lanes();
    inject();
    rebuild_lanes();
    change_lanes();
    grant_junctions();
    update_velocities();
    move();
    rebuild_lanes();
    record_detectors(vehicles_);
    ++clock_;
    if (!trajectories_.empty()) {
        const double cell = net_->cell_length_m();
        for (const auto& v : vehicles_) {
            auto it = trajectories_.find(v.id);
            if (it == trajectories_.end()) continue;
            const double offset = (v.front + 0.5) * cell;
            it->second.push_back({clock_s(), net_->position_on(v.edge, offset), v.velocity * cell});
        }
    }
}

FlowObservation SimState::detector_readout(const std::string& detector, double t0,
                                           double t1) const {
    const std::size_t d = net_->detector_index(detector);
    if (t1 > clock_s() + 1e-9) throw Error("detector_readout: window not yet elapsed");
    if (!(t1 > t0)) throw Error("detector_readout: empty window");
    FlowObservation obs;
    obs.detector = detector;
    obs.t0 = t0;
    obs.t1 = t1;
    for (const auto& c : classes_) obs.per_class[c.name] = 0;
    double speed_sum = 0.0;
    for (const auto& c : crossings_[d]) {
        if (c.t < t0 || c.t >= t1) continue;
        ++obs.count;
        speed_sum += c.speed_mps;
        ++obs.per_class[classes_[c.cls].name];
    }
    if (obs.count > 0) obs.mean_speed_mps = speed_sum / static_cast<double>(obs.count);
    const auto& occ = occupancy_[d];
    const auto first = static_cast<std::size_t>(std::max(0.0, std::ceil(t0)));
    const auto last = static_cast<std::size_t>(std::max(0.0, std::ceil(t1)));
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t k = first; k < last && k < occ.size(); ++k, ++n) sum += occ[k];
    obs.occupancy = n > 0 ? std::clamp(sum / static_cast<double>(n), 0.0, 1.0) : 0.0;
    return obs;
}

TrafficMetrics SimState::run(double duration_s) {
    const double start = clock_s();
    const auto steps = static_cast<std::int64_t>(std::llround(duration_s));
    for (std::int64_t k = 0; k < steps; ++k) step();

    TrafficMetrics m;
    double total = 0.0;
    std::vector<double> per_class_total(classes_.size(), 0.0);
    std::vector<std::size_t> per_class_trips(classes_.size(), 0);
    for (const auto& trip : trips_) {
        total += trip.dwell_s();
        per_class_total[trip.cls] += trip.dwell_s();
        ++per_class_trips[trip.cls];
    }
    m.trips = trips_.size();
    if (m.trips > 0) m.mean_dwell_s = total / static_cast<double>(m.trips);
    for (std::size_t c = 0; c < classes_.size(); ++c) {
        ClassThroughput ct;
        ct.trips = per_class_trips[c];
        if (ct.trips > 0) ct.mean_dwell_s = per_class_total[c] / static_cast<double>(ct.trips);
        m.per_class[classes_[c].name] = ct;
    }
    const double window = options_.detector_window_s;
    for (const auto& det : net_->detectors()) {
        auto& series = m.observations[det.id];
        for (double t0 = start; t0 + window <= clock_s() + 1e-9; t0 += window)
            series.push_back(detector_readout(det.id, t0, t0 + window));
    }
    return m;
}

std::uint64_t SimState::state_hash() const {
    std::uint64_t h = hash_combine(0x7261636b65747321ULL, static_cast<std::uint64_t>(clock_));
    for (const auto& v : vehicles_) {
        h = hash_combine(h, v.id);
        h = hash_combine(h, v.edge);
        h = hash_combine(h, static_cast<std::uint64_t>(v.lane));
        h = hash_combine(h, static_cast<std::uint64_t>(v.front));
        h = hash_combine(h, static_cast<std::uint64_t>(v.velocity));
        h = hash_combine(h, v.brake_light ? 1u : 0u);
        h = hash_combine(h, v.progress);
    }
    return h;
}

std::optional<std::uint64_t> SimState::find_collision() const {
    std::map<std::pair<int, int>, std::uint64_t> owner;
    auto claim = [&](int slot, int cell, std::uint64_t id) {
        return owner.emplace(std::make_pair(slot, cell), id).second;
    };
    for (const auto& v : vehicles_) {
        const int len = classes_[v.cls].length_cells;
        const int tail = v.tail(len);
        for (int c = std::max(0, tail); c <= v.front; ++c)
            if (!claim(lane_index(v.edge, v.lane), c, v.id)) return v.id;
        if (tail < 0) {
            if (v.prev_lane < 0) return v.id;
            const int cells = net_->edge(v.prev_edge).cell_count;
            for (int c = cells + tail; c < cells; ++c)
                if (!claim(lane_index(v.prev_edge, v.prev_lane), c, v.id)) return v.id;
        }
    }
    return std::nullopt;
}

json TrafficMetrics::summary_json() const {
    json j;
    j["mean_dwell_s"] = mean_dwell_s ? json(*mean_dwell_s) : json(nullptr);
    j["trips"] = trips;
    j["per_class"] = json::object();
    for (const auto& [name, ct] : per_class) {
        j["per_class"][name] = {
            {"trips", ct.trips},
            {"mean_dwell_s", ct.mean_dwell_s ? json(*ct.mean_dwell_s) : json(nullptr)}};
    }
    return j;
}

std::string observations_csv(const std::vector<FlowObservation>& obs,
                             const std::vector<VehicleClass>& classes) {
    std::ostringstream out;
    out.precision(17);
    out << "t0,t1,count,mean_speed";
    for (const auto& c : classes) out << ',' << c.name;
    out << ",occupancy\n";
    for (const auto& o : obs) {
        out << o.t0 << ',' << o.t1 << ',' << o.count << ',';
        if (o.mean_speed_mps) out << *o.mean_speed_mps;
        else out << "NA";
        for (const auto& c : classes) {
            auto it = o.per_class.find(c.name);
            out << ',' << (it == o.per_class.end() ? 0 : it->second);
        }
        out << ',' << o.occupancy << '\n';
    }
    return out.str();
}

VehicleClass parse_class(const json& j) {
    reject_unknown(j,
                   {"name", "v_max_cells", "length_cells", "p_dawdle", "p_brake", "p_standstill",
                    "horizon_steps", "security_gap_cells", "connected", "share"},
                   "class");
    const auto name = j.at("name").get<std::string>();
    VehicleClass c;
    try {
        c = default_class(name);
    } catch (const Error&) {
        c.name = name;
    }
    c.v_max_cells = j.value("v_max_cells", c.v_max_cells);
    c.length_cells = j.value("length_cells", c.length_cells);
    c.p_dawdle = j.value("p_dawdle", c.p_dawdle);
    c.p_brake = j.value("p_brake", c.p_brake);
    c.p_standstill = j.value("p_standstill", c.p_standstill);
    c.horizon_steps = j.value("horizon_steps", c.horizon_steps);
    c.security_gap_cells = j.value("security_gap_cells", c.security_gap_cells);
    c.connected = j.value("connected", c.connected);
    c.share = j.value("share", c.share);
    return c;
}

json class_to_json(const VehicleClass& c) {
    return {{"name", c.name},
            {"v_max_cells", c.v_max_cells},
            {"length_cells", c.length_cells},
            {"p_dawdle", c.p_dawdle},
            {"p_brake", c.p_brake},
            {"p_standstill", c.p_standstill},
            {"horizon_steps", c.horizon_steps},
            {"security_gap_cells", c.security_gap_cells},
            {"connected", c.connected},
            {"share", c.share}};
}

ScenarioConfig parse_scenario(const json& j) {
    reject_unknown(j,
                   {"network_ref", "classes", "demand", "seed", "duration_s", "lane_policies",
                    "nasch_degenerate", "detector_window_s", "record_trajectories"},
                   "scenario");
    ScenarioConfig s;
    try {
        s.network_ref = j.value("network_ref", std::string{});
        if (j.contains("classes")) {
            for (const auto& c : j.at("classes")) s.classes.push_back(parse_class(c));
        } else {
            s.classes.push_back(default_car());
        }
        if (j.contains("demand")) {
            for (const auto& d : j.at("demand")) {
                reject_unknown(d, {"origin", "dest", "rate_veh_h", "splits", "routes", "class_mix"},
                               "demand");
                DemandEntry e;
                e.origin = d.at("origin").get<std::string>();
                e.dest = d.at("dest").get<std::string>();
                e.rate_veh_h = d.at("rate_veh_h").get<double>();
                if (d.contains("splits")) e.splits = d.at("splits").get<std::vector<double>>();
                if (d.contains("routes"))
                    e.routes = d.at("routes").get<std::vector<std::vector<std::string>>>();
                if (d.contains("class_mix"))
                    e.class_mix = d.at("class_mix").get<std::map<std::string, double>>();
                s.demand.push_back(std::move(e));
            }
        }
        s.seed = j.value("seed", s.seed);
        s.duration_s = j.value("duration_s", s.duration_s);
        if (j.contains("lane_policies")) {
            for (const auto& p : j.at("lane_policies")) {
                reject_unknown(p, {"edge", "lanes"}, "lane_policy");
                s.lane_policies.push_back(
                    {p.at("edge").get<std::string>(),
                     p.at("lanes").get<std::vector<std::vector<std::string>>>()});
            }
        }
        s.options.nasch_degenerate = j.value("nasch_degenerate", false);
        s.options.detector_window_s = j.value("detector_window_s", 60.0);
        s.options.record_trajectories = j.value("record_trajectories", std::size_t{0});
    } catch (const json::exception& e) {
        throw Error(std::string("scenario: ") + e.what());
    }
    if (!(s.duration_s >= 0.0)) throw Error("scenario: negative duration_s");
    if (!(s.options.detector_window_s > 0.0)) throw Error("scenario: detector_window_s must be positive");
    return s;
}

json scenario_to_json(const ScenarioConfig& s) {
    json j;
    j["network_ref"] = s.network_ref;
    j["classes"] = json::array();
    for (const auto& c : s.classes) j["classes"].push_back(class_to_json(c));
    j["demand"] = json::array();
    for (const auto& d : s.demand) {
        json jd = {{"origin", d.origin},
                   {"dest", d.dest},
                   {"rate_veh_h", d.rate_veh_h},
                   {"splits", d.splits}};
        if (!d.routes.empty()) jd["routes"] = d.routes;
        if (!d.class_mix.empty()) jd["class_mix"] = d.class_mix;
        j["demand"].push_back(std::move(jd));
    }
    j["seed"] = s.seed;
    j["duration_s"] = s.duration_s;
    j["lane_policies"] = json::array();
    for (const auto& p : s.lane_policies)
        j["lane_policies"].push_back({{"edge", p.edge}, {"lanes", p.lanes}});
    j["nasch_degenerate"] = s.options.nasch_degenerate;
    j["detector_window_s"] = s.options.detector_window_s;
    j["record_trajectories"] = s.options.record_trajectories;
    return j;
}

SimState init_scenario(std::shared_ptr<const RoadNetwork> net,
                       const std::vector<DemandEntry>& demand, std::vector<VehicleClass> classes,
                       std::uint64_t seed, ScenarioOptions options) {
    SimState state(std::move(net), std::move(classes), seed, options);
    for (const auto& d : demand) state.add_demand(d);
    return state;
}

SimState init_scenario(std::shared_ptr<const RoadNetwork> net, const ScenarioConfig& config) {
    SimState state(std::move(net), config.classes, config.seed, config.options);
    for (const auto& p : config.lane_policies) state.apply_lane_policy(p.edge, p.lanes);
    for (const auto& d : config.demand) state.add_demand(d);
    return state;
}

}  // namespace hybridflow
