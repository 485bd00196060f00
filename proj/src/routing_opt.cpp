#include "hybridflow/routing_opt.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace hybridflow {

using nlohmann::json;

namespace {

constexpr double kUsed = 1e-9;

}  // namespace

LatencyFunction LatencyFunction::bpr(double t0, double q_ref, double a, double b) {
    LatencyFunction f;
    f.kind = Kind::bpr;
    f.t0 = t0;
    f.q_ref = q_ref;
    f.a = a;
    f.b = b;
    return f;
}

LatencyFunction LatencyFunction::affine(double t0, double slope) {
    LatencyFunction f;
    f.kind = Kind::affine;
    f.t0 = t0;
    f.slope = slope;
    return f;
}

double LatencyFunction::operator()(double q) const {
    q = std::max(q, 0.0);
    if (kind == Kind::affine) return t0 + slope * q;
    return t0 * (1.0 + a * std::pow(q / q_ref, b));
}

double LatencyFunction::derivative(double q) const {
    q = std::max(q, 0.0);
    if (kind == Kind::affine) return slope;
    return t0 * a * b * std::pow(q / q_ref, b - 1.0) / q_ref;
}

double LatencyFunction::integral(double q) const {
    q = std::max(q, 0.0);
    if (kind == Kind::affine) return t0 * q + 0.5 * slope * q * q;
    return t0 * (q + a * q_ref / (b + 1.0) * std::pow(q / q_ref, b + 1.0));
}

double LatencyFunction::inverse(double tau) const {
    if (tau <= t0) return 0.0;
    if (kind == Kind::affine)
        return slope > 0.0 ? (tau - t0) / slope : std::numeric_limits<double>::infinity();
    if (a <= 0.0 || t0 <= 0.0) return std::numeric_limits<double>::infinity();
    return q_ref * std::pow((tau / t0 - 1.0) / a, 1.0 / b);
}

void AssignmentProblem::validate() const {
    for (const auto& od : ods) {
        if (!(od.demand_veh_h >= 0.0)) throw Error("od '" + od.od + "': negative demand");
        if (od.routes.empty()) throw Error("od '" + od.od + "': no routes");
        for (const auto& r : od.routes)
            if (!(r.q_crit_veh_h > 0.0)) throw Error("od '" + od.od + "': q_crit must be positive");
    }
}

std::vector<double> FlowSplit::proportions(const AssignmentProblem& p, std::size_t od) const {
    const auto& f = flows.at(od);
    const double d = p.ods.at(od).demand_veh_h;
    std::vector<double> out(f.size(), 1.0 / static_cast<double>(f.size()));
    if (d <= 0.0) return out;
    double sum = 0.0;
    for (std::size_t r = 0; r < f.size(); ++r) sum += out[r] = std::max(0.0, f[r]) / d;
    // Exact unit sum for the injection validator.
    for (auto& x : out) x /= sum;
    return out;
}

json FlowSplit::to_json(const AssignmentProblem& p) const {
    json ods = json::array();
    for (std::size_t i = 0; i < p.ods.size(); ++i) {
        json routes = json::array();
        for (std::size_t r = 0; r < p.ods[i].routes.size(); ++r) {
            const auto& rc = p.ods[i].routes[r];
            routes.push_back({{"edges", rc.edges},
                              {"flow_veh_h", flows[i][r]},
                              {"latency_s", rc.latency(flows[i][r])},
                              {"margin_veh_h", rc.q_crit_veh_h - flows[i][r]}});
        }
        ods.push_back({{"od", p.ods[i].od}, {"routes", routes}});
    }
    return {{"method", method},       {"ods", ods},           {"objective", objective},
            {"converged", converged}, {"feasible", feasible}, {"iterations", iterations}};
}

std::vector<double> wardrop_gap(const AssignmentProblem& problem, const FlowSplit& split) {
    std::vector<double> out;
    for (std::size_t i = 0; i < problem.ods.size(); ++i) {
        double used_max = -std::numeric_limits<double>::infinity();
        double all_min = std::numeric_limits<double>::infinity();
        for (std::size_t r = 0; r < problem.ods[i].routes.size(); ++r) {
            const double t = problem.ods[i].routes[r].latency(split.flows[i][r]);
            all_min = std::min(all_min, t);
            if (split.flows[i][r] > kUsed) used_max = std::max(used_max, t);
        }
        out.push_back(problem.ods[i].demand_veh_h > 0.0 ? used_max - all_min : 0.0);
    }
    return out;
}

std::vector<double> min_margins(const AssignmentProblem& problem, const FlowSplit& split) {
    std::vector<double> out;
    for (std::size_t i = 0; i < problem.ods.size(); ++i) {
        double m = std::numeric_limits<double>::infinity();
        for (std::size_t r = 0; r < problem.ods[i].routes.size(); ++r)
            m = std::min(m, problem.ods[i].routes[r].q_crit_veh_h - split.flows[i][r]);
        out.push_back(m);
    }
    return out;
}

namespace {

double beckmann(const OdDemand& od, const std::vector<double>& q) {
    double b = 0.0;
    for (std::size_t r = 0; r < q.size(); ++r) b += od.routes[r].latency.integral(q[r]);
    return b;
}

std::size_t fastest(const OdDemand& od, const std::vector<double>& q) {
    std::size_t s = 0;
    for (std::size_t r = 1; r < q.size(); ++r)
        if (od.routes[r].latency(q[r]) < od.routes[s].latency(q[s])) s = r;
    return s;
}

double spread(const OdDemand& od, const std::vector<double>& q) {
    double used_max = -std::numeric_limits<double>::infinity();
    double all_min = std::numeric_limits<double>::infinity();
    for (std::size_t r = 0; r < q.size(); ++r) {
        const double t = od.routes[r].latency(q[r]);
        all_min = std::min(all_min, t);
        if (q[r] > kUsed) used_max = std::max(used_max, t);
    }
    return used_max - all_min;
}

// Equal-margin waterfilling: q_r = max(0, q_crit_r - m) with sum q = D.
std::vector<double> waterfill(const OdDemand& od) {
    const std::size_t n = od.routes.size();
    std::vector<double> qc(n);
    for (std::size_t r = 0; r < n; ++r) qc[r] = od.routes[r].q_crit_veh_h;
    const double d = od.demand_veh_h;
    double m = 0.0;
    if (n <= 3) {
        std::vector<double> sorted = qc;
        std::sort(sorted.begin(), sorted.end(), std::greater<>());
        double top = 0.0;
        for (std::size_t k = 1; k <= n; ++k) {
            top += sorted[k - 1];
            m = (top - d) / static_cast<double>(k);
            if (k == n || m >= sorted[k]) break;
        }
    } else {
        auto excess = [&](double level) {
            double s = 0.0;
            for (double c : qc) s += std::max(0.0, c - level);
            return s - d;
        };
        double lo = *std::min_element(qc.begin(), qc.end()) - d - 1.0;
        double hi = *std::max_element(qc.begin(), qc.end());
        for (int it = 0; it < 200; ++it) {
            const double mid = 0.5 * (lo + hi);
            (excess(mid) > 0.0 ? lo : hi) = mid;
        }
        m = 0.5 * (lo + hi);
    }
    std::vector<double> q(n);
    for (std::size_t r = 0; r < n; ++r) q[r] = std::max(0.0, qc[r] - m);
    return q;
}

// min sum of latency integrals with 0 <= q_r <= cap_r and sum q = D.
std::vector<double> capped_equilibrium(const OdDemand& od, const std::vector<double>& cap) {
    const std::size_t n = od.routes.size();
    const double d = od.demand_veh_h;
    auto fill = [&](double tau) {
        std::vector<double> q(n);
        for (std::size_t r = 0; r < n; ++r)
            q[r] = std::clamp(od.routes[r].latency.inverse(tau), 0.0, cap[r]);
        return q;
    };
    auto total = [](const std::vector<double>& q) { return std::accumulate(q.begin(), q.end(), 0.0); };
    double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        lo = std::min(lo, od.routes[r].latency.t0);
        hi = std::max(hi, od.routes[r].latency(cap[r]));
    }
    for (int it = 0; it < 200 && hi - lo > 1e-13 * std::max(1.0, hi); ++it) {
        const double mid = 0.5 * (lo + hi);
        (total(fill(mid)) < d ? lo : hi) = mid;
    }
    auto q = fill(hi);
    // Hand the rounding residual to routes with slack.
    double residual = d - total(q);
    for (std::size_t r = 0; r < n && std::fabs(residual) > 0.0; ++r) {
        const double room = residual > 0 ? cap[r] - q[r] : q[r];
        const double moved = std::copysign(std::min(std::fabs(residual), room), residual);
        q[r] += moved;
        residual -= moved;
    }
    return q;
}

}  // namespace

FlowSplit assign_wardrop(const AssignmentProblem& problem, const WardropOptions& options) {
    problem.validate();
    FlowSplit out;
    out.method = options.method == WardropOptions::Method::msa ? "wardrop_msa" : "wardrop";
    for (const auto& od : problem.ods) {
        const std::size_t n = od.routes.size();
        std::vector<double> q(n, 0.0);
        q[fastest(od, q)] = od.demand_veh_h;
        bool converged = od.demand_veh_h <= 0.0 || n == 1;
        std::size_t it = 0;
        std::vector<double> best = q;
        double best_gap = spread(od, q);
        while (!converged && it < options.max_iterations) {
            ++it;
            if (options.method == WardropOptions::Method::msa) {
                const std::size_t s = fastest(od, q);
                const double step = 1.0 / static_cast<double>(it + 1);
                for (std::size_t r = 0; r < n; ++r)
                    q[r] += step * ((r == s ? od.demand_veh_h : 0.0) - q[r]);
            } else {
                // Newton step shifting flow onto the currently fastest route.
                const std::size_t s = fastest(od, q);
                std::vector<double> t(n), dt(n);
                for (std::size_t r = 0; r < n; ++r) {
                    t[r] = od.routes[r].latency(q[r]);
                    dt[r] = od.routes[r].latency.derivative(q[r]);
                }
                for (std::size_t r = 0; r < n; ++r) {
                    if (r == s || q[r] <= 0.0) continue;
                    const double denom = dt[r] + dt[s];
                    const double shift =
                        denom > 1e-15 ? std::min(q[r], (t[r] - t[s]) / denom) : q[r];
                    q[r] -= shift;
                    q[s] += shift;
                }
            }
            const double gap = spread(od, q);
            if (gap < best_gap) {
                best_gap = gap;
                best = q;
            }
            converged = gap < options.tol_s;
        }
        out.flows.push_back(converged ? q : best);
        out.converged = out.converged && converged;
        out.iterations = std::max(out.iterations, it);
        out.objective += beckmann(od, out.flows.back());
    }
    return out;
}

FlowSplit assign_bmp(const AssignmentProblem& problem) {
    problem.validate();
    FlowSplit out;
    out.method = "bmp";
    for (const auto& od : problem.ods) {
        double total_crit = 0.0;
        for (const auto& r : od.routes) total_crit += r.q_crit_veh_h;
        out.feasible = out.feasible && od.demand_veh_h < total_crit;
        out.flows.push_back(waterfill(od));
    }
    const auto margins = min_margins(problem, out);
    out.objective = margins.empty() ? 0.0 : *std::min_element(margins.begin(), margins.end());
    return out;
}

FlowSplit assign_combined(const AssignmentProblem& problem, double lambda) {
    if (!(lambda >= 0.0)) throw Error("assign_combined: lambda must be >= 0");
    auto out = assign_bmp(problem);
    out.method = "combined";
    if (lambda == 0.0) return out;  // objective degenerates to the BMP one

    const auto wardrop = assign_wardrop(problem);
    out.objective = 0.0;
    for (std::size_t i = 0; i < problem.ods.size(); ++i) {
        const auto& od = problem.ods[i];
        const double d = od.demand_veh_h;
        if (d <= 0.0) continue;
        const std::size_t n = od.routes.size();
        auto margin_of = [&](const std::vector<double>& q) {
            double m = std::numeric_limits<double>::infinity();
            for (std::size_t r = 0; r < n; ++r) m = std::min(m, od.routes[r].q_crit_veh_h - q[r]);
            return m;
        };
        // For a margin floor m the best flows are the equilibrium capped at
        // q_crit - m; the resulting objective is concave in m.
        auto flows_at = [&](double m) {
            std::vector<double> cap(n);
            for (std::size_t r = 0; r < n; ++r) cap[r] = std::max(0.0, od.routes[r].q_crit_veh_h - m);
            return capped_equilibrium(od, cap);
        };
        auto objective = [&](double m) { return m - lambda * beckmann(od, flows_at(m)) / d; };
        const double hi = margin_of(out.flows[i]);
        double lo = std::min(hi, margin_of(wardrop.flows[i]));
        double a = lo, b = hi;
        const double phi = (std::sqrt(5.0) - 1.0) / 2.0;
        double x1 = b - phi * (b - a), x2 = a + phi * (b - a);
        double f1 = objective(x1), f2 = objective(x2);
        for (int it = 0; it < 200 && b - a > 1e-9; ++it) {
            if (f1 < f2) {
                a = x1;
                x1 = x2;
                f1 = f2;
                x2 = a + phi * (b - a);
                f2 = objective(x2);
            } else {
                b = x2;
                x2 = x1;
                f2 = f1;
                x1 = b - phi * (b - a);
                f1 = objective(x1);
            }
        }
        // Endpoints too: the optimum often sits at one of them.
        double best_m = 0.5 * (a + b);
        double best_f = objective(best_m);
        for (double m : {lo, hi}) {
            const double f = objective(m);
            if (f > best_f) {
                best_f = f;
                best_m = m;
            }
        }
        out.flows[i] = flows_at(best_m);
        out.objective += margin_of(out.flows[i]) - lambda * beckmann(od, out.flows[i]) / d;
    }
    return out;
}

std::vector<Bottleneck> detect_bottlenecks(
    const std::map<std::string, std::vector<FlowObservation>>& observations,
    const RoadNetwork& net, double density_crit, double sustain_s) {
    std::vector<Bottleneck> out;
    for (const auto& [det, series] : observations) {
        const auto& edge = net.edge(net.detectors()[net.detector_index(det)].edge).id;
        double run_start = 0.0, run_len = 0.0;
        std::size_t run_first = 0;
        for (std::size_t i = 0; i < series.size(); ++i) {
            const auto& o = series[i];
            if (o.occupancy > density_crit) {
                if (run_len == 0.0) {
                    run_start = o.t0;
                    run_first = i;
                }
                run_len += o.t1 - o.t0;
                if (run_len >= sustain_s - 1e-9) {
                    Bottleneck b;
                    b.edge = edge;
                    b.detector = det;
                    b.onset_t = run_start;
                    b.measured_flow_veh_h = series[run_first].flow_veh_h();
                    b.q_crit_veh_h = b.measured_flow_veh_h;
                    for (std::size_t k = 0; k < run_first; ++k)
                        b.q_crit_veh_h = std::max(b.q_crit_veh_h, series[k].flow_veh_h());
                    out.push_back(b);
                    break;
                }
            } else {
                run_len = 0.0;
            }
        }
    }
    std::sort(out.begin(), out.end(), [](const Bottleneck& x, const Bottleneck& y) {
        return std::tie(x.onset_t, x.detector) < std::tie(y.onset_t, y.detector);
    });
    return out;
}

std::string to_string(SplitSource s) {
    switch (s) {
        case SplitSource::fixed: return "fixed";
        case SplitSource::wardrop: return "wardrop";
        case SplitSource::bmp: return "bmp";
        case SplitSource::combined: return "combined";
    }
    return "?";
}

SplitSource parse_split_source(const std::string& name) {
    for (auto s : {SplitSource::fixed, SplitSource::wardrop, SplitSource::bmp, SplitSource::combined})
        if (to_string(s) == name) return s;
    throw Error("unknown split source '" + name + "'");
}

json Calibration::to_json() const {
    json b = json::array();
    for (const auto& route : bottlenecks) {
        json r = json::array();
        for (const auto& x : route)
            r.push_back({{"edge", x.edge},
                         {"detector", x.detector},
                         {"onset_t", x.onset_t},
                         {"measured_flow_veh_h", x.measured_flow_veh_h},
                         {"q_crit_veh_h", x.q_crit_veh_h}});
        b.push_back(r);
    }
    return {{"q_crit_veh_h", q_crit_veh_h}, {"free_flow_s", free_flow_s}, {"bottlenecks", b}};
}

namespace {

TrafficMetrics run_with_splits(const RoutingScenario& sc, const std::vector<double>& splits,
                               double demand, double duration, std::uint64_t seed) {
    DemandEntry e;
    e.origin = sc.origin;
    e.dest = sc.dest;
    e.rate_veh_h = demand;
    e.splits = splits;
    e.routes = sc.routes;
    auto sim = init_scenario(sc.net, {e}, sc.classes, seed);
    return sim.run(duration);
}

}  // namespace

Calibration calibrate(const RoutingScenario& sc, std::uint64_t seed) {
    if (!sc.net) throw Error("routing scenario: no network");
    if (sc.routes.empty()) throw Error("routing scenario: no routes");
    Calibration cal;
    for (std::size_t r = 0; r < sc.routes.size(); ++r) {
        const auto route = sc.net->make_route(sc.routes[r]);
        cal.free_flow_s.push_back(route.free_flow_time_s);
        std::vector<double> splits(sc.routes.size(), 0.0);
        splits[r] = 1.0;
        const auto metrics = run_with_splits(sc, splits, sc.probe_demand_veh_h, sc.probe_duration_s,
                                             derive_seed(seed, "probe", r));
        // Only detectors on this route's edges.
        std::map<std::string, std::vector<FlowObservation>> own;
        double max_flow = 0.0;
        for (const auto& [det, series] : metrics.observations) {
            const auto edge = sc.net->detectors()[sc.net->detector_index(det)].edge;
            if (std::find(route.edges.begin(), route.edges.end(), edge) == route.edges.end()) continue;
            own[det] = series;
            for (const auto& o : series) max_flow = std::max(max_flow, o.flow_veh_h());
        }
        auto found = detect_bottlenecks(own, *sc.net, sc.density_crit, sc.sustain_s);
        double q = max_flow;
        for (const auto& b : found) q = std::min(q, b.q_crit_veh_h);
        // A route that never broke down keeps the highest flow seen as a
        // lower bound on its capacity.
        cal.q_crit_veh_h.push_back(std::max(q, 1.0));
        cal.bottlenecks.push_back(std::move(found));
    }
    return cal;
}

AssignmentProblem routing_problem(const RoutingScenario& sc, const Calibration& cal) {
    AssignmentProblem p;
    OdDemand od;
    od.od = sc.origin + "->" + sc.dest;
    od.demand_veh_h = sc.demand_veh_h;
    for (std::size_t r = 0; r < sc.routes.size(); ++r) {
        RouteChoice rc;
        rc.edges = sc.routes[r];
        rc.q_crit_veh_h = cal.q_crit_veh_h.at(r);
        rc.latency = LatencyFunction::bpr(cal.free_flow_s.at(r), rc.q_crit_veh_h);
        od.routes.push_back(rc);
    }
    p.ods.push_back(od);
    return p;
}

json Evaluation::to_json() const {
    json j = {{"source", to_string(source)},
              {"splits", splits},
              {"trips", trips},
              {"mean_dwell_s", mean_dwell_s ? json(*mean_dwell_s) : json(nullptr)}};
    return j;
}

Evaluation evaluate_policy(const RoutingScenario& sc, SplitSource source, std::uint64_t seed,
                           const Calibration* calibration) {
    Evaluation ev;
    ev.source = source;
    if (source == SplitSource::fixed) {
        ev.splits = sc.fixed_splits;
        if (ev.splits.empty()) {
            ev.splits.assign(sc.routes.size(), 0.0);
            ev.splits.at(0) = 1.0;
        }
    } else {
        std::optional<Calibration> own;
        if (!calibration) {
            own = calibrate(sc, seed);
            calibration = &*own;
        }
        const auto problem = routing_problem(sc, *calibration);
        FlowSplit split = source == SplitSource::wardrop ? assign_wardrop(problem)
                          : source == SplitSource::bmp   ? assign_bmp(problem)
                                                         : assign_combined(problem, sc.lambda);
        ev.splits = split.proportions(problem, 0);
        ev.assignment = std::move(split);
    }
    if (sc.demand_veh_h <= 0.0) return ev;
    const auto metrics =
        run_with_splits(sc, ev.splits, sc.demand_veh_h, sc.duration_s, derive_seed(seed, "evaluate"));
    ev.mean_dwell_s = metrics.mean_dwell_s;
    ev.trips = metrics.trips;
    return ev;
}

}  // namespace hybridflow
