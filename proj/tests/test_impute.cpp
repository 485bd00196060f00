#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <functional>

#include "hybridflow/impute.hpp"
#include "hybridflow/rng.hpp"

using namespace hybridflow;

namespace {

std::shared_ptr<RoadNetwork> line(double length_m) {
    auto net = std::make_shared<RoadNetwork>(1.5);
    net->add_node("A", {0, 0});
    net->add_node("B", {length_m, 0});
    net->add_edge("L", "A", "B", length_m, 1, 50.0);
    return net;
}

// A-B-C-D chain plus two chords, so several paths compete.
std::shared_ptr<RoadNetwork> mesh() {
    auto net = std::make_shared<RoadNetwork>(1.5);
    net->add_node("A", {0, 0});
    net->add_node("B", {100, 0});
    net->add_node("C", {200, 0});
    net->add_node("D", {300, 0});
    net->add_edge("ab", "A", "B", 100, 1, 50);
    net->add_edge("bc", "B", "C", 100, 1, 50);
    net->add_edge("dc", "D", "C", 100, 1, 50);
    net->add_edge("ad", "A", "D", 250, 1, 50);
    net->add_edge("ca", "C", "A", 180, 1, 50);
    return net;
}

// Minimum over all simple node paths between the edge endpoints.
double brute_distance(const RoadNetwork& net, const NetworkPosition& a, const NetworkPosition& b) {
    const auto& ea = net.edge(net.edge_index(a.edge));
    const auto& eb = net.edge(net.edge_index(b.edge));
    double best = a.edge == b.edge ? std::fabs(a.offset_m - b.offset_m) : 1e300;
    const std::size_t n = net.nodes().size();
    std::vector<bool> seen(n, false);
    std::function<void(std::size_t, std::size_t, double, double)> dfs =
        [&](std::size_t u, std::size_t target, double acc, double tail) {
            if (u == target) best = std::min(best, acc + tail);
            for (const auto& e : net.edges()) {
                std::size_t v;
                if (e.from == u) v = e.to;
                else if (e.to == u) v = e.from;
                else continue;
                if (seen[v]) continue;
                seen[v] = true;
                dfs(v, target, acc + e.length_m, tail);
                seen[v] = false;
            }
        };
    for (auto [na, da] : {std::pair{ea.from, a.offset_m}, std::pair{ea.to, ea.length_m - a.offset_m}})
        for (auto [nb, db] : {std::pair{eb.from, b.offset_m}, std::pair{eb.to, eb.length_m - b.offset_m}}) {
            std::fill(seen.begin(), seen.end(), false);
            seen[na] = true;
            dfs(na, nb, da, db);
        }
    return best;
}

VolumeObservation obs(const std::string& edge, double offset, double flow, int day = 0) {
    return {{edge, offset}, day, flow};
}

}  // namespace

TEST_CASE("network_distance: trivial and brute-force instances") {
    auto l = line(150);
    CHECK(network_distance(*l, {"L", 30}, {"L", 30}) == 0.0);
    CHECK(network_distance(*l, {"L", 10}, {"L", 60}) == doctest::Approx(50.0));

    auto m = mesh();
    NetworkDistance dist(m);
    const std::vector<NetworkPosition> probes = {{"ab", 30}, {"bc", 90}, {"dc", 40}, {"ad", 200},
                                                 {"ca", 10}, {"ab", 95}, {"dc", 0}};
    for (const auto& a : probes)
        for (const auto& b : probes) CHECK(dist(a, b) == doctest::Approx(brute_distance(*m, a, b)));
    CHECK_THROWS(dist({"nope", 0}, {"ab", 0}));
    CHECK_THROWS(dist({"ab", 101}, {"ab", 0}));

    auto split = std::make_shared<RoadNetwork>(1.5);
    split->add_node("A", {0, 0});
    split->add_node("B", {10, 0});
    split->add_node("C", {0, 50});
    split->add_node("D", {10, 50});
    split->add_edge("x", "A", "B", 10, 1, 50);
    split->add_edge("y", "C", "D", 10, 1, 50);
    CHECK(network_distance(*split, {"x", 1}, {"y", 1}) == kDisconnected);
}

TEST_CASE("GPR: interpolation and constant data") {
    auto l = line(1000);
    KernelParams k;
    k.signal_variance = 1e4;
    k.length_scale_m = 500;
    const auto single = fit_gpr(l, {obs("L", 300, 42)}, k);
    CHECK(single.predict({"L", 300}).mean == doctest::Approx(42.0).epsilon(1e-12));

    const auto flat = fit_gpr(l, {obs("L", 0, 7), obs("L", 400, 7), obs("L", 900, 7)}, k);
    for (double x : {0.0, 123.0, 650.0, 1000.0}) CHECK(flat.predict({"L", x}).mean == doctest::Approx(7.0));

    CHECK_THROWS(fit_gpr(l, {obs("L", 5, 1), obs("L", 5, 2)}, k));
    k.noise_variance = 1.0;
    CHECK_NOTHROW(fit_gpr(l, {obs("L", 5, 1), obs("L", 5, 2)}, k));
    CHECK_THROWS(fit_gpr(l, {}, k));
}

TEST_CASE("GPR: two-point closed form") {
    auto l = line(1000);
    KernelParams k;
    k.signal_variance = 1e4;
    k.length_scale_m = 500;
    const auto m = fit_gpr(l, {obs("L", 0, 100), obs("L", 1000, 200)}, k);
    CHECK(m.prior_mean() == 150.0);
    const double s = 1e4;
    const double a = s + kGprJitter, b = s * std::exp(-1000.0 * 1000.0 / (2 * 500.0 * 500.0));
    const double det = a * a - b * b;
    for (double x : {500.0, 250.0, 0.0, 800.0}) {
        const double k1 = s * std::exp(-x * x / (2 * 500.0 * 500.0));
        const double k2 = s * std::exp(-(1000 - x) * (1000 - x) / (2 * 500.0 * 500.0));
        const double r1 = -50.0, r2 = 50.0;
        const double w1 = (a * r1 - b * r2) / det, w2 = (-b * r1 + a * r2) / det;
        const double mean = 150.0 + k1 * w1 + k2 * w2;
        const double var = s - (k1 * (a * k1 - b * k2) + k2 * (-b * k1 + a * k2)) / det;
        const auto p = m.predict({"L", x});
        CHECK(std::fabs(p.mean - mean) < 1e-9);
        CHECK(std::fabs(p.variance - std::max(var, 0.0)) < 1e-9);
    }
    CHECK(m.predict({"L", 500}).mean == doctest::Approx(150.0).epsilon(1e-12));
}

// Path graph: network distance is euclidean, so the kernel stays definite.
std::shared_ptr<RoadNetwork> chain() {
    auto net = std::make_shared<RoadNetwork>(1.5);
    net->add_node("A", {0, 0});
    net->add_node("B", {100, 0});
    net->add_node("C", {200, 0});
    net->add_node("D", {300, 0});
    net->add_node("E", {480, 0});
    net->add_node("F", {730, 0});
    net->add_edge("ab", "A", "B", 100, 1, 50);
    net->add_edge("bc", "B", "C", 100, 1, 50);
    net->add_edge("dc", "D", "C", 100, 1, 50);
    net->add_edge("de", "D", "E", 180, 1, 50);
    net->add_edge("ef", "E", "F", 250, 1, 50);
    return net;
}

TEST_CASE("GPR: invariants on a random chain instance") {
    auto m = chain();
    Rng rng(4, "impute-test");
    std::vector<VolumeObservation> data;
    const std::vector<std::string> edges = {"ab", "bc", "dc", "de", "ef"};
    for (int i = 0; i < 25; ++i) {
        const auto& e = edges[i % 5];
        const double len = m->edge(m->edge_index(e)).length_m;
        data.push_back(obs(e, len * (i / 5 + 0.5) / 5.0, rng.uniform(2000, 12000)));
    }
    KernelParams k = default_kernel(data);
    k.noise_variance = 0.0;
    k.length_scale_m = 15.0;
    const auto model = fit_gpr(m, data, k);
    CHECK_FALSE(model.distance_fallback());
    CHECK(model.reconstruction_error() < 1e-8 * k.signal_variance);
    const double sf = std::sqrt(k.signal_variance);
    for (const auto& o : data) {
        const auto p = model.predict(o.location);
        CHECK(std::fabs(p.mean - o.flow_veh_day) < 1e-6 * sf);
        CHECK(p.variance <= k.signal_variance);
    }

    // Batch vs single, and no negative variance.
    std::vector<NetworkPosition> queries;
    for (int i = 0; i < 10000; ++i) {
        const auto& e = edges[rng.index(5)];
        queries.push_back({e, rng.uniform(0, m->edge(m->edge_index(e)).length_m)});
    }
    const auto batch = predict_gpr(model, queries);
    double worst = 0.0;
    for (std::size_t i = 0; i < queries.size(); ++i) {
        worst = std::min(worst, batch[i].variance);
        if (i % 500 == 0) {
            const auto one = model.predict(queries[i]);
            CHECK(std::fabs(one.mean - batch[i].mean) < 1e-9);
            CHECK(std::fabs(one.variance - batch[i].variance) < 1e-9);
        }
    }
    CHECK(worst >= -1e-9);

    // Linearity in the observations with a zero prior mean.
    auto y2 = data;
    for (auto& o : y2) o.flow_veh_day = rng.uniform(0, 5000);
    auto sum = data;
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i].flow_veh_day += y2[i].flow_veh_day;
    const auto m1 = fit_gpr(m, data, k, 0.0), m2 = fit_gpr(m, y2, k, 0.0), ms = fit_gpr(m, sum, k, 0.0);
    for (std::size_t i = 0; i < queries.size(); i += 97) {
        const double lhs = ms.predict(queries[i]).mean;
        const double rhs = m1.predict(queries[i]).mean + m2.predict(queries[i]).mean;
        CHECK(std::fabs(lhs - rhs) < 1e-8 * std::max(1.0, std::fabs(lhs)));
    }
}

TEST_CASE("GPR: indefinite network kernel falls back to euclidean") {
    auto m = mesh();
    std::vector<VolumeObservation> data;
    const std::vector<std::string> edges = {"ab", "bc", "dc", "ad", "ca"};
    for (int i = 0; i < 25; ++i) {
        const auto& e = edges[i % 5];
        const double len = m->edge(m->edge_index(e)).length_m;
        data.push_back(obs(e, len * (i / 5 + 0.5) / 5.0, 1000.0 + 100.0 * i));
    }
    KernelParams k = default_kernel(data);
    k.length_scale_m = 200.0;
    const auto model = fit_gpr(m, data, k);
    CHECK(model.distance_fallback());
    CHECK(model.min_eigenvalue() < 0.0);
    CHECK(model.params().distance == DistanceKind::euclidean);
    KernelParams e = k;
    e.distance = DistanceKind::euclidean;
    const auto direct = fit_gpr(m, data, e);
    for (const auto& o : data) {
        CHECK(model.predict(o.location).mean == direct.predict(o.location).mean);
        CHECK(model.predict(o.location).variance >= 0.0);
    }

    // A path graph keeps the network kernel.
    auto l = line(1000);
    const auto kept = fit_gpr(l, {obs("L", 0, 1), obs("L", 300, 2), obs("L", 900, 4)}, k);
    CHECK_FALSE(kept.distance_fallback());
    CHECK(kept.min_eigenvalue() > 0.0);
}

TEST_CASE("GPR: far from data falls back to the prior") {
    auto net = line(100000);
    KernelParams k;
    k.signal_variance = 400;
    k.length_scale_m = 100;
    const auto m = fit_gpr(net, {obs("L", 0, 10), obs("L", 50, 30)}, k);
    const auto p = m.predict({"L", 90000});
    CHECK(p.mean == doctest::Approx(20.0));
    CHECK(p.variance == doctest::Approx(400.0));

    // Euclidean distance on a straight edge is the offset difference.
    k.distance = DistanceKind::euclidean;
    const auto e = fit_gpr(net, {obs("L", 0, 10), obs("L", 50, 30)}, k);
    CHECK(e.distance({"L", 10}, {"L", 70}) == doctest::Approx(60.0));
    CHECK(e.predict({"L", 25}).mean == doctest::Approx(m.predict({"L", 25}).mean));
}

TEST_CASE("kNN estimates") {
    auto l = line(1000);
    NetworkDistance dist(l);
    std::vector<VolumeObservation> data = {obs("L", 0, 10, 5), obs("L", 100, 20, 4), obs("L", 400, 30, 3),
                                           obs("L", 900, 60, 0)};
    CHECK(knn_estimate(dist, data, {"L", 500}, 4) == doctest::Approx(30.0));
    CHECK(knn_estimate(dist, data, {"L", 120}, 1) == 20.0);
    CHECK(knn_estimate(dist, data, {"L", 120}, 2) == doctest::Approx(15.0));

    std::vector<VolumeObservation> three = {obs("L", 0, 10, 0), obs("L", 1, 20, 1), obs("L", 2, 30, 2)};
    const double e1 = std::exp(-1.0), e2 = std::exp(-2.0);
    const double expect = (10 + 20 * e1 + 30 * e2) / (1 + e1 + e2);
    // Evaluates to 21.418 / 1.5032 = 14.248.
    CHECK(expect == doctest::Approx(14.2479).epsilon(1e-4));
    CHECK(knn_estimate(dist, three, {"L", 500}, 3, TemporalWeighting{1.0, 0}) == doctest::Approx(expect));

    auto shuffled = data;
    Rng rng(1, "knn");
    for (int r = 0; r < 10; ++r) {
        rng.shuffle(shuffled.begin(), shuffled.end());
        for (std::size_t k = 1; k <= 4; ++k)
            CHECK(knn_estimate(dist, shuffled, {"L", 250}, k) == knn_estimate(dist, data, {"L", 250}, k));
    }

    // Equidistant observations: the lower edge id wins.
    auto net = std::make_shared<RoadNetwork>(1.5);
    net->add_node("A", {0, 0});
    net->add_node("B", {100, 0});
    net->add_node("C", {200, 0});
    net->add_edge("b_edge", "A", "B", 100, 1, 50);
    net->add_edge("a_edge", "B", "C", 100, 1, 50);
    NetworkDistance d2(net);
    const std::vector<VolumeObservation> tie = {obs("b_edge", 50, 1), obs("a_edge", 50, 2)};
    CHECK(knn_estimate(d2, tie, {"b_edge", 100}, 1) == 2.0);

    CHECK_THROWS(knn_estimate(dist, {}, {"L", 0}, 1));
    CHECK_THROWS(knn_estimate(dist, data, {"L", 0}, 5));
    CHECK_THROWS(knn_estimate(dist, data, {"L", 0}, 0));
}

TEST_CASE("impute CSV formats") {
    const std::vector<VolumeObservation> data = {obs("e1", 12.5, 1000.25, 3), obs("e2", 0, 0, 0)};
    const auto back = observations_from_csv(observations_csv(data));
    REQUIRE(back.size() == 2);
    CHECK(back[0].location.edge == "e1");
    CHECK(back[0].location.offset_m == 12.5);
    CHECK(back[0].day == 3);
    CHECK(back[0].flow_veh_day == 1000.25);
    CHECK_THROWS(observations_from_csv("a,b\n"));
    CHECK_THROWS(observations_from_csv("edge,offset_m,day,flow\ne1,1,2\n"));
    CHECK_THROWS(observations_from_csv("edge,offset_m,day,flow\ne1,1,2,-5\n"));
    const auto csv = predictions_csv({{"e1", 1}}, {{5.0, 0.5}});
    CHECK(csv == "edge,offset_m,mean,variance\ne1,1,5,0.5\n");
}
