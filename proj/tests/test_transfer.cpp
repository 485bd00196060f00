#include <doctest.h>

#include <cmath>
#include <map>
#include <tuple>

#include "hybridflow/rng.hpp"
#include "hybridflow/scenarios.hpp"
#include "hybridflow/transfer.hpp"

using namespace hybridflow;

namespace {

// Vehicle parked next to a single station: clean, constant channel.
RadioEnvironment perfect_env() {
    RadioEnvironment env;
    env.stations = {{"bs", {0, 0}, 43.0, 20e6}};
    env.model.shadowing_sigma_db = 0.0;
    env.noise_dbm = -100.0;
    return env;
}

std::vector<TimedPoint> parked(double seconds, Point at = {50, 0}) {
    std::vector<TimedPoint> out;
    for (int t = 0; t <= static_cast<int>(seconds); ++t) out.push_back({double(t), at});
    return out;
}

}  // namespace

TEST_CASE("Eq. 1 transmission probability") {
    CHECK(transmission_probability(-5.0, -5.0, 30.0, 4.0) == 0.0);
    CHECK(transmission_probability(30.0, -5.0, 30.0, 4.0) == 1.0);
    CHECK(std::fabs(transmission_probability(15.0, 0.0, 30.0, 2.0) - 0.25) < 1e-12);
    CHECK(std::fabs(transmission_probability(22.5, 0.0, 30.0, 4.0) - 0.31640625) < 1e-12);
    // Clamping outside the bounds.
    CHECK(transmission_probability(-100.0, 0.0, 30.0, 4.0) == 0.0);
    CHECK(transmission_probability(100.0, 0.0, 30.0, 4.0) == 1.0);
    CHECK_THROWS_AS(transmission_probability(1.0, 5.0, 5.0, 1.0), Error);

    double prev = 0.0;
    for (int i = 0; i <= 1000; ++i) {
        const double phi = -10.0 + 50.0 * i / 1000.0;
        const double p = transmission_probability(phi, -5.0, 30.0, 3.0);
        CHECK(p >= prev);
        CHECK(std::fabs(p - prev) < 0.01);  // no jumps on a fine grid
        prev = p;
        const double affine = transmission_probability(phi, -5.0, 30.0, 1.0);
        CHECK(affine == doctest::Approx(std::clamp((phi + 5.0) / 35.0, 0.0, 1.0)));
    }
}

TEST_CASE("policy validation") {
    auto p = default_policy(PolicyKind::cat);
    CHECK(p.phi_min == -5.0);
    CHECK(default_policy(PolicyKind::ml_pcat).phi_max == 30.0);
    p.phi_min = p.phi_max;
    CHECK_THROWS_AS(p.validate(), Error);
    p = default_policy(PolicyKind::cat);
    p.t_min = 200.0;
    CHECK_THROWS_AS(p.validate(), Error);
    p = default_policy(PolicyKind::cat);
    p.alpha = 0.0;
    CHECK_THROWS_AS(p.validate(), Error);

    const auto parsed = policy_from_json({{"kind", "pcat"}, {"alpha", 2.0}});
    CHECK(parsed.kind == PolicyKind::pcat);
    CHECK(parsed.alpha == 2.0);
    CHECK(parsed.phi_min == -5.0);
    CHECK(policy_from_json(parsed.to_json()).to_json() == parsed.to_json());
    CHECK_THROWS_WITH_AS(policy_from_json({{"kind", "cat"}, {"alpah", 2}}),
                         doctest::Contains("alpah"), Error);
    CHECK_THROWS_AS(parse_policy_kind("greedy"), Error);
}

TEST_CASE("rate predictor") {
    RatePredictor f;
    CHECK(predict_rate(f, {0.0, 5e6, 10.0}) == doctest::Approx(6.0).epsilon(1e-12));
    // Small payloads underuse the link.
    CHECK(predict_rate(f, {0.0, 0.5e6, 10.0}) == doctest::Approx(3.0));
    // Cap.
    CHECK(predict_rate(f, {60.0, 5e6, 10.0}) == f.cap_mbps);

    RatePredictor empty;
    empty.kind = RatePredictor::Kind::learned_table;
    Rng rng(4);
    for (int i = 0; i < 200; ++i) {
        const RateFeatures x{rng.uniform(-10, 35), rng.uniform(0, 3e6), rng.uniform(0, 30)};
        CHECK(predict_rate(empty, x) == predict_rate(f, x));
    }

    const auto single = train_predictor({{{7.0, 4096.0, 12.0}, 3.5}});
    CHECK(predict_rate(single, {6.5, 5000.0, 14.0}) == 3.5);
    const auto pair = train_predictor({{{7.0, 4096.0, 12.0}, 4.0}, {{6.1, 8000.0, 10.0}, 6.0}});
    CHECK(predict_rate(pair, {7.9, 4100.0, 11.0}) == 5.0);
}

TEST_CASE("learned table equals brute-force group-by means") {
    const auto s = two_phase_drive();
    std::vector<RateObservation> obs;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        for (auto kind : {PolicyKind::periodic, PolicyKind::cat, PolicyKind::ml_cat}) {
            DriveOptions o;
            const auto r = simulate_drive(s.trace, s.env, default_policy(kind), o, seed);
            for (const auto& x : rate_observations(r.log)) obs.push_back(x);
        }
    }
    REQUIRE(obs.size() > 500);
    const auto table = train_predictor(obs);

    // Group by the documented bins, recomputed here from the raw features.
    std::map<std::tuple<long, long, long>, std::pair<long double, int>> groups;
    for (const auto& o : obs) {
        const auto key = std::make_tuple(
            static_cast<long>(std::floor(o.features.sinr_db / 2.0)),
            o.features.payload_bytes < 1 ? -1L : static_cast<long>(std::floor(std::log2(o.features.payload_bytes))),
            static_cast<long>(std::floor(o.features.speed_mps / 5.0)));
        groups[key].first += o.rate_mbps;
        groups[key].second += 1;
    }
    CHECK(table.table.size() == groups.size());
    for (const auto& o : obs) {
        const auto key = std::make_tuple(
            static_cast<long>(std::floor(o.features.sinr_db / 2.0)),
            o.features.payload_bytes < 1 ? -1L : static_cast<long>(std::floor(std::log2(o.features.payload_bytes))),
            static_cast<long>(std::floor(o.features.speed_mps / 5.0)));
        const auto& g = groups[key];
        CHECK(predict_rate(table, o.features) ==
              doctest::Approx(static_cast<double>(g.first / g.second)).epsilon(1e-12));
    }
    CHECK_THROWS_AS(train_predictor({}), Error);
}

TEST_CASE("decide rules") {
    BufferState buffer;
    buffer.queued_bytes = 1e5;
    buffer.oldest_t = 0.0;

    // Freshness override at t_max, even with the worst channel.
    PolicyEngine cat(default_policy(PolicyKind::cat), 1);
    const auto forced = cat.decide(120.0, buffer, -20.0);
    CHECK(forced.transmit);
    CHECK(forced.forced);

    // phi at the upper bound always transmits.
    PolicyEngine best(default_policy(PolicyKind::cat), 2);
    for (int i = 0; i < 100; ++i) CHECK(best.decide(1.0 + i, {1e3, 1.0 + i, 0}, 30.0).transmit);

    // Predictive deferral: forecast peak twice the current value.
    PolicyEngine pcat(default_policy(PolicyKind::ml_pcat), 3);
    const std::vector<ForecastPoint> peak{{11.0, 10.0}, {12.0, 20.0}};
    for (int i = 0; i < 100; ++i) {
        BufferState fresh{1e5, 9.0, 0};
        CHECK_FALSE(pcat.decide(10.0, fresh, 10.0, &peak).transmit);
    }
    // Peak outside the lookahead window does not defer.
    const std::vector<ForecastPoint> late{{100.0, 30.0}};
    BufferState fresh{1e5, 9.0, 0};
    CHECK(pcat.decide(10.0, fresh, 30.0, &late).transmit);
    CHECK_THROWS_AS(pcat.decide(10.0, fresh, 10.0, nullptr), Error);

    // Periodic fires on its interval.
    PolicyEngine periodic(default_policy(PolicyKind::periodic), 4);
    int fired = 0;
    for (int t = 1; t <= 90; ++t) fired += periodic.decide(t, buffer, 0.0).transmit;
    CHECK(fired == 3);
}

TEST_CASE("periodic transfer on a perfect channel") {
    DriveOptions o;
    o.sensor_rate_bytes_s = 10e3;
    const auto r = simulate_drive(parked(600), perfect_env(), default_policy(PolicyKind::periodic), o, 1);
    CHECK(r.metrics.transmissions == 20);
    int n = 0;
    for (const auto& e : r.log) {
        if (!e.transmit) continue;
        ++n;
        CHECK(e.t == doctest::Approx(30.0 * n));
        CHECK(e.bytes == doctest::Approx(300e3));
    }
    CHECK(r.metrics.bytes_buffered == 0.0);
    CHECK(r.metrics.retransmissions == 0);
}

TEST_CASE("ml_cat moves its bytes into the good phase") {
    const auto s = two_phase_drive();
    auto policy = default_policy(PolicyKind::ml_cat);
    policy.t_max = 600.0;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const auto r = simulate_drive(s.trace, s.env, policy, DriveOptions{}, seed);
        // Replay the decision log.
        double good = 0, total = 0;
        for (const auto& e : r.log) {
            if (!e.transmit) continue;
            total += e.bytes;
            if (e.t > s.phase_switch_t) good += e.bytes;
        }
        REQUIRE(total > 0);
        CHECK(total == doctest::Approx(r.metrics.bytes_transferred));
        CHECK(good / total >= 0.9);
    }
}

TEST_CASE("drive simulation invariants") {
    const auto s = two_phase_drive();
    for (auto kind : {PolicyKind::periodic, PolicyKind::cat, PolicyKind::pcat, PolicyKind::ml_cat,
                      PolicyKind::ml_pcat}) {
        for (std::uint64_t seed = 1; seed <= 3; ++seed) {
            DriveOptions o;
            o.map = &s.map;
            const auto policy = default_policy(kind);
            const auto r = simulate_drive(s.trace, s.env, policy, o, seed);
            const auto again = simulate_drive(s.trace, s.env, policy, o, seed);
            CHECK(r.metrics.to_json() == again.metrics.to_json());

            long double energy = 0, tx = 0, idle = 0, moved = 0;
            for (const auto& e : r.log) {
                energy += e.duration_s * e.p_tx_w + e.idle_s * o.power.p_idle_w;
                tx += e.duration_s;
                idle += e.idle_s;
                if (e.transmit) {
                    moved += e.bytes;
                    CHECK(e.flush_age_s <= policy.t_max + 1.0);
                }
            }
            CHECK(std::fabs(static_cast<double>(energy) - r.metrics.total_energy_j) <=
                  1e-9 * std::max(1.0, r.metrics.total_energy_j));
            CHECK(r.metrics.tx_time_s == doctest::Approx(static_cast<double>(tx)));
            CHECK(r.metrics.idle_time_s == doctest::Approx(static_cast<double>(idle)));
            CHECK(r.metrics.bytes_generated ==
                  doctest::Approx(static_cast<double>(moved) + r.metrics.bytes_buffered));
            CHECK(r.metrics.bytes_generated == doctest::Approx(600 * o.sensor_rate_bytes_s));
        }
    }
    CHECK_THROWS_AS(simulate_drive(s.trace, s.env, default_policy(PolicyKind::pcat), {}, 1), Error);
    CHECK_THROWS_AS(simulate_drive({{0, {}}}, s.env, default_policy(PolicyKind::cat), {}, 1), Error);
}

TEST_CASE("raising alpha never adds opportunistic transmissions") {
    const auto s = two_phase_drive();
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        std::size_t prev = SIZE_MAX;
        for (double alpha : {0.5, 1.0, 2.0, 4.0, 8.0}) {
            auto policy = default_policy(PolicyKind::cat);
            policy.alpha = alpha;
            const auto r = simulate_drive(s.trace, s.env, policy, {}, seed);
            std::size_t opportunistic = 0;
            for (const auto& e : r.log) opportunistic += e.transmit && !e.forced;
            CHECK(opportunistic <= prev);
            prev = opportunistic;
        }
    }
}

TEST_CASE("transfer log csv") {
    const auto r = simulate_drive(parked(60), perfect_env(), default_policy(PolicyKind::periodic), {}, 1);
    const auto csv = transfer_log_csv(r.log);
    CHECK(csv.rfind("t,phi_metric,decision,bytes,duration_s,energy_j,sinr_db\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 61);
    CHECK(csv.find("transmit") != std::string::npos);
}
