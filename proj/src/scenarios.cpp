#include "hybridflow/scenarios.hpp"

#include <cmath>

#include "hybridflow/rng.hpp"

namespace hybridflow {

namespace {

constexpr std::uint64_t kFrozenSeed = 20240611;

std::vector<TimedPoint> circle(double radius, double speed, double t0, double t1,
                               std::vector<TimedPoint> out = {}) {
    for (double t = t0; t <= t1 + 1e-9; t += 1.0) {
        const double a = speed * (t - t0) / radius;
        out.push_back({t, {radius * std::cos(a), radius * std::sin(a)}});
    }
    return out;
}

}  // namespace

ConnectivityMap crowdsense(const RadioEnvironment& env, const std::vector<TimedPoint>& trace,
                           int passes, std::uint64_t seed, double cell_size_m) {
    ConnectivityMap map(cell_size_m);
    Rng rng(seed, "crowd");
    for (int k = 0; k < passes; ++k) {
        for (const auto& p : trace) {
            const Point q{p.position.x + rng.uniform(-5, 5), p.position.y + rng.uniform(-5, 5)};
            map.record(q, env.sinr(q) + rng.normal(0.0, 1.0));
        }
    }
    return map;
}

DriveScenario two_phase_drive() {
    DriveScenario s;
    s.env.stations = {{"bs0", {0.0, 0.0}, 43.0, 20e6}};
    s.env.model.seed = kFrozenSeed;
    s.env.model.shadowing_sigma_db = 3.0;
    s.env.noise_dbm = -100.0;
    s.phase_switch_t = 300.0;
    // Far circle: path loss ~146 dB, SINR around -3 dB. Near circle: ~114 dB,
    // SINR around 29 dB.
    s.trace = circle(3500.0, 15.0, 0.0, 300.0);
    s.trace = circle(300.0, 15.0, 301.0, 600.0, std::move(s.trace));
    s.map = crowdsense(s.env, s.trace, 3, kFrozenSeed);
    return s;
}

}  // namespace hybridflow
