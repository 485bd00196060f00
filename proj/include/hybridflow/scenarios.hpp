#pragma once

// Frozen synthetic scenarios shared by the CLI, the harness and the
// acceptance checks. Changing any constant here changes published numbers.

#include <cstdint>
#include <memory>
#include <vector>

#include "hybridflow/radio_env.hpp"
#include "hybridflow/transfer.hpp"

namespace hybridflow {

struct DriveScenario {
    RadioEnvironment env;
    std::vector<TimedPoint> trace;
    ConnectivityMap map;
    double phase_switch_t = 0.0;
};

/// 600 s drive: 300 s on a far circle around one base station (bad SINR),
/// then 300 s on a near circle (good SINR). The map is crowdsensed from
/// earlier passes with measurement noise.
DriveScenario two_phase_drive();

/// Crowdsensed map over a trace: `passes` noisy SINR samples per point.
ConnectivityMap crowdsense(const RadioEnvironment& env, const std::vector<TimedPoint>& trace,
                           int passes, std::uint64_t seed, double cell_size_m = 25.0);

}  // namespace hybridflow
