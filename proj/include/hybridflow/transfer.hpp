#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "hybridflow/radio_env.hpp"
#include "hybridflow/rng.hpp"

namespace hybridflow {

enum class PolicyKind { periodic, cat, pcat, ml_cat, ml_pcat };

std::string to_string(PolicyKind kind);
PolicyKind parse_policy_kind(const std::string& name);
inline bool uses_rate(PolicyKind k) { return k == PolicyKind::ml_cat || k == PolicyKind::ml_pcat; }
inline bool uses_forecast(PolicyKind k) { return k == PolicyKind::pcat || k == PolicyKind::ml_pcat; }

struct TransferPolicy {
    PolicyKind kind = PolicyKind::ml_cat;
    double alpha = 4.0;
    double phi_min = 0.0;
    double phi_max = 30.0;
    double t_min = 1.0;
    double t_max = 120.0;
    double periodic_interval_s = 30.0;
    double lookahead_s = 30.0;
    double gamma = 1.2;

    void validate() const;
    nlohmann::json to_json() const;
};

/// Defaults per kind: phi in Mbit/s [0, 30] for ml_*, SINR dB [-5, 30] otherwise.
TransferPolicy default_policy(PolicyKind kind);
TransferPolicy policy_from_json(const nlohmann::json& j);

/// Eq. (1): ((phi - phi_min) / (phi_max - phi_min))^alpha with phi clamped.
double transmission_probability(double phi, double phi_min, double phi_max, double alpha);

struct RateFeatures {
    double sinr_db = 0.0;
    double payload_bytes = 0.0;
    double speed_mps = 0.0;
};

struct RatePredictor {
    enum class Kind { sinr_formula, learned_table };
    using BinKey = std::tuple<std::int64_t, std::int64_t, std::int64_t>;
    struct Bin {
        ExactSum sum;
        std::size_t count = 0;
    };

    Kind kind = Kind::sinr_formula;
    double efficiency = 0.3;
    double bandwidth_hz = 20e6;
    double cap_mbps = 40.0;
    double payload_saturation_bytes = 1e6;  // payload at which the ramp reaches 1
    std::map<BinKey, Bin> table;

    static BinKey bin_of(const RateFeatures& f);
    double formula(const RateFeatures& f) const;
};

/// Achievable rate in Mbit/s.
double predict_rate(const RatePredictor& predictor, const RateFeatures& features);

struct RateObservation {
    RateFeatures features;
    double rate_mbps = 0.0;
};

RatePredictor train_predictor(const std::vector<RateObservation>& log,
                              const RatePredictor& base = {});

struct BufferState {
    double queued_bytes = 0.0;
    std::optional<double> oldest_t;  // generation time of the oldest queued byte
    double accumulation_rate = 0.0;

    double age(double now) const { return oldest_t ? now - *oldest_t : 0.0; }
};

struct Decision {
    bool transmit = false;
    bool forced = false;  // freshness override
    double u = 0.0;
    double p = 0.0;
};

/// One policy instance with its own random stream.
class PolicyEngine {
public:
    PolicyEngine(TransferPolicy policy, std::uint64_t seed);

    /// `forecast` holds future metric values (same units as phi) with their
    /// times; required for the pcat family.
    Decision decide(double now_s, const BufferState& buffer, double phi_now,
                    const std::vector<ForecastPoint>* forecast = nullptr);

    const TransferPolicy& policy() const { return policy_; }

private:
    TransferPolicy policy_;
    Rng rng_;
    double last_tx_ = 0.0;
};

/// Radio side of a drive: base stations plus propagation and noise.
struct RadioEnvironment {
    std::vector<BaseStation> stations;
    PropagationModel model;
    double noise_dbm = -100.0;

    double sinr(Point p) const { return sinr_at(p, stations, noise_dbm, model); }
    /// Path loss towards the serving station.
    double serving_path_loss(Point p) const;
};

struct PowerModel {
    double p_tx_min_w = 0.1;
    double p_tx_max_w = 2.0;
    double p_idle_w = 0.05;
    double path_loss_lo_db = 90.0;
    double path_loss_hi_db = 140.0;

    double tx_power_w(double path_loss_db) const;
};

struct DriveOptions {
    double sensor_rate_bytes_s = 10e3;
    double rate_noise_sigma = 0.15;    // lognormal factor on the achieved rate
    double loss_floor_sinr_db = 0.0;   // loss probability grows below this
    double loss_slope_db = 10.0;
    double loss_max = 0.5;
    PowerModel power;
    RatePredictor predictor;           // used by ml_* kinds
    const ConnectivityMap* map = nullptr;  // required by pcat kinds
    ForecastOptions forecast;
};

struct TransferLogEntry {
    double t = 0.0;
    double phi = 0.0;
    bool transmit = false;
    bool forced = false;
    bool retransmitted = false;
    double bytes = 0.0;
    double duration_s = 0.0;
    double energy_j = 0.0;
    double sinr_db = 0.0;
    double p_tx_w = 0.0;
    double idle_s = 0.0;
    double flush_age_s = 0.0;
    double rate_mbps = 0.0;
    double speed_mps = 0.0;
};

struct TransferMetrics {
    double mean_goodput_mbps = 0.0;  // bits transferred / time spent transmitting
    double total_energy_j = 0.0;
    std::size_t transmissions = 0;
    double mean_flush_age_s = 0.0;
    std::size_t retransmissions = 0;
    double bytes_generated = 0.0;
    double bytes_transferred = 0.0;
    double bytes_buffered = 0.0;
    double tx_time_s = 0.0;
    double idle_time_s = 0.0;

    nlohmann::json to_json() const;
};

struct DriveResult {
    TransferMetrics metrics;
    std::vector<TransferLogEntry> log;
};

/// Walks `trace` (increasing times, typically 1 s apart) and runs one policy.
DriveResult simulate_drive(const std::vector<TimedPoint>& trace, const RadioEnvironment& env,
                           const TransferPolicy& policy, const DriveOptions& options,
                           std::uint64_t seed);

std::string transfer_log_csv(const std::vector<TransferLogEntry>& log);

/// Observed (features, rate) pairs from the transmissions in a log.
std::vector<RateObservation> rate_observations(const std::vector<TransferLogEntry>& log);

}  // namespace hybridflow
