#include "hybridflow/transfer.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "hybridflow/json_util.hpp"

namespace hybridflow {

using nlohmann::json;

std::string to_string(PolicyKind kind) {
    switch (kind) {
        case PolicyKind::periodic: return "periodic";
        case PolicyKind::cat: return "cat";
        case PolicyKind::pcat: return "pcat";
        case PolicyKind::ml_cat: return "ml_cat";
        case PolicyKind::ml_pcat: return "ml_pcat";
    }
    return "?";
}

PolicyKind parse_policy_kind(const std::string& name) {
    for (auto k : {PolicyKind::periodic, PolicyKind::cat, PolicyKind::pcat, PolicyKind::ml_cat,
                   PolicyKind::ml_pcat})
        if (to_string(k) == name) return k;
    throw Error("unknown transfer policy '" + name + "'");
}

void TransferPolicy::validate() const {
    const std::string where = "policy " + to_string(kind);
    if (!(phi_min < phi_max)) throw Error(where + ": phi_min must be below phi_max");
    if (!(t_min > 0.0) || !(t_min <= t_max)) throw Error(where + ": need 0 < t_min <= t_max");
    if (!(alpha > 0.0)) throw Error(where + ": alpha must be positive");
    if (!(gamma >= 1.0)) throw Error(where + ": gamma must be >= 1");
    if (!(periodic_interval_s > 0.0)) throw Error(where + ": periodic_interval_s must be positive");
    if (!(lookahead_s >= 0.0)) throw Error(where + ": lookahead_s must be >= 0");
}

json TransferPolicy::to_json() const {
    return {{"kind", to_string(kind)},
            {"alpha", alpha},
            {"phi_min", phi_min},
            {"phi_max", phi_max},
            {"t_min", t_min},
            {"t_max", t_max},
            {"periodic_interval_s", periodic_interval_s},
            {"lookahead_s", lookahead_s},
            {"gamma", gamma}};
}

TransferPolicy default_policy(PolicyKind kind) {
    TransferPolicy p;
    p.kind = kind;
    if (!uses_rate(kind)) {
        p.phi_min = -5.0;
        p.phi_max = 30.0;
    }
    return p;
}

TransferPolicy policy_from_json(const json& j) {
    if (j.is_string()) return default_policy(parse_policy_kind(j.get<std::string>()));
    reject_unknown(j,
                   {"kind", "alpha", "phi_min", "phi_max", "t_min", "t_max",
                    "periodic_interval_s", "lookahead_s", "gamma"},
                   "policy");
    auto p = default_policy(parse_policy_kind(j.at("kind").get<std::string>()));
    p.alpha = j.value("alpha", p.alpha);
    p.phi_min = j.value("phi_min", p.phi_min);
    p.phi_max = j.value("phi_max", p.phi_max);
    p.t_min = j.value("t_min", p.t_min);
    p.t_max = j.value("t_max", p.t_max);
    p.periodic_interval_s = j.value("periodic_interval_s", p.periodic_interval_s);
    p.lookahead_s = j.value("lookahead_s", p.lookahead_s);
    p.gamma = j.value("gamma", p.gamma);
    p.validate();
    return p;
}

double transmission_probability(double phi, double phi_min, double phi_max, double alpha) {
    if (!(phi_min < phi_max)) throw Error("transmission_probability: phi_min must be below phi_max");
    if (phi <= phi_min) return 0.0;
    if (phi >= phi_max) return 1.0;
    return std::pow((phi - phi_min) / (phi_max - phi_min), alpha);
}

RatePredictor::BinKey RatePredictor::bin_of(const RateFeatures& f) {
    const auto sinr_bin = static_cast<std::int64_t>(std::floor(f.sinr_db / 2.0));
    const auto payload_bin =
        f.payload_bytes < 1.0 ? std::int64_t{-1}
                              : static_cast<std::int64_t>(std::floor(std::log2(f.payload_bytes)));
    const auto speed_bin = static_cast<std::int64_t>(std::floor(f.speed_mps / 5.0));
    return {sinr_bin, payload_bin, speed_bin};
}

double RatePredictor::formula(const RateFeatures& f) const {
    const double shannon = efficiency * bandwidth_hz * std::log2(1.0 + std::pow(10.0, f.sinr_db / 10.0));
    const double ramp = std::clamp(f.payload_bytes / payload_saturation_bytes, 0.0, 1.0);
    return std::min(cap_mbps, shannon / 1e6) * ramp;
}

double predict_rate(const RatePredictor& predictor, const RateFeatures& features) {
    if (predictor.kind == RatePredictor::Kind::learned_table) {
        auto it = predictor.table.find(RatePredictor::bin_of(features));
        if (it != predictor.table.end() && it->second.count > 0)
            return it->second.sum.value() / static_cast<double>(it->second.count);
    }
    return predictor.formula(features);
}

RatePredictor train_predictor(const std::vector<RateObservation>& log, const RatePredictor& base) {
    if (log.empty()) throw Error("train_predictor: empty log");
    RatePredictor out = base;
    out.kind = RatePredictor::Kind::learned_table;
    out.table.clear();
    for (const auto& o : log) {
        auto& bin = out.table[RatePredictor::bin_of(o.features)];
        bin.sum.add(o.rate_mbps);
        ++bin.count;
    }
    return out;
}

PolicyEngine::PolicyEngine(TransferPolicy policy, std::uint64_t seed)
    : policy_(std::move(policy)), rng_(seed) {
    policy_.validate();
}

Decision PolicyEngine::decide(double now_s, const BufferState& buffer, double phi_now,
                              const std::vector<ForecastPoint>* forecast) {
    Decision d;
    // One draw per call keeps the stream aligned whatever the outcome.
    d.u = rng_.uniform();
    const auto& p = policy_;
    if (p.kind == PolicyKind::periodic) {
        d.transmit = now_s - last_tx_ >= p.periodic_interval_s - 1e-9;
    } else {
        if (uses_forecast(p.kind) && !forecast)
            throw Error("policy " + to_string(p.kind) + ": forecast required");
        d.p = transmission_probability(phi_now, p.phi_min, p.phi_max, p.alpha);
        d.forced = buffer.age(now_s) >= p.t_max - 1e-9;
        if (d.forced) {
            d.transmit = true;
        } else {
            bool defer = false;
            if (uses_forecast(p.kind)) {
                // Hysteresis on the position within [phi_min, phi_max], so
                // that gamma means the same for dB and Mbit/s metrics.
                auto norm = [&](double v) {
                    return std::clamp((v - p.phi_min) / (p.phi_max - p.phi_min), 0.0, 1.0);
                };
                double best = -1.0;
                for (const auto& f : *forecast)
                    if (f.t > now_s && f.t <= now_s + p.lookahead_s + 1e-9)
                        best = std::max(best, norm(f.value));
                defer = best > p.gamma * norm(phi_now);
            }
            d.transmit = !defer && d.u < d.p;
        }
    }
    if (d.transmit) last_tx_ = now_s;
    return d;
}

double RadioEnvironment::serving_path_loss(Point p) const {
    return path_loss_db(model, stations[serving_station(p, stations, model)], p);
}

double PowerModel::tx_power_w(double path_loss_db) const {
    const double f = std::clamp(
        (path_loss_db - path_loss_lo_db) / (path_loss_hi_db - path_loss_lo_db), 0.0, 1.0);
    return p_tx_min_w + f * (p_tx_max_w - p_tx_min_w);
}

DriveResult simulate_drive(const std::vector<TimedPoint>& trace, const RadioEnvironment& env,
                           const TransferPolicy& policy, const DriveOptions& options,
                           std::uint64_t seed) {
    if (trace.size() < 2 || !(trace.back().t > trace.front().t))
        throw Error("simulate_drive: trace duration must be positive");
    if (uses_forecast(policy.kind) && !options.map)
        throw Error("simulate_drive: policy " + to_string(policy.kind) +
                    " needs a connectivity map for its forecast");

    PolicyEngine engine(policy, derive_seed(seed, "transfer.policy"));
    // Channel draws happen every step for every policy, so all policies
    // see the same channel realization for one seed.
    Rng channel(seed, "transfer.channel");
    RatePredictor truth = options.predictor;
    truth.kind = RatePredictor::Kind::sinr_formula;

    DriveResult result;
    auto& m = result.metrics;
    BufferState buffer;
    buffer.accumulation_rate = options.sensor_rate_bytes_s;
    double last_call = -1e300;
    ExactSum energy, tx_time, idle_time, flush_age, transferred;

    for (std::size_t i = 1; i < trace.size(); ++i) {
        const double now = trace[i].t;
        const double dt = now - trace[i - 1].t;
        if (!(dt > 0.0)) throw Error("simulate_drive: trace times must increase");
        const Point pos = trace[i].position;

        const double generated = options.sensor_rate_bytes_s * dt;
        if (generated > 0.0) {
            if (buffer.queued_bytes <= 0.0) buffer.oldest_t = trace[i - 1].t;
            buffer.queued_bytes += generated;
            m.bytes_generated += generated;
        }

        TransferLogEntry e;
        e.t = now;
        e.sinr_db = env.sinr(pos);
        e.speed_mps = distance(trace[i - 1].position, pos) / dt;
        const double noise = std::exp(options.rate_noise_sigma * channel.normal());
        const double loss_u = channel.uniform();

        const RateFeatures features{e.sinr_db, buffer.queued_bytes, e.speed_mps};
        e.phi = uses_rate(policy.kind) ? predict_rate(options.predictor, features) : e.sinr_db;

        if (now - last_call >= policy.t_min - 1e-9) {
            last_call = now;
            std::vector<ForecastPoint> forecast;
            if (uses_forecast(policy.kind)) {
                std::vector<TimedPoint> ahead;
                for (std::size_t j = i + 1; j < trace.size(); ++j) {
                    if (trace[j].t > now + policy.lookahead_s + 1e-9) break;
                    ahead.push_back(trace[j]);
                }
                if (!ahead.empty()) {
                    forecast = forecast_along(*options.map, ahead, policy.lookahead_s,
                                              options.forecast);
                    if (uses_rate(policy.kind)) {
                        // The deferred payload is what would be sent then.
                        for (auto& f : forecast)
                            f.value = predict_rate(
                                options.predictor,
                                {f.value,
                                 buffer.queued_bytes + options.sensor_rate_bytes_s * (f.t - now),
                                 e.speed_mps});
                    }
                }
            }
            const auto d = engine.decide(now, buffer, e.phi, &forecast);
            if (d.transmit && buffer.queued_bytes > 0.0) {
                e.transmit = true;
                e.forced = d.forced;
                e.bytes = buffer.queued_bytes;
                e.flush_age_s = buffer.age(now);
                e.rate_mbps = predict_rate(truth, features) * noise;
                e.duration_s = e.bytes * 8.0 / (e.rate_mbps * 1e6);
                const double p_loss =
                    std::clamp((options.loss_floor_sinr_db - e.sinr_db) / options.loss_slope_db,
                               0.0, options.loss_max);
                if (loss_u < p_loss) {
                    e.retransmitted = true;
                    e.duration_s *= 2.0;
                    ++m.retransmissions;
                }
                e.p_tx_w = options.power.tx_power_w(env.serving_path_loss(pos));
                ++m.transmissions;
                transferred.add(e.bytes);
                flush_age.add(e.flush_age_s);
                buffer.queued_bytes = 0.0;
                buffer.oldest_t.reset();
            }
        }
        e.idle_s = std::max(0.0, dt - e.duration_s);
        e.energy_j = e.duration_s * e.p_tx_w + e.idle_s * options.power.p_idle_w;
        energy.add(e.energy_j);
        tx_time.add(e.duration_s);
        idle_time.add(e.idle_s);
        result.log.push_back(e);
    }

    m.total_energy_j = energy.value();
    m.tx_time_s = tx_time.value();
    m.idle_time_s = idle_time.value();
    m.bytes_transferred = transferred.value();
    m.bytes_buffered = buffer.queued_bytes;
    m.mean_flush_age_s = m.transmissions ? flush_age.value() / static_cast<double>(m.transmissions) : 0.0;
    m.mean_goodput_mbps = m.tx_time_s > 0.0 ? m.bytes_transferred * 8.0 / m.tx_time_s / 1e6 : 0.0;
    return result;
}

json TransferMetrics::to_json() const {
    return {{"mean_goodput_mbps", mean_goodput_mbps},
            {"total_energy_j", total_energy_j},
            {"transmissions", transmissions},
            {"mean_flush_age_s", mean_flush_age_s},
            {"retransmissions", retransmissions},
            {"bytes_generated", bytes_generated},
            {"bytes_transferred", bytes_transferred},
            {"bytes_buffered", bytes_buffered},
            {"tx_time_s", tx_time_s},
            {"idle_time_s", idle_time_s}};
}

std::string transfer_log_csv(const std::vector<TransferLogEntry>& log) {
    std::ostringstream out;
    out.precision(10);
    out << "t,phi_metric,decision,bytes,duration_s,energy_j,sinr_db\n";
    for (const auto& e : log)
        out << e.t << ',' << e.phi << ',' << (e.transmit ? "transmit" : "defer") << ',' << e.bytes
            << ',' << e.duration_s << ',' << e.energy_j << ',' << e.sinr_db << '\n';
    return out.str();
}

std::vector<RateObservation> rate_observations(const std::vector<TransferLogEntry>& log) {
    std::vector<RateObservation> out;
    for (const auto& e : log)
        if (e.transmit) out.push_back({{e.sinr_db, e.bytes, e.speed_mps}, e.rate_mbps});
    return out;
}

}  // namespace hybridflow
