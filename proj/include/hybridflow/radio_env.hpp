#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "hybridflow/common.hpp"
#include "hybridflow/exact_sum.hpp"

namespace hybridflow {

struct BaseStation {
    std::string id;
    Point position;
    double tx_power_dbm = 43.0;
    double bandwidth_hz = 20e6;
};

/// Log-distance path loss with optional lognormal shadowing. Shadowing is a
/// zero-mean Gaussian hashed per (seed, station, lattice cell), so repeated
/// queries at one place return the same value.
struct PropagationModel {
    double pl0_db = 70.0;
    double d0_m = 10.0;
    double exponent = 3.0;
    double shadowing_sigma_db = 6.0;  // 0 disables shadowing
    double shadowing_lattice_m = 25.0;
    std::uint64_t seed = 0;
};

struct RadioSample {
    Point position;
    double rsrp_dbm = 0.0;
    double sinr_db = 0.0;
    double timestamp_s = 0.0;
};

double shadowing_db(const PropagationModel& model, const BaseStation& station, Point pos);
double path_loss_db(const PropagationModel& model, const BaseStation& station, Point pos);
double rsrp_at(Point pos, const BaseStation& station, const PropagationModel& model);

/// Strongest station serves; the others interfere. Linear-domain sum.
double sinr_at(Point pos, const std::vector<BaseStation>& stations, double noise_dbm,
               const PropagationModel& model);
std::size_t serving_station(Point pos, const std::vector<BaseStation>& stations,
                            const PropagationModel& model);

double dbm_to_mw(double dbm);
double mw_to_dbm(double mw);

struct CellStats {
    std::size_t count = 0;
    std::optional<double> mean;  // empty for an unvisited cell
    double variance = 0.0;       // population variance (M2 / count)
    double m2 = 0.0;
};

/// Crowdsensed grid of one radio metric. Per-cell sums are kept exactly, so
/// statistics do not depend on the order samples arrive in.
class ConnectivityMap {
public:
    enum class Metric { sinr_db, rsrp_dbm };

    explicit ConnectivityMap(double cell_size_m = 25.0, Point origin = {},
                             Metric metric = Metric::sinr_db);

    using CellKey = std::pair<std::int64_t, std::int64_t>;

    CellKey cell_of(Point pos) const;
    Point cell_center(CellKey key) const;

    void record(const RadioSample& sample);
    void record(Point pos, double value);
    CellStats query(Point pos) const;
    CellStats cell(CellKey key) const;

    /// Mean over all recorded samples; empty for an empty map.
    std::optional<double> global_mean() const;
    std::size_t total_count() const;
    bool empty() const { return cells_.empty(); }
    double cell_size_m() const { return cell_size_; }
    Point origin() const { return origin_; }
    std::vector<CellKey> cells() const;

    /// CSV rows: cell_x,cell_y,count,mean,m2.
    std::string to_csv() const;
    static ConnectivityMap from_csv(const std::string& text, double cell_size_m = 25.0,
                                    Point origin = {});

private:
    struct Accumulator {
        std::size_t count = 0;
        ExactSum sum;
        ExactSum sum_sq;
    };
    CellStats stats(const Accumulator& acc) const;

    double cell_size_;
    Point origin_;
    Metric metric_;
    std::map<CellKey, Accumulator> cells_;
};

struct TimedPoint {
    double t = 0.0;
    Point position;
};

struct ForecastPoint {
    double t = 0.0;
    double value = 0.0;
};

struct ForecastOptions {
    std::size_t k_min = 3;
    int radius_cells = 2;
    double prior = 0.0;  // used when the map is empty
};

/// Map value expected at one position: the cell mean if the cell holds at
/// least k_min samples, else the nearest such cell within the radius, else
/// the global mean (prior for an empty map).
double map_estimate(const ConnectivityMap& map, Point pos, const ForecastOptions& options = {});

/// Estimates for every trajectory point with t <= t_first + horizon_s.
std::vector<ForecastPoint> forecast_along(const ConnectivityMap& map,
                                          const std::vector<TimedPoint>& trajectory,
                                          double horizon_s, const ForecastOptions& options = {});

/// Positions reached when following a polyline from `start_offset_m` at a
/// constant speed, one point per `step_s` up to horizon_s (inclusive).
std::vector<TimedPoint> follow_route(const std::vector<Point>& polyline, double start_offset_m,
                                     double speed_mps, double t0, double horizon_s,
                                     double step_s = 1.0);

}  // namespace hybridflow
