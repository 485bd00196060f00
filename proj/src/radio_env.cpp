#include "hybridflow/radio_env.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "hybridflow/rng.hpp"

namespace hybridflow {

double dbm_to_mw(double dbm) { return std::pow(10.0, dbm / 10.0); }
double mw_to_dbm(double mw) { return 10.0 * std::log10(mw); }

double shadowing_db(const PropagationModel& model, const BaseStation& station, Point pos) {
    if (model.shadowing_sigma_db <= 0.0) return 0.0;
    const auto ix = static_cast<std::int64_t>(std::floor(pos.x / model.shadowing_lattice_m));
    const auto iy = static_cast<std::int64_t>(std::floor(pos.y / model.shadowing_lattice_m));
    std::uint64_t key = derive_seed(model.seed, "shadowing");
    key = hash_combine(key, fnv1a(station.id));
    key = hash_combine(key, static_cast<std::uint64_t>(ix));
    key = hash_combine(key, static_cast<std::uint64_t>(iy));
    return model.shadowing_sigma_db * hashed_normal(key);
}

double path_loss_db(const PropagationModel& model, const BaseStation& station, Point pos) {
    const double d = std::max(distance(pos, station.position), model.d0_m);
    return model.pl0_db + 10.0 * model.exponent * std::log10(d / model.d0_m) +
           shadowing_db(model, station, pos);
}

double rsrp_at(Point pos, const BaseStation& station, const PropagationModel& model) {
    return station.tx_power_dbm - path_loss_db(model, station, pos);
}

std::size_t serving_station(Point pos, const std::vector<BaseStation>& stations,
                            const PropagationModel& model) {
    if (stations.empty()) throw Error("serving_station: no base stations");
    std::size_t best = 0;
    double best_p = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < stations.size(); ++i) {
        const double p = rsrp_at(pos, stations[i], model);
        if (p > best_p) {
            best_p = p;
            best = i;
        }
    }
    return best;
}

double sinr_at(Point pos, const std::vector<BaseStation>& stations, double noise_dbm,
               const PropagationModel& model) {
    if (stations.empty()) throw Error("sinr_at: no base stations");
    const std::size_t serving = serving_station(pos, stations, model);
    double interference_mw = dbm_to_mw(noise_dbm);
    double signal_mw = 0.0;
    for (std::size_t i = 0; i < stations.size(); ++i) {
        const double mw = dbm_to_mw(rsrp_at(pos, stations[i], model));
        if (i == serving) signal_mw = mw;
        else interference_mw += mw;
    }
    return mw_to_dbm(signal_mw / interference_mw);
}

ConnectivityMap::ConnectivityMap(double cell_size_m, Point origin, Metric metric)
    : cell_size_(cell_size_m), origin_(origin), metric_(metric) {
    if (!(cell_size_m > 0.0)) throw Error("ConnectivityMap: cell size must be positive");
}

ConnectivityMap::CellKey ConnectivityMap::cell_of(Point pos) const {
    return {static_cast<std::int64_t>(std::floor((pos.x - origin_.x) / cell_size_)),
            static_cast<std::int64_t>(std::floor((pos.y - origin_.y) / cell_size_))};
}

Point ConnectivityMap::cell_center(CellKey key) const {
    return {origin_.x + (static_cast<double>(key.first) + 0.5) * cell_size_,
            origin_.y + (static_cast<double>(key.second) + 0.5) * cell_size_};
}

void ConnectivityMap::record(const RadioSample& sample) {
    record(sample.position, metric_ == Metric::sinr_db ? sample.sinr_db : sample.rsrp_dbm);
}

void ConnectivityMap::record(Point pos, double value) {
    if (!std::isfinite(value)) throw Error("ConnectivityMap: non-finite sample");
    auto& acc = cells_[cell_of(pos)];
    ++acc.count;
    acc.sum.add(value);
    acc.sum_sq.add_product(value, value);
}

CellStats ConnectivityMap::stats(const Accumulator& acc) const {
    CellStats s;
    s.count = acc.count;
    if (acc.count == 0) return s;
    const double n = static_cast<double>(acc.count);
    const double mean = acc.sum.value() / n;
    s.mean = mean;
    // M2 = sum x^2 - 2 m sum x + n m^2, evaluated exactly then rounded once.
    ExactSum m2 = acc.sum_sq;
    m2.add_product(-2.0 * mean, acc.sum.value());
    // The rounding error of acc.sum.value() is added back exactly.
    ExactSum residual = acc.sum;
    residual.add(-acc.sum.value());
    m2.add_product(-2.0 * mean, residual.value());
    m2.add_product(n * mean, mean);
    m2.add_product(std::fma(n, mean, -n * mean), mean);
    s.m2 = std::max(0.0, m2.value());
    s.variance = s.m2 / n;
    return s;
}

CellStats ConnectivityMap::query(Point pos) const { return cell(cell_of(pos)); }

CellStats ConnectivityMap::cell(CellKey key) const {
    auto it = cells_.find(key);
    if (it == cells_.end()) return {};
    return stats(it->second);
}

std::optional<double> ConnectivityMap::global_mean() const {
    ExactSum total;
    std::size_t n = 0;
    for (const auto& [_, acc] : cells_) {
        total.merge(acc.sum);
        n += acc.count;
    }
    if (n == 0) return std::nullopt;
    return total.value() / static_cast<double>(n);
}

std::size_t ConnectivityMap::total_count() const {
    std::size_t n = 0;
    for (const auto& [_, acc] : cells_) n += acc.count;
    return n;
}

std::vector<ConnectivityMap::CellKey> ConnectivityMap::cells() const {
    std::vector<CellKey> keys;
    for (const auto& [k, _] : cells_) keys.push_back(k);
    return keys;
}

std::string ConnectivityMap::to_csv() const {
    std::ostringstream out;
    out.precision(17);
    out << "cell_x,cell_y,count,mean,m2\n";
    for (const auto& [key, acc] : cells_) {
        const auto s = stats(acc);
        out << key.first << ',' << key.second << ',' << s.count << ',' << *s.mean << ','
            << s.m2 << '\n';
    }
    return out.str();
}

ConnectivityMap ConnectivityMap::from_csv(const std::string& text, double cell_size_m,
                                          Point origin) {
    ConnectivityMap map(cell_size_m, origin);
    std::istringstream in(text);
    std::string line;
    std::getline(in, line);
    if (line.rfind("cell_x,cell_y,count,mean,m2", 0) != 0)
        throw Error("connectivity map CSV: unexpected header");
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream row(line);
        std::string field;
        std::vector<std::string> f;
        while (std::getline(row, field, ',')) f.push_back(field);
        if (f.size() != 5) throw Error("connectivity map CSV: expected 5 columns");
        const CellKey key{std::stoll(f[0]), std::stoll(f[1])};
        const auto count = static_cast<std::size_t>(std::stoull(f[2]));
        const double mean = std::stod(f[3]);
        const double m2 = std::stod(f[4]);
        if (count == 0) continue;
        auto& acc = map.cells_[key];
        acc.count = count;
        acc.sum.add_product(mean, static_cast<double>(count));
        acc.sum_sq.add(m2);
        acc.sum_sq.add_product(mean * static_cast<double>(count), mean);
    }
    return map;
}

double map_estimate(const ConnectivityMap& map, Point pos, const ForecastOptions& options) {
    const auto global = map.global_mean();
    if (!global) return options.prior;
    const auto key = map.cell_of(pos);
    const auto here = map.cell(key);
    if (here.count >= options.k_min) return *here.mean;

    // Nearest cell with enough samples: ring distance, then center distance,
    // then key order.
    std::optional<double> best;
    std::tuple<int, double, ConnectivityMap::CellKey> best_rank{};
    for (int dx = -options.radius_cells; dx <= options.radius_cells; ++dx) {
        for (int dy = -options.radius_cells; dy <= options.radius_cells; ++dy) {
            if (dx == 0 && dy == 0) continue;
            const ConnectivityMap::CellKey k{key.first + dx, key.second + dy};
            const auto s = map.cell(k);
            if (s.count < options.k_min) continue;
            const std::tuple<int, double, ConnectivityMap::CellKey> rank{
                std::max(std::abs(dx), std::abs(dy)), distance(pos, map.cell_center(k)), k};
            if (!best || rank < best_rank) {
                best = *s.mean;
                best_rank = rank;
            }
        }
    }
    return best ? *best : *global;
}

std::vector<ForecastPoint> forecast_along(const ConnectivityMap& map,
                                          const std::vector<TimedPoint>& trajectory,
                                          double horizon_s, const ForecastOptions& options) {
    std::vector<ForecastPoint> out;
    if (trajectory.empty()) return out;
    const double t_end = trajectory.front().t + horizon_s;
    for (const auto& p : trajectory) {
        if (p.t > t_end + 1e-9) break;
        out.push_back({p.t, map_estimate(map, p.position, options)});
    }
    return out;
}

std::vector<TimedPoint> follow_route(const std::vector<Point>& polyline, double start_offset_m,
                                     double speed_mps, double t0, double horizon_s,
                                     double step_s) {
    std::vector<TimedPoint> out;
    if (polyline.empty()) return out;
    std::vector<double> cumulative{0.0};
    for (std::size_t i = 1; i < polyline.size(); ++i)
        cumulative.push_back(cumulative.back() + distance(polyline[i - 1], polyline[i]));
    auto at = [&](double s) {
        s = std::clamp(s, 0.0, cumulative.back());
        auto it = std::upper_bound(cumulative.begin(), cumulative.end(), s);
        const std::size_t i = it == cumulative.end()
                                  ? cumulative.size() - 1
                                  : static_cast<std::size_t>(it - cumulative.begin());
        if (i == 0) return polyline.front();
        const double seg = cumulative[i] - cumulative[i - 1];
        const double f = seg > 0 ? (s - cumulative[i - 1]) / seg : 0.0;
        if (i >= polyline.size()) return polyline.back();
        return Point{polyline[i - 1].x + f * (polyline[i].x - polyline[i - 1].x),
                     polyline[i - 1].y + f * (polyline[i].y - polyline[i - 1].y)};
    };
    for (double dt = 0.0; dt <= horizon_s + 1e-9; dt += step_s)
        out.push_back({t0 + dt, at(start_offset_m + speed_mps * dt)});
    return out;
}

}  // namespace hybridflow
