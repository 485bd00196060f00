#include "hybridflow/impute.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <queue>
#include <sstream>
#include <tuple>

namespace hybridflow {

NetworkDistance::NetworkDistance(std::shared_ptr<const RoadNetwork> net) : net_(std::move(net)) {
    if (!net_) throw Error("NetworkDistance: null network");
    adjacency_.resize(net_->nodes().size());
    for (const auto& e : net_->edges()) {
        adjacency_[e.from].push_back({e.to, e.length_m});
        adjacency_[e.to].push_back({e.from, e.length_m});
    }
    // Eager all-pairs so const queries are safe to run concurrently.
    for (std::size_t n = 0; n < adjacency_.size(); ++n) table_.push_back(dijkstra(n));
}

std::vector<double> NetworkDistance::dijkstra(std::size_t node) const {
    std::vector<double> d(adjacency_.size(), kDisconnected);
    using Item = std::pair<double, std::size_t>;
    std::priority_queue<Item, std::vector<Item>, std::greater<>> pq;
    d[node] = 0.0;
    pq.push({0.0, node});
    while (!pq.empty()) {
        auto [du, u] = pq.top();
        pq.pop();
        if (du > d[u]) continue;
        for (auto [v, w] : adjacency_[u])
            if (du + w < d[v]) {
                d[v] = du + w;
                pq.push({d[v], v});
            }
    }
    return d;
}

void NetworkDistance::check(const NetworkPosition& p) const {
    if (!net_->has_edge(p.edge)) throw Error("network distance: unknown edge '" + p.edge + "'");
    const auto& e = net_->edge(net_->edge_index(p.edge));
    if (p.offset_m < 0.0 || p.offset_m > e.length_m)
        throw Error("network distance: offset outside edge '" + p.edge + "'");
}

double NetworkDistance::operator()(const NetworkPosition& a, const NetworkPosition& b) const {
    check(a);
    check(b);
    const auto& ea = net_->edge(net_->edge_index(a.edge));
    const auto& eb = net_->edge(net_->edge_index(b.edge));
    double best = kDisconnected;
    if (a.edge == b.edge) best = std::fabs(a.offset_m - b.offset_m);
    const std::pair<std::size_t, double> ends_a[2] = {{ea.from, a.offset_m}, {ea.to, ea.length_m - a.offset_m}};
    const std::pair<std::size_t, double> ends_b[2] = {{eb.from, b.offset_m}, {eb.to, eb.length_m - b.offset_m}};
    for (auto [na, da] : ends_a) {
        const auto& d = table_[na];
        for (auto [nb, db] : ends_b) best = std::min(best, da + d[nb] + db);
    }
    return best;
}

double network_distance(const RoadNetwork& net, const NetworkPosition& a, const NetworkPosition& b) {
    // Non-owning view; the distance object does not outlive this call.
    NetworkDistance d(std::shared_ptr<const RoadNetwork>(&net, [](const RoadNetwork*) {}));
    return d(a, b);
}

KernelParams default_kernel(const std::vector<VolumeObservation>& observations) {
    if (observations.empty()) throw Error("default_kernel: no observations");
    double mean = 0.0;
    for (const auto& o : observations) mean += o.flow_veh_day;
    mean /= static_cast<double>(observations.size());
    double var = 0.0;
    for (const auto& o : observations) var += (o.flow_veh_day - mean) * (o.flow_veh_day - mean);
    var = std::max(1.0, var / static_cast<double>(observations.size()));
    KernelParams p;
    p.signal_variance = var;
    p.length_scale_m = 1000.0;
    p.noise_variance = 0.01 * var;
    return p;
}

double GprModel::kernel(double d) const {
    if (!std::isfinite(d)) return 0.0;
    return params_.signal_variance * std::exp(-d * d / (2.0 * params_.length_scale_m * params_.length_scale_m));
}

double GprModel::distance(const NetworkPosition& a, const NetworkPosition& b) const {
    if (params_.distance == DistanceKind::network) return (*dist_)(a, b);
    const auto& net = dist_->network();
    return hybridflow::distance(net.position_on(net.edge_index(a.edge), a.offset_m),
                                net.position_on(net.edge_index(b.edge), b.offset_m));
}

GprPrediction GprModel::predict(const NetworkPosition& location) const {
    const auto n = static_cast<Eigen::Index>(locations_.size());
    Eigen::VectorXd k(n);
    for (Eigen::Index i = 0; i < n; ++i) k[i] = kernel(distance(location, locations_[i]));
    GprPrediction p;
    p.mean = prior_mean_ + k.dot(alpha_);
    const Eigen::VectorXd v = llt_.matrixL().solve(k);
    p.variance = params_.signal_variance - v.squaredNorm();
    // Round-off below zero is clamped; anything larger stays visible.
    if (p.variance < 0.0 && p.variance >= -1e-9 * params_.signal_variance) p.variance = 0.0;
    return p;
}

std::vector<GprPrediction> GprModel::predict(const std::vector<NetworkPosition>& locations) const {
    std::vector<GprPrediction> out;
    out.reserve(locations.size());
    for (const auto& l : locations) out.push_back(predict(l));
    return out;
}

double GprModel::reconstruction_error() const {
    const Eigen::MatrixXd L = llt_.matrixL();
    return (L * L.transpose() - noisy_kernel_).cwiseAbs().maxCoeff();
}

GprModel fit_gpr(std::shared_ptr<const RoadNetwork> net, const std::vector<VolumeObservation>& observations,
                 const KernelParams& params, std::optional<double> prior_mean) {
    if (observations.empty()) throw Error("fit_gpr: no observations");
    if (!(params.length_scale_m > 0.0)) throw Error("fit_gpr: length scale must be positive");
    if (!(params.noise_variance >= 0.0)) throw Error("fit_gpr: noise variance must be >= 0");
    if (!(params.signal_variance > 0.0)) throw Error("fit_gpr: signal variance must be positive");
    GprModel m;
    m.dist_ = std::make_shared<NetworkDistance>(std::move(net));
    m.params_ = params;
    const auto n = static_cast<Eigen::Index>(observations.size());
    Eigen::VectorXd y(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& o = observations[i];
        if (!(o.flow_veh_day >= 0.0)) throw Error("fit_gpr: flow must be >= 0");
        m.locations_.push_back(o.location);
        y[i] = o.flow_veh_day;
    }
    m.prior_mean_ = prior_mean ? *prior_mean : y.mean();
    auto factor = [&] {
        m.noisy_kernel_.resize(n, n);
        for (Eigen::Index i = 0; i < n; ++i)
            for (Eigen::Index j = 0; j <= i; ++j) {
                const double d = i == j ? 0.0 : m.distance(m.locations_[i], m.locations_[j]);
                if (i != j && d == 0.0 && params.noise_variance == 0.0)
                    throw Error("fit_gpr: duplicate location on edge '" + m.locations_[i].edge +
                                "' with zero noise makes the kernel singular");
                m.noisy_kernel_(i, j) = m.noisy_kernel_(j, i) = m.kernel(d);
            }
        m.noisy_kernel_.diagonal().array() += params.noise_variance + kGprJitter;
        m.llt_.compute(m.noisy_kernel_);
        return m.llt_.info() == Eigen::Success;
    };
    bool ok = factor();
    if (params.distance == DistanceKind::network) {
        // Squared path lengths on a graph with cycles are not euclidean, so the
        // kernel can be indefinite even when the factorization goes through.
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m.noisy_kernel_, Eigen::EigenvaluesOnly);
        m.min_eigenvalue_ = es.eigenvalues()(0);
        if (!ok || m.min_eigenvalue_ <= 0.0) {
            m.params_.distance = DistanceKind::euclidean;
            m.distance_fallback_ = true;
            ok = factor();
        }
    }
    if (!ok) throw Error("fit_gpr: kernel matrix is not positive definite");
    const Eigen::VectorXd centered = (y.array() - m.prior_mean_).matrix();
    m.alpha_ = m.llt_.solve(centered);
    return m;
}

std::vector<GprPrediction> predict_gpr(const GprModel& model, const std::vector<NetworkPosition>& locations) {
    return model.predict(locations);
}

double knn_estimate(const NetworkDistance& dist, const std::vector<VolumeObservation>& observations,
                    const NetworkPosition& location, std::size_t k,
                    const std::optional<TemporalWeighting>& temporal) {
    if (observations.empty()) throw Error("knn_estimate: no observations");
    if (k == 0 || k > observations.size()) throw Error("knn_estimate: k must be in [1, sample count]");
    if (temporal && !(temporal->tau_days > 0.0)) throw Error("knn_estimate: tau must be positive");
    std::vector<std::tuple<double, std::string, double, int, double>> ranked;
    ranked.reserve(observations.size());
    for (const auto& o : observations)
        ranked.emplace_back(dist(location, o.location), o.location.edge, o.location.offset_m, o.day,
                            o.flow_veh_day);
    // Full key ordering keeps the result independent of input order.
    std::partial_sort(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(k), ranked.end());
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        const auto& [d, edge, offset, day, flow] = ranked[i];
        const double w = temporal ? std::exp(-std::abs(day - temporal->target_day) / temporal->tau_days) : 1.0;
        num += w * flow;
        den += w;
    }
    return num / den;
}

std::string observations_csv(const std::vector<VolumeObservation>& observations) {
    std::ostringstream out;
    out << std::setprecision(17) << "edge,offset_m,day,flow\n";
    for (const auto& o : observations)
        out << o.location.edge << ',' << o.location.offset_m << ',' << o.day << ',' << o.flow_veh_day << '\n';
    return out.str();
}

std::vector<VolumeObservation> observations_from_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    std::getline(in, line);
    if (line != "edge,offset_m,day,flow") throw Error("observations CSV: unexpected header '" + line + "'");
    std::vector<VolumeObservation> out;
    std::size_t row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (line.empty()) continue;
        std::istringstream cells(line);
        std::string edge, offset, day, flow;
        if (!std::getline(cells, edge, ',') || !std::getline(cells, offset, ',') ||
            !std::getline(cells, day, ',') || !std::getline(cells, flow))
            throw Error("observations CSV: row " + std::to_string(row) + " needs 4 columns");
        try {
            out.push_back({{edge, std::stod(offset)}, std::stoi(day), std::stod(flow)});
        } catch (const std::logic_error&) {
            throw Error("observations CSV: row " + std::to_string(row) + " is not numeric");
        }
        if (!(out.back().flow_veh_day >= 0.0))
            throw Error("observations CSV: row " + std::to_string(row) + " has negative flow");
    }
    return out;
}

std::string predictions_csv(const std::vector<NetworkPosition>& locations,
                            const std::vector<GprPrediction>& predictions) {
    if (locations.size() != predictions.size()) throw Error("predictions_csv: size mismatch");
    std::ostringstream out;
    out << std::setprecision(17) << "edge,offset_m,mean,variance\n";
    for (std::size_t i = 0; i < locations.size(); ++i)
        out << locations[i].edge << ',' << locations[i].offset_m << ',' << predictions[i].mean << ','
            << predictions[i].variance << '\n';
    return out.str();
}

}  // namespace hybridflow
