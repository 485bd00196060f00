#pragma once

#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "hybridflow/road_net.hpp"

namespace hybridflow {

struct NetworkPosition {
    std::string edge;
    double offset_m = 0.0;
};

struct VolumeObservation {
    NetworkPosition location;
    int day = 0;
    double flow_veh_day = 0.0;
};

inline constexpr double kDisconnected = std::numeric_limits<double>::infinity();

/// Shortest-path distances along the undirected road graph. Node-to-node
/// distances are tabulated up front, so reuse one instance for many queries.
class NetworkDistance {
public:
    explicit NetworkDistance(std::shared_ptr<const RoadNetwork> net);
    /// kDisconnected when no path exists.
    double operator()(const NetworkPosition& a, const NetworkPosition& b) const;
    const RoadNetwork& network() const { return *net_; }

private:
    std::vector<double> dijkstra(std::size_t node) const;
    void check(const NetworkPosition& p) const;

    std::shared_ptr<const RoadNetwork> net_;
    std::vector<std::vector<std::pair<std::size_t, double>>> adjacency_;
    std::vector<std::vector<double>> table_;
};

double network_distance(const RoadNetwork& net, const NetworkPosition& a, const NetworkPosition& b);

enum class DistanceKind { network, euclidean };

struct KernelParams {
    double signal_variance = 1.0;
    double length_scale_m = 1000.0;
    double noise_variance = 0.0;
    DistanceKind distance = DistanceKind::network;
};

/// sigma_f^2 = Var(y), l = 1000 m, sigma_n^2 = 0.01 Var(y). Var(y) is floored
/// at 1 so constant data still gets a usable kernel.
KernelParams default_kernel(const std::vector<VolumeObservation>& observations);

struct GprPrediction {
    double mean = 0.0;
    double variance = 0.0;
};

class GprModel {
public:
    double kernel(double d) const;
    double distance(const NetworkPosition& a, const NetworkPosition& b) const;
    std::vector<GprPrediction> predict(const std::vector<NetworkPosition>& locations) const;
    GprPrediction predict(const NetworkPosition& location) const;

    const KernelParams& params() const { return params_; }
    double prior_mean() const { return prior_mean_; }
    std::size_t size() const { return locations_.size(); }
    /// max |L L^T - (K + noise I)| over entries.
    double reconstruction_error() const;
    /// True when the network-distance kernel matrix was not positive
    /// definite and the model fell back to euclidean distance. params()
    /// reports the distance actually used.
    bool distance_fallback() const { return distance_fallback_; }
    /// Smallest eigenvalue of the network-distance kernel matrix (with noise).
    double min_eigenvalue() const { return min_eigenvalue_; }

private:
    friend GprModel fit_gpr(std::shared_ptr<const RoadNetwork>, const std::vector<VolumeObservation>&,
                            const KernelParams&, std::optional<double>);
    std::shared_ptr<NetworkDistance> dist_;
    KernelParams params_;
    std::vector<NetworkPosition> locations_;
    double prior_mean_ = 0.0;
    Eigen::MatrixXd noisy_kernel_;
    Eigen::LLT<Eigen::MatrixXd> llt_;
    Eigen::VectorXd alpha_;
    bool distance_fallback_ = false;
    double min_eigenvalue_ = 0.0;
};

inline constexpr double kGprJitter = 1e-8;

/// Squared-exponential kernel over network (or euclidean) distance. The
/// prior mean defaults to the training mean. A network kernel that is not
/// positive definite (possible on graphs with cycles) falls back to euclidean.
GprModel fit_gpr(std::shared_ptr<const RoadNetwork> net, const std::vector<VolumeObservation>& observations,
                 const KernelParams& params, std::optional<double> prior_mean = std::nullopt);
std::vector<GprPrediction> predict_gpr(const GprModel& model, const std::vector<NetworkPosition>& locations);

struct TemporalWeighting {
    double tau_days = 1.0;
    int target_day = 0;
};

/// Mean of the k network-nearest observations, optionally weighted by
/// exp(-|day - target_day| / tau). Ties go to the lower edge id.
double knn_estimate(const NetworkDistance& dist, const std::vector<VolumeObservation>& observations,
                    const NetworkPosition& location, std::size_t k,
                    const std::optional<TemporalWeighting>& temporal = std::nullopt);

/// CSV: edge,offset_m,day,flow
std::string observations_csv(const std::vector<VolumeObservation>& observations);
std::vector<VolumeObservation> observations_from_csv(const std::string& text);
/// CSV: edge,offset_m,mean,variance
std::string predictions_csv(const std::vector<NetworkPosition>& locations,
                            const std::vector<GprPrediction>& predictions);

}  // namespace hybridflow
