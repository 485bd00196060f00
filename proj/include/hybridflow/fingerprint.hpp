#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hybridflow/common.hpp"

namespace hybridflow {

inline constexpr int kLinks = 9;          // 3 transmitters x 3 receivers
inline constexpr int kFeaturesPerLink = 4;
inline constexpr int kFeatures = kLinks * kFeaturesPerLink;

enum class VehicleLabel { car_like, truck_like };
std::string to_string(VehicleLabel label);
VehicleLabel parse_label(const std::string& s);

struct VehicleGeometry {
    double length_m = 4.5;
    double height_m = 1.5;
};
VehicleGeometry default_geometry(VehicleLabel label);

struct FingerprintTrace {
    std::array<std::vector<double>, kLinks> rssi_dbm;
    double sample_rate_hz = 10.0;
    VehicleLabel label = VehicleLabel::car_like;
    double speed_mps = 0.0;
    // Generation ground truth.
    VehicleGeometry geometry;
    double dip_start_s = 0.0;
    double dip_duration_s = 0.0;
    std::uint64_t seed = 0;

    std::size_t samples() const { return rssi_dbm[0].size(); }
    void validate() const;
};

struct SynthesisOptions {
    double duration_s = 8.0;
    double sample_rate_hz = 10.0;
    double noise_sigma_db = 2.0;
};

/// Line-of-sight height of each link, transmitters and receivers mounted at
/// 0.5, 1.5 and 2.5 m.
double link_height(int link);
/// Attenuation a vehicle of the given height causes on a link.
double link_depth_db(double vehicle_height_m, int link);

FingerprintTrace synthesize_trace(VehicleLabel label, double speed_mps, double noise_sigma_db,
                                  std::uint64_t seed);
FingerprintTrace synthesize_trace(VehicleLabel label, double speed_mps, std::uint64_t seed,
                                  const VehicleGeometry& geometry,
                                  const SynthesisOptions& options = {});

struct FeatureRecord {
    // Per link: depth, mean attenuation, width, area.
    std::array<double, kFeatures> values{};
    VehicleLabel label = VehicleLabel::car_like;

    double depth(int link) const { return values[link * kFeaturesPerLink + 0]; }
    double mean(int link) const { return values[link * kFeaturesPerLink + 1]; }
    double width(int link) const { return values[link * kFeaturesPerLink + 2]; }
    double area(int link) const { return values[link * kFeaturesPerLink + 3]; }
};

std::vector<std::string> feature_names();

/// Attenuation is measured against each link's baseline, the mean of the
/// first 10 % of its samples. Width and area count samples attenuated by at
/// least `threshold_db`.
FeatureRecord extract_features(const FingerprintTrace& trace, double threshold_db = 3.0);

enum class Regularization { l1, l2 };
std::string to_string(Regularization r);
Regularization parse_regularization(const std::string& s);

struct TrainOptions {
    Regularization reg = Regularization::l2;
    double lambda = 1e-3;
    std::size_t epochs = 30;
    double step = 0.5;  // eta_t = step / sqrt(t)
    std::uint64_t seed = 1;
};

struct LinearModel {
    std::array<double, kFeatures> weights{};
    double bias = 0.0;
    std::array<double, kFeatures> feature_mean{};
    std::array<double, kFeatures> feature_scale{};
    Regularization reg = Regularization::l2;
    double lambda = 0.0;
    std::vector<double> objective_per_epoch;

    /// Signed score; positive means truck-like.
    double score(const FeatureRecord& f) const;
    VehicleLabel predict(const FeatureRecord& f) const;
    nlohmann::json to_json() const;
};

LinearModel train(const std::vector<FeatureRecord>& data, const TrainOptions& options);
/// Hinge loss plus penalty of a model on (normalized) data.
double svm_objective(const LinearModel& model, const std::vector<FeatureRecord>& data);

struct Confusion {
    std::size_t cc = 0, ct = 0, tc = 0, tt = 0;  // true x predicted
    std::size_t total() const { return cc + ct + tc + tt; }
    double accuracy() const;
    double car_recall() const;
    double truck_recall() const;
    nlohmann::json to_json() const;
};

Confusion evaluate(const LinearModel& model, const std::vector<FeatureRecord>& data);

struct ClassShares {
    double car = 0.0;
    double truck = 0.0;
};

/// Shares over the whole stream.
ClassShares class_shares(const LinearModel& model, const std::vector<FeatureRecord>& stream);
/// Shares over consecutive windows of `window` traces.
std::vector<ClassShares> rolling_class_shares(const LinearModel& model,
                                              const std::vector<FeatureRecord>& stream,
                                              std::size_t window);

struct CorpusOptions {
    std::size_t traces = 2500;
    double truck_share = 0.5;
    double noise_sigma_db = 2.0;
    double min_speed_mps = 8.0;
    double max_speed_mps = 36.0;
    std::uint64_t seed = 20180901;
};

/// Vehicle geometry and speed are drawn per trace from class ranges.
std::vector<FingerprintTrace> generate_corpus(const CorpusOptions& options);

struct CorpusSplit {
    std::vector<FeatureRecord> train;
    std::vector<FeatureRecord> test;
};
/// Seeded shuffle, then the first `train_fraction` go to training.
CorpusSplit split_corpus(const std::vector<FeatureRecord>& records, double train_fraction,
                         std::uint64_t seed);

/// CSV: t,rssi_1..rssi_9.
std::string trace_csv(const FingerprintTrace& trace);
FingerprintTrace trace_from_csv(const std::string& text, VehicleLabel label, double speed_mps);

/// Writes one CSV per trace plus manifest.json into `dir`.
void write_corpus(const std::vector<FingerprintTrace>& corpus, const std::string& dir);
std::vector<FingerprintTrace> read_corpus(const std::string& dir);

}  // namespace hybridflow
