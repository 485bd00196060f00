#include "hybridflow/fingerprint.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "hybridflow/rng.hpp"

namespace hybridflow {

using nlohmann::json;
namespace fs = std::filesystem;

std::string to_string(VehicleLabel label) {
    return label == VehicleLabel::car_like ? "car_like" : "truck_like";
}

VehicleLabel parse_label(const std::string& s) {
    if (s == "car_like" || s == "C") return VehicleLabel::car_like;
    if (s == "truck_like" || s == "T") return VehicleLabel::truck_like;
    throw Error("unknown vehicle label '" + s + "'");
}

VehicleGeometry default_geometry(VehicleLabel label) {
    if (label == VehicleLabel::car_like) return {4.5, 1.5};
    return {16.5, 3.8};
}

void FingerprintTrace::validate() const {
    const std::size_t n = rssi_dbm[0].size();
    if (n < 2) throw Error("fingerprint trace: need at least 2 samples");
    for (const auto& s : rssi_dbm) {
        if (s.size() != n) throw Error("fingerprint trace: links differ in length");
        for (double v : s)
            if (!std::isfinite(v)) throw Error("fingerprint trace: non-finite RSSI");
    }
    if (!(sample_rate_hz > 0.0)) throw Error("fingerprint trace: sample rate must be positive");
}

double link_height(int link) {
    static constexpr double mount[3] = {0.5, 1.5, 2.5};
    return 0.5 * (mount[link / 3] + mount[link % 3]);
}

double link_depth_db(double vehicle_height_m, int link) {
    // Full blockage below the roof line, a little diffraction loss above it.
    return 1.0 + 11.0 / (1.0 + std::exp(-(vehicle_height_m - link_height(link)) / 0.25));
}

namespace {

double baseline_dbm(int link) { return -45.0 - 3.0 * link + 1.5 * ((link * 7) % 3); }

}  // namespace

FingerprintTrace synthesize_trace(VehicleLabel label, double speed_mps, double noise_sigma_db,
                                  std::uint64_t seed) {
    SynthesisOptions o;
    o.noise_sigma_db = noise_sigma_db;
    return synthesize_trace(label, speed_mps, seed, default_geometry(label), o);
}

FingerprintTrace synthesize_trace(VehicleLabel label, double speed_mps, std::uint64_t seed,
                                  const VehicleGeometry& geometry, const SynthesisOptions& options) {
    if (!(speed_mps > 0.0)) throw Error("synthesize_trace: speed must be positive");
    if (!(geometry.length_m > 0.0)) throw Error("synthesize_trace: length must be positive");
    Rng rng(seed, "fingerprint");
    FingerprintTrace tr;
    tr.label = label;
    tr.speed_mps = speed_mps;
    tr.geometry = geometry;
    tr.seed = seed;
    tr.sample_rate_hz = options.sample_rate_hz;
    tr.dip_start_s = rng.uniform(2.0, 3.0);
    tr.dip_duration_s = geometry.length_m / speed_mps;
    const double dt = 1.0 / options.sample_rate_hz;
    const auto n = static_cast<std::size_t>(std::llround(options.duration_s * options.sample_rate_hz));
    const double a = tr.dip_start_s, b = tr.dip_start_s + tr.dip_duration_s;
    for (int l = 0; l < kLinks; ++l) {
        const double depth = link_depth_db(geometry.height_m, l);
        auto& s = tr.rssi_dbm[l];
        s.resize(n);
        for (std::size_t k = 0; k < n; ++k) {
            // Each sample integrates over its interval, which smooths the edges.
            const double t = static_cast<double>(k) * dt;
            const double overlap = std::max(0.0, std::min(b, t + dt / 2) - std::max(a, t - dt / 2));
            s[k] = baseline_dbm(l) - depth * overlap / dt;
        }
    }
    if (options.noise_sigma_db > 0.0)
        for (auto& s : tr.rssi_dbm)
            for (auto& v : s) v += rng.normal(0.0, options.noise_sigma_db);
    return tr;
}

std::vector<std::string> feature_names() {
    std::vector<std::string> out;
    for (int l = 1; l <= kLinks; ++l)
        for (const char* f : {"depth", "mean", "width", "area"})
            out.push_back("link" + std::to_string(l) + "_" + f);
    return out;
}

FeatureRecord extract_features(const FingerprintTrace& trace, double threshold_db) {
    trace.validate();
    const std::size_t n = trace.samples();
    const std::size_t window = n / 10;
    if (window == 0) throw Error("extract_features: trace shorter than the baseline window");
    const double dt = 1.0 / trace.sample_rate_hz;
    FeatureRecord f;
    f.label = trace.label;
    for (int l = 0; l < kLinks; ++l) {
        const auto& s = trace.rssi_dbm[l];
        double base = 0.0;
        for (std::size_t k = 0; k < window; ++k) base += s[k];
        base /= static_cast<double>(window);
        double depth = 0.0, sum = 0.0, width = 0.0, area = 0.0;
        for (double v : s) {
            const double att = base - v;
            depth = std::max(depth, att);
            sum += att;
            if (att >= threshold_db) {
                width += dt;
                area += att * dt;
            }
        }
        f.values[l * kFeaturesPerLink + 0] = depth;
        f.values[l * kFeaturesPerLink + 1] = sum / static_cast<double>(n);
        f.values[l * kFeaturesPerLink + 2] = width;
        f.values[l * kFeaturesPerLink + 3] = area;
    }
    return f;
}

std::string to_string(Regularization r) { return r == Regularization::l1 ? "l1" : "l2"; }

Regularization parse_regularization(const std::string& s) {
    if (s == "l1" || s == "L1") return Regularization::l1;
    if (s == "l2" || s == "L2") return Regularization::l2;
    throw Error("unknown regularization '" + s + "'");
}

namespace {

double label_sign(VehicleLabel l) { return l == VehicleLabel::truck_like ? 1.0 : -1.0; }

std::array<double, kFeatures> normalized(const LinearModel& m, const FeatureRecord& f) {
    std::array<double, kFeatures> z{};
    for (int j = 0; j < kFeatures; ++j) z[j] = (f.values[j] - m.feature_mean[j]) / m.feature_scale[j];
    return z;
}

double dot(const std::array<double, kFeatures>& w, const std::array<double, kFeatures>& z) {
    double s = 0.0;
    for (int j = 0; j < kFeatures; ++j) s += w[j] * z[j];
    return s;
}

}  // namespace

double LinearModel::score(const FeatureRecord& f) const {
    return dot(weights, normalized(*this, f)) + bias;
}

VehicleLabel LinearModel::predict(const FeatureRecord& f) const {
    return score(f) > 0.0 ? VehicleLabel::truck_like : VehicleLabel::car_like;
}

json LinearModel::to_json() const {
    return {{"regularization", to_string(reg)},
            {"lambda", lambda},
            {"weights", weights},
            {"bias", bias},
            {"feature_mean", feature_mean},
            {"feature_scale", feature_scale},
            {"feature_names", feature_names()},
            {"objective_per_epoch", objective_per_epoch}};
}

double svm_objective(const LinearModel& model, const std::vector<FeatureRecord>& data) {
    if (data.empty()) throw Error("svm_objective: empty dataset");
    double hinge = 0.0;
    for (const auto& f : data)
        hinge += std::max(0.0, 1.0 - label_sign(f.label) * model.score(f));
    hinge /= static_cast<double>(data.size());
    double penalty = 0.0;
    for (double w : model.weights)
        penalty += model.reg == Regularization::l1 ? std::fabs(w) : 0.5 * w * w;
    return hinge + model.lambda * penalty;
}

LinearModel train(const std::vector<FeatureRecord>& data, const TrainOptions& options) {
    if (data.empty()) throw Error("train: empty dataset");
    const bool has_car = std::any_of(data.begin(), data.end(),
                                     [](const auto& f) { return f.label == VehicleLabel::car_like; });
    const bool has_truck = std::any_of(data.begin(), data.end(),
                                       [](const auto& f) { return f.label == VehicleLabel::truck_like; });
    if (!has_car || !has_truck) throw Error("train: dataset holds a single class");
    if (!(options.lambda >= 0.0)) throw Error("train: lambda must be >= 0");

    LinearModel m;
    m.reg = options.reg;
    m.lambda = options.lambda;
    const double n = static_cast<double>(data.size());
    for (int j = 0; j < kFeatures; ++j) {
        double mean = 0.0;
        for (const auto& f : data) mean += f.values[j];
        mean /= n;
        double var = 0.0;
        for (const auto& f : data) var += (f.values[j] - mean) * (f.values[j] - mean);
        const double sd = std::sqrt(var / n);
        m.feature_mean[j] = mean;
        m.feature_scale[j] = sd > 1e-12 ? sd : 1.0;
    }
    std::vector<std::array<double, kFeatures>> z;
    z.reserve(data.size());
    for (const auto& f : data) z.push_back(normalized(m, f));

    Rng rng(options.seed, "svm");
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    std::size_t t = 0;
    for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
        rng.shuffle(order.begin(), order.end());
        double shrink = 0.0;
        for (std::size_t i : order) {
            ++t;
            const double eta = options.step / std::sqrt(static_cast<double>(t));
            const double y = label_sign(data[i].label);
            const double margin = y * (dot(m.weights, z[i]) + m.bias);
            if (options.reg == Regularization::l2) {
                const double decay = std::max(0.0, 1.0 - eta * options.lambda);
                for (auto& w : m.weights) w *= decay;
            } else {
                shrink += eta * options.lambda;
            }
            if (margin < 1.0) {
                for (int j = 0; j < kFeatures; ++j) m.weights[j] += eta * y * z[i][j];
                m.bias += eta * y;
            }
        }
        if (options.reg == Regularization::l1)
            for (auto& w : m.weights) w = std::copysign(std::max(0.0, std::fabs(w) - shrink), w);
        m.objective_per_epoch.push_back(svm_objective(m, data));
    }
    return m;
}

double Confusion::accuracy() const {
    return total() ? static_cast<double>(cc + tt) / static_cast<double>(total()) : 0.0;
}
double Confusion::car_recall() const {
    return cc + ct ? static_cast<double>(cc) / static_cast<double>(cc + ct) : 0.0;
}
double Confusion::truck_recall() const {
    return tc + tt ? static_cast<double>(tt) / static_cast<double>(tc + tt) : 0.0;
}

json Confusion::to_json() const {
    return {{"cc", cc}, {"ct", ct}, {"tc", tc}, {"tt", tt}, {"accuracy", accuracy()},
            {"layout", "rows true C/T, columns predicted C/T"}};
}

Confusion evaluate(const LinearModel& model, const std::vector<FeatureRecord>& data) {
    if (data.empty()) throw Error("evaluate: empty dataset");
    Confusion c;
    for (const auto& f : data) {
        const bool truck = f.label == VehicleLabel::truck_like;
        const bool said_truck = model.predict(f) == VehicleLabel::truck_like;
        (truck ? (said_truck ? c.tt : c.tc) : (said_truck ? c.ct : c.cc))++;
    }
    return c;
}

ClassShares class_shares(const LinearModel& model, const std::vector<FeatureRecord>& stream) {
    ClassShares s;
    if (stream.empty()) return s;
    for (const auto& f : stream) (model.predict(f) == VehicleLabel::truck_like ? s.truck : s.car) += 1.0;
    s.car /= static_cast<double>(stream.size());
    s.truck /= static_cast<double>(stream.size());
    return s;
}

std::vector<ClassShares> rolling_class_shares(const LinearModel& model,
                                              const std::vector<FeatureRecord>& stream,
                                              std::size_t window) {
    if (window == 0) throw Error("rolling_class_shares: window must be positive");
    std::vector<ClassShares> out;
    for (std::size_t i = 0; i + window <= stream.size(); i += window)
        out.push_back(class_shares(
            model, std::vector<FeatureRecord>(stream.begin() + static_cast<std::ptrdiff_t>(i),
                                              stream.begin() + static_cast<std::ptrdiff_t>(i + window))));
    return out;
}

std::vector<FingerprintTrace> generate_corpus(const CorpusOptions& options) {
    Rng rng(options.seed, "corpus");
    const auto trucks = static_cast<std::size_t>(
        std::llround(options.truck_share * static_cast<double>(options.traces)));
    std::vector<VehicleLabel> labels(options.traces, VehicleLabel::car_like);
    std::fill(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(std::min(trucks, labels.size())),
              VehicleLabel::truck_like);
    rng.shuffle(labels.begin(), labels.end());

    SynthesisOptions synth;
    synth.noise_sigma_db = options.noise_sigma_db;
    std::vector<FingerprintTrace> out;
    out.reserve(options.traces);
    for (std::size_t i = 0; i < options.traces; ++i) {
        VehicleGeometry g;
        if (labels[i] == VehicleLabel::car_like) {
            // Mostly passenger cars, some vans reaching truck heights.
            const bool van = rng.uniform() < 0.15;
            g.length_m = van ? rng.uniform(4.8, 6.5) : rng.uniform(3.6, 5.2);
            g.height_m = van ? rng.uniform(1.9, 2.7) : rng.uniform(1.35, 1.9);
        } else {
            // Mostly heavy trucks and buses, some light trucks.
            const bool light = rng.uniform() < 0.2;
            g.length_m = light ? rng.uniform(6.0, 9.0) : rng.uniform(9.0, 18.75);
            g.height_m = light ? rng.uniform(2.4, 3.0) : rng.uniform(3.0, 4.0);
        }
        const double speed = rng.uniform(options.min_speed_mps, options.max_speed_mps);
        out.push_back(synthesize_trace(labels[i], speed, derive_seed(options.seed, "corpus.trace", i), g,
                                       synth));
    }
    return out;
}

CorpusSplit split_corpus(const std::vector<FeatureRecord>& records, double train_fraction,
                         std::uint64_t seed) {
    if (!(train_fraction > 0.0 && train_fraction < 1.0))
        throw Error("split_corpus: train fraction must be in (0, 1)");
    std::vector<std::size_t> order(records.size());
    std::iota(order.begin(), order.end(), 0);
    Rng(seed, "split").shuffle(order.begin(), order.end());
    const auto n_train = static_cast<std::size_t>(
        std::llround(train_fraction * static_cast<double>(records.size())));
    CorpusSplit s;
    for (std::size_t i = 0; i < order.size(); ++i)
        (i < n_train ? s.train : s.test).push_back(records[order[i]]);
    return s;
}

std::string trace_csv(const FingerprintTrace& trace) {
    std::ostringstream out;
    out << std::setprecision(17);
    out << "t";
    for (int l = 1; l <= kLinks; ++l) out << ",rssi_" << l;
    out << '\n';
    for (std::size_t k = 0; k < trace.samples(); ++k) {
        out << static_cast<double>(k) / trace.sample_rate_hz;
        for (int l = 0; l < kLinks; ++l) out << ',' << trace.rssi_dbm[l][k];
        out << '\n';
    }
    return out.str();
}

FingerprintTrace trace_from_csv(const std::string& text, VehicleLabel label, double speed_mps) {
    std::istringstream in(text);
    std::string line;
    std::getline(in, line);
    if (line.rfind("t,rssi_1", 0) != 0) throw Error("trace CSV: unexpected header");
    FingerprintTrace tr;
    tr.label = label;
    tr.speed_mps = speed_mps;
    std::vector<double> times;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream row(line);
        std::string cell;
        std::vector<double> v;
        while (std::getline(row, cell, ',')) v.push_back(std::stod(cell));
        if (v.size() != kLinks + 1) throw Error("trace CSV: expected 10 columns");
        times.push_back(v[0]);
        for (int l = 0; l < kLinks; ++l) tr.rssi_dbm[l].push_back(v[l + 1]);
    }
    if (times.size() >= 2) tr.sample_rate_hz = 1.0 / (times[1] - times[0]);
    tr.validate();
    return tr;
}

void write_corpus(const std::vector<FingerprintTrace>& corpus, const std::string& dir) {
    fs::create_directories(dir);
    json manifest = {{"version", 1}, {"traces", json::array()}};
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        std::ostringstream name;
        name << "trace_" << std::setw(5) << std::setfill('0') << i << ".csv";
        std::ofstream(fs::path(dir) / name.str()) << trace_csv(corpus[i]);
        manifest["traces"].push_back({{"file", name.str()},
                                      {"label", to_string(corpus[i].label)},
                                      {"speed_mps", corpus[i].speed_mps},
                                      {"seed", corpus[i].seed},
                                      {"length_m", corpus[i].geometry.length_m},
                                      {"height_m", corpus[i].geometry.height_m}});
    }
    std::ofstream(fs::path(dir) / "manifest.json") << manifest.dump(2) << '\n';
}

std::vector<FingerprintTrace> read_corpus(const std::string& dir) {
    std::ifstream in(fs::path(dir) / "manifest.json");
    if (!in) throw Error("corpus: missing manifest.json in '" + dir + "'");
    const json manifest = json::parse(in);
    std::vector<FingerprintTrace> out;
    for (const auto& e : manifest.at("traces")) {
        const auto file = fs::path(dir) / e.at("file").get<std::string>();
        std::ifstream f(file);
        if (!f) throw Error("corpus: cannot read '" + file.string() + "'");
        std::stringstream text;
        text << f.rdbuf();
        auto tr = trace_from_csv(text.str(), parse_label(e.at("label").get<std::string>()),
                                 e.at("speed_mps").get<double>());
        tr.seed = e.value("seed", std::uint64_t{0});
        tr.geometry = {e.value("length_m", 0.0), e.value("height_m", 0.0)};
        out.push_back(std::move(tr));
    }
    return out;
}

}  // namespace hybridflow
