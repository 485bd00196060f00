#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "hybridflow/fingerprint.hpp"

using namespace hybridflow;

namespace {

FingerprintTrace flat_trace(double level = -50.0, std::size_t n = 80) {
    FingerprintTrace tr;
    for (auto& s : tr.rssi_dbm) s.assign(n, level);
    return tr;
}

// Straight re-derivation of the features from their definitions.
std::array<double, kFeatures> oracle_features(const FingerprintTrace& tr, double thr) {
    std::array<double, kFeatures> out{};
    const std::size_t n = tr.samples();
    const std::size_t w = n / 10;
    const double dt = 1.0 / tr.sample_rate_hz;
    for (int l = 0; l < kLinks; ++l) {
        long double base = 0;
        for (std::size_t k = 0; k < w; ++k) base += tr.rssi_dbm[l][k];
        base /= w;
        std::vector<long double> att;
        for (double v : tr.rssi_dbm[l]) att.push_back(base - v);
        long double mx = 0, sum = 0, area = 0;
        std::size_t above = 0;
        for (auto a : att) {
            mx = std::max(mx, a);
            sum += a;
            if (a >= thr) { ++above; area += a; }
        }
        out[l * 4 + 0] = double(mx);
        out[l * 4 + 1] = double(sum / n);
        out[l * 4 + 2] = double(above) * dt;
        out[l * 4 + 3] = double(area * dt);
    }
    return out;
}

FeatureRecord point(double x, double y, VehicleLabel label) {
    FeatureRecord f;
    f.values[0] = x;
    f.values[1] = y;
    f.label = label;
    return f;
}

std::vector<FeatureRecord> features_of(const std::vector<FingerprintTrace>& traces) {
    std::vector<FeatureRecord> out;
    for (const auto& t : traces) out.push_back(extract_features(t));
    return out;
}

}  // namespace

TEST_CASE("link geometry: nine links, heights between mounts") {
    CHECK(link_height(0) == doctest::Approx(0.5));
    CHECK(link_height(2) == doctest::Approx(1.5));
    CHECK(link_height(8) == doctest::Approx(2.5));
    // Trucks block the upper links, cars barely touch them.
    CHECK(link_depth_db(3.8, 8) > 10.0);
    CHECK(link_depth_db(1.5, 8) < 2.0);
    CHECK(feature_names().size() == std::size_t(kFeatures));
}

TEST_CASE("synthesize_trace: dip duration and attenuation integral") {
    const auto tr = synthesize_trace(VehicleLabel::car_like, 20.0, 7, {4.5, 1.5}, {8.0, 10.0, 0.0});
    CHECK(tr.samples() == 80);
    CHECK(tr.dip_duration_s == doctest::Approx(0.225).epsilon(1e-12));
    // Clean trace: integrated attenuation per link equals depth x duration.
    const auto f = extract_features(tr);
    for (int l = 0; l < kLinks; ++l) {
        const double integral = f.mean(l) * 8.0;
        CHECK(integral / link_depth_db(1.5, l) == doctest::Approx(0.225).epsilon(1e-9));
    }
}

TEST_CASE("synthesize_trace: trucks dip deeper on the top links, deterministic") {
    const auto car = synthesize_trace(VehicleLabel::car_like, 15.0, 2.0, 11);
    const auto truck = synthesize_trace(VehicleLabel::truck_like, 15.0, 2.0, 11);
    for (int l : {5, 7, 8}) {
        const double car_min = *std::min_element(car.rssi_dbm[l].begin(), car.rssi_dbm[l].end());
        const double truck_min = *std::min_element(truck.rssi_dbm[l].begin(), truck.rssi_dbm[l].end());
        CHECK(truck_min < car_min);
    }
    const auto again = synthesize_trace(VehicleLabel::truck_like, 15.0, 2.0, 11);
    for (int l = 0; l < kLinks; ++l) CHECK(again.rssi_dbm[l] == truck.rssi_dbm[l]);
    CHECK_THROWS(synthesize_trace(VehicleLabel::car_like, 0.0, 2.0, 1));
}

TEST_CASE("extract_features: flat and rectangular dips") {
    const auto flat = extract_features(flat_trace());
    for (int l = 0; l < kLinks; ++l) {
        CHECK(flat.depth(l) == 0.0);
        CHECK(flat.width(l) == 0.0);
        CHECK(flat.area(l) == 0.0);
    }
    auto tr = flat_trace();
    for (auto& s : tr.rssi_dbm)
        for (std::size_t k = 30; k < 40; ++k) s[k] = -56.0;
    const auto f = extract_features(tr);
    for (int l = 0; l < kLinks; ++l) {
        CHECK(f.depth(l) == doctest::Approx(6.0).epsilon(1e-12));
        CHECK(f.width(l) == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(f.area(l) == doctest::Approx(6.0).epsilon(1e-12));
    }
}

TEST_CASE("extract_features: matches an independent implementation, offset invariant") {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        const auto label = seed % 2 ? VehicleLabel::car_like : VehicleLabel::truck_like;
        auto tr = synthesize_trace(label, 8.0 + seed, 2.0, seed);
        const auto f = extract_features(tr);
        const auto o = oracle_features(tr, 3.0);
        for (int j = 0; j < kFeatures; ++j) CHECK(f.values[j] == doctest::Approx(o[j]).epsilon(1e-9).scale(1));
        for (auto& s : tr.rssi_dbm)
            for (auto& v : s) v += 13.25;
        const auto g = extract_features(tr);
        for (int j = 0; j < kFeatures; ++j) CHECK(g.values[j] == doctest::Approx(f.values[j]).epsilon(1e-9).scale(1));
    }
}

TEST_CASE("train: separable toy set reaches 100 %") {
    std::vector<FeatureRecord> data;
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 4; ++j) {
            data.push_back(point(0.2 * i, 0.3 * j, VehicleLabel::car_like));
            data.push_back(point(3.0 + 0.2 * i, 2.5 + 0.3 * j, VehicleLabel::truck_like));
        }
    // Separability first: exhaustive search over line directions and offsets.
    bool separable = false;
    for (int a = 0; a < 360 && !separable; ++a) {
        const double th = a * M_PI / 180.0, c = std::cos(th), s = std::sin(th);
        double car_max = -1e9, truck_min = 1e9;
        for (const auto& f : data) {
            const double proj = c * f.values[0] + s * f.values[1];
            if (f.label == VehicleLabel::car_like) car_max = std::max(car_max, proj);
            else truck_min = std::min(truck_min, proj);
        }
        separable = truck_min > car_max;
    }
    REQUIRE(separable);
    for (auto reg : {Regularization::l1, Regularization::l2}) {
        TrainOptions o;
        o.reg = reg;
        const auto m = train(data, o);
        CHECK(evaluate(m, data).accuracy() == 1.0);
        CHECK(m.objective_per_epoch.back() <= m.objective_per_epoch.front());
    }
}

TEST_CASE("train: regularization limit, determinism, scale invariance") {
    CorpusOptions co;
    co.traces = 300;
    co.truck_share = 0.4;
    co.seed = 5;
    const auto data = features_of(generate_corpus(co));

    TrainOptions heavy;
    heavy.reg = Regularization::l1;
    heavy.lambda = 100.0;
    const auto zero = train(data, heavy);
    for (double w : zero.weights) CHECK(w == 0.0);
    const auto c = evaluate(zero, data);
    CHECK(std::max(c.car_recall(), c.truck_recall()) == 1.0);
    CHECK(c.accuracy() == doctest::Approx(std::max(0.6, 0.4)));

    TrainOptions o;
    const auto a = train(data, o);
    const auto b = train(data, o);
    CHECK(a.weights == b.weights);
    CHECK(a.bias == b.bias);
    CHECK(a.objective_per_epoch.back() <= a.objective_per_epoch.front());

    // Power-of-two scaling is exact, so z-scores and the model are unchanged.
    auto scaled = data;
    for (auto& f : scaled)
        for (auto& v : f.values) v *= 4.0;
    const auto s = train(scaled, o);
    CHECK(s.weights == a.weights);
    for (std::size_t i = 0; i < data.size(); ++i) CHECK(s.score(scaled[i]) == a.score(data[i]));

    CHECK_THROWS(train({}, o));
    CHECK_THROWS(train({point(0, 0, VehicleLabel::car_like)}, o));
}

TEST_CASE("evaluate: constant and perfect models") {
    LinearModel always_car;
    always_car.feature_scale.fill(1.0);
    always_car.bias = -1.0;
    std::vector<FeatureRecord> data;
    for (int i = 0; i < 60; ++i) data.push_back(point(-1, 0, VehicleLabel::car_like));
    for (int i = 0; i < 40; ++i) data.push_back(point(1, 0, VehicleLabel::truck_like));
    const auto c = evaluate(always_car, data);
    CHECK(c.accuracy() == doctest::Approx(0.6));
    CHECK(c.cc == 60);
    CHECK(c.tc == 40);

    LinearModel perfect = always_car;
    perfect.bias = 0.0;
    perfect.weights[0] = 1.0;
    const auto p = evaluate(perfect, data);
    CHECK(p.cc == 60);
    CHECK(p.tt == 40);
    CHECK(p.ct + p.tc == 0);
    CHECK(p.to_json().at("accuracy") == 1.0);
    CHECK_THROWS(evaluate(perfect, {}));
}

TEST_CASE("class shares: fixed and mixed streams") {
    LinearModel perfect;
    perfect.feature_scale.fill(1.0);
    perfect.weights[0] = 1.0;
    std::vector<FeatureRecord> cars(10, point(-1, 0, VehicleLabel::car_like));
    auto s = class_shares(perfect, cars);
    CHECK(s.car == 1.0);
    CHECK(s.truck == 0.0);
    std::vector<FeatureRecord> alt;
    for (int i = 0; i < 10; ++i)
        alt.push_back(i % 2 ? point(1, 0, VehicleLabel::truck_like) : point(-1, 0, VehicleLabel::car_like));
    s = class_shares(perfect, alt);
    CHECK(s.car == 0.5);
    CHECK(s.truck == 0.5);
    const auto rolling = rolling_class_shares(perfect, alt, 4);
    CHECK(rolling.size() == 2);
    CHECK(rolling[0].truck == 0.5);

    CorpusOptions co;
    co.traces = 600;
    co.seed = 9;
    const auto train_set = features_of(generate_corpus(co));
    const auto model = train(train_set, {});
    co.traces = 400;
    co.truck_share = 0.3;
    co.seed = 10;
    const auto stream = features_of(generate_corpus(co));
    s = class_shares(model, stream);
    CHECK(std::fabs(s.truck - 0.3) <= 0.05);
}

TEST_CASE("corpus: mix, split and file round trip") {
    CorpusOptions co;
    co.traces = 40;
    co.seed = 3;
    const auto corpus = generate_corpus(co);
    CHECK(std::count_if(corpus.begin(), corpus.end(),
                        [](const auto& t) { return t.label == VehicleLabel::truck_like; }) == 20);
    for (const auto& t : corpus) {
        CHECK(t.speed_mps >= 8.0);
        CHECK(t.speed_mps <= 36.0);
    }
    const auto split = split_corpus(features_of(corpus), 0.8, 1);
    CHECK(split.train.size() == 32);
    CHECK(split.test.size() == 8);

    const auto dir = std::filesystem::temp_directory_path() / "hybridflow_corpus_test";
    std::filesystem::remove_all(dir);
    write_corpus(corpus, dir.string());
    const auto back = read_corpus(dir.string());
    REQUIRE(back.size() == corpus.size());
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        CHECK(back[i].label == corpus[i].label);
        CHECK(back[i].speed_mps == corpus[i].speed_mps);
        for (int l = 0; l < kLinks; ++l) CHECK(back[i].rssi_dbm[l] == corpus[i].rssi_dbm[l]);
    }
    std::filesystem::remove_all(dir);
    CHECK_THROWS(read_corpus(dir.string()));
    CHECK_THROWS(trace_from_csv("x,y\n1,2\n", VehicleLabel::car_like, 10.0));
}
