#include "hybridflow/harness.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <future>
#include <iomanip>
#include <map>
#include <sstream>

#include "hybridflow/json_util.hpp"
#include "hybridflow/rng.hpp"
#include "hybridflow/scenarios.hpp"

namespace hybridflow {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json read_json(const fs::path& path, const std::string& what) {
    std::ifstream in(path);
    if (!in) throw Error(what + ": cannot open '" + path.string() + "'");
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw Error(what + ": '" + path.string() + "' is not valid JSON: " + e.what());
    }
}

std::string read_text(const fs::path& path, const std::string& what) {
    std::ifstream in(path);
    if (!in) throw Error(what + ": cannot open '" + path.string() + "'");
    std::stringstream s;
    s << in.rdbuf();
    return s.str();
}

fs::path resolve(const std::string& base_dir, const std::string& ref) {
    const fs::path p(ref);
    return p.is_absolute() || base_dir.empty() ? p : fs::path(base_dir) / p;
}

std::shared_ptr<const RoadNetwork> network_at(const fs::path& path) {
    return std::make_shared<RoadNetwork>(build_network(read_json(path, "network")));
}

bool enabled(const json& j, const char* key) {
    return j.contains(key) && !j.at(key).is_null() && j.at(key).value("enabled", true);
}

}  // namespace

RoutingScenario parse_routing_scenario(const json& j, const std::string& base_dir) {
    reject_unknown(j,
                   {"network_ref", "classes", "origin", "dest", "demand_veh_h", "routes", "fixed_splits",
                    "duration_s", "lambda", "probe_demand_veh_h", "probe_duration_s", "density_crit",
                    "sustain_s", "description"},
                   "routing scenario");
    RoutingScenario s;
    try {
        s.net = network_at(resolve(base_dir, j.at("network_ref").get<std::string>()));
        if (j.contains("classes"))
            for (const auto& c : j.at("classes")) s.classes.push_back(parse_class(c));
        else
            s.classes.push_back(default_car());
        s.origin = j.at("origin").get<std::string>();
        s.dest = j.at("dest").get<std::string>();
        s.demand_veh_h = j.at("demand_veh_h").get<double>();
        s.routes = j.at("routes").get<std::vector<std::vector<std::string>>>();
        s.fixed_splits = j.value("fixed_splits", s.fixed_splits);
        s.duration_s = j.value("duration_s", s.duration_s);
        s.lambda = j.value("lambda", s.lambda);
        s.probe_demand_veh_h = j.value("probe_demand_veh_h", s.probe_demand_veh_h);
        s.probe_duration_s = j.value("probe_duration_s", s.probe_duration_s);
        s.density_crit = j.value("density_crit", s.density_crit);
        s.sustain_s = j.value("sustain_s", s.sustain_s);
    } catch (const json::exception& e) {
        throw Error(std::string("routing scenario: ") + e.what());
    }
    if (s.routes.empty()) throw Error("routing scenario: no routes");
    for (const auto& r : s.routes) s.net->make_route(r);  // validates edge ids and connectivity
    if (!(s.demand_veh_h >= 0.0)) throw Error("routing scenario: negative demand_veh_h");
    if (!s.fixed_splits.empty() && s.fixed_splits.size() != s.routes.size())
        throw Error("routing scenario: fixed_splits must match routes");
    return s;
}

RoutingScenario load_routing_scenario(const std::string& path) {
    return parse_routing_scenario(read_json(path, "routing scenario"), fs::path(path).parent_path().string());
}

ExperimentConfig parse_experiment(const json& j, const std::string& base_dir) {
    reject_unknown(j, {"version", "name", "seed", "output_dir", "traffic", "impute", "routing", "transfer",
                       "fingerprint", "description"},
                   "experiment");
    if (j.value("version", 1) != 1) throw Error("experiment: unsupported version");
    ExperimentConfig c;
    c.echo = j;
    c.name = j.value("name", std::string("experiment"));
    c.seed = j.value("seed", c.seed);
    c.output_dir = j.value("output_dir", std::string{});
    try {
        if (enabled(j, "traffic")) {
            const auto& t = j.at("traffic");
            reject_unknown(t, {"enabled", "scenario"}, "traffic stage");
            const auto path = resolve(base_dir, t.at("scenario").get<std::string>());
            TrafficStage s;
            s.scenario = parse_scenario(read_json(path, "traffic scenario"));
            if (s.scenario.network_ref.empty()) throw Error("traffic scenario: missing network_ref");
            s.net = network_at(resolve(path.parent_path().string(), s.scenario.network_ref));
            c.traffic = std::move(s);
        }
        if (enabled(j, "impute")) {
            const auto& t = j.at("impute");
            reject_unknown(t,
                           {"enabled", "network", "observations", "targets", "length_scale_m",
                            "signal_variance", "noise_variance", "distance", "knn_k", "tau_days",
                            "target_day"},
                           "impute stage");
            ImputeStage s;
            s.net = network_at(resolve(base_dir, t.at("network").get<std::string>()));
            s.observations = observations_from_csv(
                read_text(resolve(base_dir, t.at("observations").get<std::string>()), "observations"));
            if (s.observations.empty()) throw Error("impute stage: no observations");
            for (const auto& tg : t.at("targets")) {
                reject_unknown(tg, {"edge", "offset_m"}, "impute target");
                s.targets.push_back({tg.at("edge").get<std::string>(), tg.at("offset_m").get<double>()});
            }
            NetworkDistance check(s.net);
            for (const auto& o : s.observations) check(o.location, o.location);
            for (const auto& p : s.targets) check(p, p);
            s.kernel = default_kernel(s.observations);
            s.kernel.length_scale_m = t.value("length_scale_m", s.kernel.length_scale_m);
            s.kernel.signal_variance = t.value("signal_variance", s.kernel.signal_variance);
            s.kernel.noise_variance = t.value("noise_variance", s.kernel.noise_variance);
            const auto dist = t.value("distance", std::string("network"));
            if (dist == "euclidean") s.kernel.distance = DistanceKind::euclidean;
            else if (dist != "network") throw Error("impute stage: distance must be network or euclidean");
            s.knn_k = t.value("knn_k", s.knn_k);
            if (s.knn_k == 0 || s.knn_k > s.observations.size())
                throw Error("impute stage: knn_k must be in [1, observation count]");
            if (t.contains("tau_days"))
                s.temporal = TemporalWeighting{t.at("tau_days").get<double>(), t.value("target_day", 0)};
            c.impute = std::move(s);
        }
        if (enabled(j, "routing")) {
            const auto& t = j.at("routing");
            reject_unknown(t, {"enabled", "scenario", "sources"}, "routing stage");
            RoutingStage s;
            s.scenario = load_routing_scenario(resolve(base_dir, t.at("scenario").get<std::string>()).string());
            for (const auto& name : t.value("sources", std::vector<std::string>{"fixed", "bmp"}))
                s.sources.push_back(parse_split_source(name));
            if (s.sources.empty()) throw Error("routing stage: no sources");
            c.routing = std::move(s);
        }
        if (enabled(j, "transfer")) {
            const auto& t = j.at("transfer");
            reject_unknown(t, {"enabled", "scenario", "policies"}, "transfer stage");
            TransferStage s;
            s.scenario = t.value("scenario", s.scenario);
            if (s.scenario != "two_phase")
                throw Error("transfer stage: unknown drive scenario '" + s.scenario + "'");
            for (const auto& p : t.at("policies")) s.policies.push_back(policy_from_json(p));
            if (s.policies.empty()) throw Error("transfer stage: no policies");
            c.transfer = std::move(s);
        }
        if (enabled(j, "fingerprint")) {
            const auto& t = j.at("fingerprint");
            reject_unknown(t,
                           {"enabled", "traces", "truck_share", "noise_sigma_db", "corpus_seed",
                            "regularization", "lambda", "epochs", "step", "train_fraction",
                            "class_share_window"},
                           "fingerprint stage");
            FingerprintStage s;
            s.corpus.traces = t.value("traces", s.corpus.traces);
            s.corpus.truck_share = t.value("truck_share", s.corpus.truck_share);
            s.corpus.noise_sigma_db = t.value("noise_sigma_db", s.corpus.noise_sigma_db);
            if (t.contains("corpus_seed")) {
                s.corpus.seed = t.at("corpus_seed").get<std::uint64_t>();
                s.corpus_seed_given = true;
            }
            if (t.contains("regularization")) {
                s.regularizations.clear();
                for (const auto& r : t.at("regularization")) s.regularizations.push_back(parse_regularization(r));
            }
            s.train.lambda = t.value("lambda", s.train.lambda);
            s.train.epochs = t.value("epochs", s.train.epochs);
            s.train.step = t.value("step", s.train.step);
            s.train_fraction = t.value("train_fraction", s.train_fraction);
            s.class_share_window = t.value("class_share_window", s.class_share_window);
            if (s.corpus.traces < 10) throw Error("fingerprint stage: need at least 10 traces");
            if (s.class_share_window == 0) throw Error("fingerprint stage: class_share_window must be positive");
            c.fingerprint = std::move(s);
        }
    } catch (const json::exception& e) {
        throw Error(std::string("experiment: ") + e.what());
    }
    return c;
}

ExperimentConfig load_experiment(const std::string& path) {
    return parse_experiment(read_json(path, "experiment"), fs::path(path).parent_path().string());
}

namespace {

using Artifacts = std::vector<std::pair<std::string, std::string>>;

json run_traffic(const TrafficStage& st, std::uint64_t seed, Artifacts& out) {
    auto cfg = st.scenario;
    cfg.seed = derive_seed(seed, "traffic");
    auto sim = init_scenario(st.net, cfg);
    const auto m = sim.run(cfg.duration_s);
    json r = m.summary_json();
    r["seed"] = cfg.seed;
    for (const auto& [det, obs] : m.observations) {
        out.push_back({"traffic_" + det + ".csv", observations_csv(obs, sim.classes())});
    }
    return r;
}

json run_impute(const ImputeStage& st, Artifacts& out) {
    const auto model = fit_gpr(st.net, st.observations, st.kernel);
    const auto pred = model.predict(st.targets);
    NetworkDistance dist(st.net);
    json rows = json::array();
    for (std::size_t i = 0; i < st.targets.size(); ++i)
        rows.push_back({{"edge", st.targets[i].edge},
                        {"offset_m", st.targets[i].offset_m},
                        {"gpr_mean", pred[i].mean},
                        {"gpr_variance", pred[i].variance},
                        {"knn", knn_estimate(dist, st.observations, st.targets[i], st.knn_k, st.temporal)}});
    out.push_back({"imputation.csv", predictions_csv(st.targets, pred)});
    return {{"observations", st.observations.size()},
            {"kernel",
             {{"signal_variance", st.kernel.signal_variance},
              {"length_scale_m", st.kernel.length_scale_m},
              {"noise_variance", st.kernel.noise_variance},
              {"distance", st.kernel.distance == DistanceKind::network ? "network" : "euclidean"}}},
            {"kernel_distance_used", model.params().distance == DistanceKind::network ? "network" : "euclidean"},
            {"kernel_distance_fallback", model.distance_fallback()},
            {"knn_k", st.knn_k},
            {"predictions", rows}};
}

json run_routing(const RoutingStage& st, std::uint64_t seed, Artifacts& out) {
    const auto s = derive_seed(seed, "routing");
    const auto cal = calibrate(st.scenario, s);
    out.push_back({"routing_calibration.json", cal.to_json().dump(2) + "\n"});
    json evals = json::object(), dwell = json::object();
    std::map<std::string, double> dwell_by;
    for (auto src : st.sources) {
        const auto ev = evaluate_policy(st.scenario, src, s, &cal);
        const auto name = to_string(src);
        evals[name] = ev.to_json();
        if (ev.assignment)
            out.push_back({"assignment_" + name + ".json",
                           ev.assignment->to_json(routing_problem(st.scenario, cal)).dump(2) + "\n"});
        if (ev.mean_dwell_s) {
            dwell[name] = *ev.mean_dwell_s;
            dwell_by[name] = *ev.mean_dwell_s;
        } else {
            dwell[name] = nullptr;
        }
    }
    json r = {{"calibration", cal.to_json()}, {"evaluations", evals}, {"mean_dwell_s", dwell}};
    if (dwell_by.count("fixed") && dwell_by["fixed"] > 0.0) {
        json ratio = json::object();
        for (const auto& [name, d] : dwell_by) ratio[name] = d / dwell_by["fixed"];
        r["dwell_ratio_to_fixed"] = ratio;
    }
    return r;
}

std::string policy_label(const TransferPolicy& p, std::map<std::string, int>& seen) {
    const auto base = to_string(p.kind);
    const int n = seen[base]++;
    return n == 0 ? base : base + "_" + std::to_string(n + 1);
}

DriveResult drive(const DriveScenario& sc, const TransferPolicy& policy, std::uint64_t seed) {
    DriveOptions o;
    o.map = &sc.map;
    return simulate_drive(sc.trace, sc.env, policy, o, derive_seed(seed, "transfer"));
}

json run_transfer(const TransferStage& st, std::uint64_t seed, Artifacts& out) {
    const auto sc = two_phase_drive();
    json r = json::object();
    std::map<std::string, int> seen;
    for (const auto& p : st.policies) {
        const auto label = policy_label(p, seen);
        const auto res = drive(sc, p, seed);
        r[label] = {{"policy", p.to_json()}, {"metrics", res.metrics.to_json()}};
        out.push_back({"transfer_" + label + ".csv", transfer_log_csv(res.log)});
    }
    return {{"scenario", st.scenario}, {"policies", r}};
}

json run_fingerprint(const FingerprintStage& st, std::uint64_t seed, Artifacts& out) {
    auto corpus_opts = st.corpus;
    if (!st.corpus_seed_given) corpus_opts.seed = derive_seed(seed, "corpus");
    std::vector<FeatureRecord> records;
    for (const auto& t : generate_corpus(corpus_opts)) records.push_back(extract_features(t));
    const auto split = split_corpus(records, st.train_fraction, derive_seed(seed, "corpus.split"));
    json models = json::object();
    for (auto reg : st.regularizations) {
        auto opts = st.train;
        opts.reg = reg;
        opts.seed = derive_seed(seed, "corpus.svm");
        const auto model = train(split.train, opts);
        const auto conf = evaluate(model, split.test);
        json shares = json::array();
        for (const auto& s : rolling_class_shares(model, split.test, st.class_share_window))
            shares.push_back({{"car", s.car}, {"truck", s.truck}});
        const auto name = to_string(reg);
        models[name] = {{"confusion", conf.to_json()},
                        {"train_accuracy", evaluate(model, split.train).accuracy()},
                        {"final_objective", model.objective_per_epoch.back()},
                        {"class_shares", shares}};
        out.push_back({"model_" + name + ".json", model.to_json().dump(2) + "\n"});
    }
    return {{"corpus", {{"traces", corpus_opts.traces},
                        {"truck_share", corpus_opts.truck_share},
                        {"noise_sigma_db", corpus_opts.noise_sigma_db},
                        {"seed", corpus_opts.seed}}},
            {"train", split.train.size()},
            {"test", split.test.size()},
            {"models", models}};
}

void write_outputs(const ExperimentReport& rep, const std::string& out_dir) {
    if (out_dir.empty()) return;
    fs::create_directories(out_dir);
    for (const auto& [name, content] : rep.artifacts) std::ofstream(fs::path(out_dir) / name) << content;
    std::ofstream(fs::path(out_dir) / "report.json") << rep.serialized();
}

}  // namespace

ExperimentReport run_experiment(const ExperimentConfig& config, std::uint64_t seed, const std::string& out_dir) {
    ExperimentReport rep;
    rep.doc = {{"toolkit_version", kToolkitVersion},
               {"name", config.name},
               {"seed", seed},
               {"config", config.echo},
               {"stages", json::object()},
               {"status", "ok"}};
    auto stage = [&](const char* name, auto&& body) {
        Artifacts produced;
        try {
            rep.doc["stages"][name] = body(produced);
        } catch (const std::exception& e) {
            rep.doc["status"] = "failed";
            rep.doc["error"] = {{"stage", name}, {"message", e.what()}};
            rep.doc["artifacts"] = json::array();
            for (const auto& a : rep.artifacts) rep.doc["artifacts"].push_back(a.first);
            write_outputs(rep, out_dir);
            throw StageError(name, e.what());
        }
        for (auto& a : produced) rep.artifacts.push_back(std::move(a));
    };
    if (config.traffic) stage("traffic", [&](Artifacts& a) { return run_traffic(*config.traffic, seed, a); });
    if (config.impute) stage("impute", [&](Artifacts& a) { return run_impute(*config.impute, a); });
    if (config.routing) stage("routing", [&](Artifacts& a) { return run_routing(*config.routing, seed, a); });
    if (config.transfer) stage("transfer", [&](Artifacts& a) { return run_transfer(*config.transfer, seed, a); });
    if (config.fingerprint)
        stage("fingerprint", [&](Artifacts& a) { return run_fingerprint(*config.fingerprint, seed, a); });
    rep.doc["artifacts"] = json::array();
    for (const auto& a : rep.artifacts) rep.doc["artifacts"].push_back(a.first);
    write_outputs(rep, out_dir);
    return rep;
}

Summary summarize(const std::vector<double>& values) {
    Summary s;
    s.n = values.size();
    if (values.empty()) return s;
    for (double v : values) s.mean += v;
    s.mean /= static_cast<double>(s.n);
    if (s.n > 1) {
        double ss = 0.0;
        for (double v : values) ss += (v - s.mean) * (v - s.mean);
        s.stddev = std::sqrt(ss / static_cast<double>(s.n - 1));
    }
    return s;
}

namespace {

json summary_json(const std::optional<Summary>& s) {
    if (!s) return nullptr;
    return {{"mean", s->mean}, {"stddev", s->stddev}, {"n", s->n}};
}

}  // namespace

json ComparisonTable::to_json() const {
    json rows_j = json::array();
    for (const auto& r : rows)
        rows_j.push_back({{"policy", r.policy},
                          {"goodput_mbps", summary_json(r.goodput_mbps)},
                          {"energy_j", summary_json(r.energy_j)},
                          {"dwell_s", summary_json(r.dwell_s)}});
    return {{"rows", rows_j}};
}

std::string ComparisonTable::to_csv() const {
    std::ostringstream out;
    out << std::setprecision(10);
    out << "policy,goodput_mean,goodput_sd,energy_mean,energy_sd,dwell_mean,dwell_sd\n";
    auto cell = [&](const std::optional<Summary>& s) {
        if (s) out << ',' << s->mean << ',' << s->stddev;
        else out << ",,";
    };
    for (const auto& r : rows) {
        out << r.policy;
        cell(r.goodput_mbps);
        cell(r.energy_j);
        cell(r.dwell_s);
        out << '\n';
    }
    return out.str();
}

ComparisonTable compare_policies(const ExperimentConfig& config, const std::vector<std::string>& policies,
                                 const std::vector<std::uint64_t>& seeds) {
    if (policies.size() < 2) throw Error("compare: need at least two policies");
    if (seeds.empty()) throw Error("compare: need at least one seed");
    struct Item {
        std::string name;
        std::optional<TransferPolicy> transfer;
        std::optional<SplitSource> split;
    };
    std::vector<Item> items;
    for (const auto& name : policies) {
        Item it{name, std::nullopt, std::nullopt};
        try {
            const auto kind = parse_policy_kind(name);
            it.transfer = default_policy(kind);
            // A policy configured in the transfer stage overrides the defaults.
            if (config.transfer)
                for (const auto& p : config.transfer->policies)
                    if (p.kind == kind) {
                        it.transfer = p;
                        break;
                    }
        } catch (const Error&) {
            it.split = parse_split_source(name);
            if (!config.routing) throw Error("compare: '" + name + "' needs a routing stage in the config");
        }
        items.push_back(std::move(it));
    }
    const bool any_split = std::any_of(items.begin(), items.end(), [](const Item& i) { return i.split.has_value(); });
    const bool any_transfer =
        std::any_of(items.begin(), items.end(), [](const Item& i) { return i.transfer.has_value(); });
    std::optional<DriveScenario> drive_sc;
    if (any_transfer) drive_sc = two_phase_drive();

    // results[seed][item] = (goodput, energy, dwell)
    using Cell = std::array<std::optional<double>, 3>;
    auto run_seed = [&](std::uint64_t seed) {
        std::vector<Cell> row(items.size());
        std::optional<Calibration> cal;
        const auto rs = derive_seed(seed, "routing");
        if (any_split) cal = calibrate(config.routing->scenario, rs);
        for (std::size_t i = 0; i < items.size(); ++i) {
            if (items[i].transfer) {
                const auto r = drive(*drive_sc, *items[i].transfer, seed);
                row[i][0] = r.metrics.mean_goodput_mbps;
                row[i][1] = r.metrics.total_energy_j;
            } else {
                const auto ev = evaluate_policy(config.routing->scenario, *items[i].split, rs, &*cal);
                row[i][2] = ev.mean_dwell_s;
            }
        }
        return row;
    };
    std::vector<std::future<std::vector<Cell>>> futures;
    for (auto s : seeds) futures.push_back(std::async(std::launch::async, run_seed, s));
    std::vector<std::vector<Cell>> results;
    for (auto& f : futures) results.push_back(f.get());

    ComparisonTable table;
    for (std::size_t i = 0; i < items.size(); ++i) {
        ComparisonRow row;
        row.policy = items[i].name;
        for (int m = 0; m < 3; ++m) {
            std::vector<double> v;
            for (const auto& r : results)
                if (r[i][m]) v.push_back(*r[i][m]);
            if (v.empty()) continue;
            (m == 0 ? row.goodput_mbps : m == 1 ? row.energy_j : row.dwell_s) = summarize(v);
        }
        table.rows.push_back(std::move(row));
    }
    return table;
}

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
    std::vector<std::uint64_t> out;
    try {
        const auto dots = text.find("..");
        if (dots != std::string::npos) {
            const auto lo = std::stoull(text.substr(0, dots));
            const auto hi = std::stoull(text.substr(dots + 2));
            if (hi < lo) throw Error("seed range '" + text + "' is empty");
            for (auto s = lo; s <= hi; ++s) out.push_back(s);
        } else {
            std::istringstream in(text);
            std::string part;
            while (std::getline(in, part, ',')) out.push_back(std::stoull(part));
        }
    } catch (const std::logic_error&) {
        throw Error("cannot parse seed list '" + text + "'");
    }
    if (out.empty()) throw Error("empty seed list");
    return out;
}

}  // namespace hybridflow
