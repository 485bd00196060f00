#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "hybridflow/harness.hpp"

using namespace hybridflow;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const std::string kScenarios = std::string(HYBRIDFLOW_SOURCE_DIR) + "/scenarios";

fs::path scratch(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("hybridflow_harness_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string read(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream s;
    s << in.rdbuf();
    return s.str();
}

}  // namespace

TEST_CASE("summaries and seed lists") {
    const auto s = summarize({1, 2, 3, 4});
    CHECK(s.mean == 2.5);
    CHECK(s.stddev == doctest::Approx(std::sqrt(5.0 / 3.0)));
    CHECK(summarize({7}).stddev == 0.0);
    CHECK(parse_seed_list("1..4") == std::vector<std::uint64_t>{1, 2, 3, 4});
    CHECK(parse_seed_list("3,9") == std::vector<std::uint64_t>{3, 9});
    CHECK_THROWS(parse_seed_list("5..2"));
    CHECK_THROWS(parse_seed_list("x"));
}

TEST_CASE("routing scenario files load and validate") {
    const auto sc = load_routing_scenario(kScenarios + "/two_route/congested.json");
    CHECK(sc.routes.size() == 2);
    CHECK(sc.demand_veh_h == 1500.0);
    CHECK(sc.classes.size() == 1);
    const auto low = load_routing_scenario(kScenarios + "/two_route/low_demand.json");
    CHECK(low.lambda == 40.0);

    json j = {{"network_ref", "network.json"}, {"origin", "O"}, {"dest", "D"}, {"demand_veh_h", 100},
              {"routes", {{"in", "l_narrow"}}}};
    CHECK_THROWS(parse_routing_scenario(j, kScenarios + "/two_route"));  // edges do not connect
    j["routes"] = {{"in", "s_drop", "s_narrow"}};
    j["bogus"] = 1;
    CHECK_THROWS(parse_routing_scenario(j, kScenarios + "/two_route"));
}

TEST_CASE("experiment config validation happens before any stage") {
    CHECK_THROWS(parse_experiment({{"version", 1}, {"stagez", {}}}, "."));
    CHECK_THROWS(parse_experiment({{"routing", {{"scenario", "missing.json"}}}}, kScenarios));
    CHECK_THROWS(parse_experiment({{"transfer", {{"scenario", "highway"}, {"policies", {"cat"}}}}}, "."));
    CHECK_THROWS(parse_experiment({{"fingerprint", {{"regularization", {"l3"}}}}}, "."));
    const auto off = parse_experiment({{"routing", {{"enabled", false}, {"scenario", "missing.json"}}}}, ".");
    CHECK_FALSE(off.routing.has_value());
}

TEST_CASE("all stages disabled: config echo only") {
    const json j = {{"version", 1}, {"name", "empty"}, {"seed", 3}};
    const auto config = parse_experiment(j, ".");
    const auto rep = run_experiment(config, 3);
    CHECK(rep.doc.at("config") == j);
    CHECK(rep.doc.at("stages").empty());
    CHECK(rep.doc.at("artifacts").empty());
    CHECK(rep.doc.at("status") == "ok");
    CHECK(rep.artifacts.empty());
}

TEST_CASE("demo experiment: deterministic report, dwell ratio from logged values") {
    const auto config = load_experiment(kScenarios + "/demo/experiment.json");
    const auto dir = scratch("demo");
    const auto a = run_experiment(config, config.seed, dir.string());
    const auto b = run_experiment(config, config.seed);
    CHECK(a.serialized() == b.serialized());
    CHECK(read(dir / "report.json") == a.serialized());
    for (const auto& name : a.doc.at("artifacts")) CHECK(fs::exists(dir / name.get<std::string>()));

    const auto& routing = a.doc.at("stages").at("routing");
    const double fixed = routing.at("mean_dwell_s").at("fixed").get<double>();
    const double bmp = routing.at("mean_dwell_s").at("bmp").get<double>();
    CHECK(routing.at("dwell_ratio_to_fixed").at("bmp").get<double>() == doctest::Approx(bmp / fixed));
    CHECK(routing.at("evaluations").at("fixed").at("mean_dwell_s").get<double>() == fixed);
    CHECK(bmp < fixed);

    const auto& fp = a.doc.at("stages").at("fingerprint").at("models");
    for (const char* reg : {"l1", "l2"}) {
        const auto& c = fp.at(reg).at("confusion");
        const double n = c.at("cc").get<double>() + c.at("ct").get<double>() + c.at("tc").get<double>() +
                         c.at("tt").get<double>();
        CHECK(c.at("accuracy").get<double>() == doctest::Approx((c.at("cc").get<double>() + c.at("tt").get<double>()) / n));
    }

    // A different master seed changes the stochastic stages.
    const auto other = run_experiment(config, config.seed + 1);
    CHECK(other.serialized() != a.serialized());
    fs::remove_all(dir);
}

TEST_CASE("a failing stage keeps earlier outputs") {
    const auto dir = scratch("fail");
    std::ofstream(dir / "dup.csv") << "edge,offset_m,day,flow\nin,10,0,100\nin,10,1,200\n";
    const json j = {{"traffic", {{"scenario", kScenarios + "/demo/traffic.json"}}},
                    {"impute",
                     {{"network", kScenarios + "/two_route/network.json"},
                      {"observations", (dir / "dup.csv").string()},
                      {"targets", {{{"edge", "s_drop"}, {"offset_m", 10}}}},
                      {"noise_variance", 0.0},
                      {"knn_k", 1}}}};
    const auto config = parse_experiment(j, dir.string());
    const auto out = dir / "out";
    try {
        run_experiment(config, 1, out.string());
        FAIL("expected a stage failure");
    } catch (const StageError& e) {
        CHECK(e.stage() == "impute");
    }
    const auto rep = json::parse(read(out / "report.json"));
    CHECK(rep.at("status") == "failed");
    CHECK(rep.at("error").at("stage") == "impute");
    CHECK(rep.at("stages").contains("traffic"));
    CHECK_FALSE(rep.at("stages").contains("impute"));
    for (const auto& name : rep.at("artifacts")) CHECK(fs::exists(out / name.get<std::string>()));
    fs::remove_all(dir);
}

TEST_CASE("compare_policies") {
    const auto config = load_experiment(kScenarios + "/demo/experiment.json");
    CHECK_THROWS(compare_policies(config, {"periodic"}, {1}));

    const auto twice = compare_policies(config, {"ml_cat", "ml_cat"}, {1, 2, 3});
    REQUIRE(twice.rows.size() == 2);
    CHECK(twice.rows[0].goodput_mbps->mean == twice.rows[1].goodput_mbps->mean);
    CHECK(twice.rows[0].energy_j->stddev == twice.rows[1].energy_j->stddev);
    CHECK_FALSE(twice.rows[0].dwell_s.has_value());

    const auto one = compare_policies(config, {"periodic", "ml_cat"}, {4});
    CHECK(one.rows[0].goodput_mbps->stddev == 0.0);
    CHECK(one.rows[0].goodput_mbps->n == 1);

    // Frozen regression: channel-aware ml_cat beats periodic on the two-phase drive.
    const auto t = compare_policies(config, {"periodic", "ml_cat"}, {1, 2, 3, 4, 5});
    CHECK(t.rows[1].goodput_mbps->mean > t.rows[0].goodput_mbps->mean);

    const auto mixed = compare_policies(config, {"fixed", "bmp", "ml_pcat"}, {1, 2});
    CHECK(mixed.rows[0].dwell_s.has_value());
    CHECK(mixed.rows[1].dwell_s->mean < mixed.rows[0].dwell_s->mean);
    CHECK(mixed.rows[2].goodput_mbps.has_value());
    CHECK(mixed.to_csv().rfind("policy,goodput_mean", 0) == 0);
    CHECK(mixed.to_json().at("rows").size() == 3);
}
