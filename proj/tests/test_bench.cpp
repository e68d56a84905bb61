#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "bcpnn/bench.hpp"

using namespace bcpnn;
using nlohmann::json;

namespace {

std::string config_error(const json& j) {
    try {
        parse_config(j);
    } catch (const ConfigError& e) {
        return e.what();
    }
    return "";
}

std::vector<std::vector<std::string>> read_csv(const std::string& path) {
    std::ifstream in(path);
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(in, line)) {
        std::vector<std::string> row;
        std::stringstream ss(line);
        std::string f;
        while (std::getline(ss, f, ',')) row.push_back(f);
        rows.push_back(row);
    }
    return rows;
}

BenchConfig small_config(const std::string& dir) {
    BenchConfig c;
    c.surrogate.soc_points = 10;
    c.data_path = dir + "/data.csv";
    c.network.hidden_layers = {8};
    c.train.epochs = 3;
    c.train.batch_size = 32;
    c.eval.samples = 300;
    c.eval.violation_draws = 50;
    c.eval.decompose_samples = 200;
    return c;
}

}  // namespace

TEST_CASE("bench: config parsing names the offending key") {
    CHECK(config_error(json::object()).empty());
    CHECK(config_error({{"train", {{"epochs", 5}}}}).empty());
    CHECK(config_error({{"trian", {{"epochs", 5}}}}).find("'trian'") != std::string::npos);
    CHECK(config_error({{"train", {{"epoch", 5}}}}).find("'train.epoch'") != std::string::npos);
    CHECK(config_error({{"train", {{"epochs", "five"}}}}).find("'train.epochs'") != std::string::npos);
    CHECK(config_error({{"train", {{"kl_scaling", "half"}}}}).find("'train.kl_scaling'") != std::string::npos);
    CHECK(config_error({{"network", {{"activation", "gelu"}}}}).find("'network.activation'") != std::string::npos);
    CHECK(config_error({{"eval", {{"level", 1.5}}}}).find("'eval.level'") != std::string::npos);
    CHECK(config_error({{"surrogate", {{"currents", {9.0}}}}}).find("'surrogate'") != std::string::npos);
    CHECK(config_error({{"prior", {{"rho_std", -1.0}}}}).find("'prior.rho_std'") != std::string::npos);
    CHECK_THROWS_AS(load_config("/nonexistent/config.json"), ConfigError);

    BenchConfig c;
    c.train.epochs = 17;
    c.surrogate.thermal_noise = 12.5;
    c.eval.seed = 99;
    const auto back = parse_config(json::parse(to_json(c).dump()));
    CHECK(back.train.epochs == 17);
    CHECK(back.surrogate.thermal_noise == 12.5);
    CHECK(back.eval.seed == 99);
    CHECK(to_json(back) == to_json(c));
}

TEST_CASE("bench: lognormal summary") {
    const auto t = lognormal_summary("c", -2.0, 1.0);
    CHECK(t.expected_r == doctest::Approx(std::exp(-1.5)).epsilon(1e-14));
    CHECK(t.std_r == doctest::Approx(std::exp(-1.5) * std::sqrt(std::exp(1.0) - 1.0)).epsilon(1e-12));
    const auto tiny = lognormal_summary("c", -11.0, 1e-6);
    CHECK(tiny.std_r / tiny.expected_r == doctest::Approx(1e-6).epsilon(1e-6));
}

TEST_CASE("bench: Freedman-Diaconis histogram") {
    std::vector<double> v;
    for (int i = 0; i < 1000; ++i) v.push_back(i / 999.0);
    std::vector<double> edges;
    std::vector<long> counts;
    freedman_diaconis(v, 1000, edges, counts);
    // IQR 0.5, width 2 * 0.5 / 10 = 0.1: ten bins.
    CHECK(counts.size() == 10);
    CHECK(edges.size() == 11);
    long total = 0;
    for (long c : counts) total += c;
    CHECK(total == 1000);
    freedman_diaconis(v, 4, edges, counts);
    CHECK(counts.size() == 4);
    freedman_diaconis(std::vector<double>(5, 2.0), 10, edges, counts);
    CHECK(counts == std::vector<long>{5});
}

TEST_CASE("bench: generate, train, evaluate and decompose on a small grid") {
    const auto dir = (std::filesystem::temp_directory_path() / "bcpnn_bench_test").string();
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    const auto config = small_config(dir);
    const auto data = cmd_generate(config);
    CHECK(data.size() == 420);
    CHECK(std::filesystem::exists(dir + "/data.json"));

    const auto bnn = run_training(config, ModelKind::bnn, data);
    const auto bc = run_training(config, ModelKind::bcpnn, data);
    CHECK(bnn.failure.empty());
    CHECK(bc.failure.empty());
    CHECK_FALSE(bnn.checkpoint.state.has_tolerance());
    CHECK(bc.checkpoint.state.num_constraints() == 2);
    CHECK(bnn.trace.size() == 3);
    for (const auto& e : bnn.trace) CHECK(e.kl_rho == 0.0);
    CHECK(std::isfinite(bc.trace.back().kl_rho));

    // Checkpoint round trip, and a bnn checkpoint carries no rho parameters.
    write_checkpoint(bc.checkpoint, dir + "/bc.json");
    write_checkpoint(bnn.checkpoint, dir + "/bnn.json");
    const auto back = read_checkpoint(dir + "/bc.json");
    CHECK(back.state == bc.checkpoint.state);
    CHECK(back.stats == bc.checkpoint.stats);
    CHECK(back.constraints == bc.checkpoint.constraints);
    std::ifstream bnn_file(dir + "/bnn.json");
    const json bnn_json = json::parse(bnn_file);
    CHECK(bnn_json["state"]["rho_mean"].empty());
    CHECK(bnn_json["state"]["rho_raw_var"].empty());

    write_trace_csv(bc.trace, trace_path_for(dir + "/bc.json"));
    CHECK(trace_path_for(dir + "/bc.json") == dir + "/bc.trace.csv");
    CHECK(read_csv(dir + "/bc.trace.csv").size() == 4);

    const auto report = evaluate_checkpoint(back, data, dir + "/eval");
    CHECK(report.test_points == 84);
    CHECK(report.draws == 300);
    CHECK(report.violations.size() == 2);
    CHECK(report.tolerances.size() == 2);
    for (const auto& t : report.tolerances)
        CHECK(t.expected_r == doctest::Approx(std::exp(t.mu_rho + t.sigma_rho * t.sigma_rho / 2)).epsilon(1e-10));

    // The report is a pure aggregation of the exported tables.
    const auto preds = read_csv(dir + "/eval/predictions.csv");
    REQUIRE(preds.size() == 1 + 84 * 8);
    std::map<std::string, std::pair<double, double>> sq;  // output -> (sum sq err, sum width)
    long covered = 0;
    for (std::size_t r = 1; r < preds.size(); ++r) {
        const double y = std::stod(preds[r][2]), mu = std::stod(preds[r][4]), var = std::stod(preds[r][5]);
        sq[preds[r][1]].first += (y - mu) * (y - mu);
        sq[preds[r][1]].second += 2 * 1.96 * std::sqrt(var);
        covered += std::abs(y - mu) <= 1.96 * std::sqrt(var);
    }
    double mse_mean = 0, cw_mean = 0;
    for (const auto& [name, v] : sq) mse_mean += v.first / 84 / 8, cw_mean += v.second / 84 / 8;
    CHECK(report.mse.mean == doctest::Approx(mse_mean).epsilon(1e-12));
    CHECK(report.cw.mean == doctest::Approx(cw_mean).epsilon(1e-12));
    CHECK(report.coverage == doctest::Approx(double(covered) / (84 * 8)));

    const auto viol = read_csv(dir + "/eval/violations.csv");
    REQUIRE(viol.size() == 1 + 50 * 84);
    CHECK(viol[0] == std::vector<std::string>{"draw", "point", "kirchhoff_voltage", "energy_balance"});
    std::vector<double> kv;
    for (std::size_t r = 1; r < viol.size(); ++r) kv.push_back(std::stod(viol[r][2]));
    double kv_mean = 0;
    for (double x : kv) kv_mean += x / double(kv.size());
    std::sort(kv.begin(), kv.end());
    CHECK(report.violations[0].mean == doctest::Approx(kv_mean).epsilon(1e-12));
    CHECK(report.violations[0].median == doctest::Approx(0.5 * (kv[kv.size() / 2 - 1] + kv[kv.size() / 2])).epsilon(1e-12));

    long hist_total = 0;
    for (const auto& row : read_csv(dir + "/eval/violation_histogram.csv"))
        if (row[0] == "kirchhoff_voltage") hist_total += std::stol(row[3]);
    CHECK(hist_total == 50 * 84);

    const auto dec = decompose_checkpoint(back, data, true, dir + "/dec");
    CHECK(dec.per_point.size() == 84);
    CHECK(dec.inconsistent_points == 0);
    CHECK(read_csv(dir + "/dec/decomposition.csv").size() == 9);
    const auto off = decompose_checkpoint(back, data, false, std::nullopt);
    CHECK(off.mean.constraint_reduction.isZero());
    CHECK(off.mean.tolerance_uncertainty.isZero());
    CHECK(off.mean.interaction.isZero());

    // A checkpoint from a differently seeded dataset is rejected.
    auto other_cfg = config;
    other_cfg.surrogate.seed = 7;
    other_cfg.data_path = dir + "/other.csv";
    const auto other = cmd_generate(other_cfg);
    CHECK_THROWS_AS(evaluate_checkpoint(back, other, std::nullopt), ConfigError);

    std::filesystem::remove_all(dir);
}
