#include "bcpnn/synthdata.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace bcpnn {

namespace {

constexpr double kMinCurrent = 0.0, kMaxCurrent = 3.0;
constexpr double kMinSoc = 0.05, kMaxSoc = 0.95;
constexpr double kMinTemp = 273.0, kMaxTemp = 318.0;
constexpr double kRangeSlack = 1e-9;

bool in_range(double v, double lo, double hi) { return v >= lo - kRangeSlack && v <= hi + kRangeSlack; }

}  // namespace

void SurrogateSpec::validate() const {
    detail::require(!currents.empty() && !temperatures.empty(), "surrogate: current and temperature grids must be nonempty");
    detail::require(soc_points >= 2, "surrogate: soc_points must be at least 2");
    detail::require(soc_min < soc_max && in_range(soc_min, kMinSoc, kMaxSoc) && in_range(soc_max, kMinSoc, kMaxSoc),
                    "surrogate: SOC range must lie within [0.05, 0.95]");
    for (double c : currents) detail::require(in_range(c, kMinCurrent, kMaxCurrent), "surrogate: currents must lie in [0, 3] A");
    for (double t : temperatures) detail::require(in_range(t, kMinTemp, kMaxTemp), "surrogate: temperatures must lie in [273, 318] K");
    detail::require(voltage_noise >= 0 && thermal_noise >= 0, "surrogate: noise levels must be non-negative");
}

VectorXd SurrogateSpec::noise_std() const {
    VectorXd s(kNumOutputs);
    s << VectorXd::Constant(5, voltage_noise), VectorXd::Constant(3, thermal_noise);
    return s;
}

nlohmann::json to_json(const SurrogateSpec& spec) {
    return {{"currents", spec.currents},           {"temperatures", spec.temperatures},
            {"soc_points", spec.soc_points},       {"soc_min", spec.soc_min},
            {"soc_max", spec.soc_max},             {"voltage_noise", spec.voltage_noise},
            {"thermal_noise", spec.thermal_noise}, {"seed", spec.seed}};
}

SurrogateSpec surrogate_spec_from_json(const nlohmann::json& j) {
    SurrogateSpec spec;
    spec.currents = j.value("currents", spec.currents);
    spec.temperatures = j.value("temperatures", spec.temperatures);
    spec.soc_points = j.value("soc_points", spec.soc_points);
    spec.soc_min = j.value("soc_min", spec.soc_min);
    spec.soc_max = j.value("soc_max", spec.soc_max);
    spec.voltage_noise = j.value("voltage_noise", spec.voltage_noise);
    spec.thermal_noise = j.value("thermal_noise", spec.thermal_noise);
    spec.seed = j.value("seed", spec.seed);
    spec.validate();
    return spec;
}

VectorXd surrogate_truth(double current, double soc, double temperature) {
    detail::require(in_range(current, kMinCurrent, kMaxCurrent), "surrogate_truth: current outside [0, 3] A");
    detail::require(in_range(soc, kMinSoc, kMaxSoc), "surrogate_truth: SOC outside [0.05, 0.95]");
    detail::require(in_range(temperature, kMinTemp, kMaxTemp), "surrogate_truth: temperature outside [273, 318] K");

    const double cold = (298.0 - temperature) / 298.0;
    const double v_ocv = 3.2 + 0.6 * soc + 0.25 * std::tanh(6.0 * (soc - 0.5));
    const double eta_p = 0.03 * current * (1.0 + 2.0 * cold) * (1.1 - 0.2 * soc);
    const double eta_n = 0.02 * current * (1.0 + 2.0 * cold) * (0.9 + 0.2 * soc);
    const double dv_ir = 0.015 * current * (1.0 + (298.0 - temperature) / 150.0);
    const double q_rev = 120.0 * current * (soc - 0.45);
    const double q_irr = 3000.0 * current * (eta_p + eta_n + dv_ir);

    VectorXd y(kNumOutputs);
    y << v_ocv - eta_p - eta_n - dv_ir, v_ocv, eta_p, eta_n, dv_ir, q_rev + q_irr, q_rev, q_irr;
    return y;
}

ConstraintSystem physical_constraints() {
    MatrixXd B(2, kNumOutputs);
    B << 1, -1, 1, 1, 1, 0, 0, 0,  //
        0, 0, 0, 0, 0, 1, -1, -1;
    return ConstraintSystem(MatrixXd::Zero(2, kNumInputs), B, VectorXd::Zero(2));
}

std::string to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "train";
}

Split split_from_string(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    throw ContractError("unknown split label '" + s + "'");
}

namespace {
std::vector<double> to_std(const VectorXd& v) { return {v.data(), v.data() + v.size()}; }
VectorXd to_eigen(const std::vector<double>& v) { return Eigen::Map<const VectorXd>(v.data(), Eigen::Index(v.size())); }
}  // namespace

nlohmann::json to_json(const NormalizationStats& s) {
    return {{"input_mean", to_std(s.input_mean)},
            {"input_std", to_std(s.input_std)},
            {"output_mean", to_std(s.output_mean)},
            {"output_std", to_std(s.output_std)}};
}

NormalizationStats normalization_stats_from_json(const nlohmann::json& j) {
    return {to_eigen(j.at("input_mean").get<std::vector<double>>()), to_eigen(j.at("input_std").get<std::vector<double>>()),
            to_eigen(j.at("output_mean").get<std::vector<double>>()), to_eigen(j.at("output_std").get<std::vector<double>>())};
}

void fit_affine(const MatrixXd& columns, VectorXd& mean, VectorXd& std) {
    detail::require(columns.cols() >= 2, "normalization: need at least two records");
    mean = columns.rowwise().mean();
    std = ((columns.colwise() - mean).array().square().rowwise().sum() / double(columns.cols() - 1)).sqrt();
    for (Eigen::Index i = 0; i < std.size(); ++i)
        detail::require(std[i] > 0.0, "normalization: variable " + std::to_string(i) + " has zero standard deviation");
}

MatrixXd normalize(const MatrixXd& columns, const VectorXd& mean, const VectorXd& std) {
    detail::require(columns.rows() == mean.size() && mean.size() == std.size(), "normalize: dimension mismatch");
    detail::require((std.array() > 0.0).all(), "normalize: zero standard deviation");
    return (columns.colwise() - mean).array().colwise() / std.array();
}

MatrixXd denormalize(const MatrixXd& columns, const VectorXd& mean, const VectorXd& std) {
    detail::require(columns.rows() == mean.size() && mean.size() == std.size(), "denormalize: dimension mismatch");
    detail::require((std.array() > 0.0).all(), "denormalize: zero standard deviation");
    return (columns.array().colwise() * std.array()).matrix().colwise() + mean;
}

NormalizedConstraints normalize_constraints(const ConstraintSystem& physical, const NormalizationStats& stats) {
    detail::require(physical.input_dim() == stats.input_mean.size() && physical.output_dim() == stats.output_mean.size(),
                    "normalize_constraints: dimension mismatch");
    // x = mx + sx * x', y = my + sy * y'  =>  (A sx) x' + (B sy) y' = b - A mx - B my.
    MatrixXd A = physical.A() * stats.input_std.asDiagonal();
    MatrixXd B = physical.B() * stats.output_std.asDiagonal();
    VectorXd b = physical.b() - physical.A() * stats.input_mean - physical.B() * stats.output_mean;
    const VectorXd scale = B.rowwise().norm();
    const VectorXd inv = scale.cwiseInverse();
    return {ConstraintSystem(inv.asDiagonal() * A, inv.asDiagonal() * B, inv.cwiseProduct(b)), scale};
}

std::vector<Eigen::Index> Dataset::indices(Split s) const {
    std::vector<Eigen::Index> out;
    for (Eigen::Index i = 0; i < size(); ++i)
        if (split[std::size_t(i)] == s) out.push_back(i);
    return out;
}

Batch Dataset::normalized(Split s) const {
    const auto idx = indices(s);
    Batch raw = Batch{inputs, targets}.select(idx);
    return {normalize(raw.inputs, stats.input_mean, stats.input_std), normalize(raw.targets, stats.output_mean, stats.output_std)};
}

MatrixXd Dataset::normalized_truth(Split s) const {
    const auto idx = indices(s);
    MatrixXd out(truth.rows(), Eigen::Index(idx.size()));
    for (std::size_t k = 0; k < idx.size(); ++k) out.col(Eigen::Index(k)) = truth.col(idx[k]);
    return normalize(out, stats.output_mean, stats.output_std);
}

namespace {

void assign_splits_and_stats(Dataset& data) {
    const auto n = static_cast<std::size_t>(data.size());
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t(0));
    std::seed_seq seq{static_cast<std::uint32_t>(data.spec.seed), static_cast<std::uint32_t>(data.spec.seed >> 32), 0x5e11u};
    Rng rng(seq);
    std::shuffle(order.begin(), order.end(), rng);
    const std::size_t n_train = n * 60 / 100, n_val = n * 20 / 100;
    data.split.assign(n, Split::test);
    for (std::size_t k = 0; k < n; ++k)
        data.split[order[k]] = k < n_train ? Split::train : (k < n_train + n_val ? Split::val : Split::test);

    const auto train = data.indices(Split::train);
    const Batch raw = Batch{data.inputs, data.targets}.select(train);
    fit_affine(raw.inputs, data.stats.input_mean, data.stats.input_std);
    fit_affine(raw.targets, data.stats.output_mean, data.stats.output_std);
}

}  // namespace

Dataset generate(const SurrogateSpec& spec) {
    spec.validate();
    Dataset data;
    data.spec = spec;
    const Eigen::Index n = Eigen::Index(spec.currents.size() * spec.temperatures.size()) * spec.soc_points;
    data.inputs.resize(kNumInputs, n);
    data.targets.resize(kNumOutputs, n);
    data.truth.resize(kNumOutputs, n);
    const VectorXd noise = spec.noise_std();

    Eigen::Index k = 0;
    for (double current : spec.currents) {
        for (double temp : spec.temperatures) {
            for (int s = 0; s < spec.soc_points; ++s, ++k) {
                const double soc = spec.soc_min + (spec.soc_max - spec.soc_min) * double(s) / double(spec.soc_points - 1);
                data.inputs.col(k) << current, soc, temp;
                data.truth.col(k) = surrogate_truth(current, soc, temp);
                // Per-record stream keyed on (seed, record index).
                std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32),
                                  static_cast<std::uint32_t>(k), 0x9015eu};
                Rng rng(seq);
                data.targets.col(k) = data.truth.col(k) + noise.cwiseProduct(standard_normal(rng, kNumOutputs));
            }
        }
    }
    assign_splits_and_stats(data);
    return data;
}

std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

std::string companion_json_path(const std::string& csv_path) {
    return std::filesystem::path(csv_path).replace_extension(".json").string();
}

namespace {
constexpr const char* kHeader = "I,SOC,T,V,V_ocv,eta_p,eta_n,dV_ir,Q_tot,Q_rev,Q_irr,split";

double parse_double(const std::string& field, const std::string& path, std::size_t line) {
    double v = 0.0;
    auto res = std::from_chars(field.data(), field.data() + field.size(), v);
    if (res.ec != std::errc() || res.ptr != field.data() + field.size())
        throw ContractError(path + ":" + std::to_string(line) + ": cannot parse '" + field + "' as a number");
    return v;
}
}  // namespace

void write_dataset(const Dataset& data, const std::string& csv_path) {
    std::ofstream csv(csv_path, std::ios::binary);
    if (!csv) throw std::runtime_error("cannot open " + csv_path + " for writing");
    csv << kHeader << '\n';
    for (Eigen::Index i = 0; i < data.size(); ++i) {
        for (Eigen::Index r = 0; r < kNumInputs; ++r) csv << format_double(data.inputs(r, i)) << ',';
        for (Eigen::Index r = 0; r < kNumOutputs; ++r) csv << format_double(data.targets(r, i)) << ',';
        csv << to_string(data.split[std::size_t(i)]) << '\n';
    }

    const auto noise = data.spec.noise_std();
    nlohmann::json meta = {{"version", kSurrogateVersion},
                           {"seed", data.spec.seed},
                           {"records", data.size()},
                           {"surrogate", to_json(data.spec)},
                           {"noise_std", std::vector<double>(noise.data(), noise.data() + noise.size())},
                           {"output_names", kOutputNames},
                           {"normalization", to_json(data.stats)},
                           {"constraints", to_json(physical_constraints())}};
    std::ofstream js(companion_json_path(csv_path), std::ios::binary);
    if (!js) throw std::runtime_error("cannot open " + companion_json_path(csv_path) + " for writing");
    js << meta.dump(2) << '\n';
}

Dataset read_dataset(const std::string& csv_path) {
    std::ifstream csv(csv_path, std::ios::binary);
    if (!csv) throw ContractError("cannot open dataset " + csv_path);
    std::ifstream js(companion_json_path(csv_path), std::ios::binary);
    if (!js) throw ContractError("cannot open dataset metadata " + companion_json_path(csv_path));
    const auto meta = nlohmann::json::parse(js);
    if (meta.value("version", std::string()) != kSurrogateVersion)
        throw ContractError("dataset metadata has an unknown version tag");

    std::string line;
    if (!std::getline(csv, line) || line != kHeader) throw ContractError(csv_path + ": unexpected header");
    std::vector<std::array<double, kNumInputs + kNumOutputs>> rows;
    std::vector<Split> split;
    std::size_t line_no = 1;
    while (std::getline(csv, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string field;
        std::array<double, kNumInputs + kNumOutputs> row{};
        for (auto& v : row) {
            if (!std::getline(ss, field, ',')) throw ContractError(csv_path + ":" + std::to_string(line_no) + ": too few fields");
            v = parse_double(field, csv_path, line_no);
        }
        if (!std::getline(ss, field, ',')) throw ContractError(csv_path + ":" + std::to_string(line_no) + ": missing split");
        split.push_back(split_from_string(field));
        rows.push_back(row);
    }

    Dataset data;
    data.spec = surrogate_spec_from_json(meta.at("surrogate"));
    data.stats = normalization_stats_from_json(meta.at("normalization"));
    data.split = std::move(split);
    const auto n = Eigen::Index(rows.size());
    data.inputs.resize(kNumInputs, n);
    data.targets.resize(kNumOutputs, n);
    data.truth.resize(kNumOutputs, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& row = rows[std::size_t(i)];
        for (int r = 0; r < kNumInputs; ++r) data.inputs(r, i) = row[std::size_t(r)];
        for (int r = 0; r < kNumOutputs; ++r) data.targets(r, i) = row[std::size_t(kNumInputs + r)];
        data.truth.col(i) = surrogate_truth(data.inputs(0, i), data.inputs(1, i), data.inputs(2, i));
    }
    return data;
}

}  // namespace bcpnn
