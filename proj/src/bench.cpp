#include "bcpnn/bench.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

namespace bcpnn {

namespace {

using nlohmann::json;

void check_keys(const json& j, const std::string& section, const std::set<std::string>& allowed) {
    if (!j.is_object()) throw ConfigError("config: '" + section + "' must be an object");
    for (const auto& [key, _] : j.items())
        if (!allowed.count(key)) throw ConfigError("config: unknown key '" + (section.empty() ? key : section + "." + key) + "'");
}

template <typename T>
void read_key(const json& j, const std::string& section, const std::string& key, T& out) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError("config: key '" + section + "." + key + "' has the wrong type");
    }
}

template <typename T>
void require_positive(const std::string& key, T value) {
    if (!(value > T(0))) throw ConfigError("config: key '" + key + "' must be positive");
}

}  // namespace

BenchConfig parse_config(const json& j) {
    BenchConfig c;
    check_keys(j, "", {"surrogate", "data", "network", "train", "prior", "eval"});

    if (j.contains("surrogate")) {
        const auto& s = j["surrogate"];
        check_keys(s, "surrogate", {"currents", "temperatures", "soc_points", "soc_min", "soc_max", "voltage_noise", "thermal_noise", "seed"});
        read_key(s, "surrogate", "currents", c.surrogate.currents);
        read_key(s, "surrogate", "temperatures", c.surrogate.temperatures);
        read_key(s, "surrogate", "soc_points", c.surrogate.soc_points);
        read_key(s, "surrogate", "soc_min", c.surrogate.soc_min);
        read_key(s, "surrogate", "soc_max", c.surrogate.soc_max);
        read_key(s, "surrogate", "voltage_noise", c.surrogate.voltage_noise);
        read_key(s, "surrogate", "thermal_noise", c.surrogate.thermal_noise);
        read_key(s, "surrogate", "seed", c.surrogate.seed);
        try {
            c.surrogate.validate();
        } catch (const ContractError& e) {
            throw ConfigError(std::string("config: key 'surrogate' is invalid: ") + e.what());
        }
    }
    if (j.contains("data")) {
        check_keys(j["data"], "data", {"path"});
        read_key(j["data"], "data", "path", c.data_path);
    }
    if (j.contains("network")) {
        const auto& n = j["network"];
        check_keys(n, "network", {"hidden_layers", "activation"});
        read_key(n, "network", "hidden_layers", c.network.hidden_layers);
        std::string act = to_string(c.network.activation);
        read_key(n, "network", "activation", act);
        try {
            c.network.activation = activation_from_string(act);
        } catch (const ContractError&) {
            throw ConfigError("config: key 'network.activation' must be one of tanh, relu, silu");
        }
        for (int h : c.network.hidden_layers) require_positive("network.hidden_layers", h);
    }
    if (j.contains("train")) {
        const auto& t = j["train"];
        check_keys(t, "train", {"epochs", "batch_size", "learning_rate", "mc_samples", "seed", "kl_scaling", "grad_clip"});
        read_key(t, "train", "epochs", c.train.epochs);
        read_key(t, "train", "batch_size", c.train.batch_size);
        read_key(t, "train", "learning_rate", c.train.learning_rate);
        read_key(t, "train", "mc_samples", c.train.mc_samples);
        read_key(t, "train", "seed", c.train.seed);
        read_key(t, "train", "grad_clip", c.train.grad_clip);
        std::string scaling = to_string(c.train.kl_scaling);
        read_key(t, "train", "kl_scaling", scaling);
        try {
            c.train.kl_scaling = kl_scaling_from_string(scaling);
        } catch (const ContractError&) {
            throw ConfigError("config: key 'train.kl_scaling' must be 'full' or 'minibatch-proportional'");
        }
        require_positive("train.epochs", c.train.epochs);
        require_positive("train.batch_size", c.train.batch_size);
        require_positive("train.learning_rate", c.train.learning_rate);
        require_positive("train.mc_samples", c.train.mc_samples);
        require_positive("train.grad_clip", c.train.grad_clip);
    }
    if (j.contains("prior")) {
        check_keys(j["prior"], "prior", {"rho_mean", "rho_std"});
        read_key(j["prior"], "prior", "rho_mean", c.rho_prior_mean);
        read_key(j["prior"], "prior", "rho_std", c.rho_prior_std);
        require_positive("prior.rho_std", c.rho_prior_std);
    }
    if (j.contains("eval")) {
        const auto& e = j["eval"];
        check_keys(e, "eval", {"samples", "violation_draws", "decompose_samples", "seed", "level", "max_histogram_bins"});
        read_key(e, "eval", "samples", c.eval.samples);
        read_key(e, "eval", "violation_draws", c.eval.violation_draws);
        read_key(e, "eval", "decompose_samples", c.eval.decompose_samples);
        read_key(e, "eval", "seed", c.eval.seed);
        read_key(e, "eval", "level", c.eval.level);
        read_key(e, "eval", "max_histogram_bins", c.eval.max_histogram_bins);
        require_positive("eval.samples", c.eval.samples);
        require_positive("eval.violation_draws", c.eval.violation_draws);
        require_positive("eval.max_histogram_bins", c.eval.max_histogram_bins);
        if (c.eval.decompose_samples < 100) throw ConfigError("config: key 'eval.decompose_samples' must be at least 100");
        if (!(c.eval.level > 0.0 && c.eval.level < 1.0)) throw ConfigError("config: key 'eval.level' must lie in (0, 1)");
    }
    return c;
}

BenchConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("config: " + path + " is not valid JSON: " + e.what());
    }
    return parse_config(j);
}

namespace {
json to_json(const EvalConfig& e) {
    return {{"samples", e.samples},         {"violation_draws", e.violation_draws}, {"decompose_samples", e.decompose_samples},
            {"seed", e.seed},               {"level", e.level},                     {"max_histogram_bins", e.max_histogram_bins}};
}

json to_json(const TrainConfig& t) {
    return {{"epochs", t.epochs},   {"batch_size", t.batch_size},            {"learning_rate", t.learning_rate},
            {"mc_samples", t.mc_samples}, {"seed", t.seed}, {"kl_scaling", to_string(t.kl_scaling)},
            {"grad_clip", t.grad_clip}};
}
}  // namespace

json to_json(const BenchConfig& c) {
    return {{"surrogate", bcpnn::to_json(c.surrogate)},
            {"data", {{"path", c.data_path}}},
            {"network", {{"hidden_layers", c.network.hidden_layers}, {"activation", to_string(c.network.activation)}}},
            {"train", to_json(c.train)},
            {"prior", {{"rho_mean", c.rho_prior_mean}, {"rho_std", c.rho_prior_std}}},
            {"eval", to_json(c.eval)}};
}

std::string to_string(ModelKind k) { return k == ModelKind::bnn ? "bnn" : "bcpnn"; }

ModelKind model_kind_from_string(const std::string& s) {
    if (s == "bnn") return ModelKind::bnn;
    if (s == "bcpnn") return ModelKind::bcpnn;
    throw ConfigError("model must be 'bnn' or 'bcpnn', got '" + s + "'");
}

namespace {
constexpr const char* kCheckpointFormat = "bcpnn-checkpoint/1";
std::vector<double> to_std(const VectorXd& v) { return {v.data(), v.data() + v.size()}; }
}  // namespace

json to_json(const Checkpoint& c) {
    return {{"format", kCheckpointFormat},
            {"model", to_string(c.model)},
            {"state", bcpnn::to_json(c.state)},
            {"normalization", bcpnn::to_json(c.stats)},
            {"physical_constraints", bcpnn::to_json(c.physical_constraints)},
            {"constraints", bcpnn::to_json(c.constraints)},
            {"row_scale", to_std(c.row_scale)},
            {"train", to_json(c.train)},
            {"eval", to_json(c.eval)},
            {"seed", c.train.seed},
            {"dataset_seed", c.dataset_seed}};
}

Checkpoint checkpoint_from_json(const json& j) {
    if (j.value("format", std::string()) != kCheckpointFormat) throw ConfigError("checkpoint: unknown or missing format tag");
    Checkpoint c;
    try {
        c.model = model_kind_from_string(j.at("model").get<std::string>());
        c.state = variational_state_from_json(j.at("state"));
        c.stats = normalization_stats_from_json(j.at("normalization"));
        c.physical_constraints = constraint_system_from_json(j.at("physical_constraints"));
        c.constraints = constraint_system_from_json(j.at("constraints"));
        const auto scale = j.at("row_scale").get<std::vector<double>>();
        c.row_scale = Eigen::Map<const VectorXd>(scale.data(), Eigen::Index(scale.size()));
        const json cfg = {{"train", j.at("train")}, {"eval", j.at("eval")}};
        const auto parsed = parse_config(cfg);
        c.train = parsed.train;
        c.eval = parsed.eval;
        c.dataset_seed = j.at("dataset_seed").get<std::uint64_t>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("checkpoint: malformed content: ") + e.what());
    }
    if ((c.model == ModelKind::bcpnn) != c.state.has_tolerance())
        throw ConfigError("checkpoint: tolerance parameters do not match the model kind");
    return c;
}

void write_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot open " + path + " for writing");
    out << to_json(ckpt).dump(1) << '\n';
}

Checkpoint read_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open checkpoint " + path);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("checkpoint " + path + " is not valid JSON: " + e.what());
    }
    return checkpoint_from_json(j);
}

namespace {
void ensure_parent(const std::string& path) {
    const auto parent = std::filesystem::path(path).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
}
}  // namespace

Dataset cmd_generate(const BenchConfig& config) {
    Dataset data = generate(config.surrogate);
    ensure_parent(config.data_path);
    write_dataset(data, config.data_path);
    return data;
}

TrainRun run_training(const BenchConfig& config, ModelKind model, const Dataset& data, const EpochCallback& on_epoch) {
    NetworkArchitecture arch = config.network;
    arch.input_dim = kNumInputs;
    arch.output_dim = kNumOutputs;

    TrainRun run;
    Checkpoint& c = run.checkpoint;
    c.model = model;
    c.stats = data.stats;
    c.physical_constraints = physical_constraints();
    const auto normalized = normalize_constraints(c.physical_constraints, data.stats);
    c.constraints = normalized.system;
    c.row_scale = normalized.row_scale;
    c.train = config.train;
    c.eval = config.eval;
    c.dataset_seed = data.spec.seed;

    const Eigen::Index m = model == ModelKind::bcpnn ? c.constraints.num_constraints() : 0;
    const Gaussian rho_prior(VectorXd::Constant(m, config.rho_prior_mean),
                             VectorXd::Constant(m, config.rho_prior_std * config.rho_prior_std));
    VariationalState init = init_variational(arch, config.train.seed, m, rho_prior);

    const Batch train_split = data.normalized(Split::train);
    const ConstraintSystem* cs = model == ModelKind::bcpnn ? &c.constraints : nullptr;
    try {
        auto result = train(std::move(init), train_split, cs, config.train, on_epoch);
        c.state = std::move(result.state);
        run.trace = std::move(result.trace);
    } catch (const TrainingError& e) {
        c.state = e.last_good();
        run.trace = e.trace();
        run.failure = e.what();
    }
    return run;
}

void write_trace_csv(const std::vector<ElboEstimate>& trace, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot open " + path + " for writing");
    out << "epoch,nll_term,kl_theta,kl_rho,total\n";
    for (std::size_t e = 0; e < trace.size(); ++e)
        out << e << ',' << format_double(trace[e].nll_term) << ',' << format_double(trace[e].kl_theta) << ','
            << format_double(trace[e].kl_rho) << ',' << format_double(trace[e].total) << '\n';
}

std::string trace_path_for(const std::string& checkpoint_path) {
    return std::filesystem::path(checkpoint_path).replace_extension(".trace.csv").string();
}

ToleranceSummary lognormal_summary(const std::string& name, double mu_rho, double sigma_rho) {
    const double s2 = sigma_rho * sigma_rho;
    const double mean = std::exp(mu_rho + 0.5 * s2);
    return {name, mu_rho, sigma_rho, mean, mean * std::sqrt(std::expm1(s2))};
}

namespace {

SummaryStat summarize(const std::vector<double>& values) {
    double mean = 0.0;
    for (double v : values) mean += v;
    mean /= double(values.size());
    double ss = 0.0;
    for (double v : values) ss += (v - mean) * (v - mean);
    const double sd = values.size() > 1 ? std::sqrt(ss / double(values.size() - 1)) : 0.0;
    return {mean, 1.96 * sd};
}

json to_json(const SummaryStat& s) { return {{"mean", s.mean}, {"pm_1.96sd", s.spread}}; }

double median_of(std::vector<double> v) {
    const auto n = v.size();
    const auto mid = v.begin() + long(n / 2);
    std::nth_element(v.begin(), mid, v.end());
    if (n % 2 == 1) return *mid;
    const double hi = *mid;
    const double lo = *std::max_element(v.begin(), mid);
    return 0.5 * (lo + hi);
}

}  // namespace

json to_json(const BenchmarkReport& r) {
    json viol = json::array();
    for (const auto& v : r.violations)
        viol.push_back({{"constraint", v.constraint}, {"mean", v.mean}, {"median", v.median}, {"std", v.std}});
    json tol = json::array();
    for (const auto& t : r.tolerances)
        tol.push_back({{"constraint", t.constraint}, {"mu_rho", t.mu_rho}, {"sigma_rho", t.sigma_rho},
                       {"expected_r", t.expected_r}, {"std_r", t.std_r}});
    return {{"model", to_string(r.model)},
            {"units", "normalized space; constraint rows scaled to unit norm"},
            {"test_points", r.test_points},
            {"draws", r.draws},
            {"mse", to_json(r.mse)},
            {"mse_vs_noiseless", to_json(r.mse_truth)},
            {"credible_width", to_json(r.cw)},
            {"coverage", r.coverage},
            {"aleatoric", to_json(r.aleatoric)},
            {"epistemic", to_json(r.epistemic)},
            {"violation", viol},
            {"violation_aggregate_mean", r.aggregate_violation_mean},
            {"tolerance_posterior", tol},
            {"failed_evaluations", r.failures}};
}

void require_compatible(const Checkpoint& ckpt, const Dataset& data) {
    if (!(ckpt.stats == data.stats))
        throw ConfigError("checkpoint normalization statistics do not match the dataset");
    if (ckpt.state.architecture().input_dim != kNumInputs || ckpt.state.architecture().output_dim != kNumOutputs)
        throw ConfigError("checkpoint architecture does not match the dataset dimensions");
}

void freedman_diaconis(std::vector<double> values, int max_bins, std::vector<double>& edges, std::vector<long>& counts) {
    edges.clear();
    counts.clear();
    if (values.empty()) return;
    std::sort(values.begin(), values.end());
    const double lo = values.front(), hi = values.back();
    const auto quantile = [&](double q) {
        const double pos = q * double(values.size() - 1);
        const auto i = std::size_t(pos);
        const double frac = pos - double(i);
        return i + 1 < values.size() ? values[i] * (1.0 - frac) + values[i + 1] * frac : values[i];
    };
    const double iqr = quantile(0.75) - quantile(0.25);
    const double width = 2.0 * iqr / std::cbrt(double(values.size()));
    int bins = 1;
    if (hi > lo && width > 0.0) bins = int(std::clamp(std::ceil((hi - lo) / width), 1.0, double(max_bins)));
    const double step = hi > lo ? (hi - lo) / bins : 1.0;
    for (int b = 0; b <= bins; ++b) edges.push_back(lo + step * b);
    counts.assign(std::size_t(bins), 0);
    for (double v : values) {
        auto b = hi > lo ? long((v - lo) / step) : 0L;
        counts[std::size_t(std::clamp(b, 0L, long(bins) - 1))]++;
    }
}

namespace {

struct SweepOutcome {
    DecompositionAccumulator acc;
    std::vector<std::vector<double>> violation;  // [constraint][draw * points + point]
    long failures = 0;
};

SweepOutcome sweep_test_split(const Checkpoint& ckpt, const Batch& test, int draws, bool conditioning, int violation_draws) {
    const Eigen::Index points = test.size();
    const Eigen::Index m = ckpt.constraints.num_constraints();
    SweepOutcome out{DecompositionAccumulator(kNumOutputs, points), std::vector<std::vector<double>>(std::size_t(m)), 0};
    const int kept = std::min(draws, violation_draws);
    for (auto& v : out.violation) v.assign(std::size_t(kept) * std::size_t(points), std::nan(""));
    const ConstraintSystem& cs = ckpt.constraints;
    out.failures = sweep_posterior(ckpt.state, ckpt.model == ModelKind::bcpnn ? &cs : nullptr, test.inputs,
                                   {draws, ckpt.eval.seed, conditioning}, [&](int d, Eigen::Index i, const PointDraw& pd) {
                                       out.acc.add(i, pd);
                                       if (d < kept) {
                                           const VectorXd v = violation_magnitude(cs, test.inputs.col(i), pd.mean);
                                           for (Eigen::Index j = 0; j < m; ++j)
                                               out.violation[std::size_t(j)][std::size_t(d) * std::size_t(points) + std::size_t(i)] = v[j];
                                       }
                                   });
    return out;
}

void drop_nan(std::vector<double>& v) {
    v.erase(std::remove_if(v.begin(), v.end(), [](double x) { return std::isnan(x); }), v.end());
}

std::ofstream open_out(const std::string& dir, const std::string& name) {
    std::ofstream out(std::filesystem::path(dir) / name, std::ios::binary);
    if (!out) throw ConfigError("cannot write " + (std::filesystem::path(dir) / name).string());
    return out;
}

}  // namespace

BenchmarkReport evaluate_checkpoint(const Checkpoint& ckpt, const Dataset& data, const std::optional<std::string>& out_dir,
                                    std::optional<int> samples) {
    require_compatible(ckpt, data);
    const Batch test = data.normalized(Split::test);
    const MatrixXd truth = data.normalized_truth(Split::test);
    const int draws = samples.value_or(ckpt.eval.samples);
    auto sweep = sweep_test_split(ckpt, test, draws, true, ckpt.eval.violation_draws);

    const Eigen::Index points = test.size();
    const Eigen::Index m = ckpt.constraints.num_constraints();
    BenchmarkReport r;
    r.model = ckpt.model;
    r.test_points = points;
    r.draws = draws;
    r.failures = sweep.failures;

    MatrixXd mean(kNumOutputs, points), var(kNumOutputs, points), alea(kNumOutputs, points), epi(kNumOutputs, points);
    Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> covered(kNumOutputs, points);
    MatrixXd width(kNumOutputs, points);
    for (Eigen::Index i = 0; i < points; ++i) {
        const auto dec = sweep.acc.decomposition(i);
        mean.col(i) = sweep.acc.pooled_mean(i);
        var.col(i) = dec.total;
        alea.col(i) = dec.aleatoric;
        epi.col(i) = dec.epistemic;
        const auto cov = coverage_and_width(mean.col(i), var.col(i), test.targets.col(i), ckpt.eval.level);
        covered.col(i) = cov.covered;
        width.col(i) = cov.width;
    }

    std::vector<double> mse, mse_truth, cw, a, e;
    for (Eigen::Index k = 0; k < kNumOutputs; ++k) {
        mse.push_back((mean.row(k) - test.targets.row(k)).squaredNorm() / double(points));
        mse_truth.push_back((mean.row(k) - truth.row(k)).squaredNorm() / double(points));
        cw.push_back(width.row(k).mean());
        a.push_back(alea.row(k).mean());
        e.push_back(epi.row(k).mean());
    }
    r.mse = summarize(mse);
    r.mse_truth = summarize(mse_truth);
    r.cw = summarize(cw);
    r.aleatoric = summarize(a);
    r.epistemic = summarize(e);
    r.coverage = double(covered.count()) / double(covered.size());

    std::vector<double> aggregate(sweep.violation.empty() ? 0 : sweep.violation[0].size(), 0.0);
    for (Eigen::Index j = 0; j < m; ++j) {
        auto& v = sweep.violation[std::size_t(j)];
        for (std::size_t s = 0; s < v.size(); ++s) aggregate[s] += v[s];
        std::vector<double> finite = v;
        drop_nan(finite);
        const auto s = summarize(finite);
        r.violations.push_back({kConstraintNames[std::size_t(j)], s.mean, median_of(finite), s.spread / 1.96});
    }
    drop_nan(aggregate);
    r.aggregate_violation_mean = summarize(aggregate).mean;

    if (ckpt.model == ModelKind::bcpnn) {
        const Gaussian rho = ckpt.state.rho_q();
        for (Eigen::Index j = 0; j < m; ++j)
            r.tolerances.push_back(lognormal_summary(kConstraintNames[std::size_t(j)], rho.mean()[j], std::sqrt(rho.var()[j])));
    }

    if (out_dir) {
        std::filesystem::create_directories(*out_dir);
        open_out(*out_dir, "report.json") << to_json(r).dump(2) << '\n';

        auto metrics = open_out(*out_dir, "metrics.csv");
        metrics << "output,mse,mse_vs_noiseless,credible_width,coverage,aleatoric,epistemic\n";
        for (Eigen::Index k = 0; k < kNumOutputs; ++k)
            metrics << kOutputNames[std::size_t(k)] << ',' << format_double(mse[std::size_t(k)]) << ','
                    << format_double(mse_truth[std::size_t(k)]) << ',' << format_double(cw[std::size_t(k)]) << ','
                    << format_double(double(covered.row(k).count()) / double(points)) << ','
                    << format_double(a[std::size_t(k)]) << ',' << format_double(e[std::size_t(k)]) << '\n';

        auto preds = open_out(*out_dir, "predictions.csv");
        preds << "point,output,y_observed,y_noiseless,pooled_mean,pooled_var,aleatoric,epistemic\n";
        for (Eigen::Index i = 0; i < points; ++i)
            for (Eigen::Index k = 0; k < kNumOutputs; ++k)
                preds << i << ',' << kOutputNames[std::size_t(k)] << ',' << format_double(test.targets(k, i)) << ','
                      << format_double(truth(k, i)) << ',' << format_double(mean(k, i)) << ',' << format_double(var(k, i))
                      << ',' << format_double(alea(k, i)) << ',' << format_double(epi(k, i)) << '\n';

        auto viol = open_out(*out_dir, "violations.csv");
        viol << "draw,point";
        for (Eigen::Index j = 0; j < m; ++j) viol << ',' << kConstraintNames[std::size_t(j)];
        viol << '\n';
        const std::size_t kept = sweep.violation.empty() ? 0 : sweep.violation[0].size() / std::size_t(points);
        for (std::size_t d = 0; d < kept; ++d)
            for (Eigen::Index i = 0; i < points; ++i) {
                const std::size_t s = d * std::size_t(points) + std::size_t(i);
                if (std::isnan(sweep.violation[0][s])) continue;
                viol << d << ',' << i;
                for (Eigen::Index j = 0; j < m; ++j) viol << ',' << format_double(sweep.violation[std::size_t(j)][s]);
                viol << '\n';
            }

        auto hist = open_out(*out_dir, "violation_histogram.csv");
        hist << "constraint,bin_lower,bin_upper,count\n";
        for (Eigen::Index j = 0; j < m; ++j) {
            std::vector<double> values = sweep.violation[std::size_t(j)];
            drop_nan(values);
            std::vector<double> edges;
            std::vector<long> counts;
            freedman_diaconis(values, ckpt.eval.max_histogram_bins, edges, counts);
            for (std::size_t b = 0; b < counts.size(); ++b)
                hist << kConstraintNames[std::size_t(j)] << ',' << format_double(edges[b]) << ',' << format_double(edges[b + 1])
                     << ',' << counts[b] << '\n';
        }
    }
    return r;
}

DecompositionReport decompose_checkpoint(const Checkpoint& ckpt, const Dataset& data, bool conditioning,
                                         const std::optional<std::string>& out_dir, std::optional<int> samples) {
    require_compatible(ckpt, data);
    const Batch test = data.normalized(Split::test);
    const int draws = samples.value_or(ckpt.eval.decompose_samples);
    if (draws < 100) throw ConfigError("decompose: at least 100 draws are required");
    auto sweep = sweep_test_split(ckpt, test, draws, conditioning, 0);

    DecompositionReport rep;
    const Eigen::Index points = test.size();
    auto zero = [] { return VectorXd::Zero(kNumOutputs).eval(); };
    rep.mean = {zero(), zero(), zero(), zero(), zero(), zero(), zero(), 0};
    for (Eigen::Index i = 0; i < points; ++i) {
        auto d = sweep.acc.decomposition(i);
        const VectorXd gap = (d.sum_of_terms() - d.total).cwiseAbs();
        for (Eigen::Index k = 0; k < kNumOutputs; ++k) {
            const double se = d.total_standard_error[k];
            const double ratio = se > 0 ? gap[k] / se : (gap[k] > 0 ? INFINITY : 0.0);
            rep.max_sum_gap_in_se = std::max(rep.max_sum_gap_in_se, ratio);
            if (gap[k] > 3.0 * se && gap[k] > 0.0) {
                ++rep.inconsistent_points;
                break;
            }
        }
        rep.mean.aleatoric += d.aleatoric;
        rep.mean.constraint_reduction += d.constraint_reduction;
        rep.mean.epistemic += d.epistemic;
        rep.mean.tolerance_uncertainty += d.tolerance_uncertainty;
        rep.mean.interaction += d.interaction;
        rep.mean.total += d.total;
        rep.mean.total_standard_error += d.total_standard_error;
        rep.per_point.push_back(std::move(d));
    }
    for (VectorXd* v : {&rep.mean.aleatoric, &rep.mean.constraint_reduction, &rep.mean.epistemic, &rep.mean.tolerance_uncertainty,
                        &rep.mean.interaction, &rep.mean.total, &rep.mean.total_standard_error})
        *v /= double(points);
    rep.mean.draws = draws;

    if (out_dir) {
        std::filesystem::create_directories(*out_dir);
        auto write_row = [](std::ofstream& out, const VarianceDecomposition& d, Eigen::Index k) {
            out << format_double(d.aleatoric[k]) << ',' << format_double(d.constraint_reduction[k]) << ','
                << format_double(d.epistemic[k]) << ',' << format_double(d.tolerance_uncertainty[k]) << ','
                << format_double(d.interaction[k]) << ',' << format_double(d.total[k]);
        };
        auto out = open_out(*out_dir, "decomposition.csv");
        out << "output,aleatoric,constraint_reduction,epistemic,tolerance_uncertainty,interaction,total\n";
        for (Eigen::Index k = 0; k < kNumOutputs; ++k) {
            out << kOutputNames[std::size_t(k)] << ',';
            write_row(out, rep.mean, k);
            out << '\n';
        }
        auto pts = open_out(*out_dir, "decomposition_points.csv");
        pts << "point,output,aleatoric,constraint_reduction,epistemic,tolerance_uncertainty,interaction,total,total_se\n";
        for (Eigen::Index i = 0; i < points; ++i)
            for (Eigen::Index k = 0; k < kNumOutputs; ++k) {
                pts << i << ',' << kOutputNames[std::size_t(k)] << ',';
                write_row(pts, rep.per_point[std::size_t(i)], k);
                pts << ',' << format_double(rep.per_point[std::size_t(i)].total_standard_error[k]) << '\n';
            }
        const json summary = {{"model", to_string(ckpt.model)},
                              {"conditioning", conditioning},
                              {"draws", draws},
                              {"test_points", points},
                              {"aleatoric_mean", rep.mean.aleatoric.mean()},
                              {"epistemic_mean", rep.mean.epistemic.mean()},
                              {"constraint_reduction_mean", rep.mean.constraint_reduction.mean()},
                              {"tolerance_uncertainty_mean", rep.mean.tolerance_uncertainty.mean()},
                              {"interaction_mean", rep.mean.interaction.mean()},
                              {"total_mean", rep.mean.total.mean()},
                              {"inconsistent_points", rep.inconsistent_points},
                              {"max_sum_gap_in_se", rep.max_sum_gap_in_se}};
        open_out(*out_dir, "decomposition_summary.json") << summary.dump(2) << '\n';
    }
    return rep;
}

}  // namespace bcpnn
