#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "bcpnn/model.hpp"
#include "bcpnn/objective.hpp"
#include "bcpnn/synthdata.hpp"
#include "bcpnn/uncertainty.hpp"

namespace bcpnn {

/// Bad configuration or CLI input; the message names the offending key.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct EvalConfig {
    int samples = 10000;          // posterior draws for predictive moments
    int violation_draws = 200;    // leading draws whose residuals are exported per test point
    int decompose_samples = 10000;
    std::uint64_t seed = 7;
    double level = 0.95;
    int max_histogram_bins = 1000;
};

struct BenchConfig {
    SurrogateSpec surrogate;
    std::string data_path = "data/surrogate.csv";
    NetworkArchitecture network;
    TrainConfig train;
    double rho_prior_mean = -2.0;
    double rho_prior_std = 1.0;
    EvalConfig eval;
};

/// Strict parse: unknown keys and wrong types raise ConfigError naming the key.
BenchConfig parse_config(const nlohmann::json& j);
BenchConfig load_config(const std::string& path);
nlohmann::json to_json(const BenchConfig& config);

enum class ModelKind { bnn, bcpnn };
std::string to_string(ModelKind k);
ModelKind model_kind_from_string(const std::string& s);

/// Everything needed to evaluate a trained model against its dataset.
struct Checkpoint {
    ModelKind model = ModelKind::bcpnn;
    VariationalState state;
    NormalizationStats stats;
    ConstraintSystem physical_constraints = bcpnn::physical_constraints();
    ConstraintSystem constraints = bcpnn::physical_constraints();  // normalized, unit-norm rows
    VectorXd row_scale;
    TrainConfig train;
    EvalConfig eval;
    std::uint64_t dataset_seed = 0;
};

nlohmann::json to_json(const Checkpoint& ckpt);
Checkpoint checkpoint_from_json(const nlohmann::json& j);
void write_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint read_checkpoint(const std::string& path);

/// Writes `dataset` per the config and returns it.
Dataset cmd_generate(const BenchConfig& config);

struct TrainRun {
    Checkpoint checkpoint;
    std::vector<ElboEstimate> trace;
    /// Non-empty when training diverged; the checkpoint then holds the last finite state.
    std::string failure;
};

/// bnn trains q(theta) only with no conditioning layer; bcpnn trains q(theta) and q(rho) jointly.
TrainRun run_training(const BenchConfig& config, ModelKind model, const Dataset& data, const EpochCallback& on_epoch = {});

/// epoch,nll_term,kl_theta,kl_rho,total
void write_trace_csv(const std::vector<ElboEstimate>& trace, const std::string& path);
std::string trace_path_for(const std::string& checkpoint_path);

struct SummaryStat {
    double mean = 0.0;
    double spread = 0.0;  // 1.96 standard deviations
};

struct ViolationStats {
    std::string constraint;
    double mean = 0.0;
    double median = 0.0;
    double std = 0.0;
};

struct ToleranceSummary {
    std::string constraint;
    double mu_rho = 0.0;
    double sigma_rho = 0.0;
    double expected_r = 0.0;
    double std_r = 0.0;
};

/// E[r] and Std[r] for r = exp(rho), rho ~ N(mu, sigma^2).
ToleranceSummary lognormal_summary(const std::string& name, double mu_rho, double sigma_rho);

struct BenchmarkReport {
    ModelKind model = ModelKind::bcpnn;
    long test_points = 0;
    long draws = 0;
    SummaryStat mse;        // per-output test MSE against noisy targets, over outputs
    SummaryStat mse_truth;  // the same against noiseless targets
    SummaryStat cw;         // per-output mean credible width, over outputs
    double coverage = 0.0;  // fraction of (point, output) pairs inside the interval
    SummaryStat aleatoric;
    SummaryStat epistemic;
    std::vector<ViolationStats> violations;  // per constraint, normalized units
    double aggregate_violation_mean = 0.0;   // mean over samples of the summed per-constraint violation
    std::vector<ToleranceSummary> tolerances;
    long failures = 0;
};

nlohmann::json to_json(const BenchmarkReport& report);

/// Runs the full evaluation on the test split. When `out_dir` is set, writes
/// report.json, metrics.csv, predictions.csv, violations.csv and
/// violation_histogram.csv there.
BenchmarkReport evaluate_checkpoint(const Checkpoint& ckpt, const Dataset& data, const std::optional<std::string>& out_dir,
                                    std::optional<int> samples = std::nullopt);

struct DecompositionReport {
    std::vector<VarianceDecomposition> per_point;  // test split order
    VarianceDecomposition mean;                    // term-wise average over test points
    long inconsistent_points = 0;                  // points whose five-term sum misses total by > 3 SE
    double max_sum_gap_in_se = 0.0;
};

/// Decomposition on every test point; writes decomposition.csv and
/// decomposition_points.csv when `out_dir` is set.
DecompositionReport decompose_checkpoint(const Checkpoint& ckpt, const Dataset& data, bool conditioning,
                                         const std::optional<std::string>& out_dir, std::optional<int> samples = std::nullopt);

/// Freedman-Diaconis histogram over `values`: returns bin edges (size bins + 1) and counts.
void freedman_diaconis(std::vector<double> values, int max_bins, std::vector<double>& edges, std::vector<long>& counts);

/// Errors reading or validating a checkpoint against a dataset.
void require_compatible(const Checkpoint& ckpt, const Dataset& data);

}  // namespace bcpnn
