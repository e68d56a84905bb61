#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "bcpnn/conditioning.hpp"
#include "bcpnn/objective.hpp"

namespace bcpnn {

inline constexpr int kNumInputs = 3;
inline constexpr int kNumOutputs = 8;
inline const std::array<std::string, kNumInputs> kInputNames{"I", "SOC", "T"};
inline const std::array<std::string, kNumOutputs> kOutputNames{"V",     "V_ocv", "eta_p", "eta_n",
                                                               "dV_ir", "Q_tot", "Q_rev", "Q_irr"};
inline const std::array<std::string, 2> kConstraintNames{"kirchhoff_voltage", "energy_balance"};
inline constexpr const char* kSurrogateVersion = "analytic-spm-surrogate/1";

/// Grid and noise settings for the battery surrogate.
///
/// Currents in A, temperatures in K, noise standard deviations in V for the
/// five voltage outputs and W m^-3 for the three heat outputs.
struct SurrogateSpec {
    std::vector<double> currents{0.5, 1.0, 1.5, 2.0, 2.5, 3.0};
    std::vector<double> temperatures{273, 283, 293, 298, 303, 313, 318};
    int soc_points = 500;
    double soc_min = 0.05;
    double soc_max = 0.95;
    double voltage_noise = 0.003;
    double thermal_noise = 0.040;
    std::uint64_t seed = 42;

    void validate() const;
    /// Per-output noise standard deviation, in output order.
    VectorXd noise_std() const;
};

nlohmann::json to_json(const SurrogateSpec& spec);
SurrogateSpec surrogate_spec_from_json(const nlohmann::json& j);

/// Noiseless surrogate outputs (V, V_ocv, eta_p, eta_n, dV_ir, Q_tot, Q_rev, Q_irr)
/// at current I [A], state of charge SOC and temperature T [K]. V and Q_tot are
/// assembled from the Kirchhoff and energy-balance identities.
VectorXd surrogate_truth(double current, double soc, double temperature);

/// Kirchhoff voltage law and energy balance, B y = 0, in physical units.
ConstraintSystem physical_constraints();

enum class Split { train, val, test };
std::string to_string(Split s);
Split split_from_string(const std::string& s);

/// Per-variable affine normalization fitted on the training split.
struct NormalizationStats {
    VectorXd input_mean, input_std;
    VectorXd output_mean, output_std;

    friend bool operator==(const NormalizationStats&, const NormalizationStats&) = default;
};

nlohmann::json to_json(const NormalizationStats& stats);
NormalizationStats normalization_stats_from_json(const nlohmann::json& j);

/// Column-wise mean and sample standard deviation; throws on zero spread.
void fit_affine(const MatrixXd& columns, VectorXd& mean, VectorXd& std);

MatrixXd normalize(const MatrixXd& columns, const VectorXd& mean, const VectorXd& std);
MatrixXd denormalize(const MatrixXd& columns, const VectorXd& mean, const VectorXd& std);

/// Constraint system expressed in normalized coordinates, with each row
/// rescaled so that its B part has unit Euclidean norm.
struct NormalizedConstraints {
    ConstraintSystem system;
    VectorXd row_scale;  // normalized residual = physical residual / row_scale
};

NormalizedConstraints normalize_constraints(const ConstraintSystem& physical, const NormalizationStats& stats);

struct Dataset {
    MatrixXd inputs;   // raw, 3 x N
    MatrixXd targets;  // noisy raw, 8 x N
    MatrixXd truth;    // noiseless raw, 8 x N
    std::vector<Split> split;
    NormalizationStats stats;
    SurrogateSpec spec;

    Eigen::Index size() const { return inputs.cols(); }
    std::vector<Eigen::Index> indices(Split s) const;
    /// Normalized inputs and targets of one split.
    Batch normalized(Split s) const;
    /// Normalized noiseless targets of one split.
    MatrixXd normalized_truth(Split s) const;
};

/// Full grid with seeded noise, a seeded 60/20/20 shuffle split and
/// normalization fitted on the training records.
Dataset generate(const SurrogateSpec& spec);

/// CSV plus companion JSON (same stem, `.json`).
void write_dataset(const Dataset& data, const std::string& csv_path);
Dataset read_dataset(const std::string& csv_path);
std::string companion_json_path(const std::string& csv_path);

/// Shortest text that parses back to the same double.
std::string format_double(double v);

}  // namespace bcpnn
