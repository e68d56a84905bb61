#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "bcpnn/conditioning.hpp"
#include "bcpnn/gaussian.hpp"

namespace bcpnn {

using Rng = std::mt19937_64;

inline VectorXd standard_normal(Rng& rng, Eigen::Index n) {
    std::normal_distribution<double> dist;
    VectorXd out(n);
    for (Eigen::Index i = 0; i < n; ++i) out[i] = dist(rng);
    return out;
}

/// Numerically stable log(1 + exp(z)).
inline double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }
inline double sigmoid(double z) {
    if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}
/// Inverse of softplus for v > 0.
inline double softplus_inverse(double v) { return v > 30.0 ? v : std::log(std::expm1(v)); }

enum class Activation { tanh, relu, silu };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& name);

/// Fully connected network whose head emits n_y means followed by n_y raw variances.
struct NetworkArchitecture {
    int input_dim = 3;
    int output_dim = 8;
    std::vector<int> hidden_layers{64, 64};
    Activation activation = Activation::tanh;

    void validate() const;
    /// Layer widths including input and the 2 * n_y head.
    std::vector<int> widths() const;
    Eigen::Index num_parameters() const;

    friend bool operator==(const NetworkArchitecture&, const NetworkArchitecture&) = default;
};

nlohmann::json to_json(const NetworkArchitecture& arch);
NetworkArchitecture architecture_from_json(const nlohmann::json& j);

/// Floor added to the softplus variance head.
inline constexpr double kVarianceFloor = 1e-6;

/// Single-input forward pass: N(mu_P(x; theta), diag(var_P(x; theta))).
Gaussian forward(const NetworkArchitecture& arch, const VectorXd& theta, const VectorXd& x);

/// Batched forward pass with the activations kept for a backward sweep.
///
/// Inputs are columns of `inputs`; `mean()` and `var()` have one column per input.
class NetworkPass {
public:
    NetworkPass(const NetworkArchitecture& arch, const VectorXd& theta, const MatrixXd& inputs);

    const MatrixXd& mean() const { return mean_; }
    const MatrixXd& var() const { return var_; }

    /// Accumulates d loss / d theta given d loss / d mean and d loss / d var.
    VectorXd backward(const MatrixXd& grad_mean, const MatrixXd& grad_var) const;

private:
    std::vector<int> widths_;
    Activation activation_;
    VectorXd theta_;
    std::vector<MatrixXd> pre_;  // pre-activations, one per layer
    std::vector<MatrixXd> act_;  // act_[0] is the input; act_[l + 1] = f(pre_[l]) for hidden layers
    MatrixXd mean_;
    MatrixXd var_;
};

/// Mean-field variational posterior over network weights and log-tolerances rho (r = exp(rho)).
///
/// Variances are held as unconstrained values passed through softplus. A state
/// without constraints (plain BNN) has empty rho vectors.
class VariationalState {
public:
    VariationalState() = default;
    VariationalState(NetworkArchitecture arch, VectorXd theta_mean, VectorXd theta_raw_var, VectorXd rho_mean,
                     VectorXd rho_raw_var, Gaussian rho_prior);

    const NetworkArchitecture& architecture() const { return arch_; }
    Eigen::Index num_weights() const { return theta_mean_.size(); }
    Eigen::Index num_constraints() const { return rho_mean_.size(); }
    bool has_tolerance() const { return num_constraints() > 0; }
    /// Length of the flat variational parameter vector.
    Eigen::Index num_parameters() const { return 2 * (num_weights() + num_constraints()); }

    Gaussian theta_q() const;
    Gaussian rho_q() const;
    Gaussian theta_prior() const { return Gaussian::standard(num_weights()); }
    const Gaussian& rho_prior() const { return rho_prior_; }

    VectorXd& theta_mean() { return theta_mean_; }
    const VectorXd& theta_mean() const { return theta_mean_; }
    VectorXd& theta_raw_var() { return theta_raw_var_; }
    const VectorXd& theta_raw_var() const { return theta_raw_var_; }
    VectorXd& rho_mean() { return rho_mean_; }
    const VectorXd& rho_mean() const { return rho_mean_; }
    VectorXd& rho_raw_var() { return rho_raw_var_; }
    const VectorXd& rho_raw_var() const { return rho_raw_var_; }

    /// Flat view [theta_mean, theta_raw_var, rho_mean, rho_raw_var].
    VectorXd flatten() const;
    void assign(const VectorXd& flat);

    /// Collapses q(theta) to a point mass at its mean (zero variance).
    void make_theta_degenerate();
    /// Collapses q(rho) to a point mass at `rho`.
    void make_rho_degenerate(const VectorXd& rho);

    friend bool operator==(const VariationalState&, const VariationalState&) = default;

private:
    NetworkArchitecture arch_;
    VectorXd theta_mean_;
    VectorXd theta_raw_var_;
    VectorXd rho_mean_;
    VectorXd rho_raw_var_;
    Gaussian rho_prior_;
};

nlohmann::json to_json(const VariationalState& vs);
VariationalState variational_state_from_json(const nlohmann::json& j);

/// theta ~ q(theta) for fixed standard-normal noise.
VectorXd sample_weights(const VariationalState& vs, const VectorXd& eps);

/// r = exp(rho), rho ~ q(rho) for fixed standard-normal noise.
ToleranceVector sample_tolerance(const VariationalState& vs, const VectorXd& eps);

/// Initial variational weight variance.
inline constexpr double kInitialWeightVariance = 1e-4;

/// Weight means drawn from N(0, 1/fan_in), biases zero, weight variances 1e-4,
/// q(rho) placed at the prior. `num_constraints` = 0 yields a plain BNN state.
VariationalState init_variational(const NetworkArchitecture& arch, std::uint64_t seed, Eigen::Index num_constraints,
                                  const Gaussian& rho_prior);

/// Default tolerance prior: mean -2, variance 1 per constraint.
Gaussian default_rho_prior(Eigen::Index num_constraints);

}  // namespace bcpnn
