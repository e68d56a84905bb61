#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "bcpnn/conditioning.hpp"
#include "bcpnn/model.hpp"

namespace bcpnn {

/// One posterior draw (theta, r) evaluated at one input.
struct PointDraw {
    VectorXd prior_mean;  // mu_P
    VectorXd prior_var;   // var_P
    VectorXd mean;        // mu_C (= mu_P without conditioning)
    VectorXd var;         // var_C
    VectorXd reduction;   // diag(K S K^T), zero without conditioning
};

struct SweepOptions {
    int n_draws = 10000;
    std::uint64_t seed = 0;
    /// When false, predictions skip the conditioning layer (the r -> infinity limit).
    bool conditioning = true;
};

/// Too many draws failed to condition.
class PredictionError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Largest tolerated fraction of failed (draw, input) evaluations.
inline constexpr double kMaxFailureFraction = 0.01;

/// Draws (theta, r) ~ q n_draws times and evaluates every input column under
/// each draw, calling `visit(draw, column, result)` in a fixed order.
///
/// Draw d uses an RNG seeded from (seed, d), so results do not depend on how
/// the sweep is chunked. Conditioning failures are skipped; more than 1% of
/// failures raises PredictionError. Returns the number of failures.
long sweep_posterior(const VariationalState& vs, const ConstraintSystem* constraints, const MatrixXd& inputs,
                     const SweepOptions& options, const std::function<void(int, Eigen::Index, const PointDraw&)>& visit);

/// Per-draw conditioned Gaussians and their pooled moments at a single input.
struct Predictive {
    std::vector<PointDraw> draws;
    VectorXd mean;  // average of mu_C
    VectorXd var;   // E[var_C] + Var[mu_C] (n - 1 estimator)
    long failures = 0;
};

Predictive predict(const VariationalState& vs, const ConstraintSystem* constraints, const VectorXd& x, int n_samples,
                   std::uint64_t seed, bool conditioning = true);

struct VarianceDecomposition {
    VectorXd aleatoric;              // E[var_P]
    VectorXd constraint_reduction;   // E[diag(K S K^T)], subtracted
    VectorXd epistemic;              // Var[mu_P]
    VectorXd tolerance_uncertainty;  // Var[Delta], Delta = mu_C - mu_P
    VectorXd interaction;            // 2 Cov[mu_P, Delta]
    VectorXd total;                  // pooled predictive variance
    VectorXd total_standard_error;   // Monte Carlo standard error of `total`
    long draws = 0;

    /// aleatoric - constraint_reduction + epistemic + tolerance_uncertainty + interaction.
    VectorXd sum_of_terms() const;
};

/// Streaming moments over draws for a fixed set of inputs.
///
/// Sums are taken about the first draw's values so that small variances are
/// not lost to cancellation.
class DecompositionAccumulator {
public:
    DecompositionAccumulator(Eigen::Index outputs, Eigen::Index points);

    void add(Eigen::Index point, const PointDraw& d);

    Eigen::Index points() const { return count_.size(); }
    VarianceDecomposition decomposition(Eigen::Index point) const;
    VectorXd pooled_mean(Eigen::Index point) const;
    VectorXd pooled_var(Eigen::Index point) const;

private:
    Eigen::VectorXi count_;
    MatrixXd ref_p_, ref_d_;
    // Sums over draws of: a = var_C, s = var_P, k = reduction, p = mu_P - ref_p, d = Delta - ref_d.
    MatrixXd sa_, saa_, ss_, sk_, sp_, spp_, sd_, sdd_, spd_;
    // Needed for the standard error of the pooled variance, with c = p + d.
    MatrixXd sc3_, sc4_, sac_, sacc_;
};

VarianceDecomposition decompose(const VariationalState& vs, const ConstraintSystem* constraints, const VectorXd& x,
                                int n_samples, std::uint64_t seed, bool conditioning = true);

struct CoverageResult {
    Eigen::Array<bool, Eigen::Dynamic, 1> covered;
    VectorXd width;
};

/// Two-sided normal quantile for a central interval; 0.95 maps to 1.96.
double interval_multiplier(double level);

/// Central interval mean +/- z sqrt(var) from pooled moments.
CoverageResult coverage_and_width(const VectorXd& mean, const VectorXd& var, const VectorXd& y_true, double level = 0.95);
CoverageResult coverage_and_width(const Predictive& predictive, const VectorXd& y_true, double level = 0.95);

}  // namespace bcpnn
