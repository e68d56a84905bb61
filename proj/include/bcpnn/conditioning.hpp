#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>
#include <json.hpp>

#include "bcpnn/gaussian.hpp"

namespace bcpnn {

/// The Schur factor could not be factorized, even after jitter.
class ConditioningError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// m linear equalities A x + B y = b tying inputs x to outputs y.
///
/// Immutable once built. B must have full row rank: the smallest singular value
/// relative to the largest has to exceed `kRankThreshold`.
class ConstraintSystem {
public:
    static constexpr double kRankThreshold = 1e-10;

    ConstraintSystem(MatrixXd A, MatrixXd B, VectorXd b);

    Eigen::Index num_constraints() const { return B_.rows(); }
    Eigen::Index input_dim() const { return A_.cols(); }
    Eigen::Index output_dim() const { return B_.cols(); }

    const MatrixXd& A() const { return A_; }
    const MatrixXd& B() const { return B_; }
    const VectorXd& b() const { return b_; }

    friend bool operator==(const ConstraintSystem& l, const ConstraintSystem& r) {
        return l.A_ == r.A_ && l.B_ == r.B_ && l.b_ == r.b_;
    }

private:
    MatrixXd A_;
    MatrixXd B_;
    VectorXd b_;
};

nlohmann::json to_json(const ConstraintSystem& cs);
ConstraintSystem constraint_system_from_json(const nlohmann::json& j);

/// Per-constraint tolerance variances r, all strictly positive.
class ToleranceVector {
public:
    explicit ToleranceVector(VectorXd r) : r_(std::move(r)) {
        for (Eigen::Index j = 0; j < r_.size(); ++j)
            detail::require(r_[j] > 0.0 && std::isfinite(r_[j]), "ToleranceVector: entries must be positive and finite");
    }
    static ToleranceVector constant(Eigen::Index m, double value) { return ToleranceVector(VectorXd::Constant(m, value)); }

    Eigen::Index size() const { return r_.size(); }
    const VectorXd& values() const { return r_; }

private:
    VectorXd r_;
};

template <typename Scalar>
struct ConditionedPrediction {
    DiagGaussian<Scalar> prior;
    DiagGaussian<Scalar> posterior;
    Mat<Scalar> gain;      // K, n_y x m
    Mat<Scalar> schur;     // S, m x m
    Vec<Scalar> residual;  // b - A x - B mu_P
};

namespace detail {

/// Cholesky of S through its unit-diagonal scaling D^-1/2 S D^-1/2, so the
/// conditioning check is insensitive to per-constraint magnitudes.
template <typename Scalar>
class ScaledSpdSolver {
public:
    static constexpr double kMaxCondition = 1e12;

    explicit ScaledSpdSolver(const Mat<Scalar>& S) {
        using std::sqrt;
        const Eigen::Index m = S.rows();
        inv_sqrt_diag_.resize(m);
        for (Eigen::Index j = 0; j < m; ++j) {
            if (!(S(j, j) > Scalar(0))) throw ConditioningError("Schur factor has a nonpositive diagonal");
            inv_sqrt_diag_[j] = Scalar(1) / sqrt(S(j, j));
        }
        Mat<Scalar> scaled = inv_sqrt_diag_.asDiagonal() * S * inv_sqrt_diag_.asDiagonal();
        llt_.compute(scaled);
        if (llt_.info() != Eigen::Success || !well_conditioned()) {
            Scalar jitter = Scalar(1e-12) * scaled.trace() / Scalar(double(m));
            scaled.diagonal().array() += jitter;
            llt_.compute(scaled);
            if (llt_.info() != Eigen::Success || !well_conditioned())
                throw ConditioningError("Schur factor is numerically singular");
        }
    }

    template <typename Rhs>
    Mat<Scalar> solve(const Eigen::MatrixBase<Rhs>& rhs) const {
        Mat<Scalar> scaled_rhs = inv_sqrt_diag_.asDiagonal() * rhs;
        return inv_sqrt_diag_.asDiagonal() * llt_.solve(scaled_rhs);
    }

private:
    bool well_conditioned() const {
        const auto d = llt_.matrixLLT().diagonal();
        const Scalar lo = d.minCoeff();
        if (!(lo > Scalar(0))) return false;
        const Scalar ratio = d.maxCoeff() / lo;
        return ratio * ratio <= Scalar(kMaxCondition);
    }

    Vec<Scalar> inv_sqrt_diag_;
    Eigen::LLT<Mat<Scalar>> llt_;
};

}  // namespace detail

/// Conditions the diagonal prediction N(mu_P, diag(var_P)) on A x + B y - b + e = 0
/// with e ~ N(0, diag(r)), keeping only the diagonal of the conditioned covariance.
template <typename Scalar, typename XDerived>
ConditionedPrediction<Scalar> condition(const DiagGaussian<Scalar>& prior, const ConstraintSystem& cs,
                                        const Eigen::MatrixBase<XDerived>& x, const Vec<Scalar>& tol) {
    const Eigen::Index n = cs.output_dim();
    const Eigen::Index m = cs.num_constraints();
    detail::require(prior.dim() == n, "condition: prior dimension must equal n_y");
    detail::require(x.size() == cs.input_dim(), "condition: input dimension must equal n_x");
    detail::require(tol.size() == m, "condition: tolerance must have one entry per constraint");

    const Mat<Scalar> B = cs.B().template cast<Scalar>();
    const Vec<Scalar>& mu = prior.mean();
    const Vec<Scalar>& v = prior.var();

    Mat<Scalar> BV = B * v.asDiagonal();  // m x n
    Mat<Scalar> S = BV * B.transpose();
    S.diagonal() += tol;

    const detail::ScaledSpdSolver<Scalar> solver(S);
    Mat<Scalar> K = solver.solve(BV).transpose();  // n x m

    Vec<Scalar> residual = cs.b().template cast<Scalar>() - cs.A().template cast<Scalar>() * x.derived().template cast<Scalar>() - B * mu;
    Vec<Scalar> mean_c = mu + K * residual;

    // Joseph form: (I - K B) V (I - K B)^T + K R K^T keeps the diagonal non-negative.
    Mat<Scalar> IKB = Mat<Scalar>::Identity(n, n) - K * B;
    Vec<Scalar> var_c(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        Scalar acc(0);
        for (Eigen::Index j = 0; j < n; ++j) acc += IKB(i, j) * IKB(i, j) * v[j];
        for (Eigen::Index k = 0; k < m; ++k) acc += K(i, k) * K(i, k) * tol[k];
        var_c[i] = std::min(acc, v[i]);
    }

    return {prior, DiagGaussian<Scalar>(std::move(mean_c), std::move(var_c)), std::move(K), std::move(S),
            std::move(residual)};
}

template <typename Scalar, typename XDerived>
ConditionedPrediction<Scalar> condition(const DiagGaussian<Scalar>& prior, const ConstraintSystem& cs,
                                        const Eigen::MatrixBase<XDerived>& x, const ToleranceVector& tol) {
    return condition(prior, cs, x, Vec<Scalar>(tol.values().template cast<Scalar>()));
}

/// Gradients of a scalar loss with respect to the inputs of `condition`.
struct ConditioningGrad {
    VectorXd mean;  // d loss / d mu_P
    VectorXd var;   // d loss / d var_P
    VectorXd tol;   // d loss / d r
};

/// Vector-Jacobian product of `condition`: given d loss / d mu_C and d loss / d var_C,
/// returns the gradients with respect to mu_P, var_P and r.
ConditioningGrad condition_vjp(const ConditionedPrediction<double>& pred, const ConstraintSystem& cs,
                               const VectorXd& grad_mean_post, const VectorXd& grad_var_post);

/// A x + B y - b.
VectorXd residual(const ConstraintSystem& cs, const VectorXd& x, const VectorXd& y);

/// |A x + B y - b| per constraint.
VectorXd violation_magnitude(const ConstraintSystem& cs, const VectorXd& x, const VectorXd& y);

}  // namespace bcpnn
