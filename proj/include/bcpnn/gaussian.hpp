#pragma once

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace bcpnn {

template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

using VectorXd = Eigen::VectorXd;
using MatrixXd = Eigen::MatrixXd;

/// Thrown when a caller breaks a size or domain precondition.
class ContractError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

namespace detail {
inline void require(bool ok, const std::string& what) {
    if (!ok) throw ContractError(what);
}
}  // namespace detail

/// Gaussian with diagonal covariance, stored as mean and per-dimension variance.
///
/// Construction accepts zero variances so that point-mass posteriors can be
/// sampled; `log_density` and `kl_divergence` demand strictly positive ones.
template <typename Scalar>
class DiagGaussian {
public:
    DiagGaussian() = default;

    DiagGaussian(Vec<Scalar> mean, Vec<Scalar> var) : mean_(std::move(mean)), var_(std::move(var)) {
        detail::require(mean_.size() == var_.size(), "DiagGaussian: mean and var differ in length");
        for (Eigen::Index i = 0; i < var_.size(); ++i) {
            using std::isfinite;
            detail::require(var_[i] >= Scalar(0) && isfinite(var_[i]),
                            "DiagGaussian: variance must be finite and non-negative");
        }
    }

    static DiagGaussian standard(Eigen::Index dim) {
        return DiagGaussian(Vec<Scalar>::Zero(dim), Vec<Scalar>::Ones(dim));
    }

    Eigen::Index dim() const { return mean_.size(); }
    const Vec<Scalar>& mean() const { return mean_; }
    const Vec<Scalar>& var() const { return var_; }
    bool strictly_positive() const { return dim() == 0 || var_.minCoeff() > Scalar(0); }

    friend bool operator==(const DiagGaussian& a, const DiagGaussian& b) {
        return a.mean_ == b.mean_ && a.var_ == b.var_;
    }

private:
    Vec<Scalar> mean_;
    Vec<Scalar> var_;
};

using Gaussian = DiagGaussian<double>;

template <typename Scalar, typename Derived>
Scalar log_density(const DiagGaussian<Scalar>& g, const Eigen::MatrixBase<Derived>& y) {
    detail::require(y.size() == g.dim(), "log_density: dimension mismatch");
    detail::require(g.strictly_positive(), "log_density: variance must be positive");
    using std::log;
    const Scalar two_pi = Scalar(2) * std::numbers::pi_v<double>;
    Scalar acc(0);
    for (Eigen::Index i = 0; i < g.dim(); ++i) {
        const Scalar d = y[i] - g.mean()[i];
        acc += -Scalar(0.5) * log(two_pi * g.var()[i]) - d * d / (Scalar(2) * g.var()[i]);
    }
    return acc;
}

/// KL(q || p) for diagonal Gaussians, summed over dimensions.
template <typename Scalar>
Scalar kl_divergence(const DiagGaussian<Scalar>& q, const DiagGaussian<Scalar>& p) {
    detail::require(q.dim() == p.dim(), "kl_divergence: dimension mismatch");
    detail::require(q.strictly_positive() && p.strictly_positive(), "kl_divergence: variance must be positive");
    using std::log;
    Scalar acc(0);
    for (Eigen::Index i = 0; i < q.dim(); ++i) {
        const Scalar vq = q.var()[i];
        const Scalar vp = p.var()[i];
        const Scalar dm = p.mean()[i] - q.mean()[i];
        acc += Scalar(0.5) * (vq / vp + dm * dm / vp - Scalar(1) + log(vp / vq));
    }
    return acc;
}

template <typename Scalar>
Scalar entropy(const DiagGaussian<Scalar>& g) {
    detail::require(g.strictly_positive(), "entropy: variance must be positive");
    using std::log;
    const Scalar c = Scalar(2) * std::numbers::pi_v<double> * std::numbers::e_v<double>;
    return Scalar(0.5) * (c * g.var().array()).log().sum();
}

/// mean + sqrt(var) * eps, the reparameterized draw for externally supplied noise.
template <typename Scalar, typename Derived>
Vec<Scalar> sample_reparam(const DiagGaussian<Scalar>& g, const Eigen::MatrixBase<Derived>& eps) {
    detail::require(eps.size() == g.dim(), "sample_reparam: dimension mismatch");
    return g.mean() + (g.var().array().sqrt() * eps.derived().template cast<Scalar>().array()).matrix();
}

}  // namespace bcpnn
