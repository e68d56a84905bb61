#include "bcpnn/uncertainty.hpp"

#include <cmath>
#include <string>

namespace bcpnn {

long sweep_posterior(const VariationalState& vs, const ConstraintSystem* constraints, const MatrixXd& inputs,
                     const SweepOptions& options, const std::function<void(int, Eigen::Index, const PointDraw&)>& visit) {
    detail::require(options.n_draws >= 1, "predict: need at least one draw");
    detail::require(inputs.rows() == vs.architecture().input_dim, "predict: input dimension mismatch");
    const bool conditioned = options.conditioning && constraints != nullptr && vs.has_tolerance();
    if (conditioned)
        detail::require(constraints->num_constraints() == vs.num_constraints(), "predict: tolerance count differs from constraints");

    const Gaussian theta_q = vs.theta_q();
    const Gaussian rho_q = vs.rho_q();
    const Eigen::Index ny = vs.architecture().output_dim;
    const Eigen::Index points = inputs.cols();

    long failures = 0;
    PointDraw pd;
    for (int d = 0; d < options.n_draws; ++d) {
        std::seed_seq seq{static_cast<std::uint32_t>(options.seed), static_cast<std::uint32_t>(options.seed >> 32),
                          static_cast<std::uint32_t>(d)};
        Rng rng(seq);
        const VectorXd theta = sample_reparam(theta_q, standard_normal(rng, vs.num_weights()));
        VectorXd tol;
        if (vs.has_tolerance()) tol = sample_reparam(rho_q, standard_normal(rng, vs.num_constraints())).array().exp();

        const NetworkPass pass(vs.architecture(), theta, inputs);
        for (Eigen::Index i = 0; i < points; ++i) {
            pd.prior_mean = pass.mean().col(i);
            pd.prior_var = pass.var().col(i);
            if (conditioned) {
                try {
                    const auto cp = condition(Gaussian(pd.prior_mean, pd.prior_var), *constraints, inputs.col(i), tol);
                    pd.mean = cp.posterior.mean();
                    pd.var = cp.posterior.var();
                    pd.reduction = ((cp.gain * cp.schur).array() * cp.gain.array()).rowwise().sum();
                } catch (const ConditioningError&) {
                    ++failures;
                    continue;
                }
            } else {
                pd.mean = pd.prior_mean;
                pd.var = pd.prior_var;
                pd.reduction = VectorXd::Zero(ny);
            }
            visit(d, i, pd);
        }
    }
    if (double(failures) > kMaxFailureFraction * double(options.n_draws) * double(points))
        throw PredictionError(std::to_string(failures) + " of " + std::to_string(long(options.n_draws) * points) +
                              " posterior evaluations failed to condition");
    return failures;
}

Predictive predict(const VariationalState& vs, const ConstraintSystem* constraints, const VectorXd& x, int n_samples,
                   std::uint64_t seed, bool conditioning) {
    Predictive out;
    out.failures = sweep_posterior(vs, constraints, x, {n_samples, seed, conditioning},
                                   [&](int, Eigen::Index, const PointDraw& d) { out.draws.push_back(d); });

    const Eigen::Index ny = vs.architecture().output_dim;
    const double n = double(out.draws.size());
    out.mean = VectorXd::Zero(ny);
    VectorXd mean_var = VectorXd::Zero(ny);
    for (const auto& d : out.draws) {
        out.mean += d.mean;
        mean_var += d.var;
    }
    out.mean /= n;
    mean_var /= n;
    VectorXd spread = VectorXd::Zero(ny);
    if (out.draws.size() > 1) {
        for (const auto& d : out.draws) spread += (d.mean - out.mean).cwiseAbs2();
        spread /= (n - 1.0);
    }
    out.var = mean_var + spread;
    return out;
}

VectorXd VarianceDecomposition::sum_of_terms() const {
    return aleatoric - constraint_reduction + epistemic + tolerance_uncertainty + interaction;
}

DecompositionAccumulator::DecompositionAccumulator(Eigen::Index outputs, Eigen::Index points)
    : count_(Eigen::VectorXi::Zero(points)) {
    for (MatrixXd* m : {&ref_p_, &ref_d_, &sa_, &saa_, &ss_, &sk_, &sp_, &spp_, &sd_, &sdd_, &spd_, &sc3_, &sc4_, &sac_, &sacc_})
        *m = MatrixXd::Zero(outputs, points);
}

void DecompositionAccumulator::add(Eigen::Index point, const PointDraw& draw) {
    if (count_[point] == 0) {
        ref_p_.col(point) = draw.prior_mean;
        ref_d_.col(point) = draw.mean - draw.prior_mean;
    }
    ++count_[point];
    for (Eigen::Index i = 0; i < sa_.rows(); ++i) {
        const double a = draw.var[i];
        const double p = draw.prior_mean[i] - ref_p_(i, point);
        const double d = (draw.mean[i] - draw.prior_mean[i]) - ref_d_(i, point);
        const double c = p + d;
        sa_(i, point) += a;
        saa_(i, point) += a * a;
        ss_(i, point) += draw.prior_var[i];
        sk_(i, point) += draw.reduction[i];
        sp_(i, point) += p;
        spp_(i, point) += p * p;
        sd_(i, point) += d;
        sdd_(i, point) += d * d;
        spd_(i, point) += p * d;
        sc3_(i, point) += c * c * c;
        sc4_(i, point) += c * c * c * c;
        sac_(i, point) += a * c;
        sacc_(i, point) += a * c * c;
    }
}

VarianceDecomposition DecompositionAccumulator::decomposition(Eigen::Index point) const {
    const double n = count_[point];
    const double dof = n > 1 ? n - 1.0 : 1.0;
    const auto col = [point](const MatrixXd& m) { return m.col(point).array(); };

    VarianceDecomposition out;
    out.draws = count_[point];
    out.aleatoric = col(ss_) / n;
    out.constraint_reduction = col(sk_) / n;
    out.epistemic = (col(spp_) - col(sp_).square() / n) / dof;
    out.tolerance_uncertainty = (col(sdd_) - col(sd_).square() / n) / dof;
    out.interaction = 2.0 * (col(spd_) - col(sp_) * col(sd_) / n) / dof;
    out.total = pooled_var(point);

    // Delta-method standard error of E[var_C] + Var[mu_C], t = var_C + (mu_C - mean)^2.
    const Eigen::ArrayXd sc = col(sp_) + col(sd_);
    const Eigen::ArrayXd scc = col(spp_) + 2.0 * col(spd_) + col(sdd_);
    const Eigen::ArrayXd mc = sc / n;
    const Eigen::ArrayXd m2 = scc / n - mc.square();
    const Eigen::ArrayXd m4 = col(sc4_) / n - 4.0 * mc * col(sc3_) / n + 6.0 * mc.square() * scc / n - 3.0 * mc.square().square();
    const Eigen::ArrayXd a_c2 = col(sacc_) / n - 2.0 * mc * col(sac_) / n + mc.square() * col(sa_) / n;
    const Eigen::ArrayXd et = col(sa_) / n + m2;
    const Eigen::ArrayXd et2 = col(saa_) / n + 2.0 * a_c2 + m4;
    out.total_standard_error = ((et2 - et.square()).max(0.0) / n).sqrt();
    return out;
}

VectorXd DecompositionAccumulator::pooled_mean(Eigen::Index point) const {
    const double n = count_[point];
    return ref_p_.col(point) + ref_d_.col(point) + (sp_.col(point) + sd_.col(point)) / n;
}

VectorXd DecompositionAccumulator::pooled_var(Eigen::Index point) const {
    const double n = count_[point];
    const double dof = n > 1 ? n - 1.0 : 1.0;
    const auto col = [point](const MatrixXd& m) { return m.col(point).array(); };
    const Eigen::ArrayXd var_p = (col(spp_) - col(sp_).square() / n) / dof;
    const Eigen::ArrayXd var_d = (col(sdd_) - col(sd_).square() / n) / dof;
    const Eigen::ArrayXd cov = (col(spd_) - col(sp_) * col(sd_) / n) / dof;
    return (col(sa_) / n + var_p + var_d + 2.0 * cov).matrix();
}

VarianceDecomposition decompose(const VariationalState& vs, const ConstraintSystem* constraints, const VectorXd& x,
                                int n_samples, std::uint64_t seed, bool conditioning) {
    detail::require(n_samples >= 100, "decompose: need at least 100 draws");
    DecompositionAccumulator acc(vs.architecture().output_dim, 1);
    sweep_posterior(vs, constraints, x, {n_samples, seed, conditioning},
                    [&](int, Eigen::Index, const PointDraw& d) { acc.add(0, d); });
    return acc.decomposition(0);
}

double interval_multiplier(double level) {
    detail::require(level > 0.0 && level < 1.0, "interval level must lie in (0, 1)");
    if (level == 0.95) return 1.96;
    // Solve erf(z / sqrt 2) = level by bisection.
    double lo = 0.0, hi = 40.0;
    for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        (std::erf(mid / std::sqrt(2.0)) < level ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

CoverageResult coverage_and_width(const VectorXd& mean, const VectorXd& var, const VectorXd& y_true, double level) {
    detail::require(mean.size() == var.size() && mean.size() == y_true.size(), "coverage: dimension mismatch");
    const double z = interval_multiplier(level);
    const Eigen::ArrayXd half = z * var.array().sqrt();
    CoverageResult out;
    out.width = 2.0 * half;
    out.covered = (y_true - mean).array().abs() <= half;
    return out;
}

CoverageResult coverage_and_width(const Predictive& predictive, const VectorXd& y_true, double level) {
    return coverage_and_width(predictive.mean, predictive.var, y_true, level);
}

}  // namespace bcpnn
