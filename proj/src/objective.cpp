#include "bcpnn/objective.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace bcpnn {

Batch Batch::select(const std::vector<Eigen::Index>& columns) const {
    Batch out{MatrixXd(inputs.rows(), Eigen::Index(columns.size())), MatrixXd(targets.rows(), Eigen::Index(columns.size()))};
    for (std::size_t k = 0; k < columns.size(); ++k) {
        out.inputs.col(Eigen::Index(k)) = inputs.col(columns[k]);
        out.targets.col(Eigen::Index(k)) = targets.col(columns[k]);
    }
    return out;
}

std::string to_string(KlScaling k) { return k == KlScaling::full ? "full" : "minibatch-proportional"; }

KlScaling kl_scaling_from_string(const std::string& name) {
    if (name == "full") return KlScaling::full;
    if (name == "minibatch-proportional") return KlScaling::minibatch_proportional;
    throw ContractError("unknown kl_scaling '" + name + "'");
}

void TrainConfig::validate() const {
    detail::require(epochs > 0, "train: epochs must be positive");
    detail::require(batch_size > 0, "train: batch_size must be positive");
    detail::require(learning_rate > 0, "train: learning_rate must be positive");
    detail::require(mc_samples > 0, "train: mc_samples must be positive");
    detail::require(grad_clip > 0, "train: grad_clip must be positive");
}

NoiseDraws draw_noise(const VariationalState& vs, int samples, Rng& rng) {
    NoiseDraws noise;
    for (int s = 0; s < samples; ++s) {
        noise.theta.push_back(standard_normal(rng, vs.num_weights()));
        noise.rho.push_back(standard_normal(rng, vs.num_constraints()));
    }
    return noise;
}

namespace {

constexpr double kLogTwoPi = 1.8378770664093454835606594728112;

// d sqrt(softplus(raw)) / d raw, zero for a point mass.
double sqrt_softplus_slope(double raw) {
    const double v = softplus(raw);
    return v > 0.0 ? sigmoid(raw) / (2.0 * std::sqrt(v)) : 0.0;
}

// KL(q || p) for a softplus-parameterized q, with gradients into (mean, raw_var).
double kl_with_grad(const VectorXd& mean, const VectorXd& raw, const Gaussian& prior, double weight,
                    VectorXd* g_mean, VectorXd* g_raw) {
    const Eigen::Index n = mean.size();
    double kl = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const double vq = softplus(raw[i]);
        if (!(vq > 0.0)) return std::numeric_limits<double>::infinity();
        const double vp = prior.var()[i];
        const double dm = mean[i] - prior.mean()[i];
        kl += 0.5 * (vq / vp + dm * dm / vp - 1.0 + std::log(vp / vq));
        if (g_mean) {
            (*g_mean)[i] += weight * dm / vp;
            (*g_raw)[i] += weight * 0.5 * (1.0 / vp - 1.0 / vq) * sigmoid(raw[i]);
        }
    }
    return kl;
}

ElboEstimate evaluate(const VariationalState& vs, const Batch& batch, const ConstraintSystem* cs,
                      const TrainConfig& config, Eigen::Index dataset_size, const NoiseDraws& noise, VectorXd* grad) {
    const Eigen::Index nb = batch.size();
    detail::require(nb > 0, "elbo: batch must be nonempty");
    detail::require(dataset_size >= nb, "elbo: dataset size smaller than the batch");
    detail::require(noise.size() > 0 && noise.rho.size() == noise.size(), "elbo: need at least one noise draw");
    detail::require(batch.targets.cols() == nb && batch.targets.rows() == vs.architecture().output_dim,
                    "elbo: targets do not match the architecture");
    if (cs) {
        detail::require(vs.num_constraints() == cs->num_constraints(), "elbo: tolerance count differs from constraints");
        detail::require(cs->output_dim() == vs.architecture().output_dim && cs->input_dim() == vs.architecture().input_dim,
                        "elbo: constraint system does not match the architecture");
    }

    const bool full = config.kl_scaling == KlScaling::full;
    const double nll_scale = (full ? double(dataset_size) / double(nb) : 1.0) / double(noise.size());
    const double kl_weight = full ? 1.0 : double(nb) / double(dataset_size);

    const Eigen::Index nw = vs.num_weights(), m = vs.num_constraints();
    VectorXd g_theta_mean, g_theta_raw, g_rho_mean, g_rho_raw;
    if (grad) {
        g_theta_mean = VectorXd::Zero(nw);
        g_theta_raw = VectorXd::Zero(nw);
        g_rho_mean = VectorXd::Zero(m);
        g_rho_raw = VectorXd::Zero(m);
    }

    const Gaussian theta_q = vs.theta_q();
    const Gaussian rho_q = vs.rho_q();
    const Eigen::Index ny = vs.architecture().output_dim;

    double nll_sum = 0.0;
    for (std::size_t s = 0; s < noise.size(); ++s) {
        detail::require(noise.theta[s].size() == nw && noise.rho[s].size() == m, "elbo: noise draw has the wrong length");
        const VectorXd theta = sample_reparam(theta_q, noise.theta[s]);
        VectorXd rho, tol;
        if (cs) {
            rho = sample_reparam(rho_q, noise.rho[s]);
            tol = rho.array().exp();
        }
        const NetworkPass pass(vs.architecture(), theta, batch.inputs);

        MatrixXd g_mean, g_var;
        VectorXd g_tol;
        if (grad) {
            g_mean.resize(ny, nb);
            g_var.resize(ny, nb);
            g_tol = VectorXd::Zero(m);
        }
        for (Eigen::Index i = 0; i < nb; ++i) {
            const auto y = batch.targets.col(i);
            if (cs) {
                const Gaussian prior(pass.mean().col(i), pass.var().col(i));
                const auto cp = condition(prior, *cs, batch.inputs.col(i), tol);
                const VectorXd& mu = cp.posterior.mean();
                const VectorXd& v = cp.posterior.var();
                const VectorXd diff = y - mu;
                nll_sum += 0.5 * (kLogTwoPi * double(ny) + v.array().log().sum() + (diff.array().square() / v.array()).sum());
                if (grad) {
                    const VectorXd gm = -(diff.array() / v.array()).matrix();
                    const VectorXd gv = (0.5 / v.array() - 0.5 * diff.array().square() / v.array().square()).matrix();
                    const auto g = condition_vjp(cp, *cs, gm, gv);
                    g_mean.col(i) = g.mean;
                    g_var.col(i) = g.var;
                    g_tol += g.tol;
                }
            } else {
                const auto mu = pass.mean().col(i);
                const auto v = pass.var().col(i);
                const VectorXd diff = y - mu;
                nll_sum += 0.5 * (kLogTwoPi * double(ny) + v.array().log().sum() + (diff.array().square() / v.array()).sum());
                if (grad) {
                    g_mean.col(i) = -(diff.array() / v.array()).matrix();
                    g_var.col(i) = (0.5 / v.array() - 0.5 * diff.array().square() / v.array().square()).matrix();
                }
            }
        }

        if (grad) {
            const VectorXd g_theta = nll_scale * pass.backward(g_mean, g_var);
            g_theta_mean += g_theta;
            for (Eigen::Index k = 0; k < nw; ++k)
                g_theta_raw[k] += g_theta[k] * noise.theta[s][k] * sqrt_softplus_slope(vs.theta_raw_var()[k]);
            if (cs) {
                const VectorXd g_rho = nll_scale * g_tol.cwiseProduct(tol);
                g_rho_mean += g_rho;
                for (Eigen::Index j = 0; j < m; ++j)
                    g_rho_raw[j] += g_rho[j] * noise.rho[s][j] * sqrt_softplus_slope(vs.rho_raw_var()[j]);
            }
        }
    }

    ElboEstimate est;
    est.nll_term = nll_scale * nll_sum;
    est.kl_theta = kl_weight * kl_with_grad(vs.theta_mean(), vs.theta_raw_var(), vs.theta_prior(), kl_weight,
                                            grad ? &g_theta_mean : nullptr, grad ? &g_theta_raw : nullptr);
    if (cs)
        est.kl_rho = kl_weight * kl_with_grad(vs.rho_mean(), vs.rho_raw_var(), vs.rho_prior(), kl_weight,
                                              grad ? &g_rho_mean : nullptr, grad ? &g_rho_raw : nullptr);
    est.total = est.nll_term + est.kl_theta + est.kl_rho;

    if (grad) {
        grad->resize(vs.num_parameters());
        *grad << g_theta_mean, g_theta_raw, g_rho_mean, g_rho_raw;
    }
    return est;
}

}  // namespace

ElboEstimate elbo_estimate(const VariationalState& vs, const Batch& batch, const ConstraintSystem* constraints,
                           const TrainConfig& config, Eigen::Index dataset_size, Rng& rng) {
    return elbo_at(vs, batch, constraints, config, dataset_size, draw_noise(vs, config.mc_samples, rng));
}

ElboEstimate elbo_at(const VariationalState& vs, const Batch& batch, const ConstraintSystem* constraints,
                     const TrainConfig& config, Eigen::Index dataset_size, const NoiseDraws& noise) {
    return evaluate(vs, batch, constraints, config, dataset_size, noise, nullptr);
}

ElboGradient grad_elbo(const VariationalState& vs, const Batch& batch, const ConstraintSystem* constraints,
                       const TrainConfig& config, Eigen::Index dataset_size, const NoiseDraws& noise) {
    ElboGradient out;
    out.value = evaluate(vs, batch, constraints, config, dataset_size, noise, &out.gradient);
    return out;
}

void Adam::step(VectorXd& params, const VectorXd& grad) {
    if (m_.size() != params.size()) {
        m_ = VectorXd::Zero(params.size());
        v_ = VectorXd::Zero(params.size());
        t_ = 0;
    }
    ++t_;
    m_ = beta1_ * m_ + (1.0 - beta1_) * grad;
    v_ = beta2_ * v_ + (1.0 - beta2_) * grad.cwiseAbs2();
    const double c1 = 1.0 - std::pow(beta1_, double(t_));
    const double c2 = 1.0 - std::pow(beta2_, double(t_));
    params.array() -= lr_ * (m_.array() / c1) / ((v_.array() / c2).sqrt() + eps_);
}

namespace {
bool finite(const ElboEstimate& e) {
    return std::isfinite(e.nll_term) && std::isfinite(e.kl_theta) && std::isfinite(e.kl_rho) && std::isfinite(e.total);
}
}  // namespace

TrainResult train(VariationalState vs, const Batch& data, const ConstraintSystem* constraints, const TrainConfig& config,
                  const EpochCallback& on_epoch) {
    config.validate();
    detail::require(data.size() > 0, "train: training split is empty");
    detail::require((constraints != nullptr) == vs.has_tolerance(),
                    "train: constraint system must be given exactly when the state carries tolerances");

    Rng rng(config.seed);
    Adam adam(config.learning_rate);
    std::vector<ElboEstimate> trace;
    std::vector<Eigen::Index> order(static_cast<std::size_t>(data.size()));
    std::iota(order.begin(), order.end(), Eigen::Index(0));
    const Eigen::Index n = data.size();
    const auto batch_size = static_cast<std::size_t>(std::min<Eigen::Index>(config.batch_size, n));

    VectorXd params = vs.flatten();
    VariationalState last_good = vs;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        ElboEstimate acc;
        int steps = 0;
        for (std::size_t start = 0; start < order.size(); start += batch_size) {
            const std::size_t stop = std::min(order.size(), start + batch_size);
            const Batch batch = data.select(std::vector<Eigen::Index>(order.begin() + long(start), order.begin() + long(stop)));
            const NoiseDraws noise = draw_noise(vs, config.mc_samples, rng);
            ElboGradient eg = grad_elbo(vs, batch, constraints, config, n, noise);
            if (!finite(eg.value) || !eg.gradient.allFinite())
                throw TrainingError("non-finite objective at epoch " + std::to_string(epoch) + ", step " + std::to_string(steps) +
                                        " (nll " + std::to_string(eg.value.nll_term) + ", kl_theta " +
                                        std::to_string(eg.value.kl_theta) + ", kl_rho " + std::to_string(eg.value.kl_rho) + ")",
                                    last_good, trace);
            const double norm = eg.gradient.norm();
            if (norm > config.grad_clip) eg.gradient *= config.grad_clip / norm;
            adam.step(params, eg.gradient);
            vs.assign(params);

            acc.nll_term += eg.value.nll_term;
            acc.kl_theta += eg.value.kl_theta;
            acc.kl_rho += eg.value.kl_rho;
            ++steps;
        }
        acc.nll_term /= steps;
        acc.kl_theta /= steps;
        acc.kl_rho /= steps;
        acc.total = acc.nll_term + acc.kl_theta + acc.kl_rho;
        trace.push_back(acc);
        last_good = vs;
        if (on_epoch) on_epoch(epoch, acc);
    }
    return {std::move(vs), std::move(trace)};
}

}  // namespace bcpnn
