#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "bcpnn/conditioning.hpp"
#include "bcpnn/model.hpp"

namespace bcpnn {

/// Records as columns: inputs is n_x x N, targets n_y x N.
struct Batch {
    MatrixXd inputs;
    MatrixXd targets;

    Eigen::Index size() const { return inputs.cols(); }
    Batch select(const std::vector<Eigen::Index>& columns) const;
};

struct ElboEstimate {
    double nll_term = 0.0;  // expected negative log-likelihood, rescaled to the full dataset
    double kl_theta = 0.0;
    double kl_rho = 0.0;
    double total = 0.0;
};

enum class KlScaling {
    full,                    // N/|batch| * batch NLL + full KL every step
    minibatch_proportional,  // batch NLL + |batch|/N * KL
};

std::string to_string(KlScaling k);
KlScaling kl_scaling_from_string(const std::string& name);

struct TrainConfig {
    int epochs = 300;
    int batch_size = 64;
    double learning_rate = 1e-3;
    int mc_samples = 4;
    std::uint64_t seed = 0;
    KlScaling kl_scaling = KlScaling::full;
    double grad_clip = 10.0;

    void validate() const;
};

/// Standard-normal draws for each Monte Carlo sample: one weight vector and one
/// log-tolerance vector per sample. Fixing them makes the objective deterministic.
struct NoiseDraws {
    std::vector<VectorXd> theta;
    std::vector<VectorXd> rho;

    std::size_t size() const { return theta.size(); }
};

NoiseDraws draw_noise(const VariationalState& vs, int samples, Rng& rng);

/// Numerical breakdown during training; carries the last finite state.
class TrainingError : public std::runtime_error {
public:
    TrainingError(const std::string& what, VariationalState last_good, std::vector<ElboEstimate> trace)
        : std::runtime_error(what), last_good_(std::move(last_good)), trace_(std::move(trace)) {}

    const VariationalState& last_good() const { return last_good_; }
    const std::vector<ElboEstimate>& trace() const { return trace_; }

private:
    VariationalState last_good_;
    std::vector<ElboEstimate> trace_;
};

/// Value and gradient of the sampled negative ELBO with respect to `VariationalState::flatten()`.
struct ElboGradient {
    ElboEstimate value;
    VectorXd gradient;
};

/// Monte Carlo estimate of the negative ELBO on a minibatch.
///
/// `constraints` is null for a plain BNN; otherwise every prediction is
/// conditioned on its own constraint residual before the likelihood is taken.
/// `dataset_size` is N, the number of records the minibatch stands in for.
ElboEstimate elbo_estimate(const VariationalState& vs, const Batch& batch, const ConstraintSystem* constraints,
                           const TrainConfig& config, Eigen::Index dataset_size, Rng& rng);

/// The same estimator evaluated at fixed noise, plus its exact gradient.
ElboGradient grad_elbo(const VariationalState& vs, const Batch& batch, const ConstraintSystem* constraints,
                       const TrainConfig& config, Eigen::Index dataset_size, const NoiseDraws& noise);

/// Value only, at fixed noise.
ElboEstimate elbo_at(const VariationalState& vs, const Batch& batch, const ConstraintSystem* constraints,
                     const TrainConfig& config, Eigen::Index dataset_size, const NoiseDraws& noise);

class Adam {
public:
    explicit Adam(double learning_rate, double beta1 = 0.9, double beta2 = 0.999, double epsilon = 1e-8)
        : lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(epsilon) {}

    void step(VectorXd& params, const VectorXd& grad);

private:
    double lr_, beta1_, beta2_, eps_;
    long t_ = 0;
    VectorXd m_, v_;
};

struct TrainResult {
    VariationalState state;
    std::vector<ElboEstimate> trace;  // one entry per epoch, averaged over its steps
};

/// Optional per-epoch observer (epoch index, averaged estimate).
using EpochCallback = std::function<void(int, const ElboEstimate&)>;

/// Minibatch training with Adam and gradient-norm clipping. Deterministic for a fixed seed.
TrainResult train(VariationalState vs, const Batch& data, const ConstraintSystem* constraints,
                  const TrainConfig& config, const EpochCallback& on_epoch = {});

}  // namespace bcpnn
