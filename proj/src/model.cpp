#include "bcpnn/model.hpp"

#include <cmath>
#include <limits>

namespace bcpnn {

std::string to_string(Activation a) {
    switch (a) {
        case Activation::tanh: return "tanh";
        case Activation::relu: return "relu";
        case Activation::silu: return "silu";
    }
    return "tanh";
}

Activation activation_from_string(const std::string& name) {
    if (name == "tanh") return Activation::tanh;
    if (name == "relu") return Activation::relu;
    if (name == "silu") return Activation::silu;
    throw ContractError("unknown activation '" + name + "'");
}

void NetworkArchitecture::validate() const {
    detail::require(input_dim > 0, "architecture: input_dim must be positive");
    detail::require(output_dim > 0, "architecture: output_dim must be positive");
    for (int h : hidden_layers) detail::require(h > 0, "architecture: hidden widths must be positive");
}

std::vector<int> NetworkArchitecture::widths() const {
    std::vector<int> w{input_dim};
    w.insert(w.end(), hidden_layers.begin(), hidden_layers.end());
    w.push_back(2 * output_dim);
    return w;
}

Eigen::Index NetworkArchitecture::num_parameters() const {
    const auto w = widths();
    Eigen::Index n = 0;
    for (std::size_t l = 0; l + 1 < w.size(); ++l) n += Eigen::Index(w[l + 1]) * (w[l] + 1);
    return n;
}

nlohmann::json to_json(const NetworkArchitecture& arch) {
    return {{"input_dim", arch.input_dim},
            {"output_dim", arch.output_dim},
            {"hidden_layers", arch.hidden_layers},
            {"activation", to_string(arch.activation)}};
}

NetworkArchitecture architecture_from_json(const nlohmann::json& j) {
    NetworkArchitecture arch;
    arch.input_dim = j.value("input_dim", arch.input_dim);
    arch.output_dim = j.value("output_dim", arch.output_dim);
    arch.hidden_layers = j.value("hidden_layers", arch.hidden_layers);
    arch.activation = activation_from_string(j.value("activation", std::string("tanh")));
    arch.validate();
    return arch;
}

namespace {

void apply_activation(Activation a, const MatrixXd& pre, MatrixXd& out) {
    switch (a) {
        case Activation::tanh: out = pre.array().tanh(); break;
        case Activation::relu: out = pre.array().max(0.0); break;
        case Activation::silu: out = pre.unaryExpr([](double z) { return z * sigmoid(z); }); break;
    }
}

MatrixXd activation_derivative(Activation a, const MatrixXd& pre, const MatrixXd& act) {
    switch (a) {
        case Activation::tanh: return (1.0 - act.array().square()).matrix();
        case Activation::relu: return (pre.array() > 0.0).cast<double>().matrix();
        case Activation::silu:
            return pre.unaryExpr([](double z) {
                const double s = sigmoid(z);
                return s * (1.0 + z * (1.0 - s));
            });
    }
    return MatrixXd();
}

}  // namespace

NetworkPass::NetworkPass(const NetworkArchitecture& arch, const VectorXd& theta, const MatrixXd& inputs)
    : widths_(arch.widths()), activation_(arch.activation), theta_(theta) {
    detail::require(theta.size() == arch.num_parameters(), "forward: theta has the wrong length");
    detail::require(inputs.rows() == arch.input_dim, "forward: input dimension mismatch");

    const std::size_t layers = widths_.size() - 1;
    pre_.resize(layers);
    act_.resize(layers);
    act_[0] = inputs;
    Eigen::Index offset = 0;
    for (std::size_t l = 0; l < layers; ++l) {
        const int in = widths_[l], out = widths_[l + 1];
        Eigen::Map<const MatrixXd> W(theta_.data() + offset, out, in);
        Eigen::Map<const VectorXd> bias(theta_.data() + offset + Eigen::Index(out) * in, out);
        offset += Eigen::Index(out) * (in + 1);
        pre_[l].noalias() = W * act_[l];
        pre_[l].colwise() += bias;
        if (l + 1 < layers) apply_activation(activation_, pre_[l], act_[l + 1]);
    }

    const int ny = arch.output_dim;
    const MatrixXd& head = pre_.back();
    mean_ = head.topRows(ny);
    var_ = head.bottomRows(ny).unaryExpr([](double z) { return softplus(z) + kVarianceFloor; });
}

VectorXd NetworkPass::backward(const MatrixXd& grad_mean, const MatrixXd& grad_var) const {
    const Eigen::Index ny = mean_.rows();
    detail::require(grad_mean.rows() == ny && grad_mean.cols() == mean_.cols() && grad_var.rows() == ny &&
                        grad_var.cols() == mean_.cols(),
                    "backward: gradient shape mismatch");

    VectorXd grad(theta_.size());
    const std::size_t layers = widths_.size() - 1;

    MatrixXd delta(2 * ny, mean_.cols());
    delta.topRows(ny) = grad_mean;
    delta.bottomRows(ny) = grad_var.cwiseProduct(pre_.back().bottomRows(ny).unaryExpr([](double z) { return sigmoid(z); }));

    Eigen::Index offset = theta_.size();
    for (std::size_t l = layers; l-- > 0;) {
        const int in = widths_[l], out = widths_[l + 1];
        offset -= Eigen::Index(out) * (in + 1);
        Eigen::Map<MatrixXd> gW(grad.data() + offset, out, in);
        Eigen::Map<VectorXd> gb(grad.data() + offset + Eigen::Index(out) * in, out);
        gW.noalias() = delta * act_[l].transpose();
        gb = delta.rowwise().sum();
        if (l > 0) {
            Eigen::Map<const MatrixXd> W(theta_.data() + offset, out, in);
            MatrixXd back = W.transpose() * delta;
            delta = back.cwiseProduct(activation_derivative(activation_, pre_[l - 1], act_[l]));
        }
    }
    return grad;
}

Gaussian forward(const NetworkArchitecture& arch, const VectorXd& theta, const VectorXd& x) {
    NetworkPass pass(arch, theta, x);
    return Gaussian(pass.mean().col(0), pass.var().col(0));
}

VariationalState::VariationalState(NetworkArchitecture arch, VectorXd theta_mean, VectorXd theta_raw_var,
                                   VectorXd rho_mean, VectorXd rho_raw_var, Gaussian rho_prior)
    : arch_(std::move(arch)),
      theta_mean_(std::move(theta_mean)),
      theta_raw_var_(std::move(theta_raw_var)),
      rho_mean_(std::move(rho_mean)),
      rho_raw_var_(std::move(rho_raw_var)),
      rho_prior_(std::move(rho_prior)) {
    arch_.validate();
    detail::require(theta_mean_.size() == arch_.num_parameters() && theta_raw_var_.size() == theta_mean_.size(),
                    "VariationalState: weight vectors do not match the architecture");
    detail::require(rho_raw_var_.size() == rho_mean_.size() && rho_prior_.dim() == rho_mean_.size(),
                    "VariationalState: tolerance vectors disagree in length");
    detail::require(rho_prior_.strictly_positive(), "VariationalState: tolerance prior variance must be positive");
}

namespace {
VectorXd softplus_of(const VectorXd& raw) { return raw.unaryExpr([](double z) { return softplus(z); }); }
}  // namespace

Gaussian VariationalState::theta_q() const { return Gaussian(theta_mean_, softplus_of(theta_raw_var_)); }
Gaussian VariationalState::rho_q() const { return Gaussian(rho_mean_, softplus_of(rho_raw_var_)); }

VectorXd VariationalState::flatten() const {
    VectorXd flat(num_parameters());
    flat << theta_mean_, theta_raw_var_, rho_mean_, rho_raw_var_;
    return flat;
}

void VariationalState::assign(const VectorXd& flat) {
    detail::require(flat.size() == num_parameters(), "VariationalState::assign: length mismatch");
    const Eigen::Index nw = num_weights(), m = num_constraints();
    theta_mean_ = flat.segment(0, nw);
    theta_raw_var_ = flat.segment(nw, nw);
    rho_mean_ = flat.segment(2 * nw, m);
    rho_raw_var_ = flat.segment(2 * nw + m, m);
}

void VariationalState::make_theta_degenerate() {
    theta_raw_var_.setConstant(-std::numeric_limits<double>::infinity());
}

void VariationalState::make_rho_degenerate(const VectorXd& rho) {
    detail::require(rho.size() == num_constraints(), "make_rho_degenerate: length mismatch");
    rho_mean_ = rho;
    rho_raw_var_.setConstant(-std::numeric_limits<double>::infinity());
}

namespace {

// Non-finite entries (point-mass raw variances) are stored as strings.
nlohmann::json vector_to_json(const VectorXd& v) {
    auto arr = nlohmann::json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) {
        if (std::isfinite(v[i]))
            arr.push_back(v[i]);
        else
            arr.push_back(std::isnan(v[i]) ? "nan" : (v[i] > 0 ? "inf" : "-inf"));
    }
    return arr;
}

VectorXd vector_from_json(const nlohmann::json& j) {
    VectorXd v(static_cast<Eigen::Index>(j.size()));
    for (std::size_t i = 0; i < j.size(); ++i) {
        const auto& e = j[i];
        if (e.is_string()) {
            const auto s = e.get<std::string>();
            v[Eigen::Index(i)] = s == "inf"    ? std::numeric_limits<double>::infinity()
                                 : s == "-inf" ? -std::numeric_limits<double>::infinity()
                                               : std::numeric_limits<double>::quiet_NaN();
        } else {
            v[Eigen::Index(i)] = e.get<double>();
        }
    }
    return v;
}

}  // namespace

nlohmann::json to_json(const VariationalState& vs) {
    nlohmann::json j = {{"architecture", to_json(vs.architecture())},
                        {"theta_mean", vector_to_json(vs.theta_mean())},
                        {"theta_raw_var", vector_to_json(vs.theta_raw_var())}};
    if (vs.has_tolerance()) {
        j["rho_mean"] = vector_to_json(vs.rho_mean());
        j["rho_raw_var"] = vector_to_json(vs.rho_raw_var());
        j["rho_prior_mean"] = vector_to_json(vs.rho_prior().mean());
        j["rho_prior_var"] = vector_to_json(vs.rho_prior().var());
    }
    return j;
}

VariationalState variational_state_from_json(const nlohmann::json& j) {
    auto arch = architecture_from_json(j.at("architecture"));
    VectorXd rho_mean, rho_raw_var, prior_mean, prior_var;
    if (j.contains("rho_mean")) {
        rho_mean = vector_from_json(j.at("rho_mean"));
        rho_raw_var = vector_from_json(j.at("rho_raw_var"));
        prior_mean = vector_from_json(j.at("rho_prior_mean"));
        prior_var = vector_from_json(j.at("rho_prior_var"));
    }
    return VariationalState(std::move(arch), vector_from_json(j.at("theta_mean")), vector_from_json(j.at("theta_raw_var")),
                            std::move(rho_mean), std::move(rho_raw_var), Gaussian(prior_mean, prior_var));
}

VectorXd sample_weights(const VariationalState& vs, const VectorXd& eps) { return sample_reparam(vs.theta_q(), eps); }

ToleranceVector sample_tolerance(const VariationalState& vs, const VectorXd& eps) {
    detail::require(vs.has_tolerance(), "sample_tolerance: state has no tolerance variables");
    return ToleranceVector(sample_reparam(vs.rho_q(), eps).array().exp().matrix());
}

VariationalState init_variational(const NetworkArchitecture& arch, std::uint64_t seed, Eigen::Index num_constraints,
                                  const Gaussian& rho_prior) {
    arch.validate();
    detail::require(rho_prior.dim() == num_constraints, "init_variational: prior dimension must match constraints");
    Rng rng(seed);
    std::normal_distribution<double> normal;

    VectorXd mean = VectorXd::Zero(arch.num_parameters());
    const auto w = arch.widths();
    Eigen::Index offset = 0;
    for (std::size_t l = 0; l + 1 < w.size(); ++l) {
        const double sd = 1.0 / std::sqrt(double(w[l]));
        const Eigen::Index count = Eigen::Index(w[l + 1]) * w[l];
        for (Eigen::Index i = 0; i < count; ++i) mean[offset + i] = sd * normal(rng);
        offset += count + w[l + 1];
    }
    VectorXd raw = VectorXd::Constant(mean.size(), softplus_inverse(kInitialWeightVariance));
    VectorXd rho_raw = rho_prior.var().unaryExpr([](double v) { return softplus_inverse(v); });
    return VariationalState(arch, std::move(mean), std::move(raw), rho_prior.mean(), std::move(rho_raw), rho_prior);
}

Gaussian default_rho_prior(Eigen::Index num_constraints) {
    return Gaussian(VectorXd::Constant(num_constraints, -2.0), VectorXd::Ones(num_constraints));
}

}  // namespace bcpnn
