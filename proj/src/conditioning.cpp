#include "bcpnn/conditioning.hpp"

#include <vector>

namespace bcpnn {

ConstraintSystem::ConstraintSystem(MatrixXd A, MatrixXd B, VectorXd b)
    : A_(std::move(A)), B_(std::move(B)), b_(std::move(b)) {
    const Eigen::Index m = B_.rows();
    detail::require(m >= 1, "ConstraintSystem: need at least one constraint");
    detail::require(m <= B_.cols(), "ConstraintSystem: more constraints than outputs");
    detail::require(A_.rows() == m, "ConstraintSystem: A and B must have the same number of rows");
    detail::require(b_.size() == m, "ConstraintSystem: b must have one entry per constraint");
    detail::require(A_.allFinite() && B_.allFinite() && b_.allFinite(), "ConstraintSystem: entries must be finite");

    Eigen::JacobiSVD<MatrixXd> svd(B_);
    const VectorXd& sv = svd.singularValues();
    detail::require(sv[0] > 0.0 && sv[m - 1] / sv[0] > kRankThreshold, "ConstraintSystem: B must have full row rank");
}

namespace {

nlohmann::json matrix_to_json(const MatrixXd& M) {
    auto rows = nlohmann::json::array();
    for (Eigen::Index i = 0; i < M.rows(); ++i) {
        auto row = nlohmann::json::array();
        for (Eigen::Index j = 0; j < M.cols(); ++j) row.push_back(M(i, j));
        rows.push_back(std::move(row));
    }
    return rows;
}

MatrixXd matrix_from_json(const nlohmann::json& j, const char* key) {
    if (!j.is_array() || j.empty()) throw ContractError(std::string("constraint file: '") + key + "' must be a non-empty array of rows");
    const auto rows = static_cast<Eigen::Index>(j.size());
    const auto cols = static_cast<Eigen::Index>(j[0].size());
    MatrixXd M(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
        const auto& row = j[static_cast<std::size_t>(i)];
        if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols)
            throw ContractError(std::string("constraint file: '") + key + "' rows must have equal length");
        for (Eigen::Index c = 0; c < cols; ++c) M(i, c) = row[static_cast<std::size_t>(c)].get<double>();
    }
    return M;
}

}  // namespace

nlohmann::json to_json(const ConstraintSystem& cs) {
    std::vector<double> b(cs.b().data(), cs.b().data() + cs.b().size());
    return {{"A", matrix_to_json(cs.A())}, {"B", matrix_to_json(cs.B())}, {"b", b}};
}

ConstraintSystem constraint_system_from_json(const nlohmann::json& j) {
    for (const char* key : {"A", "B", "b"})
        if (!j.contains(key)) throw ContractError(std::string("constraint file: missing key '") + key + "'");
    auto b = j.at("b").get<std::vector<double>>();
    return ConstraintSystem(matrix_from_json(j.at("A"), "A"), matrix_from_json(j.at("B"), "B"),
                            Eigen::Map<const VectorXd>(b.data(), static_cast<Eigen::Index>(b.size())));
}

ConditioningGrad condition_vjp(const ConditionedPrediction<double>& pred, const ConstraintSystem& cs,
                               const VectorXd& grad_mean_post, const VectorXd& grad_var_post) {
    const Eigen::Index n = cs.output_dim();
    detail::require(grad_mean_post.size() == n && grad_var_post.size() == n, "condition_vjp: gradient dimension mismatch");

    const MatrixXd& B = cs.B();
    const VectorXd& v = pred.prior.var();
    const detail::ScaledSpdSolver<double> solver(pred.schur);

    // W = S^-1.  u = W d,  a = W B (v . g_mu),  C = W B.
    const VectorXd u = solver.solve(pred.residual);
    const VectorXd a = solver.solve(B * v.cwiseProduct(grad_mean_post));
    const MatrixXd C = solver.solve(B);
    const VectorXd Bt_u = B.transpose() * u;
    const VectorXd Bt_a = B.transpose() * a;

    // M = C diag(g_var . v^2) C^T collects the dependence of var_C on S.
    const VectorXd w = grad_var_post.cwiseProduct(v).cwiseProduct(v);
    const MatrixXd M = C * w.asDiagonal() * C.transpose();
    const VectorXd diag_P = (B.array() * C.array()).colwise().sum().transpose();
    const VectorXd diag_BtMB = (B.array() * (M * B).array()).colwise().sum().transpose();

    ConditioningGrad g;
    g.mean = grad_mean_post - Bt_a;
    g.var = grad_mean_post.cwiseProduct(Bt_u) - Bt_a.cwiseProduct(Bt_u) +
            grad_var_post.cwiseProduct((1.0 - 2.0 * v.array() * diag_P.array()).matrix()) + diag_BtMB;
    g.tol = -a.cwiseProduct(u) + M.diagonal();
    return g;
}

VectorXd residual(const ConstraintSystem& cs, const VectorXd& x, const VectorXd& y) {
    detail::require(x.size() == cs.input_dim(), "residual: input dimension mismatch");
    detail::require(y.size() == cs.output_dim(), "residual: output dimension mismatch");
    return cs.A() * x + cs.B() * y - cs.b();
}

VectorXd violation_magnitude(const ConstraintSystem& cs, const VectorXd& x, const VectorXd& y) {
    return residual(cs, x, y).cwiseAbs();
}

}  // namespace bcpnn
