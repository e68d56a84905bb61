// Acceptance suite: one PASS/FAIL line per criterion.
//
// usage: acceptance <configs dir> <work dir>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "bcpnn/bench.hpp"
#include "oracles.hpp"

using namespace bcpnn;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    int id;
    std::string name;
    bool pass;
    std::string detail;
};

std::vector<Outcome> outcomes;

void record(int id, const std::string& name, bool pass, const std::string& detail) {
    outcomes.push_back({id, name, pass, detail});
    std::fprintf(stderr, "[acceptance] criterion %d %s: %s\n", id, pass ? "PASS" : "FAIL", detail.c_str());
}

std::string fmt(const char* f, double a) {
    char buf[128];
    std::snprintf(buf, sizeof buf, f, a);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void progress(const std::string& what) { std::fprintf(stderr, "[acceptance] %s\n", what.c_str()); }

std::vector<oracle::Instance> conditioning_instances() {
    std::mt19937_64 rng(20240601);
    std::vector<oracle::Instance> out;
    for (int t = 0; t < 1000; ++t) {
        const int m = 1 + t % 3;
        const int n = std::max(m, 2 + (t / 3) % 7);
        out.push_back(oracle::random_instance(rng, m, n, 1e-6, 1e2));
    }
    return out;
}

void criterion_1(const std::vector<oracle::Instance>& instances) {
    const auto t0 = std::chrono::steady_clock::now();
    double worst_mean = 0, worst_var = 0;
    for (const auto& in : instances) {
        const ConstraintSystem cs(in.A, in.B, in.b);
        const auto p = condition(Gaussian(in.mu, in.v), cs, in.x, ToleranceVector(in.r));
        const auto o = oracle::joint_condition(in.mu, in.v, in.A, in.B, in.b, in.x, in.r);
        worst_mean = std::max(worst_mean, (p.posterior.mean() - o.mean).norm() / o.mean.norm());
        for (Eigen::Index i = 0; i < o.var.size(); ++i)
            worst_var = std::max(worst_var, std::abs(p.posterior.var()[i] - o.var[i]) / o.var[i]);
    }
    const double secs = seconds_since(t0);
    record(1, "conditioning matches joint Gaussian oracle", worst_mean <= 1e-10 && worst_var <= 1e-10 && secs < 10,
           "1000 instances, max rel err mean " + fmt("%.2e", worst_mean) + ", var " + fmt("%.2e", worst_var) + ", " +
               fmt("%.2f s", secs));
}

void criterion_2_3(const std::vector<oracle::Instance>& instances) {
    double worst_residual = 0, worst_mean_shift = 0, worst_var_shift = 0, worst_growth = -INFINITY;
    for (const auto& in : instances) {
        const ConstraintSystem cs(in.A, in.B, in.b);
        const Gaussian prior(in.mu, in.v);
        const Eigen::Index m = cs.num_constraints();
        const auto hard = condition(prior, cs, in.x, ToleranceVector::constant(m, 1e-12));
        const auto soft = condition(prior, cs, in.x, ToleranceVector::constant(m, 1e12));
        const auto mid = condition(prior, cs, in.x, ToleranceVector(in.r));
        worst_residual = std::max(worst_residual, violation_magnitude(cs, in.x, hard.posterior.mean()).maxCoeff());
        worst_mean_shift = std::max(worst_mean_shift, (soft.posterior.mean() - in.mu).norm() / in.mu.norm());
        worst_var_shift = std::max(worst_var_shift, (soft.posterior.var() - in.v).norm() / in.v.norm());
        for (const auto* p : {&hard, &soft, &mid})
            worst_growth = std::max(worst_growth, (p->posterior.var() - in.v).maxCoeff());
    }
    record(2, "hard and soft limits",
           worst_residual <= 1e-6 && worst_mean_shift <= 1e-6 && worst_var_shift <= 1e-6,
           "r=1e-12 max residual " + fmt("%.2e", worst_residual) + "; r=1e12 max rel shift mean " +
               fmt("%.2e", worst_mean_shift) + ", var " + fmt("%.2e", worst_var_shift));
    record(3, "conditioning never increases variance", worst_growth <= 1e-12,
           "max (var_C - var_P) over 3000 conditionings " + fmt("%.2e", worst_growth));
}

void criterion_4() {
    const auto t0 = std::chrono::steady_clock::now();
    const NetworkArchitecture arch{3, 4, {4}, Activation::tanh};
    MatrixXd B(1, 4);
    B << 1, -1, 0.5, 0.25;
    const ConstraintSystem cs(MatrixXd::Constant(1, 3, 0.2), B, VectorXd::Constant(1, 0.1));
    std::mt19937_64 rng(404);
    Batch batch{MatrixXd(3, 2), MatrixXd(4, 2)};
    for (int c = 0; c < 2; ++c) {
        batch.inputs.col(c) = standard_normal(rng, 3);
        batch.targets.col(c) = standard_normal(rng, 4) * 0.5;
    }
    auto vs = init_variational(arch, 404, 1, default_rho_prior(1));
    std::uniform_real_distribution<double> u(-4.0, -1.0);
    for (Eigen::Index k = 0; k < vs.num_weights(); ++k) vs.theta_raw_var()[k] = u(rng);
    vs.theta_mean() += standard_normal(rng, vs.num_weights()) * 0.3;
    vs.rho_mean()[0] = -1.0;
    vs.rho_raw_var()[0] = -1.5;

    const TrainConfig config;
    const auto noise = draw_noise(vs, 4, rng);
    const auto g = grad_elbo(vs, batch, &cs, config, 2, noise);
    const VectorXd flat = vs.flatten();
    double worst = 0;
    for (Eigen::Index k = 0; k < flat.size(); ++k) {
        auto f = [&](double s) {
            VariationalState v = vs;
            VectorXd x = flat;
            x[k] = s;
            v.assign(x);
            return elbo_at(v, batch, &cs, config, 2, noise).total;
        };
        const double h = 1e-5 * std::max(1.0, std::abs(flat[k]));
        const double fd = (f(flat[k] + h) - f(flat[k] - h)) / (2 * h);
        const double scale = std::max({std::abs(g.gradient[k]), std::abs(fd), 1e-8});
        worst = std::max(worst, std::abs(g.gradient[k] - fd) / scale);
    }
    const double secs = seconds_since(t0);
    record(4, "ELBO gradient matches central differences", worst < 1e-4 && secs < 30,
           std::to_string(flat.size()) + " parameters, max rel err " + fmt("%.2e", worst) + ", " + fmt("%.2f s", secs));
}

void criterion_5() {
    std::mt19937_64 rng(505);
    std::uniform_real_distribution<double> mean(-3, 3), logv(std::log(0.05), std::log(5.0));
    double worst = 0;
    for (int t = 0; t < 100; ++t) {
        const double mq = mean(rng), mp = mean(rng), vq = std::exp(logv(rng)), vp = std::exp(logv(rng));
        const double kl = kl_divergence(Gaussian(VectorXd::Constant(1, mq), VectorXd::Constant(1, vq)),
                                        Gaussian(VectorXd::Constant(1, mp), VectorXd::Constant(1, vp)));
        worst = std::max(worst, std::abs(kl - oracle::kl_quadrature(mq, vq, mp, vp)));
    }
    record(5, "closed-form KL matches quadrature", worst < 1e-8, "100 pairs, max abs err " + fmt("%.2e", worst));
}

struct Benchmark {
    Dataset data;
    Checkpoint bnn, bcpnn;
    BenchmarkReport bnn_report, bcpnn_report;
};

Benchmark criterion_7(const BenchConfig& config, const fs::path& dir) {
    const auto t0 = std::chrono::steady_clock::now();
    Benchmark b;
    progress("criterion 7: generating " + config.data_path);
    b.data = cmd_generate(config);
    auto trained = [&](ModelKind kind) {
        progress("criterion 7: training " + to_string(kind));
        const auto t = std::chrono::steady_clock::now();
        auto run = run_training(config, kind, b.data);
        const fs::path ckpt = dir / (to_string(kind) + ".json");
        write_checkpoint(run.checkpoint, ckpt.string());
        write_trace_csv(run.trace, trace_path_for(ckpt.string()));
        progress("  done in " + fmt("%.0f s", seconds_since(t)) + (run.failure.empty() ? "" : ", diverged: " + run.failure));
        return run.checkpoint;
    };
    b.bnn = trained(ModelKind::bnn);
    b.bcpnn = trained(ModelKind::bcpnn);
    for (auto* ck : {&b.bnn, &b.bcpnn}) {
        progress("criterion 7: evaluating " + to_string(ck->model));
        const auto t = std::chrono::steady_clock::now();
        auto rep = evaluate_checkpoint(*ck, b.data, (dir / ("eval_" + to_string(ck->model))).string());
        progress("  done in " + fmt("%.0f s", seconds_since(t)));
        (ck->model == ModelKind::bnn ? b.bnn_report : b.bcpnn_report) = rep;
    }
    const double secs = seconds_since(t0);

    const auto& rb = b.bnn_report;
    const auto& rc = b.bcpnn_report;
    const double ratio = rb.violations[0].median / rc.violations[0].median;
    const bool a = rc.violations[0].median * 100.0 <= rb.violations[0].median;
    const bool bb = rc.cw.mean <= rb.cw.mean;
    const double mse_ratio = std::max(rb.mse.mean, rc.mse.mean) / std::min(rb.mse.mean, rc.mse.mean);
    const bool c = mse_ratio <= 2.0;
    const bool d = rb.coverage >= 0.90 && rc.coverage >= 0.90;
    std::string detail = "(a) voltage median violation bnn " + fmt("%.3e", rb.violations[0].median) + " / bcpnn " +
                         fmt("%.3e", rc.violations[0].median) + " = " + fmt("%.1fx", ratio) + (a ? " ok" : " FAIL") +
                         "; (b) CW bcpnn " + fmt("%.4f", rc.cw.mean) + " vs bnn " + fmt("%.4f", rb.cw.mean) +
                         (bb ? " ok" : " FAIL") + "; (c) MSE bcpnn " + fmt("%.3e", rc.mse.mean) + " bnn " +
                         fmt("%.3e", rb.mse.mean) + " ratio " + fmt("%.2f", mse_ratio) + (c ? " ok" : " FAIL") +
                         "; (d) coverage bnn " + fmt("%.4f", rb.coverage) + " bcpnn " + fmt("%.4f", rc.coverage) +
                         (d ? " ok" : " FAIL") + "; " + fmt("%.0f s", secs);
    record(7, "end-to-end benchmark", a && bb && c && d && secs < 1800, detail);
    return b;
}

void criterion_6(const Benchmark& b) {
    const auto t0 = std::chrono::steady_clock::now();
    const Batch test = b.data.normalized(Split::test);
    std::mt19937_64 rng(606);
    std::uniform_int_distribution<Eigen::Index> pick(0, test.size() - 1);
    const ConstraintSystem& cs = b.bcpnn.constraints;
    VariationalState loose = b.bcpnn.state;
    loose.make_rho_degenerate(VectorXd::Constant(cs.num_constraints(), std::log(1e12)));

    double worst_gap = 0, worst_loose = 0;
    for (int k = 0; k < 50; ++k) {
        const VectorXd x = test.inputs.col(pick(rng));
        const std::uint64_t seed = 6000 + k;
        const auto dec = decompose(b.bcpnn.state, &cs, x, 10000, seed);
        const auto pooled = predict(b.bcpnn.state, &cs, x, 10000, seed);
        for (Eigen::Index i = 0; i < dec.total.size(); ++i)
            worst_gap = std::max(worst_gap, std::abs(dec.sum_of_terms()[i] - pooled.var[i]) / dec.total_standard_error[i]);
        const auto ld = decompose(loose, &cs, x, 10000, seed);
        for (Eigen::Index i = 0; i < ld.total.size(); ++i)
            for (double term : {ld.constraint_reduction[i], ld.tolerance_uncertainty[i], ld.interaction[i]})
                worst_loose = std::max(worst_loose, std::abs(term) / ld.total[i]);
    }
    record(6, "variance decomposition consistency", worst_gap <= 3.0 && worst_loose < 0.01,
           "50 test inputs x 10000 draws, max |sum - pooled| / SE " + fmt("%.2e", worst_gap) +
               "; r=1e12 max term 2/4/5 share " + fmt("%.2e", worst_loose) + ", " + fmt("%.0f s", seconds_since(t0)));
}

void criterion_8(const BenchConfig& config, const fs::path& dir) {
    const auto t0 = std::chrono::steady_clock::now();
    progress("criterion 8: generating " + config.data_path + " (thermal noise " + fmt("%g", config.surrogate.thermal_noise) + ")");
    const auto data = cmd_generate(config);
    const auto phys = physical_constraints();
    const auto nc = normalize_constraints(phys, data.stats);
    // Residual noise of each normalized constraint, from the per-output noise levels.
    const VectorXd sigma = data.spec.noise_std();
    const VectorXd noise = (phys.B().array().square().matrix() * sigma.array().square().matrix()).cwiseSqrt();
    const VectorXd normalized_noise = noise.cwiseQuotient(nc.row_scale);

    progress("criterion 8: training bcpnn");
    const auto run = run_training(config, ModelKind::bcpnn, data);
    write_checkpoint(run.checkpoint, (dir / "bcpnn_noisy_thermal.json").string());
    const Gaussian rho = run.checkpoint.state.rho_q();
    const auto v = lognormal_summary(kConstraintNames[0], rho.mean()[0], std::sqrt(rho.var()[0]));
    const auto e = lognormal_summary(kConstraintNames[1], rho.mean()[1], std::sqrt(rho.var()[1]));
    const bool ok = run.failure.empty() && v.expected_r * 10.0 <= e.expected_r;
    record(8, "tolerance discrimination", ok,
           "normalized residual noise voltage " + fmt("%.3e", normalized_noise[0]) + ", energy " +
               fmt("%.3e", normalized_noise[1]) + "; E[r] voltage " + fmt("%.3e", v.expected_r) + " (mu_rho " +
               fmt("%.2f", v.mu_rho) + "), energy " + fmt("%.3e", e.expected_r) + " (mu_rho " + fmt("%.2f", e.mu_rho) +
               "), ratio " + fmt("%.1f", e.expected_r / v.expected_r) + ", " + fmt("%.0f s", seconds_since(t0)));
}

void criterion_9(BenchConfig config, const fs::path& dir) {
    std::vector<std::string> mismatches;
    auto same = [&](const fs::path& a, const fs::path& b) {
        if (slurp(a) != slurp(b) || slurp(a).empty()) mismatches.push_back(a.filename().string());
    };
    for (const char* run : {"run_a", "run_b"}) {
        const fs::path d = dir / run;
        fs::create_directories(d);
        config.data_path = (d / "data.csv").string();
        const auto data = cmd_generate(config);
        BenchConfig short_cfg = config;
        short_cfg.train.epochs = 3;
        const auto tr = run_training(short_cfg, ModelKind::bcpnn, data);
        write_checkpoint(tr.checkpoint, (d / "ckpt.json").string());
        write_trace_csv(tr.trace, (d / "ckpt.trace.csv").string());
        evaluate_checkpoint(read_checkpoint((d / "ckpt.json").string()), read_dataset(config.data_path), (d / "eval").string(), 200);
        decompose_checkpoint(tr.checkpoint, data, true, (d / "decompose").string(), 200);
    }
    long files = 0;
    for (const auto& entry : fs::recursive_directory_iterator(dir / "run_a")) {
        if (!entry.is_regular_file()) continue;
        ++files;
        same(entry.path(), dir / "run_b" / fs::relative(entry.path(), dir / "run_a"));
    }
    std::string detail = std::to_string(files) + " files compared (dataset, checkpoint, trace, reports)";
    for (const auto& m : mismatches) detail += "; differs: " + m;
    record(9, "byte-identical reruns", mismatches.empty() && files >= 10, detail);
}

}  // namespace

int main(int argc, char** argv) {
    if (argc != 3) {
        std::fprintf(stderr, "usage: acceptance <configs dir> <work dir>\n");
        return 2;
    }
    const fs::path configs = argv[1];
    const fs::path work = argv[2];
    fs::remove_all(work);
    fs::create_directories(work);

    const auto instances = conditioning_instances();
    criterion_1(instances);
    criterion_2_3(instances);
    criterion_4();
    criterion_5();

    try {
        BenchConfig bench = load_config((configs / "benchmark.json").string());
        bench.data_path = (work / "benchmark" / "surrogate.csv").string();
        fs::create_directories(work / "benchmark");
        const auto b = criterion_7(bench, work / "benchmark");
        criterion_6(b);

        BenchConfig noisy = load_config((configs / "noisy_thermal.json").string());
        noisy.data_path = (work / "noisy_thermal" / "surrogate.csv").string();
        fs::create_directories(work / "noisy_thermal");
        criterion_8(noisy, work / "noisy_thermal");

        criterion_9(bench, work / "reproducibility");
    } catch (const std::exception& e) {
        std::fprintf(stderr, "[acceptance] aborted: %s\n", e.what());
    }

    std::sort(outcomes.begin(), outcomes.end(), [](const Outcome& a, const Outcome& b) { return a.id < b.id; });
    bool all = outcomes.size() == 9;
    std::printf("\n");
    for (const auto& o : outcomes) {
        std::printf("criterion %d: %s  %s | %s\n", o.id, o.pass ? "PASS" : "FAIL", o.name.c_str(), o.detail.c_str());
        all = all && o.pass;
    }
    if (outcomes.size() != 9) std::printf("only %zu of 9 criteria ran\n", outcomes.size());
    std::printf("acceptance: %s\n", all ? "PASS" : "FAIL");
    return all ? 0 : 1;
}
