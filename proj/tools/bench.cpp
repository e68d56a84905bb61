// Benchmark driver: data generation, BNN / BCPNN training, evaluation and
// variance decomposition on the battery surrogate.
//
// Exit codes: 0 success, 1 user or configuration error, 2 numerical failure.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "bcpnn/bench.hpp"

namespace {

constexpr int kExitUser = 1;
constexpr int kExitNumerical = 2;

void print_report(const bcpnn::BenchmarkReport& r) {
    std::printf("model %s: %ld test points, %ld draws\n", bcpnn::to_string(r.model).c_str(), r.test_points, r.draws);
    std::printf("  MSE        %.4e +/- %.4e\n", r.mse.mean, r.mse.spread);
    std::printf("  CW         %.4e +/- %.4e\n", r.cw.mean, r.cw.spread);
    std::printf("  coverage   %.4f\n", r.coverage);
    std::printf("  aleatoric  %.4e   epistemic %.4e\n", r.aleatoric.mean, r.epistemic.mean);
    for (const auto& v : r.violations)
        std::printf("  violation %-18s median %.4e mean %.4e std %.4e\n", v.constraint.c_str(), v.median, v.mean, v.std);
    for (const auto& t : r.tolerances)
        std::printf("  tolerance %-18s mu_rho %.3f sigma_rho %.3f E[r] %.3e Std[r] %.3e\n", t.constraint.c_str(), t.mu_rho,
                    t.sigma_rho, t.expected_r, t.std_r);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Bayesian constrained probabilistic neural network benchmark"};
    app.require_subcommand(1);

    std::string config_path, model_name, out_path, ckpt_path, data_path;
    std::optional<int> samples;
    bool no_condition = false;
    bool quiet = false;

    auto* gen = app.add_subcommand("generate", "generate the surrogate dataset");
    gen->add_option("--config", config_path, "JSON config")->required();

    auto* tr = app.add_subcommand("train", "train a model and write a checkpoint");
    tr->add_option("--model", model_name, "bnn or bcpnn")->required()->check(CLI::IsMember({"bnn", "bcpnn"}));
    tr->add_option("--config", config_path, "JSON config")->required();
    tr->add_option("--out", out_path, "checkpoint path")->required();
    tr->add_flag("--quiet", quiet, "do not print per-epoch progress");

    auto* ev = app.add_subcommand("evaluate", "evaluate a checkpoint on the test split");
    ev->add_option("--ckpt", ckpt_path, "checkpoint path")->required();
    ev->add_option("--data", data_path, "dataset CSV")->required();
    ev->add_option("--out", out_path, "output directory")->required();
    ev->add_option("--samples", samples, "posterior draws (overrides the checkpoint's eval.samples)");

    auto* de = app.add_subcommand("decompose", "variance decomposition on the test split");
    de->add_option("--ckpt", ckpt_path, "checkpoint path")->required();
    de->add_option("--data", data_path, "dataset CSV")->required();
    de->add_option("--out", out_path, "output directory")->required();
    de->add_option("--samples", samples, "posterior draws (overrides eval.decompose_samples)");
    de->add_flag("--no-condition", no_condition, "bypass the conditioning layer (r -> infinity)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : kExitUser;
    }

    try {
        if (*gen) {
            const auto config = bcpnn::load_config(config_path);
            const auto data = bcpnn::cmd_generate(config);
            std::printf("wrote %ld records to %s (+ %s)\n", long(data.size()), config.data_path.c_str(),
                        bcpnn::companion_json_path(config.data_path).c_str());
        } else if (*tr) {
            const auto config = bcpnn::load_config(config_path);
            const auto model = bcpnn::model_kind_from_string(model_name);
            const auto data = bcpnn::read_dataset(config.data_path);
            bcpnn::EpochCallback progress;
            if (!quiet)
                progress = [](int epoch, const bcpnn::ElboEstimate& e) {
                    std::printf("epoch %4d  nll %.6e  kl_theta %.6e  kl_rho %.6e  total %.6e\n", epoch, e.nll_term, e.kl_theta,
                                e.kl_rho, e.total);
                    std::fflush(stdout);
                };
            const auto run = bcpnn::run_training(config, model, data, progress);
            bcpnn::write_checkpoint(run.checkpoint, out_path);
            bcpnn::write_trace_csv(run.trace, bcpnn::trace_path_for(out_path));
            if (!run.failure.empty()) {
                std::cerr << "training diverged: " << run.failure << " (last good state written to " << out_path << ")\n";
                return kExitNumerical;
            }
            std::printf("wrote %s and %s\n", out_path.c_str(), bcpnn::trace_path_for(out_path).c_str());
        } else if (*ev) {
            const auto ckpt = bcpnn::read_checkpoint(ckpt_path);
            const auto data = bcpnn::read_dataset(data_path);
            const auto report = bcpnn::evaluate_checkpoint(ckpt, data, out_path, samples);
            print_report(report);
        } else if (*de) {
            const auto ckpt = bcpnn::read_checkpoint(ckpt_path);
            const auto data = bcpnn::read_dataset(data_path);
            const auto rep = bcpnn::decompose_checkpoint(ckpt, data, !no_condition, out_path, samples);
            std::printf("aleatoric %.4e  reduction %.4e  epistemic %.4e  tolerance %.4e  interaction %.4e  total %.4e\n",
                        rep.mean.aleatoric.mean(), rep.mean.constraint_reduction.mean(), rep.mean.epistemic.mean(),
                        rep.mean.tolerance_uncertainty.mean(), rep.mean.interaction.mean(), rep.mean.total.mean());
            std::printf("points with five-term sum off by > 3 SE: %ld\n", rep.inconsistent_points);
        }
    } catch (const bcpnn::ConditioningError& e) {
        std::cerr << "numerical failure: " << e.what() << '\n';
        return kExitNumerical;
    } catch (const bcpnn::PredictionError& e) {
        std::cerr << "numerical failure: " << e.what() << '\n';
        return kExitNumerical;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitUser;
    }
    return 0;
}
