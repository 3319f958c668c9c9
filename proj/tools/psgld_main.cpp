#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "psgld/io.hpp"

namespace {

struct CliOptions {
    psgld::RunConfig cfg;
    std::string algorithm = "psgld";
    std::string format = "auto";
    std::string zeros = "missing";
    std::string scheduler = "cyclic";
    double step_a = -1.0;  // < 0: per-algorithm default
    double step_b = -1.0;
    double const_eps = -1.0;
    std::int64_t permute_seed = -1;
    std::string w_path, h_path;
};

psgld::InputFormat parse_format(const std::string& name) {
    if (name == "auto") return psgld::InputFormat::kAuto;
    if (name == "matrixmarket-coordinate") return psgld::InputFormat::kMatrixMarketCoordinate;
    if (name == "matrixmarket-array") return psgld::InputFormat::kMatrixMarketArray;
    if (name == "tsv-triplets") return psgld::InputFormat::kTsvTriplets;
    if (name == "movielens-ratings") return psgld::InputFormat::kMovieLensRatings;
    throw CLI::ValidationError("--format", "unknown format: " + name);
}

void add_model_options(CLI::App* cmd, CliOptions& opt) {
    cmd->add_option("--beta", opt.cfg.spec.beta, "Tweedie power parameter")
        ->capture_default_str();
    cmd->add_option("--phi", opt.cfg.spec.phi, "Tweedie dispersion (> 0)")
        ->capture_default_str();
    cmd->add_option("--lambda-w", opt.cfg.spec.lambda_w, "exponential prior rate for W (> 0)")
        ->capture_default_str();
    cmd->add_option("--lambda-h", opt.cfg.spec.lambda_h, "exponential prior rate for H (> 0)")
        ->capture_default_str();
    cmd->add_option("-k,--rank", opt.cfg.spec.k, "factorisation rank K (>= 1)")
        ->capture_default_str();
}

void add_io_options(CLI::App* cmd, CliOptions& opt, bool needs_input) {
    auto* in = cmd->add_option("--input", opt.cfg.input_path, "input matrix file");
    if (needs_input) in->required();
    cmd->add_option("--format", opt.format,
                    "input format: auto|matrixmarket-coordinate|matrixmarket-array|"
                    "tsv-triplets|movielens-ratings")
        ->capture_default_str();
    cmd->add_option("--zeros", opt.zeros,
                    "zero entries in sparse listings are 'missing' or 'observed'")
        ->check(CLI::IsMember({"missing", "observed"}))
        ->capture_default_str();
}

void finalize_config(CliOptions& opt) {
    opt.cfg.format = parse_format(opt.format);
    opt.cfg.zeros = opt.zeros == "observed" ? psgld::ZerosPolicy::kObserved
                                            : psgld::ZerosPolicy::kMissing;
    opt.cfg.sampler.algorithm = psgld::parse_algorithm(opt.algorithm);
    opt.cfg.sampler.scheduler_mode = opt.scheduler == "random"
                                         ? psgld::SchedulerMode::kSizeProportionalRandom
                                         : psgld::SchedulerMode::kCyclic;
    if (opt.permute_seed >= 0)
        opt.cfg.permute_seed = static_cast<std::uint64_t>(opt.permute_seed);

    // Step-size defaults follow the algorithm when not set explicitly:
    // psgld/dsgd a=0.01 b=0.51, sgld a=1 b=0.51, ld eps=0.2.
    const auto algo = opt.cfg.sampler.algorithm;
    if (opt.const_eps > 0) {
        opt.cfg.sampler.schedule = psgld::StepSchedule::constant(opt.const_eps);
    } else if (opt.step_a > 0 || opt.step_b > 0) {
        const double a = opt.step_a > 0 ? opt.step_a : 0.01;
        const double b = opt.step_b > 0 ? opt.step_b : 0.51;
        opt.cfg.sampler.schedule = psgld::StepSchedule(a, b);
    } else if (algo == psgld::Algorithm::kLd) {
        opt.cfg.sampler.schedule = psgld::StepSchedule::constant(0.2);
    } else if (algo == psgld::Algorithm::kSgld) {
        opt.cfg.sampler.schedule = psgld::StepSchedule(1.0, 0.51);
    } else {
        opt.cfg.sampler.schedule = psgld::StepSchedule(0.01, 0.51);
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Posterior sampling for Tweedie matrix factorisation "
                 "(parallel stochastic gradient Langevin dynamics)"};
    app.require_subcommand(1);
    CliOptions opt;

    auto add_common = [&](CLI::App* cmd) {
        cmd->set_config("--config", "", "key = value configuration file; flags override it");
        cmd->allow_config_extras(false);
        cmd->add_option("--out", opt.cfg.output_dir, "output directory")
            ->envname("PSGLD_OUT_DIR")
            ->capture_default_str();
    };

    CLI::App* generate = app.add_subcommand("generate", "synthesize data from the generative model");
    add_common(generate);
    add_model_options(generate, opt);
    generate->add_option("--rows", opt.cfg.gen_rows, "rows I")->capture_default_str();
    generate->add_option("--cols", opt.cfg.gen_cols, "columns J")->capture_default_str();
    generate->add_option("--density", opt.cfg.gen_density,
                         "fraction of observed cells; 1.0 = dense")
        ->capture_default_str();
    generate->add_option("--seed", opt.cfg.sampler.seed, "master RNG seed")->capture_default_str();

    CLI::App* sample = app.add_subcommand("sample", "run a sampling / optimisation chain");
    add_common(sample);
    add_model_options(sample, opt);
    add_io_options(sample, opt, true);
    sample->add_option("--algorithm", opt.algorithm, "psgld|ld|sgld|gibbs|dsgd")
        ->check(CLI::IsMember({"psgld", "ld", "sgld", "gibbs", "dsgd"}))
        ->capture_default_str();
    sample->add_option("--blocks", opt.cfg.blocks, "partition size B (B x B blocks)")
        ->capture_default_str();
    sample->add_option("--distributed", opt.cfg.distributed_nodes,
                       "run the ring-protocol simulator with this many nodes (sets B)")
        ->capture_default_str();
    sample->add_option("-T,--iterations", opt.cfg.sampler.total_iterations, "chain length")
        ->capture_default_str();
    sample->add_option("--burn-in", opt.cfg.sampler.burn_in, "discarded initial samples")
        ->capture_default_str();
    sample->add_option("--thin", opt.cfg.sampler.thin, "keep every thin-th sample")
        ->capture_default_str();
    sample->add_option("--seed", opt.cfg.sampler.seed, "master RNG seed")->capture_default_str();
    sample->add_flag("--mirroring,!--no-mirroring", opt.cfg.sampler.mirroring,
                     "replace negative entries by absolute values after each update")
        ->capture_default_str();
    sample->add_option("--scheduler", opt.scheduler,
                       "part schedule: cyclic | random (size-proportional)")
        ->check(CLI::IsMember({"cyclic", "random"}))
        ->capture_default_str();
    sample->add_option("--step-a", opt.step_a, "step size a in eps(t) = (a/t)^b");
    sample->add_option("--step-b", opt.step_b, "step size b in (0.5, 1]");
    sample->add_option("--const-eps", opt.const_eps, "constant step size (LD mode)");
    sample->add_option("--sgld-subsample", opt.cfg.sampler.sgld_subsample,
                       "|Omega| for SGLD; 0 = N/32")
        ->capture_default_str();
    sample->add_option("--workers", opt.cfg.sampler.workers,
                       "parallel block workers; 0 = hardware default")
        ->capture_default_str();
    sample->add_option("--metrics-every", opt.cfg.sampler.metrics_every,
                       "compute log-posterior/RMSE every k iterations")
        ->capture_default_str();
    sample->add_option("--holdout-fraction", opt.cfg.holdout_fraction,
                       "fraction of observed entries held out for test RMSE")
        ->capture_default_str();
    sample->add_option("--holdout-seed", opt.cfg.holdout_seed, "holdout split seed")
        ->capture_default_str();
    sample->add_option("--permute-seed", opt.permute_seed,
                       "seeded row/column permutation before gridding (-1 = off)");
    sample->add_flag("--save-samples", opt.cfg.save_samples,
                     "persist thinned post-burn-in samples (default: posterior mean only)");

    CLI::App* evaluate = app.add_subcommand("evaluate", "RMSE / log-posterior of stored factors");
    add_common(evaluate);
    add_model_options(evaluate, opt);
    add_io_options(evaluate, opt, true);
    evaluate->add_option("--w", opt.w_path, "W factor file (MatrixMarket array)")->required();
    evaluate->add_option("--h", opt.h_path, "H factor file (MatrixMarket array)")->required();

    CLI::App* pinfo = app.add_subcommand("partition-info",
                                         "block boundaries and observed-entry counts as CSV");
    add_common(pinfo);
    add_io_options(pinfo, opt, true);
    pinfo->add_option("--blocks", opt.cfg.blocks, "partition size B")->capture_default_str();
    pinfo->add_option("--permute-seed", opt.permute_seed,
                      "seeded row/column permutation before gridding (-1 = off)");

    CLI11_PARSE(app, argc, argv);

    try {
        finalize_config(opt);
        if (generate->parsed()) {
            opt.cfg.command = "generate";
            return psgld::run_generate(opt.cfg);
        }
        if (sample->parsed()) {
            opt.cfg.command = "sample";
            return psgld::run_experiment(opt.cfg);
        }
        if (evaluate->parsed()) {
            opt.cfg.command = "evaluate";
            return psgld::run_evaluate(opt.cfg, opt.w_path, opt.h_path);
        }
        if (pinfo->parsed()) {
            opt.cfg.command = "partition-info";
            return psgld::run_partition_info(opt.cfg, std::cout);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
