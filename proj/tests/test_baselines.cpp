#include <doctest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "oracles.hpp"
#include "psgld/baselines.hpp"
#include "psgld/metrics.hpp"
#include "psgld/model.hpp"
#include "psgld/rng.hpp"
#include "psgld/sampler.hpp"

using namespace psgld;

TEST_SUITE_BEGIN("baselines");

TEST_CASE("ld: vanishing step is the identity") {
    ModelSpec spec{1.0, 1.0, 1.0, 1.0, 2};
    auto data = generate_synthetic(spec, 6, 6, 1);
    FactorPair state = FactorPair::from_priors(6, 6, spec, 2);
    FactorPair before = state;
    auto rng = make_stream(0, 0);
    ld_iteration(state, data.v, spec, 1e-30, true, rng);
    CHECK((state.w - before.w).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("sgld: the full matrix taken once each equals an LD step") {
    ModelSpec spec{1.0, 1.0, 1.0, 1.0, 2};
    auto data = generate_synthetic(spec, 7, 5, 4);
    FactorPair a = FactorPair::from_priors(7, 5, spec, 8);
    FactorPair b = a;
    const double eps = 0.02;

    std::vector<std::int64_t> omega(static_cast<std::size_t>(data.v.n_observed()));
    std::iota(omega.begin(), omega.end(), 0);
    auto rng1 = block_noise_stream(3, 1, 0, 0);
    sgld_apply_subsample(a, data.v, spec, eps, omega, true, rng1);
    auto rng2 = block_noise_stream(3, 1, 0, 0);
    ld_iteration(b, data.v, spec, eps, true, rng2);
    CHECK(a.bitwise_equal(b));
}

TEST_CASE("sgld: stochastic gradient is unbiased over subsampling") {
    // Monte Carlo mean of the subsampled gradient vs the full gradient,
    // within 3 standard errors per coordinate.
    ModelSpec spec{1.0, 1.0, 1.0, 1.0, 2};
    auto data = generate_synthetic(spec, 3, 3, 6);
    FactorPair state = FactorPair::from_priors(3, 3, spec, 12);
    const FactorPair full = full_gradient(state, data.v, spec);
    const std::int64_t n = data.v.n_observed();
    const std::int64_t m = 3;
    const double scale = static_cast<double>(n) / static_cast<double>(m);

    const int draws = 10000;
    Eigen::MatrixXd mean_w = Eigen::MatrixXd::Zero(3, 2), m2_w = Eigen::MatrixXd::Zero(3, 2);
    Eigen::MatrixXd mean_h = Eigen::MatrixXd::Zero(2, 3), m2_h = Eigen::MatrixXd::Zero(2, 3);
    auto rng = make_stream(77, 1);
    std::uniform_int_distribution<std::int64_t> pick(0, n - 1);
    for (int d = 0; d < draws; ++d) {
        std::vector<std::int64_t> omega(static_cast<std::size_t>(m));
        for (auto& idx : omega) idx = pick(rng);
        FactorPair g = subsample_gradient(state, data.v, spec, omega, scale);
        mean_w += g.w;
        m2_w += g.w.cwiseProduct(g.w);
        mean_h += g.h;
        m2_h += g.h.cwiseProduct(g.h);
    }
    mean_w /= draws;
    mean_h /= draws;
    for (int i = 0; i < 3; ++i)
        for (int k = 0; k < 2; ++k) {
            const double var = m2_w(i, k) / draws - mean_w(i, k) * mean_w(i, k);
            const double se = std::sqrt(std::max(var, 1e-30) / draws);
            CHECK(std::abs(mean_w(i, k) - full.w(i, k)) < 3.0 * se + 1e-12);
        }
    for (int k = 0; k < 2; ++k)
        for (int j = 0; j < 3; ++j) {
            const double var = m2_h(k, j) / draws - mean_h(k, j) * mean_h(k, j);
            const double se = std::sqrt(std::max(var, 1e-30) / draws);
            CHECK(std::abs(mean_h(k, j) - full.h(k, j)) < 3.0 * se + 1e-12);
        }
}

TEST_CASE("sgld default subsample size is N/32") {
    CHECK(default_sgld_subsample(256 * 256) == 2048);
    CHECK(default_sgld_subsample(10) == 1);
}

TEST_CASE("sgld and psgld share the gradient code path") {
    // Omega set to exactly one part's entries, in block order, with matched
    // scaling: the gradients agree to machine precision.
    ModelSpec spec{0.5, 1.0, 0.7, 0.9, 2};
    auto data = generate_synthetic(spec, 9, 9, 15);
    auto grid = build_grid(9, 9, 3);
    auto parts = diagonal_parts(grid, data.v);
    FactorPair state = FactorPair::from_priors(9, 9, spec, 3);
    const Part& part = parts[1];
    const double scale = part_scale(data.v.n_observed(), part.observed_count);

    std::vector<std::int64_t> omega;
    for (const Block& blk : part.blocks)
        data.v.for_each_in_block(blk, [&](std::int64_t i, std::int64_t j, double) {
            omega.push_back(i * data.v.cols() + j);  // dense entry index
        });
    FactorPair via_omega = subsample_gradient(state, data.v, spec, omega, scale);
    FactorPair via_part = part_gradient(state, part, data.v, spec, scale);
    CHECK((via_omega.w - via_part.w).cwiseAbs().maxCoeff() == 0.0);
    CHECK((via_omega.h - via_part.h).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("gibbs: multinomial edge cases") {
    auto rng = make_stream(1, 2);
    const double weights[] = {0.2, 0.5, 0.3};
    std::uint32_t out[3];
    multinomial_draw(0, std::span<const double>(weights, 3), out, rng);
    CHECK(out[0] + out[1] + out[2] == 0);
    multinomial_draw(17, std::span<const double>(weights, 3), out, rng);
    CHECK(out[0] + out[1] + out[2] == 17);
    const double single[] = {1.0};
    multinomial_draw(9, std::span<const double>(single, 1), out, rng);
    CHECK(out[0] == 9);  // K = 1: deterministic split
}

TEST_CASE("gibbs: auxiliary tensor invariants and sweeps") {
    ModelSpec spec{1.0, 1.0, 1.0, 1.0, 3};
    auto data = generate_synthetic(spec, 8, 8, 19);
    FactorPair state = FactorPair::from_priors(8, 8, spec, 4);
    auto rng = make_stream(5, 6);
    auto aux = AuxiliaryTensor::init(data.v, state, rng);
    CHECK(aux.sums_match(data.v));
    for (int sweep = 0; sweep < 50; ++sweep) {
        gibbs_iteration(state, aux, data.v, spec, rng);
        REQUIRE(aux.sums_match(data.v));
    }
    CHECK(state.all_nonnegative());
    CHECK(state.all_finite());
}

TEST_CASE("gibbs: rejects non-integer data and non-Poisson specs") {
    ModelSpec spec{1.0, 1.0, 1.0, 1.0, 2};
    auto v = ObservationMatrix::dense(2, 2, {1.0, 2.5, 0.0, 1.0});
    FactorPair state = FactorPair::from_priors(2, 2, spec, 0);
    auto rng = make_stream(0, 0);
    CHECK_THROWS_AS(AuxiliaryTensor::init(v, state, rng), std::domain_error);

    auto vi = ObservationMatrix::dense(2, 2, {1.0, 2.0, 0.0, 1.0});
    auto aux = AuxiliaryTensor::init(vi, state, rng);
    ModelSpec bad = spec;
    bad.beta = 2.0;
    CHECK_THROWS_AS(gibbs_iteration(state, aux, vi, bad, rng), std::domain_error);
}

TEST_CASE("gibbs: 1x1x1 conditional matches the grid-evaluated joint") {
    // p(w | v, h) under the augmentation is Gamma(1 + v, rate lambda_w + h).
    // Compare it on a 200-point grid against exp(log joint) restricted to w:
    //   joint(w) = Exp(w; lw) * Po(v; w h)
    const double lambda_w = 0.8;
    const double h = 1.7;
    const double v = 3.0;
    const int grid_points = 200;
    const double w_max = 12.0;

    std::vector<double> joint(grid_points), conditional(grid_points);
    double zj = 0.0, zc = 0.0;
    for (int g = 0; g < grid_points; ++g) {
        const double w = (g + 0.5) * w_max / grid_points;
        const double log_joint = std::log(lambda_w) - lambda_w * w  // prior
                                 - w * h + v * std::log(w * h) - std::lgamma(v + 1.0);
        joint[static_cast<std::size_t>(g)] = std::exp(log_joint);
        zj += joint[static_cast<std::size_t>(g)];
        // the sampler's conditional
        const double shape = 1.0 + v;
        const double rate = lambda_w + h;
        const double log_cond =
            shape * std::log(rate) - std::lgamma(shape) + (shape - 1.0) * std::log(w) - rate * w;
        conditional[static_cast<std::size_t>(g)] = std::exp(log_cond);
        zc += conditional[static_cast<std::size_t>(g)];
    }
    double tv = 0.0;
    for (int g = 0; g < grid_points; ++g)
        tv += std::abs(joint[static_cast<std::size_t>(g)] / zj -
                       conditional[static_cast<std::size_t>(g)] / zc);
    tv *= 0.5;
    CHECK(tv < 1e-3);
}

TEST_CASE("gibbs: chain improves the Poisson log-likelihood") {
    ModelSpec spec{1.0, 1.0, 1.0, 1.0, 3};
    auto data = generate_synthetic(spec, 16, 16, 23);
    auto grid = build_grid(16, 16, 2);
    SamplerConfig cfg;
    cfg.algorithm = Algorithm::kGibbs;
    cfg.total_iterations = 200;
    cfg.burn_in = 100;
    cfg.seed = 31;
    auto result = run_chain(data.v, spec, grid, cfg);
    const std::size_t q = result.records.size() / 4;
    double first = 0.0, last = 0.0;
    for (std::size_t p = 0; p < q; ++p) first += result.records[p].log_post;
    for (std::size_t p = result.records.size() - q; p < result.records.size(); ++p)
        last += result.records[p].log_post;
    CHECK(last / static_cast<double>(q) > first / static_cast<double>(q));
}

TEST_CASE("dsgd: psgld minus the injected noise, exactly") {
    ModelSpec spec{1.0, 1.0, 1.0, 1.0, 2};
    auto data = generate_synthetic(spec, 8, 8, 10);
    auto grid = build_grid(8, 8, 2);
    auto parts = diagonal_parts(grid, data.v);
    const Part& part = parts[0];
    const double eps = 0.01;
    const std::uint64_t seed = 21;
    const std::int64_t t = 5;

    FactorPair noisy = FactorPair::from_priors(8, 8, spec, 9);
    FactorPair quiet = noisy;
    // mirroring off so the difference is exactly the Gaussian draw
    psgld_iteration(noisy, part, data.v, spec, eps, seed, t, data.v.n_observed(),
                    /*mirroring=*/false);
    dsgd_iteration(quiet, part, data.v, spec, eps, seed, t, data.v.n_observed(),
                   /*mirroring=*/false);

    // replay the per-block streams: W noise first (rows outer, K inner),
    // then H (cols outer, K inner); up to last-ulp accumulation rounding the
    // difference is the Gaussian draw
    for (std::size_t b = 0; b < part.blocks.size(); ++b) {
        const Block& blk = part.blocks[b];
        auto rng = block_noise_stream(seed, t, static_cast<int>(b), part.block_cols[b]);
        std::normal_distribution<double> noise(0.0, std::sqrt(2.0 * eps));
        for (std::int64_t i = blk.rows.begin; i < blk.rows.end; ++i)
            for (int k = 0; k < spec.k; ++k)
                CHECK(std::abs(noisy.w(i, k) - quiet.w(i, k) - noise(rng)) < 1e-12);
        for (std::int64_t j = blk.cols.begin; j < blk.cols.end; ++j)
            for (int k = 0; k < spec.k; ++k)
                CHECK(std::abs(noisy.h(k, j) - quiet.h(k, j) - noise(rng)) < 1e-12);
    }
}

TEST_CASE("dsgd: gradient matches finite differences of the log posterior") {
    ModelSpec spec{2.0, 1.0, 0.5, 0.5, 2};
    auto data = generate_synthetic(spec, 5, 5, 33);
    auto grid = build_grid(5, 5, 1);
    auto parts = diagonal_parts(grid, data.v);
    FactorPair state = FactorPair::from_priors(5, 5, spec, 14);

    FactorPair stepped = state;
    const double eps = 1e-7;
    dsgd_iteration(stepped, parts[0], data.v, spec, eps, 0, 1, data.v.n_observed(),
                   /*mirroring=*/false);
    FactorPair fd = oracle::fd_gradient(
        state, [&](const FactorPair& f) { return log_posterior_unnorm(data.v, f, spec); });
    for (int i = 0; i < 5; ++i)
        for (int k = 0; k < 2; ++k) {
            const double grad = (stepped.w(i, k) - state.w(i, k)) / eps;
            CHECK(oracle::rel_err(grad, fd.w(i, k)) < 1e-4);
        }
}

TEST_CASE("dsgd: training RMSE trends down on Gaussian synthetic data") {
    ModelSpec spec{2.0, 0.5, 1.0, 1.0, 3};
    auto data = generate_synthetic(spec, 24, 24, 40);
    auto grid = build_grid(24, 24, 3);
    SamplerConfig cfg;
    cfg.algorithm = Algorithm::kDsgd;
    cfg.total_iterations = 200;
    cfg.burn_in = 100;
    cfg.seed = 8;
    // the quadratic-loss gradients are stiff; keep the optimizer step small
    cfg.schedule = StepSchedule(1e-6, 0.51);
    auto result = run_chain(data.v, spec, grid, cfg);
    const std::size_t q = result.records.size() / 4;
    double first = 0.0, last = 0.0;
    for (std::size_t p = 0; p < q; ++p) first += result.records[p].train_rmse;
    for (std::size_t p = result.records.size() - q; p < result.records.size(); ++p)
        last += result.records[p].train_rmse;
    CHECK(last < first);

    // step -> 0 is the identity
    FactorPair state = FactorPair::from_priors(24, 24, spec, 1);
    FactorPair before = state;
    auto parts = diagonal_parts(grid, data.v);
    dsgd_iteration(state, parts[0], data.v, spec, 1e-300, 0, 1, data.v.n_observed());
    CHECK(state.bitwise_equal(before));
}

TEST_SUITE_END();
