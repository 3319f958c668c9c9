#include "psgld/sampler.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <mutex>
#include <stdexcept>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "psgld/baselines.hpp"
#include "psgld/metrics.hpp"
#include "psgld/rng.hpp"

namespace psgld {

StepSchedule::StepSchedule(double a, double b) : a_(a), b_(b) {
    if (!(a > 0)) throw std::invalid_argument("StepSchedule: a must be > 0");
    if (!(b > 0.5) || !(b <= 1.0))
        throw std::invalid_argument("StepSchedule: b must lie in (0.5, 1], got " +
                                    std::to_string(b));
}

StepSchedule StepSchedule::constant(double eps) {
    if (!(eps > 0)) throw std::invalid_argument("StepSchedule: constant eps must be > 0");
    StepSchedule s;
    s.constant_eps_ = eps;
    return s;
}

double StepSchedule::at(std::int64_t t) const {
    if (t < 1) throw std::invalid_argument("StepSchedule: t must be >= 1");
    if (constant_eps_) return *constant_eps_;
    return std::pow(a_ / static_cast<double>(t), b_);
}

void SamplerConfig::validate() const {
    if (total_iterations < 1) throw std::invalid_argument("SamplerConfig: T must be >= 1");
    if (burn_in < 0 || burn_in >= total_iterations)
        throw std::invalid_argument("SamplerConfig: burn_in must satisfy 0 <= burn_in < T");
    if (thin < 1) throw std::invalid_argument("SamplerConfig: thin must be >= 1");
    if (metrics_every < 1) throw std::invalid_argument("SamplerConfig: metrics_every must be >= 1");
    if (workers < 0) throw std::invalid_argument("SamplerConfig: workers must be >= 0");
    if (sgld_subsample < 0)
        throw std::invalid_argument("SamplerConfig: sgld_subsample must be >= 0");
}

double part_scale(std::int64_t n_total_observed, std::int64_t part_observed) {
    if (part_observed <= 0) return 0.0;
    return static_cast<double>(n_total_observed) / static_cast<double>(part_observed);
}

std::mt19937_64 block_noise_stream(std::uint64_t seed, std::int64_t t, int block_row,
                                   int block_col) {
    return std::mt19937_64(derive_seed(derive_seed(seed, stream_tag::kBlockNoise,
                                                   static_cast<std::uint64_t>(t)),
                                       static_cast<std::uint64_t>(block_row),
                                       static_cast<std::uint64_t>(block_col)));
}

namespace detail {

void langevin_apply(MatRef m, const Eigen::MatrixXd& grad_abs, bool k_on_cols, double scale,
                    double lambda, const BlockUpdateOpts& opts, std::mt19937_64& rng) {
    std::normal_distribution<double> noise(0.0, std::sqrt(2.0 * opts.eps));
    const Eigen::Index outer = k_on_cols ? m.rows() : m.cols();
    const Eigen::Index k = k_on_cols ? m.cols() : m.rows();
    for (Eigen::Index a = 0; a < outer; ++a) {
        for (Eigen::Index kk = 0; kk < k; ++kk) {
            double& x = k_on_cols ? m(a, kk) : m(kk, a);
            const double g = k_on_cols ? grad_abs(a, kk) : grad_abs(kk, a);
            double delta = opts.eps * sign_of(x) * (scale * g - lambda);
            if (opts.inject_noise) delta += noise(rng);
            x += delta;
            if (opts.mirroring) x = std::abs(x);
        }
    }
}

}  // namespace detail

void update_block(MatRef w_block, MatRef h_block, const ObservationMatrix& v, const Block& blk,
                  const ModelSpec& spec, const BlockUpdateOpts& opts, std::mt19937_64& rng,
                  std::int64_t iteration) {
    const std::int64_t nr = blk.rows.size();
    const std::int64_t nc = blk.cols.size();
    const int k = spec.k;
    if (w_block.rows() != nr || w_block.cols() != k || h_block.rows() != k ||
        h_block.cols() != nc)
        throw std::invalid_argument("update_block: factor block shape mismatch");
    Eigen::MatrixXd gw = Eigen::MatrixXd::Zero(nr, k);
    Eigen::MatrixXd gh = Eigen::MatrixXd::Zero(k, nc);
    v.for_each_in_block(blk, [&](std::int64_t i, std::int64_t j, double val) {
        detail::accumulate_cell(i - blk.rows.begin, j - blk.cols.begin, val, w_block, h_block, k,
                                spec.beta, spec.phi, gw, gh);
    });
    detail::langevin_apply(w_block, gw, true, opts.scale, spec.lambda_w, opts, rng);
    detail::langevin_apply(h_block, gh, false, opts.scale, spec.lambda_h, opts, rng);
    if (!w_block.allFinite() || !h_block.allFinite())
        throw std::runtime_error(
            "update_block: non-finite factor entry after updating block rows [" +
            std::to_string(blk.rows.begin) + "," + std::to_string(blk.rows.end) + ") cols [" +
            std::to_string(blk.cols.begin) + "," + std::to_string(blk.cols.end) +
            ") at iteration " + std::to_string(iteration) + "; step size is likely too large");
}

void psgld_iteration(FactorPair& state, const Part& part, const ObservationMatrix& v,
                     const ModelSpec& spec, double eps, std::uint64_t seed, std::int64_t t,
                     std::int64_t n_total_observed, bool mirroring, bool inject_noise,
                     int workers) {
    if (!(eps > 0)) throw std::invalid_argument("psgld_iteration: eps must be > 0");
    const int b = static_cast<int>(part.blocks.size());
    BlockUpdateOpts opts;
    opts.eps = eps;
    opts.scale = part_scale(n_total_observed, part.observed_count);
    opts.mirroring = mirroring;
    opts.inject_noise = inject_noise;

    std::atomic<bool> failed{false};
    std::string error_message;
    std::mutex error_mutex;
#ifdef _OPENMP
    const int n_threads = workers > 0 ? workers : omp_get_max_threads();
#else
    const int n_threads = 1;
    (void)workers;
#endif
#pragma omp parallel for schedule(static) num_threads(n_threads)
    for (int bi = 0; bi < b; ++bi) {
        if (failed.load(std::memory_order_relaxed)) continue;
        try {
            const Block& blk = part.blocks[static_cast<std::size_t>(bi)];
            // Block bi sits on row range bi; its column range index comes from
            // the part. Noise streams are keyed by those indices so block
            // execution order cannot matter.
            auto rng = block_noise_stream(seed, t, bi,
                                          part.block_cols[static_cast<std::size_t>(bi)]);
            MatRef wb = state.w.middleRows(blk.rows.begin, blk.rows.size());
            MatRef hb = state.h.middleCols(blk.cols.begin, blk.cols.size());
            update_block(wb, hb, v, blk, spec, opts, rng, t);
        } catch (const std::exception& e) {
            std::lock_guard<std::mutex> lock(error_mutex);
            error_message = e.what();
            failed.store(true, std::memory_order_relaxed);
        }
    }
    if (failed.load()) throw std::runtime_error(error_message);
}

FactorPair part_gradient(const FactorPair& state, const Part& part, const ObservationMatrix& v,
                         const ModelSpec& spec, double scale) {
    const int k = spec.k;
    Eigen::MatrixXd gw = Eigen::MatrixXd::Zero(state.w.rows(), k);
    Eigen::MatrixXd gh = Eigen::MatrixXd::Zero(k, state.h.cols());
    for (const Block& blk : part.blocks) {
        v.for_each_in_block(blk, [&](std::int64_t i, std::int64_t j, double val) {
            detail::accumulate_cell(i, j, val, state.w, state.h, k, spec.beta, spec.phi, gw, gh);
        });
    }
    for (Eigen::Index i = 0; i < gw.rows(); ++i)
        for (int kk = 0; kk < k; ++kk)
            gw(i, kk) = detail::sign_of(state.w(i, kk)) * (scale * gw(i, kk) - spec.lambda_w);
    for (int kk = 0; kk < k; ++kk)
        for (Eigen::Index j = 0; j < gh.cols(); ++j)
            gh(kk, j) = detail::sign_of(state.h(kk, j)) * (scale * gh(kk, j) - spec.lambda_h);
    return FactorPair{std::move(gw), std::move(gh)};
}

FactorPair full_gradient(const FactorPair& state, const ObservationMatrix& v,
                         const ModelSpec& spec) {
    Part full;
    full.blocks.push_back(Block{{0, v.rows()}, {0, v.cols()}});
    full.block_cols.push_back(0);
    full.cell_count = v.rows() * v.cols();
    full.observed_count = v.n_observed();
    return part_gradient(state, full, v, spec, 1.0);
}

GradientNoiseDiagnostic gradient_noise_diagnostic(const FactorPair& state, const BlockGrid& grid,
                                                  const ObservationMatrix& v,
                                                  const ModelSpec& spec) {
    GradientNoiseDiagnostic diag;
    const FactorPair full = full_gradient(state, v, spec);
    const std::vector<Part> parts = diagonal_parts(grid, v);
    const double n = static_cast<double>(v.n_observed());
    Eigen::MatrixXd mean_w = Eigen::MatrixXd::Zero(state.w.rows(), state.w.cols());
    Eigen::MatrixXd mean_h = Eigen::MatrixXd::Zero(state.h.rows(), state.h.cols());
    for (const Part& part : parts) {
        const double scale = part_scale(v.n_observed(), part.observed_count);
        FactorPair g = part_gradient(state, part, v, spec, scale);
        const double weight = static_cast<double>(part.observed_count) / n;
        mean_w += weight * (g.w - full.w);
        mean_h += weight * (g.h - full.h);
        diag.per_part_grads.push_back(std::move(g));
    }
    diag.zeta_weighted_mean_norm =
        std::sqrt(mean_w.squaredNorm() + mean_h.squaredNorm());
    diag.full_gradient_norm = std::sqrt(full.w.squaredNorm() + full.h.squaredNorm());
    return diag;
}

RunResult run_chain(const ObservationMatrix& v, const ModelSpec& spec, const BlockGrid& grid,
                    const SamplerConfig& config, const ObservationMatrix* test,
                    const RunHooks* hooks) {
    spec.validate();
    config.validate();
    if (grid.n_rows() != v.rows() || grid.n_cols() != v.cols())
        throw std::invalid_argument("run_chain: grid/matrix shape mismatch");

    const std::int64_t n = v.n_observed();
    FactorPair state = FactorPair::from_priors(v.rows(), v.cols(), spec, config.seed);

    const bool block_based =
        config.algorithm == Algorithm::kPsgld || config.algorithm == Algorithm::kDsgd;
    std::optional<PartSchedule> schedule;
    if (block_based)
        schedule.emplace(diagonal_parts(grid, v), config.scheduler_mode,
                         derive_seed(config.seed, stream_tag::kSchedule), config.part_order);

    std::optional<AuxiliaryTensor> aux;
    if (config.algorithm == Algorithm::kGibbs) {
        if (spec.beta != 1.0 || spec.phi != 1.0)
            throw std::domain_error("run_chain: the Gibbs sampler requires beta=1, phi=1");
        auto rng = make_stream(config.seed, stream_tag::kBaseline, 0);
        aux = AuxiliaryTensor::init(v, state, rng);
    }

    const std::int64_t subsample =
        config.sgld_subsample > 0 ? config.sgld_subsample : default_sgld_subsample(n);

    RunResult result;
    result.records.reserve(static_cast<std::size_t>(config.total_iterations));
    Eigen::MatrixXd sum_w = Eigen::MatrixXd::Zero(state.w.rows(), state.w.cols());
    Eigen::MatrixXd sum_h = Eigen::MatrixXd::Zero(state.h.rows(), state.h.cols());

    const auto t_start = std::chrono::steady_clock::now();
    double log_post = 0.0, train_rmse = 0.0;
    std::optional<double> test_rmse;
    for (std::int64_t t = 1; t <= config.total_iterations; ++t) {
        double eps = 0.0;
        switch (config.algorithm) {
            case Algorithm::kPsgld:
            case Algorithm::kDsgd: {
                eps = config.schedule.at(t);
                const Part& part = schedule->next_part(t);
                psgld_iteration(state, part, v, spec, eps, config.seed, t, n, config.mirroring,
                                /*inject_noise=*/config.algorithm == Algorithm::kPsgld,
                                config.workers);
                break;
            }
            case Algorithm::kLd: {
                eps = config.schedule.at(t);
                auto rng = block_noise_stream(config.seed, t, 0, 0);
                ld_iteration(state, v, spec, eps, config.mirroring, rng);
                break;
            }
            case Algorithm::kSgld: {
                eps = config.schedule.at(t);
                auto rng = block_noise_stream(config.seed, t, 0, 0);
                sgld_iteration(state, v, spec, eps, subsample, config.mirroring, rng);
                break;
            }
            case Algorithm::kGibbs: {
                auto rng = make_stream(config.seed, stream_tag::kBaseline,
                                       static_cast<std::uint64_t>(t));
                gibbs_iteration(state, *aux, v, spec, rng);
                break;
            }
        }
        if (!state.all_finite())
            throw std::runtime_error("run_chain: non-finite state after iteration " +
                                     std::to_string(t));

        if ((t - 1) % config.metrics_every == 0 || t == config.total_iterations) {
            log_post = log_posterior_unnorm(v, state, spec);
            train_rmse = rmse(v, state);
            if (test && test->n_observed() > 0) test_rmse = rmse(*test, state);
        }
        ChainRecord rec;
        rec.iteration = t;
        rec.epsilon = eps;
        rec.log_post = log_post;
        rec.train_rmse = train_rmse;
        rec.test_rmse = test_rmse;
        rec.wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                          std::chrono::steady_clock::now() - t_start)
                          .count();
        if (hooks && hooks->on_record) hooks->on_record(rec);
        result.records.push_back(std::move(rec));

        if (t > config.burn_in && (t - config.burn_in) % config.thin == 0) {
            ++result.kept_samples;
            sum_w += state.w;
            sum_h += state.h;
            if (hooks && hooks->on_sample) hooks->on_sample(t, state);
        }
    }

    if (result.kept_samples > 0) {
        result.posterior_mean.w = sum_w / static_cast<double>(result.kept_samples);
        result.posterior_mean.h = sum_h / static_cast<double>(result.kept_samples);
    } else {
        result.posterior_mean = state;
    }
    result.final_state = std::move(state);
    return result;
}

}  // namespace psgld
