#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <vector>

#include "psgld/model.hpp"
#include "psgld/partition.hpp"

namespace psgld {

// Step sizes eps(t) = (a/t)^b with b in (0.5, 1], which makes sum eps = inf
// and sum eps^2 < inf; or a constant step (plain Langevin dynamics).
class StepSchedule {
  public:
    StepSchedule(double a, double b);
    static StepSchedule constant(double eps);

    double at(std::int64_t t) const;
    double a() const { return a_; }
    double b() const { return b_; }
    std::optional<double> constant_eps() const { return constant_eps_; }

  private:
    StepSchedule() = default;
    double a_ = 0.0;
    double b_ = 0.0;
    std::optional<double> constant_eps_;
};

enum class Algorithm { kPsgld, kLd, kSgld, kGibbs, kDsgd };

struct SamplerConfig {
    Algorithm algorithm = Algorithm::kPsgld;
    std::int64_t total_iterations = 10000;
    std::int64_t burn_in = 5000;
    std::int64_t thin = 1;
    std::uint64_t seed = 0;
    bool mirroring = true;
    StepSchedule schedule{0.01, 0.51};
    SchedulerMode scheduler_mode = SchedulerMode::kCyclic;
    std::vector<int> part_order;     // optional custom cyclic visit order
    int workers = 0;                 // parallel block workers; 0 = runtime default
    std::int64_t sgld_subsample = 0; // |Omega|; 0 = N/32
    std::int64_t metrics_every = 1;  // compute log-post/RMSE every k iterations

    void validate() const;
};

// Per-iteration record. log_post and RMSE values are carried over from the
// previous computation when metrics_every > 1.
struct ChainRecord {
    std::int64_t iteration = 0;
    double epsilon = 0.0;
    double log_post = 0.0;
    double train_rmse = 0.0;
    std::optional<double> test_rmse;
    std::int64_t wall_ms = 0;
};

struct RunResult {
    std::vector<ChainRecord> records;
    FactorPair posterior_mean;   // mean of kept (post burn-in, thinned) samples
    std::int64_t kept_samples = 0;
    FactorPair final_state;
};

struct RunHooks {
    std::function<void(const ChainRecord&)> on_record;
    std::function<void(std::int64_t, const FactorPair&)> on_sample;
};

// One Langevin block update on block-local factor views. Accumulates the
// scaled likelihood gradient over the data block, adds the unscaled prior
// gradient, injects N(0, 2*eps) noise when requested, then mirrors.
// Noise is drawn from `rng` in a fixed traversal order (rows outer, K inner
// for W; cols outer, K inner for H), so two calls with equal inputs and
// equal RNG state produce identical bits.
struct BlockUpdateOpts {
    double eps = 0.0;
    double scale = 1.0;
    bool mirroring = true;
    bool inject_noise = true;
};

using MatRef = Eigen::Ref<Eigen::MatrixXd, 0, Eigen::OuterStride<>>;

void update_block(MatRef w_block, MatRef h_block, const ObservationMatrix& v, const Block& blk,
                  const ModelSpec& spec, const BlockUpdateOpts& opts, std::mt19937_64& rng,
                  std::int64_t iteration);

// The noise stream for block (row, col) at iteration t. Shared-memory,
// baseline and ring executions all key their Gaussian draws this way.
std::mt19937_64 block_noise_stream(std::uint64_t seed, std::int64_t t, int block_row,
                                   int block_col);

namespace detail {
// m += eps * sign(m) * (scale * grad_abs - lambda) + N(0, 2 eps), then an
// optional mirror. k_on_cols selects the W layout (A x K) vs H (K x A); the
// traversal (non-K outer, K inner) fixes the noise draw order.
void langevin_apply(MatRef m, const Eigen::MatrixXd& grad_abs, bool k_on_cols, double scale,
                    double lambda, const BlockUpdateOpts& opts, std::mt19937_64& rng);
}  // namespace detail

// Applies the B interchangeable block updates of one part, optionally in
// parallel. Per-block noise streams are keyed by (seed, t, block-row,
// block-col), so serial and parallel execution coincide bitwise.
void psgld_iteration(FactorPair& state, const Part& part, const ObservationMatrix& v,
                     const ModelSpec& spec, double eps, std::uint64_t seed, std::int64_t t,
                     std::int64_t n_total_observed, bool mirroring = true,
                     bool inject_noise = true, int workers = 0);

// Scale factor N/|part| used by the stochastic gradient (0 when the part
// holds no observed entries).
double part_scale(std::int64_t n_total_observed, std::int64_t part_observed);

// Gradient of log p(theta) + scale * sum_{cells} log p(v_ij | theta) where the
// cell set is one part (or the whole matrix for full_gradient, scale = 1).
FactorPair part_gradient(const FactorPair& state, const Part& part, const ObservationMatrix& v,
                         const ModelSpec& spec, double scale);
FactorPair full_gradient(const FactorPair& state, const ObservationMatrix& v,
                         const ModelSpec& spec);

// zeta_d = grad Lhat_d - grad L per diagonal part. The size-weighted mean of
// zeta over parts is exactly zero when the stochastic gradient is unbiased.
struct GradientNoiseDiagnostic {
    double zeta_weighted_mean_norm = 0.0;   // ||sum_d (|part_d|/N) zeta_d||
    double full_gradient_norm = 0.0;
    std::vector<FactorPair> per_part_grads; // grad Lhat_d, one per part
};

GradientNoiseDiagnostic gradient_noise_diagnostic(const FactorPair& state, const BlockGrid& grid,
                                                  const ObservationMatrix& v,
                                                  const ModelSpec& spec);

// Runs a full chain for any of the five algorithms: initial state from the
// priors, T iterations, metrics per iteration, thinned post-burn-in samples
// accumulated into a posterior mean (and handed to hooks.on_sample).
RunResult run_chain(const ObservationMatrix& v, const ModelSpec& spec, const BlockGrid& grid,
                    const SamplerConfig& config, const ObservationMatrix* test = nullptr,
                    const RunHooks* hooks = nullptr);

}  // namespace psgld
