#include "psgld/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace psgld {

namespace {

// Gradient of the subsampled objective, likelihood part only, accumulated in
// omega order (block-local == global indices here).
void accumulate_omega(const FactorPair& state, const ObservationMatrix& v, const ModelSpec& spec,
                      std::span<const std::int64_t> omega, Eigen::MatrixXd& gw,
                      Eigen::MatrixXd& gh) {
    for (std::int64_t idx : omega) {
        const Entry e = v.entry(idx);
        detail::accumulate_cell(e.i, e.j, e.v, state.w, state.h, spec.k, spec.beta, spec.phi, gw,
                                gh);
    }
}

std::uint32_t checked_count(double v) {
    if (v < 0 || std::floor(v) != v || v > 4294967295.0)
        throw std::domain_error("Gibbs sampler requires integer-valued data, got " +
                                std::to_string(v));
    return static_cast<std::uint32_t>(v);
}

}  // namespace

void multinomial_draw(std::uint32_t n, std::span<const double> weights, std::uint32_t* out,
                      std::mt19937_64& rng) {
    const int k = static_cast<int>(weights.size());
    if (k == 1) {
        out[0] = n;
        return;
    }
    double total = 0.0;
    for (double w : weights) total += w;
    std::uint32_t remaining = n;
    for (int kk = 0; kk < k - 1; ++kk) {
        if (remaining == 0) {
            out[kk] = 0;
            continue;
        }
        const double p = std::clamp(weights[static_cast<std::size_t>(kk)] / total, 0.0, 1.0);
        std::binomial_distribution<std::uint32_t> bin(remaining, p);
        const std::uint32_t s = bin(rng);
        out[kk] = s;
        remaining -= s;
        total -= weights[static_cast<std::size_t>(kk)];
        if (total <= 0.0) total = 1e-300;
    }
    out[k - 1] = remaining;
}

AuxiliaryTensor AuxiliaryTensor::init(const ObservationMatrix& v, const FactorPair& state,
                                      std::mt19937_64& rng) {
    AuxiliaryTensor aux;
    aux.k_ = static_cast<int>(state.w.cols());
    aux.counts_.assign(static_cast<std::size_t>(v.n_observed()) *
                           static_cast<std::size_t>(aux.k_),
                       0);
    std::vector<double> weights(static_cast<std::size_t>(aux.k_));
    for (std::int64_t idx = 0; idx < v.n_observed(); ++idx) {
        const Entry e = v.entry(idx);
        const std::uint32_t n = checked_count(e.v);
        for (int kk = 0; kk < aux.k_; ++kk)
            weights[static_cast<std::size_t>(kk)] =
                std::max(std::abs(state.w(e.i, kk)) * std::abs(state.h(kk, e.j)), 1e-300);
        multinomial_draw(n, weights, aux.counts(idx), rng);
    }
    return aux;
}

bool AuxiliaryTensor::sums_match(const ObservationMatrix& v) const {
    if (n_entries() != v.n_observed()) return false;
    for (std::int64_t idx = 0; idx < v.n_observed(); ++idx) {
        std::uint64_t s = 0;
        for (int kk = 0; kk < k_; ++kk) s += counts(idx)[kk];
        if (static_cast<double>(s) != v.entry(idx).v) return false;
    }
    return true;
}

void sgld_apply_subsample(FactorPair& state, const ObservationMatrix& v, const ModelSpec& spec,
                          double eps, std::span<const std::int64_t> omega, bool mirroring,
                          std::mt19937_64& rng) {
    if (omega.empty()) throw std::invalid_argument("sgld: empty subsample");
    Eigen::MatrixXd gw = Eigen::MatrixXd::Zero(state.w.rows(), spec.k);
    Eigen::MatrixXd gh = Eigen::MatrixXd::Zero(spec.k, state.h.cols());
    accumulate_omega(state, v, spec, omega, gw, gh);
    const double scale =
        static_cast<double>(v.n_observed()) / static_cast<double>(omega.size());
    BlockUpdateOpts opts;
    opts.eps = eps;
    opts.scale = scale;
    opts.mirroring = mirroring;
    opts.inject_noise = true;
    MatRef w_all = state.w.middleRows(0, state.w.rows());
    MatRef h_all = state.h.middleCols(0, state.h.cols());
    detail::langevin_apply(w_all, gw, true, opts.scale, spec.lambda_w, opts, rng);
    detail::langevin_apply(h_all, gh, false, opts.scale, spec.lambda_h, opts, rng);
    if (!state.all_finite())
        throw std::runtime_error("sgld: non-finite factor entry; step size is likely too large");
}

void sgld_iteration(FactorPair& state, const ObservationMatrix& v, const ModelSpec& spec,
                    double eps, std::int64_t subsample_size, bool mirroring,
                    std::mt19937_64& rng) {
    if (subsample_size < 1) throw std::invalid_argument("sgld: subsample size must be >= 1");
    std::uniform_int_distribution<std::int64_t> pick(0, v.n_observed() - 1);
    std::vector<std::int64_t> omega(static_cast<std::size_t>(subsample_size));
    for (auto& idx : omega) idx = pick(rng);
    sgld_apply_subsample(state, v, spec, eps, omega, mirroring, rng);
}

void ld_iteration(FactorPair& state, const ObservationMatrix& v, const ModelSpec& spec,
                  double eps, bool mirroring, std::mt19937_64& rng) {
    // Full batch: Omega = every observed entry exactly once, scale = 1. Runs
    // through the same block kernel as PSGLD with a single full-matrix block.
    Block full{{0, v.rows()}, {0, v.cols()}};
    BlockUpdateOpts opts;
    opts.eps = eps;
    opts.scale = 1.0;
    opts.mirroring = mirroring;
    opts.inject_noise = true;
    MatRef w_all = state.w.middleRows(0, state.w.rows());
    MatRef h_all = state.h.middleCols(0, state.h.cols());
    update_block(w_all, h_all, v, full, spec, opts, rng, 0);
}

FactorPair subsample_gradient(const FactorPair& state, const ObservationMatrix& v,
                              const ModelSpec& spec, std::span<const std::int64_t> omega,
                              double scale) {
    const int k = spec.k;
    Eigen::MatrixXd gw = Eigen::MatrixXd::Zero(state.w.rows(), k);
    Eigen::MatrixXd gh = Eigen::MatrixXd::Zero(k, state.h.cols());
    accumulate_omega(state, v, spec, omega, gw, gh);
    for (Eigen::Index i = 0; i < gw.rows(); ++i)
        for (int kk = 0; kk < k; ++kk)
            gw(i, kk) = detail::sign_of(state.w(i, kk)) * (scale * gw(i, kk) - spec.lambda_w);
    for (int kk = 0; kk < k; ++kk)
        for (Eigen::Index j = 0; j < gh.cols(); ++j)
            gh(kk, j) = detail::sign_of(state.h(kk, j)) * (scale * gh(kk, j) - spec.lambda_h);
    return FactorPair{std::move(gw), std::move(gh)};
}

void gibbs_iteration(FactorPair& state, AuxiliaryTensor& aux, const ObservationMatrix& v,
                     const ModelSpec& spec, std::mt19937_64& rng) {
    if (spec.beta != 1.0 || spec.phi != 1.0)
        throw std::domain_error("gibbs_iteration: requires the Poisson model (beta=1, phi=1)");
    const int k = spec.k;
    if (aux.k() != k || aux.n_entries() != v.n_observed())
        throw std::invalid_argument("gibbs_iteration: auxiliary tensor shape mismatch");
    const std::int64_t I = v.rows();
    const std::int64_t J = v.cols();

    // 1) resample the auxiliary counts; accumulate row/column sufficient stats
    Eigen::MatrixXd s_row = Eigen::MatrixXd::Zero(I, k);  // sum_j s_ijk
    Eigen::MatrixXd h_row = Eigen::MatrixXd::Zero(I, k);  // sum_{j in obs(i)} h_kj
    std::vector<double> weights(static_cast<std::size_t>(k));
    for (std::int64_t idx = 0; idx < v.n_observed(); ++idx) {
        const Entry e = v.entry(idx);
        for (int kk = 0; kk < k; ++kk)
            weights[static_cast<std::size_t>(kk)] =
                std::max(std::abs(state.w(e.i, kk)) * std::abs(state.h(kk, e.j)), 1e-300);
        multinomial_draw(checked_count(e.v), weights, aux.counts(idx), rng);
        for (int kk = 0; kk < k; ++kk) {
            s_row(e.i, kk) += aux.counts(idx)[kk];
            h_row(e.i, kk) += std::abs(state.h(kk, e.j));
        }
    }

    // 2) W | S, H
    for (std::int64_t i = 0; i < I; ++i)
        for (int kk = 0; kk < k; ++kk) {
            const double shape = 1.0 + s_row(i, kk);
            const double rate = spec.lambda_w + h_row(i, kk);
            std::gamma_distribution<double> gamma(shape, 1.0 / rate);
            state.w(i, kk) = gamma(rng);
        }

    // 3) H | S, W (with the fresh W)
    Eigen::MatrixXd s_col = Eigen::MatrixXd::Zero(k, J);  // sum_i s_ijk
    Eigen::MatrixXd w_col = Eigen::MatrixXd::Zero(k, J);  // sum_{i in obs(j)} w_ik
    for (std::int64_t idx = 0; idx < v.n_observed(); ++idx) {
        const Entry e = v.entry(idx);
        for (int kk = 0; kk < k; ++kk) {
            s_col(kk, e.j) += aux.counts(idx)[kk];
            w_col(kk, e.j) += std::abs(state.w(e.i, kk));
        }
    }
    for (std::int64_t j = 0; j < J; ++j)
        for (int kk = 0; kk < k; ++kk) {
            const double shape = 1.0 + s_col(kk, j);
            const double rate = spec.lambda_h + w_col(kk, j);
            std::gamma_distribution<double> gamma(shape, 1.0 / rate);
            state.h(kk, j) = gamma(rng);
        }
}

void dsgd_iteration(FactorPair& state, const Part& part, const ObservationMatrix& v,
                    const ModelSpec& spec, double step, std::uint64_t seed, std::int64_t t,
                    std::int64_t n_total_observed, bool mirroring, int workers) {
    psgld_iteration(state, part, v, spec, step, seed, t, n_total_observed, mirroring,
                    /*inject_noise=*/false, workers);
}

}  // namespace psgld
