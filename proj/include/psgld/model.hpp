#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <random>
#include <utility>
#include <vector>

#include "psgld/partition.hpp"

namespace psgld {

// mu is clamped to this floor before exponentiation: beta < 2 makes
// mu^(beta-2) singular at 0.
inline constexpr double kMuFloor = 1e-8;

// Tweedie-NMF model: exponential priors on W and H, Tweedie likelihood with
// power parameter beta and dispersion phi. beta in {0, 1, 2} gives the
// gamma / Poisson / Gaussian observation models; 0 < beta < 1 is compound
// Poisson. No Tweedie model exists for 1 < beta < 2 (gradient evaluation is
// still defined there; data generation is not).
struct ModelSpec {
    double beta = 1.0;
    double phi = 1.0;
    double lambda_w = 1.0;
    double lambda_h = 1.0;
    int k = 1;

    void validate() const;  // throws std::invalid_argument
};

struct Entry {
    std::int64_t i = 0;
    std::int64_t j = 0;
    double v = 0.0;
};

// Observed data V. Dense mode stores all I*J values row-major; sparse mode
// stores a sorted coordinate list (CSR-style row pointers) and sums run
// over the stored entries only.
class ObservationMatrix {
  public:
    enum class MaskMode { kAllObservedDense, kObservedEntriesOnly };

    ObservationMatrix() = default;

    static ObservationMatrix dense(std::int64_t rows, std::int64_t cols,
                                   std::vector<double> row_major_values,
                                   bool allow_negative = false);
    static ObservationMatrix dense(const Eigen::MatrixXd& values, bool allow_negative = false);
    // Sorts, rejects duplicates / out-of-bounds indices / negative values.
    static ObservationMatrix sparse(std::int64_t rows, std::int64_t cols,
                                    std::vector<Entry> entries, bool allow_negative = false);

    std::int64_t rows() const { return rows_; }
    std::int64_t cols() const { return cols_; }
    std::int64_t n_observed() const { return n_observed_; }
    MaskMode mask_mode() const { return mode_; }
    bool is_dense() const { return mode_ == MaskMode::kAllObservedDense; }

    // k-th observed entry, k in [0, n_observed)
    Entry entry(std::int64_t k) const;

    double dense_at(std::int64_t i, std::int64_t j) const { return dense_[i * cols_ + j]; }
    const std::vector<double>& dense_values() const { return dense_; }

    std::int64_t count_in_block(const Block& blk) const;

    template <class F>
    void for_each_in_block(const Block& blk, F&& f) const {
        if (is_dense()) {
            for (std::int64_t i = blk.rows.begin; i < blk.rows.end; ++i) {
                const double* row = dense_.data() + i * cols_;
                for (std::int64_t j = blk.cols.begin; j < blk.cols.end; ++j) f(i, j, row[j]);
            }
            return;
        }
        for (std::int64_t i = blk.rows.begin; i < blk.rows.end; ++i) {
            std::int64_t lo = lower_bound_in_row(i, blk.cols.begin);
            std::int64_t hi = lower_bound_in_row(i, blk.cols.end);
            for (std::int64_t p = lo; p < hi; ++p) f(i, sp_col_[p], sp_val_[p]);
        }
    }

    template <class F>
    void for_each(F&& f) const {
        for_each_in_block(Block{{0, rows_}, {0, cols_}}, std::forward<F>(f));
    }

    // Sparse internals (valid in sparse mode): entry p has coordinates
    // (sp_row_[p], sp_col_[p]) and value sp_val_[p], sorted by (i, j).
    const std::vector<std::int64_t>& sparse_rows() const { return sp_row_; }
    const std::vector<std::int64_t>& sparse_cols() const { return sp_col_; }
    const std::vector<double>& sparse_values() const { return sp_val_; }

  private:
    std::int64_t lower_bound_in_row(std::int64_t i, std::int64_t col) const;

    std::int64_t rows_ = 0;
    std::int64_t cols_ = 0;
    std::int64_t n_observed_ = 0;
    MaskMode mode_ = MaskMode::kAllObservedDense;
    std::vector<double> dense_;          // dense mode, row-major
    std::vector<std::int64_t> sp_ptr_;   // sparse mode: CSR row pointers
    std::vector<std::int64_t> sp_row_;
    std::vector<std::int64_t> sp_col_;
    std::vector<double> sp_val_;
};

// The chain state: W is I x K, H is K x J.
struct FactorPair {
    Eigen::MatrixXd w;
    Eigen::MatrixXd h;

    static FactorPair zeros(std::int64_t n_rows, std::int64_t n_cols, int k);
    // Prior draws: entries i.i.d. exponential(lambda_w) / exponential(lambda_h).
    static FactorPair from_priors(std::int64_t n_rows, std::int64_t n_cols,
                                  const ModelSpec& spec, std::uint64_t seed);

    bool all_finite() const;
    bool all_nonnegative() const;
    bool bitwise_equal(const FactorPair& other) const;
};

namespace detail {

// mu^(beta-2) with exact reciprocals for the closed-form members. Inline so
// every caller (scalar ops, block kernel, baselines) runs the same bits.
inline double mu_pow_beta_minus2(double mu, double beta) {
    if (beta == 2.0) return 1.0;
    if (beta == 1.0) return 1.0 / mu;
    if (beta == 0.0) return 1.0 / (mu * mu);
    return std::pow(mu, beta - 2.0);
}

inline double dloglik_raw(double v, double mu, double beta, double phi) {
    const double m = mu > kMuFloor ? mu : kMuFloor;
    return -(1.0 / phi) * mu_pow_beta_minus2(m, beta) * (m - v);
}

inline double sign_of(double x) { return x < 0 ? -1.0 : 1.0; }

// Adds one cell's likelihood-gradient contribution into gw / gh (block-local
// indices li, lj; wb is |rows| x K, hb is K x |cols|).
template <class WB, class HB>
inline void accumulate_cell(std::int64_t li, std::int64_t lj, double val, const WB& wb,
                            const HB& hb, int k, double beta, double phi, Eigen::MatrixXd& gw,
                            Eigen::MatrixXd& gh) {
    double mu = 0.0;
    for (int kk = 0; kk < k; ++kk) mu += std::abs(wb(li, kk)) * std::abs(hb(kk, lj));
    const double g = dloglik_raw(val, mu, beta, phi);
    for (int kk = 0; kk < k; ++kk) {
        gw(li, kk) += g * std::abs(hb(kk, lj));
        gh(kk, lj) += g * std::abs(wb(li, kk));
    }
}

}  // namespace detail

// beta-divergence d_beta(v || mu). General formula for beta outside {0, 1},
// analytic limits at beta = 0 (Itakura-Saito) and beta = 1 (KL).
double beta_divergence(double v, double mu, double beta);

// d/dmu of the Tweedie log-density: -(1/phi) mu^(beta-2) (mu - v).
// mu is clamped to kMuFloor first.
double dloglik_dmu(double v, double mu, const ModelSpec& spec);

// mean of entry (i, j) under the mirrored parametrization, clamped to the floor
double mean_at(const Eigen::MatrixXd& w, const Eigen::MatrixXd& h, std::int64_t i,
               std::int64_t j);

// Gradient of the full objective restricted to one block:
//   grad_w[i,k] = sign(w) * (scale * sum_j dloglik(v_ij, mu_ij) |h_kj| - lambda_w)
// and symmetrically for H. w_b is |rows| x K, h_b is K x |cols|; indices are
// block-local. The prior term enters once, unscaled.
std::pair<Eigen::MatrixXd, Eigen::MatrixXd> block_gradients(
    const ObservationMatrix& v, const Block& blk, const Eigen::MatrixXd& w_b,
    const Eigen::MatrixXd& h_b, const ModelSpec& spec, double scale);

// Unnormalized log posterior:
//   -(1/phi) sum_observed d_beta(v_ij || mu_ij) - lambda_w sum|w| - lambda_h sum|h|
// For beta = 1, phi = 1 the exact per-entry Poisson constant
// (v ln v - v - ln v!) is added so the result is the true log-likelihood
// plus the prior terms.
double log_posterior_unnorm(const ObservationMatrix& v, const FactorPair& factors,
                            const ModelSpec& spec);

// Per-entry Poisson constant used above; 0 for v = 0.
double poisson_log_constant(double v);

struct SyntheticData {
    ObservationMatrix v;
    FactorPair factors;
};

// Draws W, H from the priors and V from the matching Tweedie member.
// Supported: beta = 0 (gamma), beta = 1 with phi = 1 (Poisson), beta = 2
// (Gaussian clipped at 0), 0 < beta < 1 (compound Poisson). density < 1
// yields an observed-entries-only matrix over a uniform random cell mask.
SyntheticData generate_synthetic(const ModelSpec& spec, std::int64_t n_rows,
                                 std::int64_t n_cols, std::uint64_t seed,
                                 double density = 1.0);

// One draw from the Tweedie member with mean mu (same support as above).
double sample_tweedie(double mu, const ModelSpec& spec, std::mt19937_64& rng);

}  // namespace psgld
