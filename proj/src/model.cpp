#include "psgld/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>
#include <string>

#include "psgld/rng.hpp"

namespace psgld {

void ModelSpec::validate() const {
    if (!(phi > 0)) throw std::invalid_argument("ModelSpec: phi must be > 0");
    if (!(lambda_w > 0)) throw std::invalid_argument("ModelSpec: lambda_w must be > 0");
    if (!(lambda_h > 0)) throw std::invalid_argument("ModelSpec: lambda_h must be > 0");
    if (k < 1) throw std::invalid_argument("ModelSpec: k must be >= 1");
    if (std::isnan(beta)) throw std::invalid_argument("ModelSpec: beta is NaN");
}

// ---------------------------------------------------------------------------
// ObservationMatrix

ObservationMatrix ObservationMatrix::dense(std::int64_t rows, std::int64_t cols,
                                           std::vector<double> row_major_values,
                                           bool allow_negative) {
    if (rows < 1 || cols < 1) throw std::invalid_argument("ObservationMatrix: empty shape");
    if (static_cast<std::int64_t>(row_major_values.size()) != rows * cols)
        throw std::invalid_argument("ObservationMatrix: value count != rows*cols");
    for (double x : row_major_values) {
        if (std::isnan(x)) throw std::invalid_argument("ObservationMatrix: NaN value");
        if (!allow_negative && x < 0)
            throw std::invalid_argument("ObservationMatrix: negative value under non-negativity");
    }
    ObservationMatrix m;
    m.rows_ = rows;
    m.cols_ = cols;
    m.n_observed_ = rows * cols;
    m.mode_ = MaskMode::kAllObservedDense;
    m.dense_ = std::move(row_major_values);
    return m;
}

ObservationMatrix ObservationMatrix::dense(const Eigen::MatrixXd& values, bool allow_negative) {
    std::vector<double> row_major(static_cast<std::size_t>(values.size()));
    for (Eigen::Index i = 0; i < values.rows(); ++i)
        for (Eigen::Index j = 0; j < values.cols(); ++j)
            row_major[static_cast<std::size_t>(i * values.cols() + j)] = values(i, j);
    return dense(values.rows(), values.cols(), std::move(row_major), allow_negative);
}

ObservationMatrix ObservationMatrix::sparse(std::int64_t rows, std::int64_t cols,
                                            std::vector<Entry> entries, bool allow_negative) {
    if (rows < 1 || cols < 1) throw std::invalid_argument("ObservationMatrix: empty shape");
    std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
        return a.i != b.i ? a.i < b.i : a.j < b.j;
    });
    ObservationMatrix m;
    m.rows_ = rows;
    m.cols_ = cols;
    m.mode_ = MaskMode::kObservedEntriesOnly;
    m.n_observed_ = static_cast<std::int64_t>(entries.size());
    m.sp_ptr_.assign(static_cast<std::size_t>(rows) + 1, 0);
    m.sp_row_.reserve(entries.size());
    m.sp_col_.reserve(entries.size());
    m.sp_val_.reserve(entries.size());
    for (std::size_t p = 0; p < entries.size(); ++p) {
        const Entry& e = entries[p];
        if (e.i < 0 || e.i >= rows || e.j < 0 || e.j >= cols)
            throw std::invalid_argument("ObservationMatrix: entry (" + std::to_string(e.i) +
                                        "," + std::to_string(e.j) + ") out of bounds");
        if (std::isnan(e.v)) throw std::invalid_argument("ObservationMatrix: NaN value");
        if (!allow_negative && e.v < 0)
            throw std::invalid_argument("ObservationMatrix: negative value under non-negativity");
        if (p > 0 && entries[p - 1].i == e.i && entries[p - 1].j == e.j)
            throw std::invalid_argument("ObservationMatrix: duplicate coordinate (" +
                                        std::to_string(e.i) + "," + std::to_string(e.j) + ")");
        m.sp_row_.push_back(e.i);
        m.sp_col_.push_back(e.j);
        m.sp_val_.push_back(e.v);
        ++m.sp_ptr_[static_cast<std::size_t>(e.i) + 1];
    }
    for (std::int64_t i = 0; i < rows; ++i)
        m.sp_ptr_[static_cast<std::size_t>(i) + 1] += m.sp_ptr_[static_cast<std::size_t>(i)];
    return m;
}

Entry ObservationMatrix::entry(std::int64_t k) const {
    if (is_dense()) return Entry{k / cols_, k % cols_, dense_[k]};
    return Entry{sp_row_[k], sp_col_[k], sp_val_[k]};
}

std::int64_t ObservationMatrix::lower_bound_in_row(std::int64_t i, std::int64_t col) const {
    auto first = sp_col_.begin() + sp_ptr_[static_cast<std::size_t>(i)];
    auto last = sp_col_.begin() + sp_ptr_[static_cast<std::size_t>(i) + 1];
    return std::lower_bound(first, last, col) - sp_col_.begin();
}

std::int64_t ObservationMatrix::count_in_block(const Block& blk) const {
    if (is_dense()) return blk.cell_count();
    std::int64_t n = 0;
    for (std::int64_t i = blk.rows.begin; i < blk.rows.end; ++i)
        n += lower_bound_in_row(i, blk.cols.end) - lower_bound_in_row(i, blk.cols.begin);
    return n;
}

// ---------------------------------------------------------------------------
// FactorPair

FactorPair FactorPair::zeros(std::int64_t n_rows, std::int64_t n_cols, int k) {
    return FactorPair{Eigen::MatrixXd::Zero(n_rows, k), Eigen::MatrixXd::Zero(k, n_cols)};
}

FactorPair FactorPair::from_priors(std::int64_t n_rows, std::int64_t n_cols,
                                   const ModelSpec& spec, std::uint64_t seed) {
    spec.validate();
    FactorPair f = zeros(n_rows, n_cols, spec.k);
    std::exponential_distribution<double> exp_w(spec.lambda_w);
    std::exponential_distribution<double> exp_h(spec.lambda_h);
    auto rng_w = make_stream(seed, stream_tag::kInitW);
    for (std::int64_t i = 0; i < n_rows; ++i)
        for (int k2 = 0; k2 < spec.k; ++k2) f.w(i, k2) = exp_w(rng_w);
    auto rng_h = make_stream(seed, stream_tag::kInitH);
    for (std::int64_t j = 0; j < n_cols; ++j)
        for (int k2 = 0; k2 < spec.k; ++k2) f.h(k2, j) = exp_h(rng_h);
    return f;
}

bool FactorPair::all_finite() const {
    return w.allFinite() && h.allFinite();
}

bool FactorPair::all_nonnegative() const {
    return (w.array() >= 0).all() && (h.array() >= 0).all();
}

bool FactorPair::bitwise_equal(const FactorPair& other) const {
    if (w.rows() != other.w.rows() || w.cols() != other.w.cols()) return false;
    if (h.rows() != other.h.rows() || h.cols() != other.h.cols()) return false;
    return std::memcmp(w.data(), other.w.data(), sizeof(double) * w.size()) == 0 &&
           std::memcmp(h.data(), other.h.data(), sizeof(double) * h.size()) == 0;
}

// ---------------------------------------------------------------------------
// Divergence math

double beta_divergence(double v, double mu, double beta) {
    if (std::isnan(v) || std::isnan(mu) || std::isnan(beta))
        throw std::domain_error("beta_divergence: NaN input");
    if (!(mu > 0)) throw std::domain_error("beta_divergence: mu must be > 0");
    if (v < 0) throw std::domain_error("beta_divergence: v must be >= 0");
    if (beta == 0.0) {
        if (!(v > 0)) throw std::domain_error("beta_divergence: beta=0 requires v > 0");
        const double r = v / mu;
        return r - std::log(r) - 1.0;
    }
    if (beta == 1.0) {
        if (v == 0.0) return mu;
        return v * std::log(v / mu) - v + mu;
    }
    // Near the removable singularities the three general-formula terms are
    // O(1/|beta - b0|) and cancel catastrophically; a first-order expansion
    // around the limit is exact to O(delta^2) and numerically clean.
    constexpr double kLimitWindow = 1e-4;
    if (v > 0 && std::abs(beta - 1.0) < kLimitWindow) {
        const double delta = beta - 1.0;
        const double log_ratio = std::log(v / mu);
        const double kl = v * log_ratio - v + mu;
        const double corr = 0.5 * v * log_ratio * log_ratio + (std::log(mu) - 1.0) * kl;
        return kl + delta * corr;
    }
    if (v > 0 && std::abs(beta) < kLimitWindow) {
        const double delta = beta;
        const double r = v / mu;
        const double log_v = std::log(v);
        const double log_mu = std::log(mu);
        const double log_ratio = log_v - log_mu;
        const double is = r - log_ratio - 1.0;
        const double corr =
            is - 0.5 * log_ratio * (log_v + log_mu) + log_mu * (r - 1.0);
        return is + delta * corr;
    }
    return std::pow(v, beta) / (beta * (beta - 1.0)) -
           v * std::pow(mu, beta - 1.0) / (beta - 1.0) + std::pow(mu, beta) / beta;
}

double dloglik_dmu(double v, double mu, const ModelSpec& spec) {
    if (std::isnan(v) || std::isnan(mu)) throw std::domain_error("dloglik_dmu: NaN input");
    return detail::dloglik_raw(v, mu, spec.beta, spec.phi);
}

double mean_at(const Eigen::MatrixXd& w, const Eigen::MatrixXd& h, std::int64_t i,
               std::int64_t j) {
    const int k = static_cast<int>(w.cols());
    double mu = 0.0;
    for (int kk = 0; kk < k; ++kk) mu += std::abs(w(i, kk)) * std::abs(h(kk, j));
    return std::max(mu, kMuFloor);
}

std::pair<Eigen::MatrixXd, Eigen::MatrixXd> block_gradients(
    const ObservationMatrix& v, const Block& blk, const Eigen::MatrixXd& w_b,
    const Eigen::MatrixXd& h_b, const ModelSpec& spec, double scale) {
    const std::int64_t nr = blk.rows.size();
    const std::int64_t nc = blk.cols.size();
    const int k = spec.k;
    if (w_b.rows() != nr || w_b.cols() != k || h_b.rows() != k || h_b.cols() != nc)
        throw std::invalid_argument("block_gradients: factor block shape mismatch");
    Eigen::MatrixXd gw = Eigen::MatrixXd::Zero(nr, k);
    Eigen::MatrixXd gh = Eigen::MatrixXd::Zero(k, nc);
    v.for_each_in_block(blk, [&](std::int64_t i, std::int64_t j, double val) {
        detail::accumulate_cell(i - blk.rows.begin, j - blk.cols.begin, val, w_b, h_b, k,
                                spec.beta, spec.phi, gw, gh);
    });
    for (std::int64_t li = 0; li < nr; ++li)
        for (int kk = 0; kk < k; ++kk)
            gw(li, kk) = detail::sign_of(w_b(li, kk)) * (scale * gw(li, kk) - spec.lambda_w);
    for (int kk = 0; kk < k; ++kk)
        for (std::int64_t lj = 0; lj < nc; ++lj)
            gh(kk, lj) = detail::sign_of(h_b(kk, lj)) * (scale * gh(kk, lj) - spec.lambda_h);
    return {std::move(gw), std::move(gh)};
}

double poisson_log_constant(double v) {
    if (v <= 0.0) return 0.0;
    return v * std::log(v) - v - std::lgamma(v + 1.0);
}

double log_posterior_unnorm(const ObservationMatrix& v, const FactorPair& factors,
                            const ModelSpec& spec) {
    if (!factors.all_finite()) throw std::domain_error("log_posterior_unnorm: non-finite factors");
    const bool exact_poisson = (spec.beta == 1.0 && spec.phi == 1.0);
    // Deterministic parallel reduction: fixed row chunks, partials summed in
    // chunk order, so the result is identical for any worker count.
    const std::int64_t chunk_rows = 256;
    const std::int64_t n_chunks = (v.rows() + chunk_rows - 1) / chunk_rows;
    std::vector<double> partial(static_cast<std::size_t>(n_chunks), 0.0);
#pragma omp parallel for schedule(static)
    for (std::int64_t c = 0; c < n_chunks; ++c) {
        Block slab{{c * chunk_rows, std::min((c + 1) * chunk_rows, v.rows())}, {0, v.cols()}};
        double acc = 0.0;
        v.for_each_in_block(slab, [&](std::int64_t i, std::int64_t j, double val) {
            const double mu = mean_at(factors.w, factors.h, i, j);
            acc -= beta_divergence(val, mu, spec.beta) / spec.phi;
            if (exact_poisson) acc += poisson_log_constant(val);
        });
        partial[static_cast<std::size_t>(c)] = acc;
    }
    double total = 0.0;
    for (double p : partial) total += p;
    total -= spec.lambda_w * factors.w.array().abs().sum();
    total -= spec.lambda_h * factors.h.array().abs().sum();
    return total;
}

// ---------------------------------------------------------------------------
// Synthetic data

double sample_tweedie(double mu, const ModelSpec& spec, std::mt19937_64& rng) {
    const double beta = spec.beta;
    if (beta == 1.0) {
        if (spec.phi != 1.0)
            throw std::domain_error("sample_tweedie: beta=1 generator requires phi=1");
        if (mu <= 0) return 0.0;
        return static_cast<double>(std::poisson_distribution<long long>(mu)(rng));
    }
    if (beta == 0.0) {
        // gamma with mean mu, variance phi*mu^2
        if (mu <= 0) return 0.0;
        std::gamma_distribution<double> gamma(1.0 / spec.phi, spec.phi * mu);
        return gamma(rng);
    }
    if (beta == 2.0) {
        std::normal_distribution<double> normal(mu, std::sqrt(spec.phi));
        return std::max(0.0, normal(rng));
    }
    if (beta > 0.0 && beta < 1.0) {
        // Compound Poisson: count n ~ Poisson(mu^beta/(phi*beta)), each jump
        // gamma with shape beta/(1-beta) and scale phi*(1-beta)*mu^(1-beta).
        // E[v] = mu, Var[v] = phi*mu^(2-beta), P(v=0) = exp(-mu^beta/(phi*beta)).
        if (mu <= 0) return 0.0;
        const double rate = std::pow(mu, beta) / (spec.phi * beta);
        const long long n = std::poisson_distribution<long long>(rate)(rng);
        if (n == 0) return 0.0;
        std::gamma_distribution<double> jump(beta / (1.0 - beta),
                                             spec.phi * (1.0 - beta) * std::pow(mu, 1.0 - beta));
        double v = 0.0;
        for (long long c = 0; c < n; ++c) v += jump(rng);
        return v;
    }
    throw std::domain_error("sample_tweedie: no supported generator for beta=" +
                            std::to_string(beta));
}

SyntheticData generate_synthetic(const ModelSpec& spec, std::int64_t n_rows,
                                 std::int64_t n_cols, std::uint64_t seed, double density) {
    spec.validate();
    if (n_rows < 1 || n_cols < 1) throw std::invalid_argument("generate_synthetic: empty shape");
    if (!(density > 0.0) || density > 1.0)
        throw std::invalid_argument("generate_synthetic: density must be in (0, 1]");
    const bool supported = spec.beta == 0.0 || (spec.beta == 1.0 && spec.phi == 1.0) ||
                           spec.beta == 2.0 || (spec.beta > 0.0 && spec.beta < 1.0);
    if (!supported)
        throw std::domain_error("generate_synthetic: no Tweedie generator for beta=" +
                                std::to_string(spec.beta) + ", phi=" + std::to_string(spec.phi));

    FactorPair factors = FactorPair::from_priors(n_rows, n_cols, spec, seed);
    auto rng = make_stream(seed, stream_tag::kSyntheticValues);

    if (density == 1.0) {
        std::vector<double> values(static_cast<std::size_t>(n_rows * n_cols));
        for (std::int64_t i = 0; i < n_rows; ++i)
            for (std::int64_t j = 0; j < n_cols; ++j) {
                const double mu = mean_at(factors.w, factors.h, i, j);
                values[static_cast<std::size_t>(i * n_cols + j)] = sample_tweedie(mu, spec, rng);
            }
        return SyntheticData{ObservationMatrix::dense(n_rows, n_cols, std::move(values)),
                             std::move(factors)};
    }

    const std::int64_t total = n_rows * n_cols;
    const std::int64_t n_cells = std::max<std::int64_t>(1, std::llround(density * total));
    // Uniform cell mask without replacement (selection sampling keeps the
    // linear indices sorted).
    auto mask_rng = make_stream(seed, stream_tag::kSyntheticMask);
    std::vector<std::int64_t> cells;
    cells.reserve(static_cast<std::size_t>(n_cells));
    std::int64_t needed = n_cells;
    for (std::int64_t c = 0; c < total && needed > 0; ++c) {
        const std::int64_t remaining = total - c;
        std::uniform_int_distribution<std::int64_t> u(0, remaining - 1);
        if (u(mask_rng) < needed) {
            cells.push_back(c);
            --needed;
        }
    }
    std::vector<Entry> entries;
    entries.reserve(cells.size());
    for (std::int64_t c : cells) {
        const std::int64_t i = c / n_cols;
        const std::int64_t j = c % n_cols;
        const double mu = mean_at(factors.w, factors.h, i, j);
        entries.push_back(Entry{i, j, sample_tweedie(mu, spec, rng)});
    }
    return SyntheticData{ObservationMatrix::sparse(n_rows, n_cols, std::move(entries)),
                         std::move(factors)};
}

}  // namespace psgld
