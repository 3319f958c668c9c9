#pragma once

#include <algorithm>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "psgld/model.hpp"
#include "psgld/partition.hpp"
#include "psgld/sampler.hpp"

namespace psgld {

// Auxiliary tensor for the Poisson-NMF Gibbs sampler: one length-K count
// vector per observed entry, with sum_k s_ijk = v_ij. Stored sparsely,
// aligned with the entry order of the ObservationMatrix.
class AuxiliaryTensor {
  public:
    // Multinomial draw per entry given the initial factors. Throws
    // std::domain_error when v is not integer-valued.
    static AuxiliaryTensor init(const ObservationMatrix& v, const FactorPair& state,
                                std::mt19937_64& rng);

    int k() const { return k_; }
    std::int64_t n_entries() const { return static_cast<std::int64_t>(counts_.size()) / k_; }
    std::uint32_t* counts(std::int64_t entry_idx) { return counts_.data() + entry_idx * k_; }
    const std::uint32_t* counts(std::int64_t entry_idx) const {
        return counts_.data() + entry_idx * k_;
    }

    // sum_k s_ijk == v_ij for every observed entry
    bool sums_match(const ObservationMatrix& v) const;

  private:
    int k_ = 0;
    std::vector<std::uint32_t> counts_;
};

// s ~ Multinomial(n, p_k proportional to weights[k]), via sequential
// conditional binomials.
void multinomial_draw(std::uint32_t n, std::span<const double> weights, std::uint32_t* out,
                      std::mt19937_64& rng);

// Full-batch Langevin step: the subsampled update with Omega = all observed
// entries and scale N/|Omega| = 1.
void ld_iteration(FactorPair& state, const ObservationMatrix& v, const ModelSpec& spec,
                  double eps, bool mirroring, std::mt19937_64& rng);

// Vanilla SGLD: |Omega| entries drawn with replacement, scale N/|Omega|.
void sgld_iteration(FactorPair& state, const ObservationMatrix& v, const ModelSpec& spec,
                    double eps, std::int64_t subsample_size, bool mirroring,
                    std::mt19937_64& rng);

// Default |Omega| = N/32 (at least 1).
inline std::int64_t default_sgld_subsample(std::int64_t n_observed) {
    return std::max<std::int64_t>(1, n_observed / 32);
}

// Deterministic core of sgld_iteration once Omega is fixed (entry indices
// into v, with multiplicity). Exposed so tests can pin the subsample.
void sgld_apply_subsample(FactorPair& state, const ObservationMatrix& v, const ModelSpec& spec,
                          double eps, std::span<const std::int64_t> omega, bool mirroring,
                          std::mt19937_64& rng);

// Gradient of log p(theta) + scale * sum_{k in omega} log p(v_k | theta)
// (same convention as part_gradient; used by the SGLD expectation oracle).
FactorPair subsample_gradient(const FactorPair& state, const ObservationMatrix& v,
                              const ModelSpec& spec, std::span<const std::int64_t> omega,
                              double scale);

// One Gibbs sweep for the Poisson-NMF augmentation (beta = 1, phi = 1):
//   s_ij. ~ Multinomial(v_ij, p_k prop. w_ik h_kj)
//   w_ik  ~ Gamma(1 + sum_j s_ijk, rate lambda_w + sum_j h_kj)
//   h_kj  ~ Gamma(1 + sum_i s_ijk, rate lambda_h + sum_i w_ik)
// Sums over j (i) run over the observed entries of row i (column j).
void gibbs_iteration(FactorPair& state, AuxiliaryTensor& aux, const ObservationMatrix& v,
                     const ModelSpec& spec, std::mt19937_64& rng);

// DSGD-style optimizer step: the PSGLD block update without injected noise.
void dsgd_iteration(FactorPair& state, const Part& part, const ObservationMatrix& v,
                    const ModelSpec& spec, double step, std::uint64_t seed, std::int64_t t,
                    std::int64_t n_total_observed, bool mirroring = true, int workers = 0);

}  // namespace psgld
