#include "psgld/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace psgld {

double rmse(const ObservationMatrix& v, const FactorPair& factors) {
    if (v.n_observed() == 0) throw std::domain_error("rmse: empty observation set");
    // Fixed row chunks summed in order: deterministic for any worker count.
    const std::int64_t chunk_rows = 256;
    const std::int64_t n_chunks = (v.rows() + chunk_rows - 1) / chunk_rows;
    std::vector<double> partial(static_cast<std::size_t>(n_chunks), 0.0);
#pragma omp parallel for schedule(static)
    for (std::int64_t c = 0; c < n_chunks; ++c) {
        Block slab{{c * chunk_rows, std::min((c + 1) * chunk_rows, v.rows())}, {0, v.cols()}};
        const int k = static_cast<int>(factors.w.cols());
        double acc = 0.0;
        v.for_each_in_block(slab, [&](std::int64_t i, std::int64_t j, double val) {
            double mu = 0.0;  // unclamped: this is a reconstruction metric
            for (int kk = 0; kk < k; ++kk)
                mu += std::abs(factors.w(i, kk)) * std::abs(factors.h(kk, j));
            const double d = val - mu;
            acc += d * d;
        });
        partial[static_cast<std::size_t>(c)] = acc;
    }
    double sse = 0.0;
    for (double p : partial) sse += p;
    return std::sqrt(sse / static_cast<double>(v.n_observed()));
}

std::string format_double(double x) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), x);
    return std::string(buf, res.ptr);
}

}  // namespace psgld
