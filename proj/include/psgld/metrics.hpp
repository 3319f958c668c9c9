#pragma once

#include <string>

#include "psgld/model.hpp"

namespace psgld {

// sqrt( sum_observed (v_ij - mu_ij)^2 / n_observed ), mu from |W||H|.
// Throws std::domain_error on an empty observation set.
double rmse(const ObservationMatrix& v, const FactorPair& factors);

// Shortest round-trip decimal representation (std::to_chars).
std::string format_double(double x);

}  // namespace psgld
