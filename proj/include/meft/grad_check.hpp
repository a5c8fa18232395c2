#pragma once

#include <functional>

#include "meft/matrix.hpp"

namespace meft {

// Central-difference gradient of a scalar function of a matrix:
// (f(theta + eps*e) - f(theta - eps*e)) / (2*eps) per entry.
// Throws if eps <= 0 or if f evaluates to a non-finite value.
Matrix finite_diff_grad(const std::function<double(const Matrix&)>& f, const Matrix& theta,
                        double eps);

}  // namespace meft
