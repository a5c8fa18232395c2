#pragma once

#include "meft/matrix.hpp"

namespace meft {

// Dense kernels. Every kernel has a serial reference version (namespace ref)
// and an OpenMP version parallelized over independent output elements; both
// share the same per-row inner routine, so results are bit-identical for any
// thread count. The k-summation in matmul is fixed left-to-right; no
// reassociation.

namespace ref {
Matrix matmul(const Matrix& a, const Matrix& b);
Matrix relu(const Matrix& x);
Matrix silu(const Matrix& x);
}  // namespace ref

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix relu(const Matrix& x);
Matrix silu(const Matrix& x);

Matrix transpose(const Matrix& a);
Matrix add(const Matrix& a, const Matrix& b);
Matrix sub(const Matrix& a, const Matrix& b);
Matrix hadamard(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& a, double s);
void add_inplace(Matrix& a, const Matrix& b);

double sigmoid(double x);
double silu_scalar(double x);
// d/dx silu(x)
double silu_grad_scalar(double x);

// Left-to-right accumulation; shared by every selection-scoring path so
// score comparisons are bit-identical across them.
inline double dot(const double* a, const double* b, index_t d) {
    double acc = 0.0;
    for (index_t k = 0; k < d; ++k) acc += a[k] * b[k];
    return acc;
}

}  // namespace meft
