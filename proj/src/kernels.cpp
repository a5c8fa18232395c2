#include "meft/kernels.hpp"

#include <cmath>

namespace meft {

void check_finite(const Matrix& m, const char* where) {
    for (double x : m.data) {
        if (!std::isfinite(x)) {
            throw std::runtime_error(std::string(where) + ": non-finite entry");
        }
    }
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double silu_scalar(double x) { return x * sigmoid(x); }

double silu_grad_scalar(double x) {
    const double s = sigmoid(x);
    return s * (1.0 + x * (1.0 - s));
}

namespace {

void require_inner(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows) {
        throw ShapeError("matmul: inner dimensions disagree: " + shape_str(a) + " * " + shape_str(b));
    }
}

// out[i,:] += a[i,k] * b[k,:] for k ascending; per-element summation order is
// left-to-right over k regardless of threading.
inline void matmul_row(const double* arow, const Matrix& b, double* out) {
    for (index_t k = 0; k < b.rows; ++k) {
        const double aik = arow[k];
        if (aik == 0.0) continue;
        const double* brow = b.row(k);
        for (index_t j = 0; j < b.cols; ++j) out[j] += aik * brow[j];
    }
}

}  // namespace

namespace ref {

Matrix matmul(const Matrix& a, const Matrix& b) {
    require_inner(a, b);
    Matrix out(a.rows, b.cols);
    for (index_t i = 0; i < a.rows; ++i) matmul_row(a.row(i), b, out.row(i));
    check_finite(out, "matmul");
    return out;
}

Matrix relu(const Matrix& x) {
    Matrix out(x.rows, x.cols);
    for (index_t i = 0; i < x.size(); ++i) out.data[i] = x.data[i] > 0.0 ? x.data[i] : 0.0;
    return out;
}

Matrix silu(const Matrix& x) {
    Matrix out(x.rows, x.cols);
    for (index_t i = 0; i < x.size(); ++i) out.data[i] = silu_scalar(x.data[i]);
    return out;
}

}  // namespace ref

Matrix matmul(const Matrix& a, const Matrix& b) {
    require_inner(a, b);
    Matrix out(a.rows, b.cols);
#pragma omp parallel for schedule(static) if (a.rows * a.cols * b.cols > 32768)
    for (index_t i = 0; i < a.rows; ++i) matmul_row(a.row(i), b, out.row(i));
    check_finite(out, "matmul");
    return out;
}

Matrix relu(const Matrix& x) {
    Matrix out(x.rows, x.cols);
    const index_t n = x.size();
#pragma omp parallel for schedule(static) if (n > 65536)
    for (index_t i = 0; i < n; ++i) out.data[i] = x.data[i] > 0.0 ? x.data[i] : 0.0;
    return out;
}

Matrix silu(const Matrix& x) {
    Matrix out(x.rows, x.cols);
    const index_t n = x.size();
#pragma omp parallel for schedule(static) if (n > 65536)
    for (index_t i = 0; i < n; ++i) out.data[i] = silu_scalar(x.data[i]);
    return out;
}

Matrix transpose(const Matrix& a) {
    Matrix out(a.cols, a.rows);
    for (index_t i = 0; i < a.rows; ++i) {
        const double* arow = a.row(i);
        for (index_t j = 0; j < a.cols; ++j) out.at(j, i) = arow[j];
    }
    return out;
}

namespace {
void require_same(const Matrix& a, const Matrix& b, const char* op) {
    if (!a.same_shape(b)) {
        throw ShapeError(std::string(op) + ": shape mismatch: " + shape_str(a) + " vs " + shape_str(b));
    }
}
}  // namespace

Matrix add(const Matrix& a, const Matrix& b) {
    require_same(a, b, "add");
    Matrix out(a.rows, a.cols);
    for (index_t i = 0; i < a.size(); ++i) out.data[i] = a.data[i] + b.data[i];
    return out;
}

Matrix sub(const Matrix& a, const Matrix& b) {
    require_same(a, b, "sub");
    Matrix out(a.rows, a.cols);
    for (index_t i = 0; i < a.size(); ++i) out.data[i] = a.data[i] - b.data[i];
    return out;
}

Matrix hadamard(const Matrix& a, const Matrix& b) {
    require_same(a, b, "hadamard");
    Matrix out(a.rows, a.cols);
    for (index_t i = 0; i < a.size(); ++i) out.data[i] = a.data[i] * b.data[i];
    return out;
}

Matrix scale(const Matrix& a, double s) {
    Matrix out(a.rows, a.cols);
    for (index_t i = 0; i < a.size(); ++i) out.data[i] = a.data[i] * s;
    return out;
}

void add_inplace(Matrix& a, const Matrix& b) {
    require_same(a, b, "add_inplace");
    for (index_t i = 0; i < a.size(); ++i) a.data[i] += b.data[i];
}

}  // namespace meft
