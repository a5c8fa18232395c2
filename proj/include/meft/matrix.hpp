#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace meft {

using index_t = std::int64_t;

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Dense row-major matrix, double precision. All training/testing math runs in
// double; single precision appears only in the checkpoint file format.
struct Matrix {
    index_t rows = 0;
    index_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(index_t r, index_t c) : rows(r), cols(c), data(static_cast<size_t>(r * c), 0.0) {
        if (r < 0 || c < 0) throw ShapeError("Matrix: negative dimension");
    }

    static Matrix zeros(index_t r, index_t c) { return Matrix(r, c); }

    static Matrix identity(index_t n) {
        Matrix m(n, n);
        for (index_t i = 0; i < n; ++i) m.data[static_cast<size_t>(i * n + i)] = 1.0;
        return m;
    }

    double& at(index_t i, index_t j) { return data[static_cast<size_t>(i * cols + j)]; }
    double at(index_t i, index_t j) const { return data[static_cast<size_t>(i * cols + j)]; }

    double* row(index_t i) { return data.data() + i * cols; }
    const double* row(index_t i) const { return data.data() + i * cols; }

    index_t size() const { return rows * cols; }
    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

    bool operator==(const Matrix& o) const {
        return rows == o.rows && cols == o.cols && data == o.data;
    }
};

inline std::string shape_str(const Matrix& m) {
    return std::to_string(m.rows) + "x" + std::to_string(m.cols);
}

// Throws if any entry is NaN or Inf.
void check_finite(const Matrix& m, const char* where);

}  // namespace meft
