#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "meft/grad_check.hpp"
#include "meft/kernels.hpp"
#include "meft/rng.hpp"

using namespace meft;

namespace {

Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const index_t r = static_cast<index_t>(rows.size());
    const index_t c = static_cast<index_t>(rows.begin()->size());
    Matrix m(r, c);
    index_t i = 0;
    for (const auto& row : rows) {
        index_t j = 0;
        for (double v : row) m.at(i, j++) = v;
        ++i;
    }
    return m;
}

// Independent scalar-loop product used as the matmul oracle.
Matrix matmul_oracle(const Matrix& a, const Matrix& b) {
    Matrix out(a.rows, b.cols);
    for (index_t i = 0; i < a.rows; ++i) {
        for (index_t j = 0; j < b.cols; ++j) {
            double acc = 0.0;
            for (index_t k = 0; k < a.cols; ++k) acc += a.at(i, k) * b.at(k, j);
            out.at(i, j) = acc;
        }
    }
    return out;
}

}  // namespace

TEST_CASE("matmul identity and zero") {
    const Matrix a = from_rows({{1, 2}, {3, 4}});
    CHECK(matmul(Matrix::identity(2), a) == a);
    CHECK(matmul(a, Matrix::zeros(2, 2)) == Matrix::zeros(2, 2));
}

TEST_CASE("matmul hand example") {
    const Matrix a = from_rows({{1, 2}, {3, 4}});
    const Matrix b = from_rows({{5}, {6}});
    const Matrix c = matmul(a, b);
    CHECK(c.rows == 2);
    CHECK(c.cols == 1);
    CHECK(c.at(0, 0) == 17.0);
    CHECK(c.at(1, 0) == 39.0);
}

TEST_CASE("matmul dimension mismatch names both shapes") {
    const Matrix a(2, 3);
    const Matrix b(2, 2);
    CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("2x3"), ShapeError);
}

TEST_CASE("matmul matches scalar-loop oracle on random shapes") {
    SeededRng rng(42);
    for (int it = 0; it < 10; ++it) {
        const index_t m = rng.uniform_int(1, 6);
        const index_t k = rng.uniform_int(1, 6);
        const index_t n = rng.uniform_int(1, 6);
        const Matrix a = rng.uniform_matrix(m, k, -2.0, 2.0);
        const Matrix b = rng.uniform_matrix(k, n, -2.0, 2.0);
        const Matrix got = matmul(a, b);
        const Matrix want = matmul_oracle(a, b);
        for (index_t i = 0; i < got.size(); ++i) {
            CHECK(got.data[i] == doctest::Approx(want.data[i]).epsilon(1e-12));
        }
    }
}

TEST_CASE("matmul serial reference and OpenMP agree bitwise") {
    SeededRng rng(3);
    const Matrix a = rng.uniform_matrix(37, 53, -1.0, 1.0);
    const Matrix b = rng.uniform_matrix(53, 41, -1.0, 1.0);
    CHECK(ref::matmul(a, b) == matmul(a, b));
    CHECK(ref::relu(a) == relu(a));
    CHECK(ref::silu(a) == silu(a));
}

TEST_CASE("matmul associativity within 1e-9 relative") {
    SeededRng rng(5);
    for (int it = 0; it < 5; ++it) {
        const Matrix a = rng.uniform_matrix(4, 5, -1.0, 1.0);
        const Matrix b = rng.uniform_matrix(5, 3, -1.0, 1.0);
        const Matrix c = rng.uniform_matrix(3, 6, -1.0, 1.0);
        const Matrix left = matmul(matmul(a, b), c);
        const Matrix right = matmul(a, matmul(b, c));
        for (index_t i = 0; i < left.size(); ++i) {
            const double denom = std::max(1.0, std::abs(left.data[i]));
            CHECK(std::abs(left.data[i] - right.data[i]) / denom < 1e-9);
        }
    }
}

TEST_CASE("relu sign cases and idempotence") {
    const Matrix x = from_rows({{-1, 0, 2}});
    const Matrix y = relu(x);
    CHECK(y == from_rows({{0, 0, 2}}));
    CHECK(relu(Matrix::zeros(2, 2)) == Matrix::zeros(2, 2));
    CHECK(relu(from_rows({{3.5}})).at(0, 0) == 3.5);

    SeededRng rng(9);
    const Matrix r = rng.uniform_matrix(8, 8, -2.0, 2.0);
    CHECK(relu(relu(r)) == relu(r));
}

TEST_CASE("silu values") {
    CHECK(silu(from_rows({{0}})).at(0, 0) == 0.0);
    // asymptote: silu(x) ~ x for large x
    CHECK(silu(from_rows({{40.0}})).at(0, 0) == doctest::Approx(40.0).epsilon(1e-12));
    // independent sigmoid evaluation: 1 * 1/(1+e^-1)
    const double expect = 1.0 / (1.0 + std::exp(-1.0));
    CHECK(silu(from_rows({{1.0}})).at(0, 0) == doctest::Approx(expect).epsilon(1e-15));
}

TEST_CASE("finite_diff_grad on sum of squares") {
    const Matrix theta = from_rows({{1, 2}});
    const auto f = [](const Matrix& m) {
        double s = 0.0;
        for (double v : m.data) s += v * v;
        return s;
    };
    const Matrix g = finite_diff_grad(f, theta, 1e-5);
    CHECK(g.at(0, 0) == doctest::Approx(2.0).epsilon(1e-8));
    CHECK(g.at(0, 1) == doctest::Approx(4.0).epsilon(1e-8));
}

TEST_CASE("finite_diff_grad constant function") {
    const Matrix theta = from_rows({{1, -1, 0.5}});
    const Matrix g = finite_diff_grad([](const Matrix&) { return 3.0; }, theta, 1e-5);
    for (double v : g.data) CHECK(v == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("finite_diff_grad on sum of ReLU away from kink") {
    const Matrix theta = from_rows({{-1.0, 3.0}});
    const auto f = [](const Matrix& m) {
        double s = 0.0;
        for (double v : m.data) s += v > 0.0 ? v : 0.0;
        return s;
    };
    const Matrix g = finite_diff_grad(f, theta, 1e-5);
    CHECK(g.at(0, 0) == doctest::Approx(0.0).epsilon(1e-10));
    CHECK(g.at(0, 1) == doctest::Approx(1.0).epsilon(1e-10));
}

TEST_CASE("finite_diff_grad on sum(W theta) equals column sums of W") {
    SeededRng rng(17);
    const Matrix w = rng.uniform_matrix(4, 3, -1.0, 1.0);
    const Matrix theta = rng.uniform_matrix(3, 1, -1.0, 1.0);
    const auto f = [&w](const Matrix& th) {
        const Matrix y = matmul(w, th);
        double s = 0.0;
        for (double x : y.data) s += x;
        return s;
    };
    const Matrix g = finite_diff_grad(f, theta, 1e-5);
    for (index_t j = 0; j < 3; ++j) {
        double col = 0.0;
        for (index_t i = 0; i < 4; ++i) col += w.at(i, j);
        CHECK(std::abs(g.at(j, 0) - col) < 1e-6);
    }
}

TEST_CASE("finite_diff_grad rejects bad eps and non-finite values") {
    const Matrix theta = from_rows({{1.0}});
    CHECK_THROWS_AS(finite_diff_grad([](const Matrix&) { return 1.0; }, theta, 0.0),
                    std::invalid_argument);
    CHECK_THROWS_AS(finite_diff_grad(
                        [](const Matrix&) { return std::numeric_limits<double>::infinity(); },
                        theta, 1e-5),
                    std::runtime_error);
}

TEST_CASE("seeded rng reproducibility and known first draws") {
    SeededRng a(123);
    SeededRng b(123);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

    SeededRng c(123);
    SeededRng d(456);
    bool differ = false;
    for (int i = 0; i < 10; ++i) differ |= (c.next_u64() != d.next_u64());
    CHECK(differ);

    SeededRng e(7);
    for (int i = 0; i < 1000; ++i) {
        const double u = e.uniform();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
        const index_t k = e.uniform_int(3, 9);
        CHECK(k >= 3);
        CHECK(k <= 9);
        CHECK(std::isfinite(e.normal()));
    }
}

TEST_CASE("check_finite rejects NaN") {
    Matrix m(1, 2);
    m.data[1] = std::nan("");
    CHECK_THROWS_AS(check_finite(m, "test"), std::runtime_error);
}
