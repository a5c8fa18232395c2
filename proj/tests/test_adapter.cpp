#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "meft/adapter.hpp"
#include "meft/diag.hpp"
#include "meft/grad_check.hpp"
#include "meft/kernels.hpp"
#include "meft/rng.hpp"

using namespace meft;

namespace {

struct SmallConfig {
    BaseFfn base;
    AdapterWeights adapter;
    HiddenBatch h;
};

SmallConfig random_config(SeededRng& rng, index_t d, index_t n, index_t r, index_t batch,
                          index_t seq, Activation act = Activation::SiLU) {
    SmallConfig c;
    c.base.w_in = rng.uniform_matrix(d, n, -1.0, 1.0);
    c.base.w_out = rng.uniform_matrix(n, d, -1.0, 1.0);
    c.base.act = act;
    c.adapter.w_a = rng.uniform_matrix(d, r, -1.0, 1.0);
    c.adapter.w_b = rng.uniform_matrix(r, d, -1.0, 1.0);
    c.h = HiddenBatch(batch, seq, rng.uniform_matrix(batch * seq, d, -1.0, 1.0));
    return c;
}

double sum_weighted(const Matrix& m, const Matrix& w) {
    double s = 0.0;
    for (index_t i = 0; i < m.size(); ++i) s += m.data[i] * w.data[i];
    return s;
}

}  // namespace

TEST_CASE("dense_ffn_pa with zero adapter equals base FFN exactly") {
    SeededRng rng(1);
    SmallConfig c = random_config(rng, 3, 5, 4, 1, 2);
    c.adapter.w_a = Matrix(3, 4);
    c.adapter.w_b = Matrix(4, 3);
    const Matrix base_only =
        matmul(silu(matmul(c.h.values, c.base.w_in)), c.base.w_out);
    const HiddenBatch out = dense_ffn_pa(c.h, c.base, c.adapter);
    CHECK(out.values == base_only);
}

TEST_CASE("dense_ffn_pa of zero input is zero") {
    SeededRng rng(2);
    SmallConfig c = random_config(rng, 3, 5, 4, 1, 2);
    c.h.values = Matrix(2, 3);
    const HiddenBatch out = dense_ffn_pa(c.h, c.base, c.adapter);
    for (double v : out.values.data) CHECK(v == 0.0);
}

TEST_CASE("dense_ffn_pa matches scalar-loop oracle") {
    SeededRng rng(3);
    const index_t d = 2, n = 2, r = 2;
    SmallConfig c = random_config(rng, d, n, r, 1, 1);
    const HiddenBatch out = dense_ffn_pa(c.h, c.base, c.adapter);

    for (index_t j = 0; j < d; ++j) {
        double want = 0.0;
        for (index_t m = 0; m < n; ++m) {
            double pre = 0.0;
            for (index_t k = 0; k < d; ++k) pre += c.h.values.at(0, k) * c.base.w_in.at(k, m);
            const double act = pre / (1.0 + std::exp(-pre));
            want += act * c.base.w_out.at(m, j);
        }
        for (index_t m = 0; m < r; ++m) {
            double pre = 0.0;
            for (index_t k = 0; k < d; ++k) pre += c.h.values.at(0, k) * c.adapter.w_a.at(k, m);
            if (pre > 0.0) want += pre * c.adapter.w_b.at(m, j);
        }
        CHECK(out.values.at(0, j) == doctest::Approx(want).epsilon(1e-12));
    }
}

TEST_CASE("topk_select full budget selects every index") {
    SeededRng rng(4);
    const Matrix w_a = rng.uniform_matrix(3, 5, -1.0, 1.0);
    const HiddenBatch h(2, 2, rng.uniform_matrix(4, 3, -1.0, 1.0));
    const SelectionSet sel = topk_select(h, w_a, 5);
    CHECK(sel.unioned == std::vector<index_t>{0, 1, 2, 3, 4});
    for (const auto& pt : sel.per_token) CHECK(pt.size() == 5);
}

TEST_CASE("topk_select zero input breaks ties toward low indices") {
    const Matrix w_a = Matrix(3, 6);
    const HiddenBatch h(1, 2, Matrix(2, 3));
    const SelectionSet sel = topk_select(h, w_a, 3);
    for (const auto& pt : sel.per_token) CHECK(pt == std::vector<index_t>{0, 1, 2});
    CHECK(sel.unioned == std::vector<index_t>{0, 1, 2});
}

TEST_CASE("topk_select scores example") {
    // columns (1,0), (0,1), (-1,0), (0.5,0.5); h = (1,2)
    Matrix w_a(2, 4);
    w_a.at(0, 0) = 1.0;
    w_a.at(1, 0) = 0.0;
    w_a.at(0, 1) = 0.0;
    w_a.at(1, 1) = 1.0;
    w_a.at(0, 2) = -1.0;
    w_a.at(1, 2) = 0.0;
    w_a.at(0, 3) = 0.5;
    w_a.at(1, 3) = 0.5;
    Matrix hv(1, 2);
    hv.at(0, 0) = 1.0;
    hv.at(0, 1) = 2.0;
    const SelectionSet sel = topk_select(HiddenBatch(1, 1, hv), w_a, 2);
    CHECK(sel.unioned == std::vector<index_t>{1, 3});
}

TEST_CASE("topk_select clamps K > r with a warning") {
    SeededRng rng(5);
    const Matrix w_a = rng.uniform_matrix(2, 3, -1.0, 1.0);
    const HiddenBatch h(1, 1, rng.uniform_matrix(1, 2, -1.0, 1.0));
    const long before = warn_count();
    const SelectionSet sel = topk_select(h, w_a, 10);
    CHECK(warn_count() == before + 1);
    CHECK(sel.unioned.size() == 3);
    CHECK_THROWS_AS(topk_select(h, w_a, 0), std::invalid_argument);
}

TEST_CASE("topk_select is a pure function: repeated calls agree bitwise") {
    SeededRng rng(6);
    const Matrix w_a = rng.uniform_matrix(4, 16, -1.0, 1.0);
    const HiddenBatch h(2, 3, rng.uniform_matrix(6, 4, -1.0, 1.0));
    const SelectionSet a = topk_select(h, w_a, 5);
    const SelectionSet b = topk_select(h, w_a, 5);
    CHECK(a == b);
}

TEST_CASE("union bound |S| <= min(r, B*l*K)") {
    SeededRng rng(7);
    for (int it = 0; it < 20; ++it) {
        const index_t d = rng.uniform_int(1, 4);
        const index_t r = rng.uniform_int(1, 12);
        const index_t b = rng.uniform_int(1, 3);
        const index_t l = rng.uniform_int(1, 4);
        const index_t k = rng.uniform_int(1, 12);
        const Matrix w_a = rng.uniform_matrix(d, r, -1.0, 1.0);
        const HiddenBatch h(b, l, rng.uniform_matrix(b * l, d, -1.0, 1.0));
        const SelectionSet sel = topk_select(h, w_a, k);
        CHECK(static_cast<index_t>(sel.unioned.size()) <= std::min(r, b * l * k));
    }
}

TEST_CASE("gather_adapter full and empty selections") {
    SeededRng rng(8);
    AdapterWeights adapter;
    adapter.w_a = rng.uniform_matrix(3, 4, -1.0, 1.0);
    adapter.w_b = rng.uniform_matrix(4, 3, -1.0, 1.0);

    const GatheredAdapter full = gather_adapter(adapter, {0, 1, 2, 3});
    CHECK(full.w_a_k == adapter.w_a);
    CHECK(full.w_b_k == adapter.w_b);

    const GatheredAdapter empty = gather_adapter(adapter, {});
    CHECK(empty.w_a_k.cols == 0);
    CHECK(empty.w_b_k.rows == 0);
}

TEST_CASE("gather_adapter rejects unsorted and out-of-range indices") {
    SeededRng rng(9);
    AdapterWeights adapter;
    adapter.w_a = rng.uniform_matrix(3, 4, -1.0, 1.0);
    adapter.w_b = rng.uniform_matrix(4, 3, -1.0, 1.0);
    CHECK_THROWS_AS(gather_adapter(adapter, {2, 0}), std::invalid_argument);
    CHECK_THROWS_WITH_AS(gather_adapter(adapter, {7}), doctest::Contains("7"), std::out_of_range);
}

TEST_CASE("sparse_ffn_pa with full gather equals dense bitwise") {
    SeededRng rng(10);
    SmallConfig c = random_config(rng, 4, 6, 8, 2, 3);
    const GatheredAdapter g = gather_adapter(c.adapter, {0, 1, 2, 3, 4, 5, 6, 7});
    const HiddenBatch dense = dense_ffn_pa(c.h, c.base, c.adapter);
    const HiddenBatch sparse = sparse_ffn_pa(c.h, c.base, g.w_a_k, g.w_b_k, nullptr);
    CHECK(sparse.values == dense.values);
}

TEST_CASE("sparse_ffn_pa with empty selection equals base FFN alone") {
    SeededRng rng(11);
    SmallConfig c = random_config(rng, 4, 6, 8, 1, 2);
    const Matrix base_only = matmul(silu(matmul(c.h.values, c.base.w_in)), c.base.w_out);
    const HiddenBatch out = sparse_ffn_pa(c.h, c.base, Matrix(4, 0), Matrix(0, 4), nullptr);
    CHECK(out.values == base_only);
}

TEST_CASE("masking equivalence: sparse forward equals zero-masked dense") {
    SeededRng rng(12);
    for (int it = 0; it < 10; ++it) {
        const index_t d = 3, n = 4, r = 9;
        SmallConfig c = random_config(rng, d, n, r, 1, 3);
        const SelectionSet sel = topk_select(c.h, c.adapter.w_a, 2);
        const GatheredAdapter g = gather_adapter(c.adapter, sel.unioned);
        const HiddenBatch sparse = sparse_ffn_pa(c.h, c.base, g.w_a_k, g.w_b_k, nullptr);

        AdapterWeights masked = c.adapter;
        std::vector<char> keep(static_cast<size_t>(r), 0);
        for (index_t j : sel.unioned) keep[static_cast<size_t>(j)] = 1;
        for (index_t j = 0; j < r; ++j) {
            if (keep[static_cast<size_t>(j)]) continue;
            for (index_t i = 0; i < d; ++i) masked.w_a.at(i, j) = 0.0;
            for (index_t i = 0; i < d; ++i) masked.w_b.at(j, i) = 0.0;
        }
        const HiddenBatch dense = dense_ffn_pa(c.h, c.base, masked);
        for (index_t i = 0; i < dense.values.size(); ++i) {
            CHECK(std::abs(sparse.values.data[i] - dense.values.data[i]) < 1e-12);
        }
    }
}

TEST_CASE("sparse_backward zero upstream gradient gives zero gradients") {
    SeededRng rng(13);
    SmallConfig c = random_config(rng, 3, 4, 5, 1, 2);
    const GatheredAdapter g = gather_adapter(c.adapter, {0, 2, 4});
    FfnCache cache;
    sparse_ffn_pa(c.h, c.base, g.w_a_k, g.w_b_k, &cache);
    const SparseFfnGrads grads =
        sparse_backward(Matrix(2, 3), cache, g.w_a_k, g.w_b_k, c.base);
    for (double v : grads.grad_w_a_k.data) CHECK(v == 0.0);
    for (double v : grads.grad_w_b_k.data) CHECK(v == 0.0);
    for (double v : grads.grad_h.data) CHECK(v == 0.0);
}

TEST_CASE("sparse_backward with no firing neuron kills adapter gradients") {
    SeededRng rng(14);
    SmallConfig c = random_config(rng, 3, 4, 5, 1, 2);
    // keys chosen so pre-activations are strictly negative
    for (double& v : c.adapter.w_a.data) v = -2.0 - std::abs(v);
    for (double& v : c.h.values.data) v = 0.5 + std::abs(v);
    const GatheredAdapter g = gather_adapter(c.adapter, {0, 1, 2, 3, 4});
    FfnCache cache;
    sparse_ffn_pa(c.h, c.base, g.w_a_k, g.w_b_k, &cache);
    for (double z : cache.z.data) CHECK(z < 0.0);
    SeededRng grng(15);
    const SparseFfnGrads grads = sparse_backward(grng.uniform_matrix(2, 3, -1.0, 1.0), cache,
                                                 g.w_a_k, g.w_b_k, c.base);
    for (double v : grads.grad_w_a_k.data) CHECK(v == 0.0);
    for (double v : grads.grad_w_b_k.data) CHECK(v == 0.0);
}

TEST_CASE("sparse_backward matches finite differences on 20 random configs") {
    SeededRng rng(16);
    int checked_entries = 0;
    for (int it = 0; it < 20; ++it) {
        const index_t d = rng.uniform_int(2, 8);
        const index_t n = rng.uniform_int(2, 6);
        const index_t r = rng.uniform_int(2, 16);
        const index_t batch = rng.uniform_int(1, 2);
        const index_t seq = rng.uniform_int(1, 3);
        const Activation act = (it % 2 == 0) ? Activation::SiLU : Activation::ReLU;
        SmallConfig c = random_config(rng, d, n, r, batch, seq, act);
        const index_t k = rng.uniform_int(1, r);
        const SelectionSet sel = topk_select(c.h, c.adapter.w_a, k);
        const GatheredAdapter g = gather_adapter(c.adapter, sel.unioned);
        const Matrix weight = rng.uniform_matrix(batch * seq, d, -1.0, 1.0);

        FfnCache cache;
        sparse_ffn_pa(c.h, c.base, g.w_a_k, g.w_b_k, &cache);
        const SparseFfnGrads grads = sparse_backward(weight, cache, g.w_a_k, g.w_b_k, c.base);

        const double eps = 1e-5;
        const auto check_grad = [&](const Matrix& analytic, const Matrix& fd) {
            REQUIRE(analytic.rows == fd.rows);
            REQUIRE(analytic.cols == fd.cols);
            for (index_t i = 0; i < analytic.size(); ++i) {
                if (std::abs(analytic.data[i]) <= 1e-8) continue;
                const double rel =
                    std::abs(analytic.data[i] - fd.data[i]) / std::abs(analytic.data[i]);
                CHECK(rel < 1e-5);
                checked_entries++;
            }
        };

        check_grad(grads.grad_w_a_k, finite_diff_grad(
                                         [&](const Matrix& wa) {
                                             return sum_weighted(
                                                 sparse_ffn_pa(c.h, c.base, wa, g.w_b_k, nullptr)
                                                     .values,
                                                 weight);
                                         },
                                         g.w_a_k, eps));
        check_grad(grads.grad_w_b_k, finite_diff_grad(
                                         [&](const Matrix& wb) {
                                             return sum_weighted(
                                                 sparse_ffn_pa(c.h, c.base, g.w_a_k, wb, nullptr)
                                                     .values,
                                                 weight);
                                         },
                                         g.w_b_k, eps));
        check_grad(grads.grad_h, finite_diff_grad(
                                     [&](const Matrix& hv) {
                                         return sum_weighted(
                                             sparse_ffn_pa(HiddenBatch(batch, seq, hv), c.base,
                                                           g.w_a_k, g.w_b_k, nullptr)
                                                 .values,
                                             weight);
                                     },
                                     c.h.values, eps));
    }
    CHECK(checked_entries > 100);
}

TEST_CASE("activation_profile degenerate and concentrated cases") {
    AdapterWeights adapter;
    adapter.w_a = Matrix(2, 4);
    adapter.w_b = Matrix(4, 2);
    CHECK_THROWS_AS(activation_profile(adapter, {}), std::invalid_argument);

    // all-zero corpus: all means zero, cumulative defined as zero
    const ActivationProfile zero = activation_profile(adapter, {Matrix(3, 2)});
    for (double v : zero.sorted_means) CHECK(v == 0.0);
    for (double v : zero.cumulative) CHECK(v == 0.0);

    // one neuron always fires, others never
    adapter.w_a.at(0, 2) = 1.0;
    Matrix corpus(2, 2);
    corpus.at(0, 0) = 1.0;
    corpus.at(1, 0) = 2.0;
    const ActivationProfile p = activation_profile(adapter, {corpus});
    CHECK(p.sorted_means[0] == 1.0);
    CHECK(p.sorted_means[1] == 0.0);
    CHECK(p.cumulative[0] == doctest::Approx(1.0));
    CHECK(p.cumulative.back() == doctest::Approx(1.0));
}
