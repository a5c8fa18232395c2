#include "meft/adapter.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <numeric>

#include "meft/diag.hpp"
#include "meft/kernels.hpp"

namespace meft {

namespace {
std::atomic<long> g_warn_count{0};
}

void warn(const std::string& msg) {
    ++g_warn_count;
    std::fprintf(stderr, "[meft] warning: %s\n", msg.c_str());
}

long warn_count() { return g_warn_count.load(); }

namespace {

Matrix apply_activation(const Matrix& x, Activation act) {
    return act == Activation::SiLU ? silu(x) : relu(x);
}

}  // namespace

HiddenBatch dense_ffn_pa(const HiddenBatch& h, const BaseFfn& base, const AdapterWeights& adapter) {
    if (h.dim() != base.w_in.rows || h.dim() != adapter.w_a.rows) {
        throw ShapeError("dense_ffn_pa: model dim mismatch");
    }
    Matrix out = matmul(apply_activation(matmul(h.values, base.w_in), base.act), base.w_out);
    add_inplace(out, matmul(relu(matmul(h.values, adapter.w_a)), adapter.w_b));
    return HiddenBatch(h.batch, h.seq, std::move(out));
}

SelectionSet topk_select(const HiddenBatch& h, const Matrix& w_a, index_t k) {
    if (k < 1) throw std::invalid_argument("topk_select: K must be >= 1");
    if (h.dim() != w_a.rows) throw ShapeError("topk_select: dim mismatch");
    const index_t r = w_a.cols;
    if (k > r) {
        warn("topk_select: K=" + std::to_string(k) + " > r=" + std::to_string(r) + ", clamped");
    }
    const index_t kk = std::min(k, r);
    const index_t d = h.dim();
    const Matrix keys_t = transpose(w_a);  // r x d, neuron-major
    const index_t tokens = h.tokens();

    SelectionSet sel;
    sel.budget = k;
    sel.per_token.assign(static_cast<size_t>(tokens), {});

#pragma omp parallel for schedule(static) if (tokens > 1)
    for (index_t t = 0; t < tokens; ++t) {
        const double* ht = h.values.row(t);
        std::vector<double> score(static_cast<size_t>(r));
        for (index_t j = 0; j < r; ++j) score[static_cast<size_t>(j)] = dot(ht, keys_t.row(j), d);
        std::vector<index_t> idx(static_cast<size_t>(r));
        std::iota(idx.begin(), idx.end(), index_t{0});
        std::partial_sort(idx.begin(), idx.begin() + kk, idx.end(), [&score](index_t a, index_t b) {
            const double sa = score[static_cast<size_t>(a)];
            const double sb = score[static_cast<size_t>(b)];
            if (sa != sb) return sa > sb;
            return a < b;
        });
        idx.resize(static_cast<size_t>(kk));
        std::sort(idx.begin(), idx.end());
        sel.per_token[static_cast<size_t>(t)] = std::move(idx);
    }

    std::vector<char> mask(static_cast<size_t>(r), 0);
    for (const auto& pt : sel.per_token) {
        for (index_t j : pt) mask[static_cast<size_t>(j)] = 1;
    }
    for (index_t j = 0; j < r; ++j) {
        if (mask[static_cast<size_t>(j)]) sel.unioned.push_back(j);
    }
    return sel;
}

GatheredAdapter gather_adapter(const AdapterWeights& adapter, const std::vector<index_t>& s) {
    const index_t d = adapter.dim();
    const index_t r = adapter.pairs();
    for (size_t i = 0; i < s.size(); ++i) {
        if (s[i] < 0 || s[i] >= r) {
            throw std::out_of_range("gather_adapter: index " + std::to_string(s[i]) +
                                    " out of range [0," + std::to_string(r) + ")");
        }
        if (i > 0 && s[i] <= s[i - 1]) {
            throw std::invalid_argument("gather_adapter: indices not sorted ascending");
        }
    }
    const index_t m = static_cast<index_t>(s.size());
    GatheredAdapter g{Matrix(d, m), Matrix(m, d)};
    for (index_t i = 0; i < d; ++i) {
        const double* arow = adapter.w_a.row(i);
        double* grow = g.w_a_k.row(i);
        for (index_t j = 0; j < m; ++j) grow[j] = arow[s[static_cast<size_t>(j)]];
    }
    for (index_t j = 0; j < m; ++j) {
        const double* brow = adapter.w_b.row(s[static_cast<size_t>(j)]);
        std::copy(brow, brow + d, g.w_b_k.row(j));
    }
    return g;
}

HiddenBatch sparse_ffn_pa(const HiddenBatch& h, const BaseFfn& base, const Matrix& w_a_k,
                          const Matrix& w_b_k, FfnCache* cache, FfnPhaseTimes* phases) {
    if (h.dim() != base.w_in.rows) throw ShapeError("sparse_ffn_pa: base dim mismatch");
    if (w_a_k.cols != w_b_k.rows || (w_a_k.cols > 0 && w_a_k.rows != h.dim())) {
        throw ShapeError("sparse_ffn_pa: gathered shapes inconsistent");
    }
    const auto t0 = std::chrono::steady_clock::now();
    Matrix base_pre = matmul(h.values, base.w_in);
    Matrix out = matmul(apply_activation(base_pre, base.act), base.w_out);
    const auto t1 = std::chrono::steady_clock::now();
    Matrix z(h.tokens(), 0);
    if (w_a_k.cols > 0) {
        z = matmul(h.values, w_a_k);
        add_inplace(out, matmul(relu(z), w_b_k));
    }
    const auto t2 = std::chrono::steady_clock::now();
    if (phases) {
        phases->base_s += std::chrono::duration<double>(t1 - t0).count();
        phases->adapter_s += std::chrono::duration<double>(t2 - t1).count();
    }
    if (cache) {
        cache->h = h.values;
        cache->z = std::move(z);
        cache->base_pre = std::move(base_pre);
    }
    return HiddenBatch(h.batch, h.seq, std::move(out));
}

SparseFfnGrads sparse_backward(const Matrix& grad_out, const FfnCache& cache, const Matrix& w_a_k,
                               const Matrix& w_b_k, const BaseFfn& base) {
    if (grad_out.rows != cache.h.rows || grad_out.cols != cache.h.cols) {
        throw ShapeError("sparse_backward: grad_out shape mismatch");
    }
    if (cache.z.cols != w_a_k.cols || w_a_k.cols != w_b_k.rows) {
        throw ShapeError("sparse_backward: cache/selection mismatch");
    }

    SparseFfnGrads g;
    const index_t m = w_a_k.cols;

    // Frozen-base path: gradient flows to h, not to base weights.
    Matrix d_act = matmul(grad_out, transpose(base.w_out));
    Matrix d_pre(d_act.rows, d_act.cols);
    if (base.act == Activation::SiLU) {
        for (index_t i = 0; i < d_pre.size(); ++i) {
            d_pre.data[i] = d_act.data[i] * silu_grad_scalar(cache.base_pre.data[i]);
        }
    } else {
        for (index_t i = 0; i < d_pre.size(); ++i) {
            d_pre.data[i] = cache.base_pre.data[i] > 0.0 ? d_act.data[i] : 0.0;
        }
    }
    g.grad_h = matmul(d_pre, transpose(base.w_in));

    if (m > 0) {
        // masked = (grad_out w_b_k^T) .* 1[z>0]
        Matrix masked = matmul(grad_out, transpose(w_b_k));
        for (index_t i = 0; i < masked.size(); ++i) {
            if (!(cache.z.data[i] > 0.0)) masked.data[i] = 0.0;
        }
        g.grad_w_b_k = matmul(transpose(relu(cache.z)), grad_out);
        g.grad_w_a_k = matmul(transpose(cache.h), masked);
        add_inplace(g.grad_h, matmul(masked, transpose(w_a_k)));
    } else {
        g.grad_w_a_k = Matrix(cache.h.cols, 0);
        g.grad_w_b_k = Matrix(0, cache.h.cols);
    }
    return g;
}

ActivationProfile activation_profile(const AdapterWeights& adapter,
                                     const std::vector<Matrix>& corpus) {
    const index_t r = adapter.pairs();
    std::vector<double> sums(static_cast<size_t>(r), 0.0);
    index_t tokens = 0;
    for (const Matrix& h : corpus) {
        if (h.rows == 0) continue;
        if (h.cols != adapter.dim()) throw ShapeError("activation_profile: dim mismatch");
        const Matrix act = relu(matmul(h, adapter.w_a));
        for (index_t t = 0; t < act.rows; ++t) {
            const double* row = act.row(t);
            for (index_t j = 0; j < r; ++j) sums[static_cast<size_t>(j)] += row[j];
        }
        tokens += h.rows;
    }
    if (tokens == 0) throw std::invalid_argument("activation_profile: empty corpus");

    std::vector<double> means(sums);
    for (auto& x : means) x /= static_cast<double>(tokens);
    std::sort(means.begin(), means.end(), std::greater<double>());

    ActivationProfile profile;
    profile.sorted_means.resize(means.size());
    profile.cumulative.resize(means.size());

    const double total = std::accumulate(means.begin(), means.end(), 0.0);
    const double lo = means.back();
    const double hi = means.front();
    double running = 0.0;
    for (size_t i = 0; i < means.size(); ++i) {
        profile.sorted_means[i] = (hi > lo) ? (means[i] - lo) / (hi - lo) : 0.0;
        running += means[i];
        profile.cumulative[i] = (total > 0.0) ? running / total : 0.0;
    }
    return profile;
}

}  // namespace meft
