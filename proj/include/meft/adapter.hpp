#pragma once

#include <vector>

#include "meft/matrix.hpp"

namespace meft {

enum class Activation { SiLU, ReLU };

// Frozen base FFN of one transformer layer: f(h * w_in) * w_out.
struct BaseFfn {
    Matrix w_in;   // d x n
    Matrix w_out;  // n x d
    Activation act = Activation::SiLU;
};

// Trainable parallel adapter: ReLU(h * w_a) * w_b with r key-value pairs.
// Keys are the columns of w_a, values the rows of w_b.
struct AdapterWeights {
    Matrix w_a;  // d x r
    Matrix w_b;  // r x d

    index_t pairs() const { return w_a.cols; }
    index_t dim() const { return w_a.rows; }
};

// Flattened (batch * seq) x d hidden states.
struct HiddenBatch {
    index_t batch = 0;
    index_t seq = 0;
    Matrix values;  // (batch*seq) x d

    HiddenBatch() = default;
    HiddenBatch(index_t b, index_t l, Matrix v) : batch(b), seq(l), values(std::move(v)) {
        if (values.rows != batch * seq) throw ShapeError("HiddenBatch: row count != batch*seq");
    }
    index_t tokens() const { return batch * seq; }
    index_t dim() const { return values.cols; }
};

// Per-token top-K key indices plus their deduplicated batch-level union.
// Per-token lists and the union are sorted ascending.
struct SelectionSet {
    std::vector<std::vector<index_t>> per_token;
    std::vector<index_t> unioned;
    index_t budget = 0;  // requested K (pre-clamp)

    bool operator==(const SelectionSet& o) const {
        return per_token == o.per_token && unioned == o.unioned && budget == o.budget;
    }
};

// Cache from sparse_ffn_pa, consumed by sparse_backward.
struct FfnCache {
    Matrix h;         // T x d layer input
    Matrix z;         // T x |S| adapter pre-activations h * w_a_k
    Matrix base_pre;  // T x n base pre-activations h * w_in
};

struct SparseFfnGrads {
    Matrix grad_w_a_k;  // d x |S|
    Matrix grad_w_b_k;  // |S| x d
    Matrix grad_h;      // T x d (adapter + frozen-base path terms)
};

// f(h w_in) w_out + ReLU(h w_a) w_b over the full adapter.
HiddenBatch dense_ffn_pa(const HiddenBatch& h, const BaseFfn& base, const AdapterWeights& adapter);

// Per-token top-K on raw pre-activation scores h * w_a (no ReLU before
// selection); ties break toward the lowest index. K > r clamps to r with a
// warning.
SelectionSet topk_select(const HiddenBatch& h, const Matrix& w_a, index_t k);

// Column-gather of w_a and row-gather of w_b at S (sorted ascending).
struct GatheredAdapter {
    Matrix w_a_k;  // d x |S|
    Matrix w_b_k;  // |S| x d
};
GatheredAdapter gather_adapter(const AdapterWeights& adapter, const std::vector<index_t>& s);

// Wall-time split of one FFN forward: the frozen-base path can overlap
// host-side selection in pipelined runs, the adapter path cannot.
struct FfnPhaseTimes {
    double base_s = 0.0;
    double adapter_s = 0.0;
};

// f(h w_in) w_out + ReLU(h w_a_k) w_b_k; the cache holds what backward needs.
HiddenBatch sparse_ffn_pa(const HiddenBatch& h, const BaseFfn& base, const Matrix& w_a_k,
                          const Matrix& w_b_k, FfnCache* cache, FfnPhaseTimes* phases = nullptr);

// grad_w_b_k = ReLU(z)^T grad_out
// grad_w_a_k = h^T (grad_out w_b_k^T  .* 1[z>0])
// grad_h     = (grad_out w_b_k^T .* 1[z>0]) w_a_k^T + base-path term
// Base weights receive no gradient.
SparseFfnGrads sparse_backward(const Matrix& grad_out, const FfnCache& cache, const Matrix& w_a_k,
                               const Matrix& w_b_k, const BaseFfn& base);

// Mean post-ReLU activation per neuron over a token corpus, sorted descending.
// Both curves are in [0,1]: sorted means are min-max normalized, the
// cumulative curve is the running sum of sorted means over their total.
// A zero-activation corpus yields all-zero curves.
struct ActivationProfile {
    std::vector<double> sorted_means;
    std::vector<double> cumulative;
};
ActivationProfile activation_profile(const AdapterWeights& adapter,
                                     const std::vector<Matrix>& corpus);

}  // namespace meft
