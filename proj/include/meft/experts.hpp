#pragma once

#include <cstdint>
#include <vector>

#include "meft/adapter.hpp"
#include "meft/matrix.hpp"

namespace meft {

// Linear router over N experts; scores are raw dot products, no softmax.
struct Router {
    Matrix w_g;  // N x d
    index_t experts() const { return w_g.rows; }
};

// Contiguous equal-size partition of the r adapter neurons into N experts.
// Expert i owns global neuron indices [i*expert_size, (i+1)*expert_size).
struct ExpertPartition {
    index_t experts = 1;
    index_t expert_size = 0;

    static ExpertPartition make(index_t r, index_t n);
    index_t begin(index_t i) const { return i * expert_size; }
    index_t end(index_t i) const { return (i + 1) * expert_size; }
    index_t pairs() const { return experts * expert_size; }
};

// Per-token selected expert indices tau, each sorted ascending.
struct ExpertSelection {
    std::vector<std::vector<index_t>> per_token_tau;
    index_t budget = 0;  // requested experts per token
};

// Exact CPU-side MAC counts for selection: router scoring plus neuron scoring
// restricted to the selected experts.
struct FlopReport {
    std::int64_t tokens = 0;
    std::int64_t router_flops = 0;
    std::int64_t expert_scoring_flops = 0;
    std::int64_t total = 0;
};

// p_i = w_g[i] . h for each expert.
std::vector<double> route_scores(const double* h_token, index_t d, const Router& router);

// Indices of the kk largest scores; ties break toward the lowest index;
// kk > N clamps to N. Result sorted ascending.
std::vector<index_t> select_experts(const std::vector<double>& p, index_t kk);

// Algorithm: per token, route to top-kk experts, score only those experts'
// neurons, keep the top-K (global indexing), then union across the batch.
// K > kk*expert_size clamps with a warning. Pass tau_out to record the
// per-token expert choices (selection-frequency observability).
SelectionSet ke_select(const HiddenBatch& h, const Router& router, const ExpertPartition& partition,
                       const AdapterWeights& adapter, index_t kk, index_t k,
                       ExpertSelection* tau_out = nullptr);

// router T*N*d + expert scoring T*kk*(r/N)*d, one multiply-accumulate = 1 FLOP.
FlopReport cpu_flops(std::int64_t tokens, index_t d, index_t n, index_t r, index_t kk);

// The divisor of r minimizing N + kk*r/N (token count and dim cancel).
index_t optimal_expert_count(index_t r, index_t kk);

}  // namespace meft
