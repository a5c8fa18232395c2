#include "meft/experts.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

#include "meft/diag.hpp"
#include "meft/kernels.hpp"

namespace meft {

ExpertPartition ExpertPartition::make(index_t r, index_t n) {
    if (n < 1 || r < 1) throw std::invalid_argument("ExpertPartition: N and r must be >= 1");
    if (r % n != 0) {
        throw std::invalid_argument("ExpertPartition: N=" + std::to_string(n) +
                                    " does not divide r=" + std::to_string(r));
    }
    return ExpertPartition{n, r / n};
}

std::vector<double> route_scores(const double* h_token, index_t d, const Router& router) {
    if (router.w_g.cols != d) throw ShapeError("route_scores: dim mismatch");
    std::vector<double> p(static_cast<size_t>(router.experts()));
    for (index_t i = 0; i < router.experts(); ++i) {
        p[static_cast<size_t>(i)] = dot(router.w_g.row(i), h_token, d);
    }
    return p;
}

std::vector<index_t> select_experts(const std::vector<double>& p, index_t kk) {
    if (kk < 1) throw std::invalid_argument("select_experts: budget must be >= 1");
    const index_t n = static_cast<index_t>(p.size());
    const index_t take = std::min(kk, n);
    std::vector<index_t> idx(static_cast<size_t>(n));
    std::iota(idx.begin(), idx.end(), index_t{0});
    std::partial_sort(idx.begin(), idx.begin() + take, idx.end(), [&p](index_t a, index_t b) {
        const double pa = p[static_cast<size_t>(a)];
        const double pb = p[static_cast<size_t>(b)];
        if (pa != pb) return pa > pb;
        return a < b;
    });
    idx.resize(static_cast<size_t>(take));
    std::sort(idx.begin(), idx.end());
    return idx;
}

SelectionSet ke_select(const HiddenBatch& h, const Router& router, const ExpertPartition& partition,
                       const AdapterWeights& adapter, index_t kk, index_t k,
                       ExpertSelection* tau_out) {
    if (k < 1) throw std::invalid_argument("ke_select: K must be >= 1");
    if (partition.pairs() != adapter.pairs()) throw ShapeError("ke_select: partition/adapter mismatch");
    if (router.experts() != partition.experts) throw ShapeError("ke_select: router/partition mismatch");
    if (router.w_g.cols != h.dim() || adapter.dim() != h.dim()) {
        throw ShapeError("ke_select: model dim mismatch");
    }

    const index_t d = h.dim();
    const index_t tokens = h.tokens();
    const index_t kk_eff = std::min(kk, partition.experts);
    const index_t visible = kk_eff * partition.expert_size;
    if (k > visible) {
        warn("ke_select: K=" + std::to_string(k) + " > visible neurons " +
             std::to_string(visible) + ", clamped");
    }
    const index_t take = std::min(k, visible);

    // Neuron-major copy of the keys so per-token scoring reads rows.
    const Matrix keys_t = transpose(adapter.w_a);  // r x d

    SelectionSet sel;
    sel.budget = k;
    sel.per_token.assign(static_cast<size_t>(tokens), {});
    if (tau_out) {
        tau_out->budget = kk;
        tau_out->per_token_tau.assign(static_cast<size_t>(tokens), {});
    }

#pragma omp parallel for schedule(static) if (tokens > 1)
    for (index_t t = 0; t < tokens; ++t) {
        const double* ht = h.values.row(t);
        const std::vector<index_t> tau = select_experts(route_scores(ht, d, router), kk_eff);

        std::vector<index_t> cand;
        std::vector<double> cand_score;
        cand.reserve(static_cast<size_t>(visible));
        cand_score.reserve(static_cast<size_t>(visible));
        for (index_t e : tau) {
            for (index_t j = partition.begin(e); j < partition.end(e); ++j) {
                cand.push_back(j);
                cand_score.push_back(dot(ht, keys_t.row(j), d));
            }
        }

        std::vector<size_t> order(cand.size());
        std::iota(order.begin(), order.end(), size_t{0});
        std::partial_sort(order.begin(), order.begin() + take, order.end(),
                          [&](size_t a, size_t b) {
                              if (cand_score[a] != cand_score[b]) return cand_score[a] > cand_score[b];
                              return cand[a] < cand[b];
                          });

        std::vector<index_t> picked(static_cast<size_t>(take));
        for (index_t i = 0; i < take; ++i) picked[static_cast<size_t>(i)] = cand[order[static_cast<size_t>(i)]];
        std::sort(picked.begin(), picked.end());
        sel.per_token[static_cast<size_t>(t)] = std::move(picked);
        if (tau_out) tau_out->per_token_tau[static_cast<size_t>(t)] = std::move(tau);
    }

    std::vector<char> mask(static_cast<size_t>(adapter.pairs()), 0);
    for (const auto& pt : sel.per_token) {
        for (index_t j : pt) mask[static_cast<size_t>(j)] = 1;
    }
    for (index_t j = 0; j < adapter.pairs(); ++j) {
        if (mask[static_cast<size_t>(j)]) sel.unioned.push_back(j);
    }
    return sel;
}

FlopReport cpu_flops(std::int64_t tokens, index_t d, index_t n, index_t r, index_t kk) {
    if (n < 1 || r % n != 0) {
        throw std::invalid_argument("cpu_flops: N must divide r");
    }
    FlopReport rep;
    rep.tokens = tokens;
    rep.router_flops = tokens * n * d;
    rep.expert_scoring_flops = tokens * kk * (r / n) * d;
    rep.total = rep.router_flops + rep.expert_scoring_flops;
    return rep;
}

index_t optimal_expert_count(index_t r, index_t kk) {
    if (r < 1) throw std::invalid_argument("optimal_expert_count: r must be >= 1");
    index_t best_n = 1;
    double best_cost = std::numeric_limits<double>::infinity();
    for (index_t n = 1; n <= r; ++n) {
        if (r % n != 0) continue;
        const double cost = static_cast<double>(n) + static_cast<double>(kk) * static_cast<double>(r) / static_cast<double>(n);
        if (cost < best_cost) {
            best_cost = cost;
            best_n = n;
        }
    }
    return best_n;
}

}  // namespace meft
