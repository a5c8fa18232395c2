#include "meft/model.hpp"

#include <cmath>
#include <stdexcept>

#include "meft/kernels.hpp"

namespace meft {

void ToyConfig::validate() const {
    if (vocab < 2) throw std::invalid_argument("config: vocab must be >= 2");
    if (dim < 1 || layers < 1 || ffn_width < 1 || pairs < 1 || max_seq < 1) {
        throw std::invalid_argument("config: dimensions must be >= 1");
    }
    if (experts < 1 || experts_per_token < 1 || budget < 1) {
        throw std::invalid_argument("config: experts, experts_per_token and budget must be >= 1");
    }
    if (pairs % experts != 0) {
        throw std::invalid_argument("config: experts must divide pairs (N | r)");
    }
}

FrozenBase init_frozen_base(const ToyConfig& cfg, std::uint64_t seed) {
    FrozenBase base;
    const double attn_std = 1.0 / std::sqrt(static_cast<double>(cfg.dim));
    const double resid_scale = 0.5;
    // One stream per tensor so geometry changes never reshuffle other tensors.
    const auto stream = [seed](std::uint64_t id) { return SeededRng(mix_seed(seed, id)); };
    base.embedding = stream(1).normal_matrix(cfg.vocab, cfg.dim, 1.0);
    base.pos = stream(2).normal_matrix(cfg.max_seq, cfg.dim, 0.3);
    for (index_t l = 0; l < cfg.layers; ++l) {
        const std::uint64_t off = 0x100 + 8 * static_cast<std::uint64_t>(l);
        AttnWeights aw;
        aw.wq = stream(off + 0).normal_matrix(cfg.dim, cfg.dim, attn_std);
        aw.wk = stream(off + 1).normal_matrix(cfg.dim, cfg.dim, attn_std);
        aw.wv = stream(off + 2).normal_matrix(cfg.dim, cfg.dim, attn_std);
        aw.wo = stream(off + 3).normal_matrix(cfg.dim, cfg.dim, resid_scale * attn_std);
        base.attn.push_back(std::move(aw));

        BaseFfn ffn;
        ffn.w_in = stream(off + 4).normal_matrix(cfg.dim, cfg.ffn_width, attn_std);
        ffn.w_out = stream(off + 5).normal_matrix(
            cfg.ffn_width, cfg.dim, resid_scale / std::sqrt(static_cast<double>(cfg.ffn_width)));
        ffn.act = cfg.base_act;
        base.ffn.push_back(std::move(ffn));
    }
    return base;
}

Matrix embed(const FrozenBase& base, const Batch& batch) {
    const index_t d = base.embedding.cols;
    Matrix h(batch.total(), d);
    for (index_t b = 0; b < batch.batch; ++b) {
        for (index_t i = 0; i < batch.seq; ++i) {
            const index_t t = b * batch.seq + i;
            const index_t tok = batch.tokens[static_cast<size_t>(t)];
            if (tok < 0 || tok >= base.embedding.rows) {
                throw std::out_of_range("embed: token id out of vocab");
            }
            if (i >= base.pos.rows) throw std::out_of_range("embed: sequence longer than max_seq");
            const double* erow = base.embedding.row(tok);
            const double* prow = base.pos.row(i);
            double* hrow = h.row(t);
            for (index_t j = 0; j < d; ++j) hrow[j] = erow[j] + prow[j];
        }
    }
    return h;
}

Matrix attention_forward(const AttnWeights& w, const Batch& batch, const Matrix& h,
                         AttnCache* cache) {
    const index_t d = h.cols;
    const index_t l = batch.seq;
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

    Matrix q = matmul(h, w.wq);
    Matrix k = matmul(h, w.wk);
    Matrix v = matmul(h, w.wv);
    Matrix probs(h.rows, l);
    Matrix ctx(h.rows, d);

#pragma omp parallel for schedule(static) if (batch.batch > 1)
    for (index_t b = 0; b < batch.batch; ++b) {
        const index_t base_row = b * l;
        std::vector<double> score(static_cast<size_t>(l));
        for (index_t i = 0; i < l; ++i) {
            const index_t t = base_row + i;
            const index_t seg = batch.segments[static_cast<size_t>(t)];
            double max_score = -1e300;
            for (index_t j = 0; j <= i; ++j) {
                if (batch.segments[static_cast<size_t>(base_row + j)] != seg) continue;
                const double s = dot(q.row(t), k.row(base_row + j), d) * inv_sqrt_d;
                score[static_cast<size_t>(j)] = s;
                if (s > max_score) max_score = s;
            }
            double denom = 0.0;
            for (index_t j = 0; j <= i; ++j) {
                if (batch.segments[static_cast<size_t>(base_row + j)] != seg) continue;
                denom += std::exp(score[static_cast<size_t>(j)] - max_score);
            }
            double* prow = probs.row(t);
            double* crow = ctx.row(t);
            for (index_t j = 0; j <= i; ++j) {
                if (batch.segments[static_cast<size_t>(base_row + j)] != seg) continue;
                const double p = std::exp(score[static_cast<size_t>(j)] - max_score) / denom;
                prow[j] = p;
                const double* vrow = v.row(base_row + j);
                for (index_t x = 0; x < d; ++x) crow[x] += p * vrow[x];
            }
        }
    }

    Matrix out = add(h, matmul(ctx, w.wo));
    if (cache) {
        cache->h_in = h;
        cache->q = std::move(q);
        cache->k = std::move(k);
        cache->v = std::move(v);
        cache->probs = std::move(probs);
    }
    return out;
}

Matrix attention_backward(const AttnWeights& w, const Batch& batch, const AttnCache& cache,
                          const Matrix& dh_out) {
    const index_t d = dh_out.cols;
    const index_t l = batch.seq;
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

    Matrix dctx = matmul(dh_out, transpose(w.wo));
    Matrix dq(dh_out.rows, d);
    Matrix dk(dh_out.rows, d);
    Matrix dv(dh_out.rows, d);

#pragma omp parallel for schedule(static) if (batch.batch > 1)
    for (index_t b = 0; b < batch.batch; ++b) {
        const index_t base_row = b * l;
        std::vector<double> dprobs(static_cast<size_t>(l));
        for (index_t i = 0; i < l; ++i) {
            const index_t t = base_row + i;
            const index_t seg = batch.segments[static_cast<size_t>(t)];
            const double* prow = cache.probs.row(t);
            const double* dcrow = dctx.row(t);
            double common = 0.0;
            for (index_t j = 0; j <= i; ++j) {
                if (batch.segments[static_cast<size_t>(base_row + j)] != seg) continue;
                const double dp = dot(dcrow, cache.v.row(base_row + j), d);
                dprobs[static_cast<size_t>(j)] = dp;
                common += prow[j] * dp;
            }
            double* dqrow = dq.row(t);
            for (index_t j = 0; j <= i; ++j) {
                if (batch.segments[static_cast<size_t>(base_row + j)] != seg) continue;
                const double ds = prow[j] * (dprobs[static_cast<size_t>(j)] - common) * inv_sqrt_d;
                const double* krow = cache.k.row(base_row + j);
                const double* qrow = cache.q.row(t);
                double* dkrow = dk.row(base_row + j);
                double* dvrow = dv.row(base_row + j);
                for (index_t x = 0; x < d; ++x) {
                    dqrow[x] += ds * krow[x];
                    dkrow[x] += ds * qrow[x];
                    dvrow[x] += prow[j] * dcrow[x];
                }
            }
        }
    }

    Matrix dh = dh_out;
    add_inplace(dh, matmul(dq, transpose(w.wq)));
    add_inplace(dh, matmul(dk, transpose(w.wk)));
    add_inplace(dh, matmul(dv, transpose(w.wv)));
    return dh;
}

LossResult lm_loss_and_grad(const FrozenBase& base, const Batch& batch, const Matrix& h_final,
                            double loss_scale) {
    const index_t v = base.embedding.rows;
    const Matrix logits = matmul(h_final, transpose(base.embedding));  // T x V
    Matrix dlogits(logits.rows, logits.cols);
    double loss = 0.0;

    for (index_t t = 0; t < logits.rows; ++t) {
        if (!batch.loss_mask[static_cast<size_t>(t)]) continue;
        const index_t target = batch.targets[static_cast<size_t>(t)];
        const double* lrow = logits.row(t);
        double max_logit = lrow[0];
        for (index_t j = 1; j < v; ++j) max_logit = std::max(max_logit, lrow[j]);
        double denom = 0.0;
        for (index_t j = 0; j < v; ++j) denom += std::exp(lrow[j] - max_logit);
        const double log_denom = std::log(denom) + max_logit;
        loss += (log_denom - lrow[target]) * loss_scale;
        double* drow = dlogits.row(t);
        for (index_t j = 0; j < v; ++j) {
            drow[j] = std::exp(lrow[j] - log_denom) * loss_scale;
        }
        drow[target] -= loss_scale;
    }

    LossResult res;
    res.loss_sum = loss;
    res.dh = matmul(dlogits, base.embedding);
    return res;
}

index_t argmax_logits(const FrozenBase& base, const double* h_row) {
    const index_t v = base.embedding.rows;
    const index_t d = base.embedding.cols;
    index_t best = 0;
    double best_score = -1e300;
    for (index_t tok = 0; tok < v; ++tok) {
        const double s = dot(h_row, base.embedding.row(tok), d);
        if (s > best_score) {
            best_score = s;
            best = tok;
        }
    }
    return best;
}

}  // namespace meft
