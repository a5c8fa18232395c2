#include "meft/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "meft/kernels.hpp"

namespace meft {

namespace {

using Clock = std::chrono::steady_clock;

struct Stopwatch {
    Clock::time_point t0 = Clock::now();
    double lap() {
        const auto t1 = Clock::now();
        const double s = std::chrono::duration<double>(t1 - t0).count();
        t0 = t1;
        return s;
    }
};

std::vector<index_t> shuffled_indices(index_t n, std::uint64_t seed) {
    std::vector<index_t> perm(static_cast<size_t>(n));
    std::iota(perm.begin(), perm.end(), index_t{0});
    SeededRng rng(seed);
    for (index_t i = n - 1; i > 0; --i) {
        const index_t j = rng.uniform_int(0, i);
        std::swap(perm[static_cast<size_t>(i)], perm[static_cast<size_t>(j)]);
    }
    return perm;
}

struct BatchPlan {
    index_t facts_per_seq = 0;
    index_t seqs_per_epoch = 0;
    index_t micros_per_step = 0;
    index_t steps_per_epoch = 0;
};

BatchPlan make_plan(const TrainSchedule& sched, const FactDataset& data) {
    BatchPlan plan;
    const index_t flen = data.fact_len();
    if (sched.seq_len < flen) {
        throw std::invalid_argument("train: seq_len shorter than one fact");
    }
    if (sched.accum_batch_size % sched.batch_size != 0) {
        throw std::invalid_argument("train: accum_batch_size must be a multiple of batch_size");
    }
    plan.facts_per_seq = sched.seq_len / flen;
    plan.seqs_per_epoch = static_cast<index_t>(data.facts.size()) / plan.facts_per_seq;
    plan.micros_per_step = sched.accum_batch_size / sched.batch_size;
    const index_t micros_per_epoch = plan.seqs_per_epoch / sched.batch_size;
    plan.steps_per_epoch = micros_per_epoch / plan.micros_per_step;
    if (plan.steps_per_epoch < 1) {
        throw std::invalid_argument("train: dataset too small for one optimizer step per epoch");
    }
    return plan;
}

// Sequences pack facts_per_seq whole facts, each in its own attention
// segment; the tail is padding (token 0) in a segment of its own with no
// loss. Position i predicts tokens[i+1]; only object-token targets count.
Batch make_batch(const FactDataset& data, const std::vector<index_t>& perm, index_t first_seq,
                 index_t batch_size, index_t seq_len, index_t facts_per_seq) {
    const index_t flen = data.fact_len();
    Batch b;
    b.batch = batch_size;
    b.seq = seq_len;
    const index_t total = batch_size * seq_len;
    b.tokens.assign(static_cast<size_t>(total), 0);
    b.targets.assign(static_cast<size_t>(total), 0);
    b.segments.assign(static_cast<size_t>(total), facts_per_seq);
    b.loss_mask.assign(static_cast<size_t>(total), 0);

    for (index_t s = 0; s < batch_size; ++s) {
        const index_t row0 = s * seq_len;
        for (index_t f = 0; f < facts_per_seq; ++f) {
            const index_t fact_idx = perm[static_cast<size_t>((first_seq + s) * facts_per_seq + f)];
            const Fact& fact = data.facts[static_cast<size_t>(fact_idx)];
            const index_t off = row0 + f * flen;
            index_t o = 0;
            for (index_t t : fact.subject) b.tokens[static_cast<size_t>(off + o++)] = t;
            b.tokens[static_cast<size_t>(off + o++)] = fact.relation;
            for (index_t t : fact.object) b.tokens[static_cast<size_t>(off + o++)] = t;
            for (index_t i = 0; i < flen; ++i) {
                b.segments[static_cast<size_t>(off + i)] = f;
            }
            // local offsets [subject_len, fact_len-1) predict object tokens
            for (index_t i = data.subject_len; i < flen - 1; ++i) {
                b.loss_mask[static_cast<size_t>(off + i)] = 1;
                b.loss_count++;
            }
        }
        for (index_t i = 0; i < seq_len - 1; ++i) {
            b.targets[static_cast<size_t>(row0 + i)] = b.tokens[static_cast<size_t>(row0 + i + 1)];
        }
    }
    return b;
}

std::vector<index_t> all_pairs(index_t r) {
    std::vector<index_t> s(static_cast<size_t>(r));
    std::iota(s.begin(), s.end(), index_t{0});
    return s;
}

struct RunState {
    const TrainOptions* opt = nullptr;
    const FactDataset* data = nullptr;
    FrozenBase base;
    HostStore store;
    ExpertPartition partition;
    CommMeter meter;    // exported; dense mode leaves it empty
    CommMeter scratch;  // dense compute, brutal's physical gather, eval
    TimeBreakdown timing;
    FlopReport flops;
    std::vector<BetaRecord> beta_records;
    BetaAggregate beta;
    std::vector<std::vector<std::int64_t>> expert_histogram;
    std::vector<double> step_losses;
};

void accumulate_beta(RunState& rs, const BetaStats& stats, std::int64_t step, std::int64_t micro,
                     std::int64_t layer, bool collect) {
    if (collect) rs.beta_records.push_back(BetaRecord{step, micro, layer, stats});
    rs.beta.mean_union += static_cast<double>(stats.union_size);
    rs.beta.mean_beta_paper += stats.beta_paper;
    rs.beta.mean_dedup_ratio += stats.dedup_ratio;
    rs.beta.mean_activated_fraction += stats.activated_fraction;
    rs.beta.samples++;
}

// Straight-through router gradient (non-paper, opt-in): treat the hard gate
// of expert e as if it were the raw score p_e, so dL/dp_e = <grad_out_t, y_e_t>
// where y_e_t is expert e's contribution to token t's adapter output.
void stage_router_ste(RunState& rs, index_t layer, const Batch& batch, const MeftFfnCache& cache,
                      const Matrix& grad_out) {
    const index_t d = rs.store.dim();
    const index_t esz = rs.partition.expert_size;
    const auto& s = cache.sel.unioned;
    Matrix grad_g(rs.store.experts(), d);
    std::vector<char> touched(static_cast<size_t>(rs.store.experts()), 0);
    std::vector<double> y(static_cast<size_t>(d));

    for (index_t t = 0; t < batch.total(); ++t) {
        for (index_t e : cache.taus.per_token_tau[static_cast<size_t>(t)]) {
            std::fill(y.begin(), y.end(), 0.0);
            bool any = false;
            for (size_t c = 0; c < s.size(); ++c) {
                if (s[c] / esz != e) continue;
                const double a = cache.ffn.z.at(t, static_cast<index_t>(c));
                if (a <= 0.0) continue;
                const double* brow = cache.slice.w_b_k.row(static_cast<index_t>(c));
                for (index_t x = 0; x < d; ++x) y[static_cast<size_t>(x)] += a * brow[x];
                any = true;
            }
            if (!any) continue;
            const double dldp = dot(grad_out.row(t), y.data(), d);
            const double* hrow = cache.ffn.h.row(t);
            double* grow = grad_g.row(e);
            for (index_t x = 0; x < d; ++x) grow[x] += dldp * hrow[x];
            touched[static_cast<size_t>(e)] = 1;
        }
    }

    std::vector<index_t> rows;
    for (index_t e = 0; e < rs.store.experts(); ++e) {
        if (touched[static_cast<size_t>(e)]) rows.push_back(e);
    }
    if (rows.empty()) return;
    Matrix packed(static_cast<index_t>(rows.size()), d);
    for (size_t i = 0; i < rows.size(); ++i) {
        const double* grow = grad_g.row(rows[i]);
        std::copy(grow, grow + d, packed.row(static_cast<index_t>(i)));
    }
    stage_router_grads(rs.store, layer, rows, packed);
}

double run_micro(RunState& rs, const Batch& batch, double loss_scale, std::int64_t step,
                 std::int64_t micro, std::vector<std::vector<char>>* step_masks, bool collect) {
    const ToyConfig& cfg = rs.opt->model;
    const TierMode mode = rs.opt->mode;
    const index_t n_layers = cfg.layers;
    const index_t d = cfg.dim;
    const index_t r = cfg.pairs;
    const index_t full_params = 2 * d * r;

    std::vector<AttnCache> attn_caches(static_cast<size_t>(n_layers));
    std::vector<MeftFfnCache> ffn_caches(static_cast<size_t>(n_layers));
    Stopwatch sw;

    Matrix h = embed(rs.base, batch);
    rs.timing.compute_s += sw.lap();

    for (index_t l = 0; l < n_layers; ++l) {
        sw.lap();
        Matrix h_mid = attention_forward(rs.base.attn[static_cast<size_t>(l)], batch, h,
                                         &attn_caches[static_cast<size_t>(l)]);
        rs.timing.compute_s += sw.lap();

        MeftFfnCache& fc = ffn_caches[static_cast<size_t>(l)];
        HiddenBatch hb(batch.batch, batch.seq, std::move(h_mid));
        HiddenBatch out;
        if (mode == TierMode::Dense) {
            const HostLayer& hl = rs.store.layer(l);
            out = sparse_ffn_pa(hb, rs.base.ffn[static_cast<size_t>(l)], hl.adapter.w_a,
                                hl.adapter.w_b, &fc.ffn);
            rs.timing.compute_s += sw.lap();
        } else {
            CommMeter& m = (mode == TierMode::Meft) ? rs.meter : rs.scratch;
            if (mode == TierMode::Brutal) {
                rs.meter.set_layer(l);
                rs.meter.add_host_to_device(full_params);
            }
            MeftFfnTimers timers;
            out = meft_ffn(hb, rs.base.ffn[static_cast<size_t>(l)],
                           rs.store.layer(l).router, rs.partition, cfg.experts_per_token,
                           cfg.budget, rs.store, m, l, &fc, &timers);
            sw.lap();
            rs.timing.selection_s += timers.selection_s;
            rs.timing.fetch_s += timers.fetch_s;
            rs.timing.compute_s += timers.base_s + timers.adapter_s;
            rs.timing.overlap_serial_s += timers.selection_s + timers.base_s;
            rs.timing.overlap_merged_s += std::max(timers.selection_s, timers.base_s);

            const index_t kk_eff = std::min(cfg.experts_per_token, cfg.experts);
            const FlopReport fr = cpu_flops(batch.total(), d, cfg.experts, r, kk_eff);
            rs.flops.tokens += fr.tokens;
            rs.flops.router_flops += fr.router_flops;
            rs.flops.expert_scoring_flops += fr.expert_scoring_flops;
            rs.flops.total += fr.total;

            accumulate_beta(rs, measure_beta(fc.sel, batch.batch, batch.seq, cfg.budget, r), step,
                            micro, l, collect);
            for (const auto& tau : fc.taus.per_token_tau) {
                for (index_t e : tau) rs.expert_histogram[static_cast<size_t>(l)][static_cast<size_t>(e)]++;
            }
        }
        if (step_masks) {
            auto& mask = (*step_masks)[static_cast<size_t>(l)];
            if (mode == TierMode::Dense) {
                std::fill(mask.begin(), mask.end(), 1);
            } else {
                for (index_t j : fc.sel.unioned) mask[static_cast<size_t>(j)] = 1;
            }
        }
        // FFN residual; keep the FFN input inside the cache for backward.
        h = add(fc.ffn.h, out.values);
        rs.timing.compute_s += sw.lap();
    }

    sw.lap();
    LossResult loss = lm_loss_and_grad(rs.base, batch, h, loss_scale);
    Matrix dh = std::move(loss.dh);
    rs.timing.compute_s += sw.lap();

    for (index_t l = n_layers - 1; l >= 0; --l) {
        MeftFfnCache& fc = ffn_caches[static_cast<size_t>(l)];
        sw.lap();
        SparseFfnGrads grads;
        if (mode == TierMode::Dense) {
            const HostLayer& hl = rs.store.layer(l);
            grads = sparse_backward(dh, fc.ffn, hl.adapter.w_a, hl.adapter.w_b,
                                    rs.base.ffn[static_cast<size_t>(l)]);
        } else {
            grads = sparse_backward(dh, fc.ffn, fc.slice.w_a_k, fc.slice.w_b_k,
                                    rs.base.ffn[static_cast<size_t>(l)]);
        }
        Matrix dh_mid = add(dh, grads.grad_h);
        rs.timing.compute_s += sw.lap();

        if (mode == TierMode::Dense) {
            scatter_grads(rs.store, rs.scratch, l, all_pairs(r), grads.grad_w_a_k,
                          grads.grad_w_b_k);
        } else {
            if (rs.store.train_router()) stage_router_ste(rs, l, batch, fc, dh);
            CommMeter& m = (mode == TierMode::Meft) ? rs.meter : rs.scratch;
            m.set_layer(l);
            scatter_grads(rs.store, m, l, fc.sel.unioned, grads.grad_w_a_k, grads.grad_w_b_k,
                          &fc.slice);
            if (mode == TierMode::Brutal) {
                rs.meter.set_layer(l);
                rs.meter.add_device_to_host(full_params);
            }
        }
        rs.timing.scatter_s += sw.lap();

        sw.lap();
        dh = attention_backward(rs.base.attn[static_cast<size_t>(l)], batch,
                                attn_caches[static_cast<size_t>(l)], dh_mid);
        rs.timing.compute_s += sw.lap();
    }
    return loss.loss_sum;
}

// Forward pass without caches for evaluation/profiling; Brutal shares the
// Meft math. Appends each layer's FFN input when ffn_inputs is given.
Matrix forward_hidden(const ToyConfig& cfg, const FrozenBase& base, const HostStore& store,
                      const ExpertPartition& partition, const Batch& batch, TierMode mode,
                      CommMeter& scratch, std::vector<std::vector<Matrix>>* ffn_inputs) {
    Matrix h = embed(base, batch);
    for (index_t l = 0; l < cfg.layers; ++l) {
        Matrix h_mid = attention_forward(base.attn[static_cast<size_t>(l)], batch, h, nullptr);
        if (ffn_inputs) (*ffn_inputs)[static_cast<size_t>(l)].push_back(h_mid);
        HiddenBatch hb(batch.batch, batch.seq, std::move(h_mid));
        HiddenBatch out;
        const HostLayer& hl = store.layer(l);
        if (mode == TierMode::Dense) {
            out = sparse_ffn_pa(hb, base.ffn[static_cast<size_t>(l)], hl.adapter.w_a,
                                hl.adapter.w_b, nullptr);
        } else {
            SelectionSet sel = ke_select(hb, hl.router, partition, hl.adapter,
                                         cfg.experts_per_token, cfg.budget, nullptr);
            DeviceSlice slice = fetch(store, scratch, l, sel.unioned);
            out = sparse_ffn_pa(hb, base.ffn[static_cast<size_t>(l)], slice.w_a_k, slice.w_b_k,
                                nullptr);
        }
        h = add(hb.values, out.values);
    }
    return h;
}

Batch make_eval_batch(const FactDataset& data, const std::vector<index_t>& fact_ids,
                      const std::vector<std::vector<index_t>>& decoded, index_t cur_len) {
    Batch b;
    b.batch = static_cast<index_t>(fact_ids.size());
    b.seq = cur_len;
    const index_t total = b.batch * b.seq;
    b.tokens.assign(static_cast<size_t>(total), 0);
    b.targets.assign(static_cast<size_t>(total), 0);
    b.segments.assign(static_cast<size_t>(total), 0);
    b.loss_mask.assign(static_cast<size_t>(total), 0);
    for (index_t m = 0; m < b.batch; ++m) {
        const Fact& fact = data.facts[static_cast<size_t>(fact_ids[static_cast<size_t>(m)])];
        index_t o = 0;
        const index_t row0 = m * cur_len;
        for (index_t t : fact.subject) b.tokens[static_cast<size_t>(row0 + o++)] = t;
        b.tokens[static_cast<size_t>(row0 + o++)] = fact.relation;
        for (index_t t : decoded[static_cast<size_t>(m)]) {
            b.tokens[static_cast<size_t>(row0 + o++)] = t;
        }
    }
    return b;
}

}  // namespace

const char* tier_mode_name(TierMode mode) {
    switch (mode) {
        case TierMode::Dense: return "dense";
        case TierMode::Meft: return "meft";
        case TierMode::Brutal: return "brutal";
    }
    return "?";
}

TierMode tier_mode_from_name(const std::string& name) {
    if (name == "dense") return TierMode::Dense;
    if (name == "meft") return TierMode::Meft;
    if (name == "brutal") return TierMode::Brutal;
    throw std::invalid_argument("unknown tier mode: " + name);
}

double TrainSchedule::lr_at(std::int64_t step, std::int64_t total_steps) const {
    if (total_steps <= 0) return 0.0;
    std::int64_t warm = std::llround(warmup_fraction * static_cast<double>(total_steps));
    warm = std::clamp<std::int64_t>(warm, 1, total_steps);
    if (step < warm) {
        return peak_lr * static_cast<double>(step + 1) / static_cast<double>(warm);
    }
    if (total_steps == warm) return peak_lr;
    return peak_lr * static_cast<double>(total_steps - step) /
           static_cast<double>(total_steps - warm);
}

double eval_em(const ToyConfig& cfg, const FrozenBase& base, const HostStore& store,
               const FactDataset& data, TierMode mode, index_t subset) {
    const ExpertPartition partition = ExpertPartition::make(cfg.pairs, cfg.experts);
    CommMeter scratch;
    const index_t n = (subset > 0)
                          ? std::min<index_t>(subset, static_cast<index_t>(data.facts.size()))
                          : static_cast<index_t>(data.facts.size());
    if (n == 0) return 0.0;

    const index_t chunk_size = 256;
    index_t correct = 0;
    for (index_t first = 0; first < n; first += chunk_size) {
        const index_t m = std::min(chunk_size, n - first);
        std::vector<index_t> ids(static_cast<size_t>(m));
        std::iota(ids.begin(), ids.end(), first);
        std::vector<std::vector<index_t>> decoded(static_cast<size_t>(m));
        for (index_t it = 0; it < data.object_len; ++it) {
            const index_t cur_len = data.prompt_len() + it;
            Batch b = make_eval_batch(data, ids, decoded, cur_len);
            Matrix h = forward_hidden(cfg, base, store, partition, b, mode, scratch, nullptr);
            for (index_t f = 0; f < m; ++f) {
                const double* row = h.row(f * cur_len + cur_len - 1);
                decoded[static_cast<size_t>(f)].push_back(argmax_logits(base, row));
            }
        }
        for (index_t f = 0; f < m; ++f) {
            const Fact& fact = data.facts[static_cast<size_t>(ids[static_cast<size_t>(f)])];
            if (decoded[static_cast<size_t>(f)] == fact.object) correct++;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(n);
}

std::vector<std::vector<Matrix>> collect_ffn_inputs(const ToyConfig& cfg, const FrozenBase& base,
                                                    const HostStore& store,
                                                    const FactDataset& data, TierMode mode,
                                                    index_t subset) {
    const ExpertPartition partition = ExpertPartition::make(cfg.pairs, cfg.experts);
    CommMeter scratch;
    const index_t n = (subset > 0)
                          ? std::min<index_t>(subset, static_cast<index_t>(data.facts.size()))
                          : static_cast<index_t>(data.facts.size());
    std::vector<std::vector<Matrix>> inputs(static_cast<size_t>(cfg.layers));
    const index_t chunk_size = 256;
    for (index_t first = 0; first < n; first += chunk_size) {
        const index_t m = std::min(chunk_size, n - first);
        std::vector<index_t> ids(static_cast<size_t>(m));
        std::iota(ids.begin(), ids.end(), first);
        std::vector<std::vector<index_t>> full(static_cast<size_t>(m));
        for (index_t f = 0; f < m; ++f) {
            full[static_cast<size_t>(f)] = data.facts[static_cast<size_t>(ids[static_cast<size_t>(f)])].object;
        }
        Batch b = make_eval_batch(data, ids, full, data.fact_len());
        forward_hidden(cfg, base, store, partition, b, mode, scratch, &inputs);
    }
    return inputs;
}

TrainResult train(const TrainOptions& opt, const FactDataset& data, TrainHooks* hooks,
                  const HostStore* resume) {
    const ToyConfig& cfg = opt.model;
    cfg.validate();
    if (cfg.vocab < data.vocab) throw std::invalid_argument("train: config vocab < dataset vocab");
    if (opt.schedule.seq_len > cfg.max_seq) {
        throw std::invalid_argument("train: seq_len exceeds max_seq");
    }
    const BatchPlan plan = make_plan(opt.schedule, data);

    RunState rs;
    rs.opt = &opt;
    rs.data = &data;
    rs.base = init_frozen_base(cfg, cfg.seed);
    if (resume) {
        if (resume->dim() != cfg.dim || resume->pairs() != cfg.pairs ||
            resume->experts() != cfg.experts || resume->layers() != cfg.layers) {
            throw CheckpointShapeError("train: resume store does not match config shapes");
        }
        rs.store = *resume;
    } else {
        rs.store = HostStore::init(cfg.layers, cfg.dim, cfg.pairs, cfg.experts, cfg.train_router,
                                   cfg.seed);
    }
    rs.partition = ExpertPartition::make(cfg.pairs, cfg.experts);
    rs.meter.set_pipeline_mode(opt.pipeline);
    rs.expert_histogram.assign(static_cast<size_t>(cfg.layers),
                               std::vector<std::int64_t>(static_cast<size_t>(cfg.experts), 0));

    std::int64_t total_steps = static_cast<std::int64_t>(plan.steps_per_epoch) * opt.schedule.epochs;
    if (opt.schedule.max_steps > 0) {
        total_steps = std::min<std::int64_t>(total_steps, opt.schedule.max_steps);
    }

    const auto wall0 = Clock::now();
    TrainResult result;
    std::int64_t step = 0;
    bool done = false;

    const index_t loss_positions_per_micro =
        opt.schedule.batch_size * plan.facts_per_seq * data.object_len;
    const double loss_scale =
        1.0 / static_cast<double>(loss_positions_per_micro * plan.micros_per_step);

    for (index_t epoch = 0; epoch < opt.schedule.epochs && !done; ++epoch) {
        const std::vector<index_t> perm =
            shuffled_indices(static_cast<index_t>(data.facts.size()),
                             mix_seed(cfg.seed, 0x900000 + static_cast<std::uint64_t>(epoch)));
        double epoch_loss = 0.0;
        std::int64_t epoch_steps = 0;

        for (index_t s = 0; s < plan.steps_per_epoch && !done; ++s) {
            rs.meter.begin_step(step);
            std::vector<std::vector<char>> step_masks;
            std::vector<std::vector<char>>* masks_ptr = nullptr;
            if (hooks && hooks->after_step) {
                step_masks.assign(static_cast<size_t>(cfg.layers),
                                  std::vector<char>(static_cast<size_t>(cfg.pairs), 0));
                masks_ptr = &step_masks;
            }

            double loss = 0.0;
            for (index_t micro = 0; micro < plan.micros_per_step; ++micro) {
                const index_t first_seq = (s * plan.micros_per_step + micro) * opt.schedule.batch_size;
                const Batch batch = make_batch(data, perm, first_seq, opt.schedule.batch_size,
                                               opt.schedule.seq_len, plan.facts_per_seq);
                try {
                    loss += run_micro(rs, batch, loss_scale, step, micro, masks_ptr,
                                      opt.collect_records);
                } catch (const std::runtime_error& e) {
                    if (std::string(e.what()).find("non-finite") != std::string::npos) {
                        throw DivergenceError("train: non-finite values at step " +
                                              std::to_string(step) + " (" + e.what() + ")");
                    }
                    throw;
                }
            }
            if (!std::isfinite(loss)) {
                throw DivergenceError("train: loss diverged (non-finite) at step " +
                                      std::to_string(step));
            }

            if (hooks && hooks->before_update) hooks->before_update(step, rs.store);

            Stopwatch sw;
            const double lr = opt.schedule.lr_at(step, total_steps);
            for (index_t l = 0; l < cfg.layers; ++l) {
                sparse_adam_update(rs.store, l, opt.adam, lr);
            }
            rs.store.global_step++;
            rs.timing.update_s += sw.lap();

            rs.step_losses.push_back(loss);
            epoch_loss += loss;
            epoch_steps++;
            if (hooks && hooks->after_step) {
                std::vector<std::vector<index_t>> unions(static_cast<size_t>(cfg.layers));
                for (index_t l = 0; l < cfg.layers; ++l) {
                    for (index_t j = 0; j < cfg.pairs; ++j) {
                        if (step_masks[static_cast<size_t>(l)][static_cast<size_t>(j)]) {
                            unions[static_cast<size_t>(l)].push_back(j);
                        }
                    }
                }
                hooks->after_step(step, rs.store, unions);
            }
            step++;
            if (opt.schedule.max_steps > 0 && step >= opt.schedule.max_steps) done = true;
        }

        EpochStats es;
        es.epoch = epoch;
        es.mean_loss = epoch_steps > 0 ? epoch_loss / static_cast<double>(epoch_steps) : 0.0;
        if (opt.eval_subset > 0) {
            Stopwatch sw;
            es.em = eval_em(cfg, rs.base, rs.store, data, opt.mode, opt.eval_subset);
            rs.timing.eval_s += sw.lap();
        }
        result.epochs.push_back(es);
    }

    if (opt.final_eval) {
        Stopwatch sw;
        result.final_em = eval_em(cfg, rs.base, rs.store, data, opt.mode, 0);
        rs.timing.eval_s += sw.lap();
    } else {
        result.final_em = -1.0;
    }

    rs.timing.total_wall_s = std::chrono::duration<double>(Clock::now() - wall0).count();
    rs.timing.modeled_wall_s = rs.timing.total_wall_s;
    if (opt.pipeline) {
        rs.timing.modeled_wall_s -= (rs.timing.overlap_serial_s - rs.timing.overlap_merged_s);
    }

    if (rs.beta.samples > 0) {
        rs.beta.mean_union /= static_cast<double>(rs.beta.samples);
        rs.beta.mean_beta_paper /= static_cast<double>(rs.beta.samples);
        rs.beta.mean_dedup_ratio /= static_cast<double>(rs.beta.samples);
        rs.beta.mean_activated_fraction /= static_cast<double>(rs.beta.samples);
    }

    result.store = std::move(rs.store);
    result.base = std::move(rs.base);
    result.step_losses = std::move(rs.step_losses);
    result.meter.host_to_device = rs.meter.total_host_to_device();
    result.meter.device_to_host = rs.meter.total_device_to_host();
    result.meter.hidden = rs.meter.total_hidden();
    if (opt.collect_records) result.meter.records = rs.meter.records();
    result.beta_records = std::move(rs.beta_records);
    result.beta = rs.beta;
    result.flops = rs.flops;
    result.timing = rs.timing;
    result.expert_histogram = std::move(rs.expert_histogram);
    result.steps = step;
    return result;
}

ToyConfig adjust_config_for_pairs(const ToyConfig& base_cfg, index_t pairs) {
    ToyConfig cfg = base_cfg;
    cfg.pairs = pairs;
    const index_t expert_size = std::max<index_t>(1, base_cfg.pairs / base_cfg.experts);
    index_t n = std::clamp<index_t>(pairs / expert_size, 1, pairs);
    while (pairs % n != 0) --n;
    cfg.experts = n;
    cfg.experts_per_token = std::min(base_cfg.experts_per_token, n);
    cfg.budget = std::min(base_cfg.budget, cfg.experts_per_token * (pairs / n));
    return cfg;
}

SweepRow run_sweep_point(const TrainOptions& opt, const FactDataset& data, double axis_value) {
    TrainResult res = train(opt, data);
    SweepRow row;
    row.axis_value = axis_value;
    row.final_em = res.final_em;
    row.comm_total = res.meter.total();
    row.comm_h2d = res.meter.host_to_device;
    row.comm_d2h = res.meter.device_to_host;
    row.comm_hidden = res.meter.hidden;
    row.mean_beta_paper = res.beta.mean_beta_paper;
    row.mean_dedup_ratio = res.beta.mean_dedup_ratio;
    row.mean_activated_fraction = res.beta.mean_activated_fraction;
    row.flops_total = res.flops.total;
    return row;
}

std::vector<SweepRow> sweep_kv_pairs(const TrainOptions& opt, const FactDataset& data,
                                     const std::vector<index_t>& pairs_values) {
    std::vector<SweepRow> rows;
    for (index_t r : pairs_values) {
        TrainOptions point = opt;
        point.model = adjust_config_for_pairs(opt.model, r);
        rows.push_back(run_sweep_point(point, data, static_cast<double>(r)));
    }
    return rows;
}

std::vector<SweepRow> sweep_k(const TrainOptions& opt, const FactDataset& data,
                              const std::vector<index_t>& k_values) {
    std::vector<SweepRow> rows;
    for (index_t k : k_values) {
        if (k > opt.model.pairs) {
            throw std::invalid_argument("sweep_k: K exceeds pairs");
        }
        TrainOptions point = opt;
        point.model.budget = k;
        rows.push_back(run_sweep_point(point, data, static_cast<double>(k)));
    }
    return rows;
}

std::vector<SweepRow> sweep_experts(const TrainOptions& opt, const FactDataset& data,
                                    const std::vector<index_t>& expert_values) {
    std::vector<SweepRow> rows;
    for (index_t n : expert_values) {
        if (n < 1 || opt.model.pairs % n != 0) {
            throw std::invalid_argument("sweep_experts: N must divide pairs");
        }
        TrainOptions point = opt;
        point.model.experts = n;
        point.model.experts_per_token = std::min(opt.model.experts_per_token, n);
        point.model.budget =
            std::min(opt.model.budget, point.model.experts_per_token * (opt.model.pairs / n));
        rows.push_back(run_sweep_point(point, data, static_cast<double>(n)));
    }
    return rows;
}

std::vector<BatchSweepRow> sweep_batchsize(const TrainOptions& opt, const FactDataset& data,
                                           const std::vector<index_t>& batch_values,
                                           const std::vector<std::uint64_t>& seeds,
                                           index_t steps_per_run) {
    std::vector<BatchSweepRow> rows;
    for (index_t b : batch_values) {
        BatchSweepRow row;
        row.batch = b;
        double af_sum = 0.0;
        double dedup_sum = 0.0;
        for (std::uint64_t seed : seeds) {
            TrainOptions point = opt;
            point.model.seed = seed;
            point.schedule.batch_size = b;
            point.schedule.accum_batch_size = b;
            point.schedule.max_steps = steps_per_run;
            point.eval_subset = 0;
            point.final_eval = false;
            point.collect_records = false;
            TrainResult res = train(point, data);
            af_sum += res.beta.mean_activated_fraction;
            dedup_sum += res.beta.mean_dedup_ratio;
            row.per_seed_activated_fraction.push_back(res.beta.mean_activated_fraction);
        }
        row.mean_activated_fraction = af_sum / static_cast<double>(seeds.size());
        row.mean_dedup_ratio = dedup_sum / static_cast<double>(seeds.size());
        rows.push_back(std::move(row));
    }
    return rows;
}

}  // namespace meft
