#pragma once

#include <functional>
#include <string>
#include <vector>

#include "meft/dataset.hpp"
#include "meft/memtier.hpp"
#include "meft/meft_ffn.hpp"
#include "meft/model.hpp"

namespace meft {

// dense: no tiers, full adapter forward + dense Adam (the oracle path).
// meft:  two-tier store, Key-Experts selection, metered sparse exchange.
// brutal: identical training math to meft, metered as full offload
//         (all parameters down, all gradients up, no hidden transfer).
enum class TierMode { Dense, Meft, Brutal };

const char* tier_mode_name(TierMode mode);
TierMode tier_mode_from_name(const std::string& name);

struct TrainSchedule {
    double peak_lr = 2e-3;
    double warmup_fraction = 0.02;  // of total optimizer steps, linear decay to 0 after
    index_t epochs = 12;
    index_t batch_size = 2;        // sequences per micro-batch (B)
    index_t seq_len = 32;          // tokens per sequence (l)
    index_t accum_batch_size = 2;  // sequences per optimizer step; multiple of batch_size
    index_t max_steps = 0;         // 0 = run all epochs

    double lr_at(std::int64_t step, std::int64_t total_steps) const;
};

struct EpochStats {
    index_t epoch = 0;
    double mean_loss = 0.0;
    double em = -1.0;  // -1 when per-epoch eval is disabled
};

struct BetaRecord {
    std::int64_t step = 0;
    std::int64_t micro = 0;
    std::int64_t layer = 0;
    BetaStats stats;
};

struct BetaAggregate {
    double mean_union = 0.0;
    double mean_beta_paper = 0.0;
    double mean_dedup_ratio = 0.0;
    double mean_activated_fraction = 0.0;
    std::int64_t samples = 0;
};

struct TimeBreakdown {
    double selection_s = 0.0;
    double fetch_s = 0.0;
    double compute_s = 0.0;
    double scatter_s = 0.0;
    double update_s = 0.0;
    double eval_s = 0.0;
    double total_wall_s = 0.0;
    // Sum over layer-forwards of (selection + base path) vs max(selection,
    // base path): the serial and pipelined attributions of the overlappable
    // region. modeled_wall_s applies the pipelined attribution when on.
    double overlap_serial_s = 0.0;
    double overlap_merged_s = 0.0;
    double modeled_wall_s = 0.0;
};

struct MeterSummary {
    std::int64_t host_to_device = 0;
    std::int64_t device_to_host = 0;
    std::int64_t hidden = 0;
    std::vector<MeterRecord> records;

    std::int64_t total() const { return host_to_device + device_to_host + hidden; }
};

struct TrainOptions {
    ToyConfig model;
    TrainSchedule schedule;
    AdamHyper adam;
    TierMode mode = TierMode::Meft;
    bool pipeline = false;
    index_t eval_subset = 128;     // facts per in-training eval; 0 disables
    bool final_eval = true;        // full-dataset EM after the last epoch
    bool collect_records = true;   // keep per-step meter/beta records
};

struct TrainHooks {
    // After all micro-batches of a step have staged gradients, before the
    // optimizer touches the store.
    std::function<void(std::int64_t step, const HostStore& store)> before_update;
    // After every optimizer step: the store and the per-layer union of pair
    // indices touched by that step (across micro-batches).
    std::function<void(std::int64_t step, const HostStore& store,
                       const std::vector<std::vector<index_t>>& step_unions)>
        after_step;
};

struct DivergenceError : std::runtime_error {
    explicit DivergenceError(const std::string& m) : std::runtime_error(m) {}
};

struct TrainResult {
    HostStore store;
    FrozenBase base;
    std::vector<EpochStats> epochs;
    std::vector<double> step_losses;
    double final_em = 0.0;
    MeterSummary meter;
    std::vector<BetaRecord> beta_records;
    BetaAggregate beta;
    FlopReport flops;
    TimeBreakdown timing;
    std::vector<std::vector<std::int64_t>> expert_histogram;  // [layer][expert]
    std::int64_t steps = 0;
};

// Run one training job. `resume` continues from an existing host store
// (frozen base is rebuilt deterministically from the config seed).
TrainResult train(const TrainOptions& opt, const FactDataset& data, TrainHooks* hooks = nullptr,
                  const HostStore* resume = nullptr);

// Exact-match rate under greedy decoding of the object tokens. subset = 0
// evaluates every fact. Uses the mechanism of `mode` with a scratch meter.
double eval_em(const ToyConfig& cfg, const FrozenBase& base, const HostStore& store,
               const FactDataset& data, TierMode mode, index_t subset = 0);

// Hidden states feeding each layer's FFN over the (optionally subsetted)
// fact corpus; corpus[layer] is a list of token matrices.
std::vector<std::vector<Matrix>> collect_ffn_inputs(const ToyConfig& cfg, const FrozenBase& base,
                                                    const HostStore& store,
                                                    const FactDataset& data, TierMode mode,
                                                    index_t subset = 0);

// --- sweeps -----------------------------------------------------------------

struct SweepRow {
    double axis_value = 0.0;
    double final_em = 0.0;
    std::int64_t comm_total = 0;
    std::int64_t comm_h2d = 0;
    std::int64_t comm_d2h = 0;
    std::int64_t comm_hidden = 0;
    double mean_beta_paper = 0.0;
    double mean_dedup_ratio = 0.0;
    double mean_activated_fraction = 0.0;
    std::int64_t flops_total = 0;
};

// Per-point (N, experts_per_token, K) for a kv_pairs sweep point, keeping the
// configured expert size where possible so selection semantics stay
// comparable across r.
ToyConfig adjust_config_for_pairs(const ToyConfig& base_cfg, index_t pairs);

SweepRow run_sweep_point(const TrainOptions& opt, const FactDataset& data, double axis_value);

std::vector<SweepRow> sweep_kv_pairs(const TrainOptions& opt, const FactDataset& data,
                                     const std::vector<index_t>& pairs_values);
std::vector<SweepRow> sweep_k(const TrainOptions& opt, const FactDataset& data,
                              const std::vector<index_t>& k_values);
std::vector<SweepRow> sweep_experts(const TrainOptions& opt, const FactDataset& data,
                                    const std::vector<index_t>& expert_values);

struct BatchSweepRow {
    index_t batch = 0;
    double mean_activated_fraction = 0.0;
    double mean_dedup_ratio = 0.0;
    std::vector<double> per_seed_activated_fraction;
};

std::vector<BatchSweepRow> sweep_batchsize(const TrainOptions& opt, const FactDataset& data,
                                           const std::vector<index_t>& batch_values,
                                           const std::vector<std::uint64_t>& seeds,
                                           index_t steps_per_run);

}  // namespace meft
