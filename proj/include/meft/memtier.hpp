#pragma once

#include <cstdint>
#include <mutex>
#include <string>
#include <vector>

#include "meft/adapter.hpp"
#include "meft/experts.hpp"
#include "meft/matrix.hpp"
#include "meft/rng.hpp"

namespace meft {

struct AdamHyper {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Union-set sparsity statistics for one layer-step. beta_paper follows the
// footnote normalization |S|/K; dedup_ratio is |S|/(B*l*K); both are always
// reported because the paper's formula and its cost arithmetic disagree.
struct BetaStats {
    index_t union_size = 0;
    double beta_paper = 0.0;
    double dedup_ratio = 0.0;
    double activated_fraction = 0.0;
};

BetaStats measure_beta(const SelectionSet& sel, index_t batch, index_t seq, index_t k, index_t r);

// Exact element counts for every host<->device flow, attributed per layer and
// per step. Counts are real-valued elements, not bytes.
struct MeterRecord {
    std::int64_t step = 0;
    std::int64_t layer = 0;
    std::int64_t host_to_device = 0;
    std::int64_t device_to_host = 0;
    std::int64_t hidden = 0;
};

class CommMeter {
  public:
    void begin_step(std::int64_t step) {
        std::lock_guard<std::mutex> lock(mu_);
        step_ = step;
    }
    void set_layer(std::int64_t layer) {
        std::lock_guard<std::mutex> lock(mu_);
        layer_ = layer;
    }
    void add_host_to_device(std::int64_t elements);
    void add_device_to_host(std::int64_t elements);
    void add_hidden(std::int64_t elements);

    std::int64_t total_host_to_device() const { return total_h2d_; }
    std::int64_t total_device_to_host() const { return total_d2h_; }
    std::int64_t total_hidden() const { return total_hidden_; }
    std::int64_t total() const { return total_h2d_ + total_d2h_ + total_hidden_; }

    const std::vector<MeterRecord>& records() const { return records_; }

    // Pipelined runs overlap host-side selection with device-side base-path
    // compute; results are bit-identical, only wall-time attribution changes.
    // Toggling after the first metered event is a lifecycle error.
    void set_pipeline_mode(bool on);
    bool pipeline_mode() const { return pipeline_; }

  private:
    MeterRecord& current_locked();

    mutable std::mutex mu_;
    bool pipeline_ = false;
    std::int64_t step_ = 0;
    std::int64_t layer_ = 0;
    std::int64_t total_h2d_ = 0;
    std::int64_t total_d2h_ = 0;
    std::int64_t total_hidden_ = 0;
    std::vector<MeterRecord> records_;
};

// Hidden-state transfer for one layer forward: B*l*d elements.
void push_hidden(CommMeter& meter, index_t batch, index_t seq, index_t dim);

// Host-resident state of one layer: full adapter + router, lazy Adam moments,
// per-pair update counters, and gradient staging buffers. The key column
// w_a[:,j] and value row w_b[j,:] are always selected together, so the
// bias-correction counter is stored once per pair.
struct HostLayer {
    AdapterWeights adapter;
    Router router;

    Matrix m_a, v_a;  // d x r
    Matrix m_b, v_b;  // r x d
    std::vector<std::int64_t> pair_step;  // r

    Matrix stage_a;  // d x r
    Matrix stage_b;  // r x d
    std::vector<char> staged;  // r

    // Router training state, allocated only when the router is trainable.
    Matrix m_g, v_g, stage_g;
    std::vector<std::int64_t> router_step;
    std::vector<char> staged_g;
};

class HostStore {
  public:
    HostStore() = default;

    static HostStore init(index_t layers, index_t dim, index_t pairs, index_t experts,
                          bool train_router, std::uint64_t seed);

    index_t layers() const { return static_cast<index_t>(layers_.size()); }
    HostLayer& layer(index_t i) { return layers_[static_cast<size_t>(i)]; }
    const HostLayer& layer(index_t i) const { return layers_[static_cast<size_t>(i)]; }

    index_t dim() const { return dim_; }
    index_t pairs() const { return pairs_; }
    index_t experts() const { return experts_; }
    bool train_router() const { return train_router_; }

    std::int64_t global_step = 0;

    bool operator==(const HostStore& o) const;

  private:
    friend HostStore load_checkpoint(const std::string& path, std::string* extra_json);
    index_t dim_ = 0, pairs_ = 0, experts_ = 0;
    bool train_router_ = false;
    std::vector<HostLayer> layers_;
};

// Device-side working set for one layer-step: gathered slices plus their
// gradients. Cleared by scatter-back; must not outlive the step.
struct DeviceSlice {
    std::vector<index_t> sel;
    Matrix w_a_k, w_b_k;
    bool scattered = false;
};

// Gather (w_a[:,S], w_b[S,:]) into the device working set; meters 2*d*|S|.
DeviceSlice fetch(const HostStore& store, CommMeter& meter, index_t layer,
                  const std::vector<index_t>& s);

// Move gradients device->host (meters 2*d*|S|) and accumulate them into the
// staging buffers at S; repeated scatters sum at shared indices.
void scatter_grads(HostStore& store, CommMeter& meter, index_t layer,
                   const std::vector<index_t>& s, const Matrix& grad_w_a_k,
                   const Matrix& grad_w_b_k, DeviceSlice* slice = nullptr);

// Host-side staging for the trainable router (no tier crossing: the router
// lives and is used on the host).
void stage_router_grads(HostStore& store, index_t layer, const std::vector<index_t>& expert_rows,
                        const Matrix& grad_rows);

// Lazy Adam over the staged pairs only: each touched pair advances its own
// counter t and uses bias corrections (1-beta1^t), (1-beta2^t); untouched
// entries (weights, moments, counters) stay bit-identical. Clears staging.
void sparse_adam_update(HostStore& store, index_t layer, const AdamHyper& hyper, double lr);

// Paper cost formula per iteration: n_layers * (2*d*beta*K + B*l*d), with
// beta*K rounded back to the integer element count it encodes.
std::int64_t predicted_cost(index_t n_layers, index_t dim, index_t k, index_t batch, index_t seq,
                            double beta);

// Full-exchange baseline: all parameters down + all gradients up, 2M elements
// per iteration where M = n_layers*2*d*r.
std::int64_t brutal_offload_cost(index_t n_layers, index_t dim, index_t pairs);

// Checkpoint file: one text line of JSON metadata (magic MEFT1, version,
// shapes, precision, step), then raw little-endian tensors in declaration
// order, row-major. Weights are stored f32; moments f64; counters int64.
struct CheckpointHeaderError : std::runtime_error {
    explicit CheckpointHeaderError(const std::string& m) : std::runtime_error(m) {}
};
struct CheckpointShapeError : std::runtime_error {
    explicit CheckpointShapeError(const std::string& m) : std::runtime_error(m) {}
};
struct CheckpointTruncatedError : std::runtime_error {
    explicit CheckpointTruncatedError(const std::string& m) : std::runtime_error(m) {}
};

void save_checkpoint(const HostStore& store, const std::string& path,
                     const std::string& extra_json = "{}");
HostStore load_checkpoint(const std::string& path, std::string* extra_json = nullptr);

}  // namespace meft
