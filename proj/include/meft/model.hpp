#pragma once

#include <cstdint>
#include <vector>

#include "meft/adapter.hpp"
#include "meft/matrix.hpp"
#include "meft/rng.hpp"

namespace meft {

// Model geometry and mechanism knobs for one run. Only the adapter (and
// optionally the router) train; everything else is frozen at init.
struct ToyConfig {
    index_t vocab = 256;
    index_t dim = 64;
    index_t layers = 4;
    index_t ffn_width = 128;          // base FFN inner width n
    index_t pairs = 2048;             // adapter key-value pairs r
    index_t experts = 64;             // N
    index_t experts_per_token = 4;    // top experts per token
    index_t budget = 64;              // activated key-value pairs K
    Activation base_act = Activation::SiLU;
    index_t max_seq = 64;
    std::uint64_t seed = 1;
    bool train_router = false;

    void validate() const;
};

struct AttnWeights {
    Matrix wq, wk, wv, wo;  // d x d each
};

// Frozen random transformer trunk: embedding (tied output projection),
// positional table, single-head causal attention and base FFN per layer.
struct FrozenBase {
    Matrix embedding;  // V x d
    Matrix pos;        // max_seq x d
    std::vector<AttnWeights> attn;
    std::vector<BaseFfn> ffn;
};

FrozenBase init_frozen_base(const ToyConfig& cfg, std::uint64_t seed);

// Token batch: B sequences of fixed length l, flattened row-major. Attention
// is causal and segment-local (packed facts do not see each other).
// loss_mask[t] = 1 means position t predicts targets[t] and contributes to
// the loss.
struct Batch {
    index_t batch = 0;
    index_t seq = 0;
    std::vector<index_t> tokens;
    std::vector<index_t> targets;
    std::vector<index_t> segments;
    std::vector<char> loss_mask;
    index_t loss_count = 0;

    index_t total() const { return batch * seq; }
};

Matrix embed(const FrozenBase& base, const Batch& batch);

struct AttnCache {
    Matrix h_in;
    Matrix q, k, v;  // T x d
    Matrix probs;    // T x l, row t = attention over source positions of its sequence
};

// h_in + softmax(q k^T / sqrt(d), segment-causal) v wo
Matrix attention_forward(const AttnWeights& w, const Batch& batch, const Matrix& h,
                         AttnCache* cache);

// Returns grad wrt the attention input (residual passthrough included).
// Weights are frozen; no weight gradients exist.
Matrix attention_backward(const AttnWeights& w, const Batch& batch, const AttnCache& cache,
                          const Matrix& dh_out);

// Cross-entropy against targets at masked positions, logits = h * E^T.
// Loss terms and gradients are scaled by loss_scale (1/total positions of the
// accumulated batch), so prompt and pad positions get exactly zero gradient.
struct LossResult {
    double loss_sum = 0.0;  // sum of -log p at masked positions, scaled
    Matrix dh;              // T x d
};
LossResult lm_loss_and_grad(const FrozenBase& base, const Batch& batch, const Matrix& h_final,
                            double loss_scale);

// Greedy next-token argmax at one position (ties toward the lowest token id).
index_t argmax_logits(const FrozenBase& base, const double* h_row);

}  // namespace meft
