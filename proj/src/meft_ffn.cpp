#include "meft/meft_ffn.hpp"

#include <chrono>

namespace meft {

namespace {
using Clock = std::chrono::steady_clock;
double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}
}  // namespace

HiddenBatch meft_ffn(const HiddenBatch& h, const BaseFfn& base, const Router& router,
                     const ExpertPartition& partition, index_t kk, index_t k, HostStore& store,
                     CommMeter& meter, index_t layer, MeftFfnCache* cache,
                     MeftFfnTimers* timers) {
    meter.set_layer(layer);
    push_hidden(meter, h.batch, h.seq, h.dim());

    MeftFfnCache local;
    MeftFfnCache& c = cache ? *cache : local;

    auto t0 = Clock::now();
    c.sel = ke_select(h, router, partition, store.layer(layer).adapter, kk, k, &c.taus);
    if (timers) timers->selection_s += seconds_since(t0);

    t0 = Clock::now();
    c.slice = fetch(store, meter, layer, c.sel.unioned);
    if (timers) timers->fetch_s += seconds_since(t0);

    FfnPhaseTimes phases;
    HiddenBatch out = sparse_ffn_pa(h, base, c.slice.w_a_k, c.slice.w_b_k, &c.ffn, &phases);
    if (timers) {
        timers->base_s += phases.base_s;
        timers->adapter_s += phases.adapter_s;
    }
    return out;
}

}  // namespace meft
