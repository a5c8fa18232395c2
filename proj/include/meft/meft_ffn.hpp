#pragma once

#include "meft/adapter.hpp"
#include "meft/experts.hpp"
#include "meft/memtier.hpp"

namespace meft {

// Everything the backward pass and the observability layer need from one
// MEFT FFN forward.
struct MeftFfnCache {
    SelectionSet sel;
    ExpertSelection taus;
    DeviceSlice slice;
    FfnCache ffn;
};

// Per-phase wall time of one meft_ffn call. In pipelined runs the host-side
// selection overlaps the device-side base path, so the modeled layer time is
// max(selection, base) + fetch + adapter instead of the plain sum.
struct MeftFfnTimers {
    double selection_s = 0.0;
    double fetch_s = 0.0;
    double base_s = 0.0;
    double adapter_s = 0.0;
};

// One MEFT FFN layer forward against the two-tier store: ship the hidden
// state host-side, run Key-Experts selection, fetch the gathered slices into
// the device working set, then compute the widened FFN for all tokens
// against the batch union S.
HiddenBatch meft_ffn(const HiddenBatch& h, const BaseFfn& base, const Router& router,
                     const ExpertPartition& partition, index_t kk, index_t k, HostStore& store,
                     CommMeter& meter, index_t layer, MeftFfnCache* cache,
                     MeftFfnTimers* timers = nullptr);

}  // namespace meft
