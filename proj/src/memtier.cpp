#include "meft/memtier.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace meft {

using nlohmann::json;

BetaStats measure_beta(const SelectionSet& sel, index_t batch, index_t seq, index_t k, index_t r) {
    BetaStats b;
    b.union_size = static_cast<index_t>(sel.unioned.size());
    b.beta_paper = static_cast<double>(b.union_size) / static_cast<double>(k);
    b.dedup_ratio = static_cast<double>(b.union_size) / static_cast<double>(batch * seq * k);
    b.activated_fraction = static_cast<double>(b.union_size) / static_cast<double>(r);
    return b;
}

MeterRecord& CommMeter::current_locked() {
    if (records_.empty() || records_.back().step != step_ || records_.back().layer != layer_) {
        records_.push_back(MeterRecord{step_, layer_, 0, 0, 0});
    }
    return records_.back();
}

void CommMeter::add_host_to_device(std::int64_t elements) {
    std::lock_guard<std::mutex> lock(mu_);
    current_locked().host_to_device += elements;
    total_h2d_ += elements;
}

void CommMeter::add_device_to_host(std::int64_t elements) {
    std::lock_guard<std::mutex> lock(mu_);
    current_locked().device_to_host += elements;
    total_d2h_ += elements;
}

void CommMeter::add_hidden(std::int64_t elements) {
    std::lock_guard<std::mutex> lock(mu_);
    current_locked().hidden += elements;
    total_hidden_ += elements;
}

void CommMeter::set_pipeline_mode(bool on) {
    std::lock_guard<std::mutex> lock(mu_);
    if (!records_.empty() && on != pipeline_) {
        throw std::logic_error("set_pipeline_mode: cannot toggle mid-run");
    }
    pipeline_ = on;
}

void push_hidden(CommMeter& meter, index_t batch, index_t seq, index_t dim) {
    meter.add_hidden(batch * seq * dim);
}

HostStore HostStore::init(index_t layers, index_t dim, index_t pairs, index_t experts,
                          bool train_router, std::uint64_t seed) {
    HostStore store;
    store.dim_ = dim;
    store.pairs_ = pairs;
    store.experts_ = experts;
    store.train_router_ = train_router;
    const double bound = 1.0 / std::sqrt(static_cast<double>(dim));
    for (index_t l = 0; l < layers; ++l) {
        HostLayer layer;
        // Keys start uniform in +-1/sqrt(d), values at zero so training starts
        // from the unmodified base function. Router keys share the key scale.
        // Each tensor draws from its own stream.
        SeededRng rng_a(mix_seed(seed, 0x5000 + 2 * static_cast<std::uint64_t>(l)));
        SeededRng rng_g(mix_seed(seed, 0x5001 + 2 * static_cast<std::uint64_t>(l)));
        layer.adapter.w_a = rng_a.uniform_matrix(dim, pairs, -bound, bound);
        layer.adapter.w_b = Matrix(pairs, dim);
        layer.router.w_g = rng_g.uniform_matrix(experts, dim, -bound, bound);
        layer.m_a = Matrix(dim, pairs);
        layer.v_a = Matrix(dim, pairs);
        layer.m_b = Matrix(pairs, dim);
        layer.v_b = Matrix(pairs, dim);
        layer.pair_step.assign(static_cast<size_t>(pairs), 0);
        layer.stage_a = Matrix(dim, pairs);
        layer.stage_b = Matrix(pairs, dim);
        layer.staged.assign(static_cast<size_t>(pairs), 0);
        if (train_router) {
            layer.m_g = Matrix(experts, dim);
            layer.v_g = Matrix(experts, dim);
            layer.stage_g = Matrix(experts, dim);
            layer.router_step.assign(static_cast<size_t>(experts), 0);
            layer.staged_g.assign(static_cast<size_t>(experts), 0);
        }
        store.layers_.push_back(std::move(layer));
    }
    return store;
}

bool HostStore::operator==(const HostStore& o) const {
    if (dim_ != o.dim_ || pairs_ != o.pairs_ || experts_ != o.experts_ ||
        train_router_ != o.train_router_ || global_step != o.global_step ||
        layers_.size() != o.layers_.size()) {
        return false;
    }
    for (size_t i = 0; i < layers_.size(); ++i) {
        const HostLayer& a = layers_[i];
        const HostLayer& b = o.layers_[i];
        if (!(a.adapter.w_a == b.adapter.w_a && a.adapter.w_b == b.adapter.w_b &&
              a.router.w_g == b.router.w_g && a.m_a == b.m_a && a.v_a == b.v_a &&
              a.m_b == b.m_b && a.v_b == b.v_b && a.pair_step == b.pair_step &&
              a.m_g == b.m_g && a.v_g == b.v_g && a.router_step == b.router_step)) {
            return false;
        }
    }
    return true;
}

DeviceSlice fetch(const HostStore& store, CommMeter& meter, index_t layer,
                  const std::vector<index_t>& s) {
    GatheredAdapter g = gather_adapter(store.layer(layer).adapter, s);
    meter.add_host_to_device(2 * store.dim() * static_cast<index_t>(s.size()));
    DeviceSlice slice;
    slice.sel = s;
    slice.w_a_k = std::move(g.w_a_k);
    slice.w_b_k = std::move(g.w_b_k);
    return slice;
}

void scatter_grads(HostStore& store, CommMeter& meter, index_t layer,
                   const std::vector<index_t>& s, const Matrix& grad_w_a_k,
                   const Matrix& grad_w_b_k, DeviceSlice* slice) {
    const index_t d = store.dim();
    const index_t m = static_cast<index_t>(s.size());
    if (grad_w_a_k.rows != d || grad_w_a_k.cols != m || grad_w_b_k.rows != m ||
        grad_w_b_k.cols != d) {
        throw ShapeError("scatter_grads: gradient shapes do not match selection");
    }
    HostLayer& hl = store.layer(layer);
    meter.add_device_to_host(2 * d * m);
    for (index_t j = 0; j < m; ++j) {
        const index_t col = s[static_cast<size_t>(j)];
        if (col < 0 || col >= store.pairs()) {
            throw std::out_of_range("scatter_grads: index out of range");
        }
        for (index_t i = 0; i < d; ++i) hl.stage_a.at(i, col) += grad_w_a_k.at(i, j);
        const double* grow = grad_w_b_k.row(j);
        double* srow = hl.stage_b.row(col);
        for (index_t i = 0; i < d; ++i) srow[i] += grow[i];
        hl.staged[static_cast<size_t>(col)] = 1;
    }
    if (slice) {
        slice->scattered = true;
        slice->w_a_k = Matrix();
        slice->w_b_k = Matrix();
    }
}

void stage_router_grads(HostStore& store, index_t layer, const std::vector<index_t>& expert_rows,
                        const Matrix& grad_rows) {
    if (!store.train_router()) throw std::logic_error("stage_router_grads: router is frozen");
    HostLayer& hl = store.layer(layer);
    const index_t d = store.dim();
    if (grad_rows.rows != static_cast<index_t>(expert_rows.size()) || grad_rows.cols != d) {
        throw ShapeError("stage_router_grads: shape mismatch");
    }
    for (size_t j = 0; j < expert_rows.size(); ++j) {
        const index_t row = expert_rows[j];
        double* srow = hl.stage_g.row(row);
        const double* grow = grad_rows.row(static_cast<index_t>(j));
        for (index_t i = 0; i < d; ++i) srow[i] += grow[i];
        hl.staged_g[static_cast<size_t>(row)] = 1;
    }
}

namespace {

inline void adam_entry(double& w, double& m, double& v, double g, const AdamHyper& h, double lr,
                       double c1, double c2) {
    m = h.beta1 * m + (1.0 - h.beta1) * g;
    v = h.beta2 * v + (1.0 - h.beta2) * g * g;
    const double mhat = m / c1;
    const double vhat = v / c2;
    w -= lr * mhat / (std::sqrt(vhat) + h.eps);
}

}  // namespace

void sparse_adam_update(HostStore& store, index_t layer, const AdamHyper& hyper, double lr) {
    HostLayer& hl = store.layer(layer);
    const index_t d = store.dim();
    const index_t r = store.pairs();
    for (index_t j = 0; j < r; ++j) {
        if (!hl.staged[static_cast<size_t>(j)]) continue;
        const std::int64_t t = ++hl.pair_step[static_cast<size_t>(j)];
        const double c1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(t));
        const double c2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(t));
        for (index_t i = 0; i < d; ++i) {
            adam_entry(hl.adapter.w_a.at(i, j), hl.m_a.at(i, j), hl.v_a.at(i, j),
                       hl.stage_a.at(i, j), hyper, lr, c1, c2);
            hl.stage_a.at(i, j) = 0.0;
        }
        double* wrow = hl.adapter.w_b.row(j);
        double* mrow = hl.m_b.row(j);
        double* vrow = hl.v_b.row(j);
        double* srow = hl.stage_b.row(j);
        for (index_t i = 0; i < d; ++i) {
            adam_entry(wrow[i], mrow[i], vrow[i], srow[i], hyper, lr, c1, c2);
            srow[i] = 0.0;
        }
        hl.staged[static_cast<size_t>(j)] = 0;
    }
    if (store.train_router()) {
        for (index_t e = 0; e < store.experts(); ++e) {
            if (!hl.staged_g[static_cast<size_t>(e)]) continue;
            const std::int64_t t = ++hl.router_step[static_cast<size_t>(e)];
            const double c1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(t));
            const double c2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(t));
            double* wrow = hl.router.w_g.row(e);
            double* mrow = hl.m_g.row(e);
            double* vrow = hl.v_g.row(e);
            double* srow = hl.stage_g.row(e);
            for (index_t i = 0; i < d; ++i) {
                adam_entry(wrow[i], mrow[i], vrow[i], srow[i], hyper, lr, c1, c2);
                srow[i] = 0.0;
            }
            hl.staged_g[static_cast<size_t>(e)] = 0;
        }
    }
}

std::int64_t predicted_cost(index_t n_layers, index_t dim, index_t k, index_t batch, index_t seq,
                            double beta) {
    const double params = 2.0 * static_cast<double>(dim) * beta * static_cast<double>(k);
    const std::int64_t per_layer = std::llround(params) + batch * seq * dim;
    return n_layers * per_layer;
}

std::int64_t brutal_offload_cost(index_t n_layers, index_t dim, index_t pairs) {
    return 2 * (n_layers * 2 * dim * pairs);
}

// ---------------------------------------------------------------------------
// Checkpoint I/O

namespace {

void write_f32(std::ofstream& out, const Matrix& m) {
    std::vector<float> buf(m.data.size());
    for (size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(m.data[i]);
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(float)));
}

void write_f64(std::ofstream& out, const Matrix& m) {
    out.write(reinterpret_cast<const char*>(m.data.data()),
              static_cast<std::streamsize>(m.data.size() * sizeof(double)));
}

void write_i64(std::ofstream& out, const std::vector<std::int64_t>& v) {
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(std::int64_t)));
}

void read_f32(std::ifstream& in, Matrix& m, index_t rows, index_t cols) {
    m = Matrix(rows, cols);
    std::vector<float> buf(m.data.size());
    in.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!in) throw CheckpointTruncatedError("checkpoint: truncated tensor payload");
    for (size_t i = 0; i < buf.size(); ++i) m.data[i] = static_cast<double>(buf[i]);
}

void read_f64(std::ifstream& in, Matrix& m, index_t rows, index_t cols) {
    m = Matrix(rows, cols);
    in.read(reinterpret_cast<char*>(m.data.data()),
            static_cast<std::streamsize>(m.data.size() * sizeof(double)));
    if (!in) throw CheckpointTruncatedError("checkpoint: truncated tensor payload");
}

void read_i64(std::ifstream& in, std::vector<std::int64_t>& v, index_t n) {
    v.assign(static_cast<size_t>(n), 0);
    in.read(reinterpret_cast<char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(std::int64_t)));
    if (!in) throw CheckpointTruncatedError("checkpoint: truncated counter payload");
}

}  // namespace

void save_checkpoint(const HostStore& store, const std::string& path,
                     const std::string& extra_json) {
    json extra;
    try {
        extra = json::parse(extra_json);
    } catch (const json::exception& e) {
        throw std::invalid_argument(std::string("save_checkpoint: extra metadata is not JSON: ") +
                                    e.what());
    }
    json header = {
        {"magic", "MEFT1"},
        {"version", 1},
        {"layers", store.layers()},
        {"dim", store.dim()},
        {"pairs", store.pairs()},
        {"experts", store.experts()},
        {"train_router", store.train_router()},
        {"step", store.global_step},
        {"weight_precision", "f32"},
        {"moment_precision", "f64"},
        {"extra", extra},
    };
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
    out << header.dump() << "\n";
    for (index_t l = 0; l < store.layers(); ++l) {
        const HostLayer& hl = store.layer(l);
        write_f32(out, hl.adapter.w_a);
        write_f32(out, hl.adapter.w_b);
        write_f32(out, hl.router.w_g);
        write_f64(out, hl.m_a);
        write_f64(out, hl.v_a);
        write_f64(out, hl.m_b);
        write_f64(out, hl.v_b);
        write_i64(out, hl.pair_step);
        if (store.train_router()) {
            write_f64(out, hl.m_g);
            write_f64(out, hl.v_g);
            write_i64(out, hl.router_step);
        }
    }
    if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

HostStore load_checkpoint(const std::string& path, std::string* extra_json) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw CheckpointHeaderError("checkpoint: missing header line");
    json header;
    try {
        header = json::parse(line);
    } catch (const json::exception& e) {
        throw CheckpointHeaderError(std::string("checkpoint: corrupt header: ") + e.what());
    }
    if (!header.contains("magic") || header["magic"] != "MEFT1") {
        throw CheckpointHeaderError("checkpoint: bad magic");
    }
    if (!header.contains("version") || header["version"].get<int>() != 1) {
        throw CheckpointHeaderError("checkpoint: unsupported version");
    }
    for (const char* key : {"layers", "dim", "pairs", "experts", "train_router", "step"}) {
        if (!header.contains(key)) {
            throw CheckpointHeaderError(std::string("checkpoint: header missing field ") + key);
        }
    }
    const index_t layers = header["layers"].get<index_t>();
    const index_t dim = header["dim"].get<index_t>();
    const index_t pairs = header["pairs"].get<index_t>();
    const index_t experts = header["experts"].get<index_t>();
    if (layers < 1 || dim < 1 || pairs < 1 || experts < 1) {
        throw CheckpointShapeError("checkpoint: non-positive shape in header");
    }

    HostStore store;
    store.dim_ = dim;
    store.pairs_ = pairs;
    store.experts_ = experts;
    store.train_router_ = header["train_router"].get<bool>();
    store.global_step = header["step"].get<std::int64_t>();
    for (index_t l = 0; l < layers; ++l) {
        HostLayer hl;
        read_f32(in, hl.adapter.w_a, dim, pairs);
        read_f32(in, hl.adapter.w_b, pairs, dim);
        read_f32(in, hl.router.w_g, experts, dim);
        read_f64(in, hl.m_a, dim, pairs);
        read_f64(in, hl.v_a, dim, pairs);
        read_f64(in, hl.m_b, pairs, dim);
        read_f64(in, hl.v_b, pairs, dim);
        read_i64(in, hl.pair_step, pairs);
        if (store.train_router_) {
            read_f64(in, hl.m_g, experts, dim);
            read_f64(in, hl.v_g, experts, dim);
            read_i64(in, hl.router_step, experts);
        }
        hl.stage_a = Matrix(dim, pairs);
        hl.stage_b = Matrix(pairs, dim);
        hl.staged.assign(static_cast<size_t>(pairs), 0);
        if (store.train_router_) {
            hl.stage_g = Matrix(experts, dim);
            hl.staged_g.assign(static_cast<size_t>(experts), 0);
        }
        store.layers_.push_back(std::move(hl));
    }
    char probe;
    if (in.get(probe)) throw CheckpointShapeError("checkpoint: trailing bytes after payload");
    if (extra_json) *extra_json = header.value("extra", json::object()).dump();
    return store;
}

}  // namespace meft
