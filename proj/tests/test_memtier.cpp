#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "meft/memtier.hpp"
#include "meft/rng.hpp"

using namespace meft;

namespace {

HostStore small_store(index_t layers = 2, index_t d = 3, index_t r = 6, index_t n = 2,
                      bool train_router = false, std::uint64_t seed = 99) {
    return HostStore::init(layers, d, r, n, train_router, seed);
}

// Textbook Adam on a single scalar, the independent oracle for the lazy
// per-pair updates.
struct ScalarAdam {
    double m = 0.0, v = 0.0;
    std::int64_t t = 0;
    double step(double w, double g, const AdamHyper& h, double lr) {
        t++;
        m = h.beta1 * m + (1.0 - h.beta1) * g;
        v = h.beta2 * v + (1.0 - h.beta2) * g * g;
        const double mhat = m / (1.0 - std::pow(h.beta1, static_cast<double>(t)));
        const double vhat = v / (1.0 - std::pow(h.beta2, static_cast<double>(t)));
        return w - lr * mhat / (std::sqrt(vhat) + h.eps);
    }
};

std::string temp_path(const char* name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

std::string read_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in);
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("push_hidden accumulates B*l*d") {
    CommMeter meter;
    push_hidden(meter, 1, 1, 4);
    CHECK(meter.total_hidden() == 4);
    push_hidden(meter, 2, 256, 4096);
    CHECK(meter.total_hidden() == 4 + 2097152);
    push_hidden(meter, 2, 256, 4096);
    CHECK(meter.total_hidden() == 4 + 2 * 2097152);
}

TEST_CASE("fetch meters 2*d*|S| and honors empty selections") {
    HostStore store = small_store();
    CommMeter meter;
    const DeviceSlice s2 = fetch(store, meter, 0, {1, 4});
    CHECK(meter.total_host_to_device() == 2 * 3 * 2);
    CHECK(s2.w_a_k.cols == 2);
    CHECK(s2.w_b_k.rows == 2);
    CHECK(s2.w_a_k.at(0, 0) == store.layer(0).adapter.w_a.at(0, 1));

    const DeviceSlice s0 = fetch(store, meter, 0, {});
    CHECK(meter.total_host_to_device() == 12);
    CHECK(s0.w_a_k.cols == 0);

    // repeated fetch counts again: no caching in base mode
    fetch(store, meter, 0, {1, 4});
    CHECK(meter.total_host_to_device() == 24);
}

TEST_CASE("scatter_grads stages and meters; overlapping scatters sum") {
    HostStore store = small_store();
    CommMeter meter;
    const index_t d = 3;

    Matrix ga(d, 2);
    Matrix gb(2, d);
    for (index_t i = 0; i < ga.size(); ++i) ga.data[i] = 1.0 + static_cast<double>(i);
    for (index_t i = 0; i < gb.size(); ++i) gb.data[i] = 0.5 * static_cast<double>(i);

    scatter_grads(store, meter, 0, {1, 4}, ga, gb);
    CHECK(meter.total_device_to_host() == 12);
    CHECK(store.layer(0).stage_a.at(0, 1) == 1.0);
    CHECK(store.layer(0).stage_a.at(0, 4) == 2.0);
    CHECK(store.layer(0).stage_a.at(0, 0) == 0.0);

    // micro-batch accumulation oracle: two scatters with overlap equal one
    // scatter of the sum at shared indices
    Matrix ga2(d, 2);
    Matrix gb2(2, d);
    for (index_t i = 0; i < ga2.size(); ++i) ga2.data[i] = 10.0;
    scatter_grads(store, meter, 0, {4, 5}, ga2, gb2);
    CHECK(store.layer(0).stage_a.at(0, 4) == 2.0 + 10.0);
    CHECK(store.layer(0).stage_a.at(0, 5) == 10.0);

    CHECK_THROWS_AS(scatter_grads(store, meter, 0, {1}, ga, gb), ShapeError);
}

TEST_CASE("sparse_adam_update touches only staged pairs, bit-exact elsewhere") {
    HostStore store = small_store();
    const HostStore before = store;
    CommMeter meter;
    const index_t d = 3;

    Matrix ga(d, 2);
    Matrix gb(2, d);
    ga.at(0, 0) = 0.7;
    gb.at(1, 2) = -0.3;
    scatter_grads(store, meter, 1, {0, 3}, ga, gb);
    sparse_adam_update(store, 1, AdamHyper{}, 1e-3);

    for (index_t l = 0; l < 2; ++l) {
        for (index_t j = 0; j < 6; ++j) {
            const bool touched = (l == 1) && (j == 0 || j == 3);
            if (touched) {
                CHECK(store.layer(l).pair_step[static_cast<size_t>(j)] == 1);
                continue;
            }
            CHECK(store.layer(l).pair_step[static_cast<size_t>(j)] ==
                  before.layer(l).pair_step[static_cast<size_t>(j)]);
            for (index_t i = 0; i < d; ++i) {
                CHECK(store.layer(l).adapter.w_a.at(i, j) == before.layer(l).adapter.w_a.at(i, j));
                CHECK(store.layer(l).m_a.at(i, j) == before.layer(l).m_a.at(i, j));
                CHECK(store.layer(l).v_a.at(i, j) == before.layer(l).v_a.at(i, j));
                CHECK(store.layer(l).adapter.w_b.at(j, i) == before.layer(l).adapter.w_b.at(j, i));
            }
        }
    }
}

TEST_CASE("first lazy update matches a fresh dense Adam step per entry") {
    HostStore store = small_store();
    const AdamHyper hyper;
    const double lr = 3e-3;
    const double g = 0.42;
    const double w0 = store.layer(0).adapter.w_a.at(1, 2);

    CommMeter meter;
    Matrix ga(3, 1);
    Matrix gb(1, 3);
    ga.at(1, 0) = g;
    scatter_grads(store, meter, 0, {2}, ga, gb);
    sparse_adam_update(store, 0, hyper, lr);

    ScalarAdam oracle;
    const double want = oracle.step(w0, g, hyper, lr);
    CHECK(store.layer(0).adapter.w_a.at(1, 2) == doctest::Approx(want).epsilon(1e-15));
    // first step reduces to w -= lr * g / (|g| + eps)
    CHECK(store.layer(0).adapter.w_a.at(1, 2) ==
          doctest::Approx(w0 - lr * g / (std::abs(g) + hyper.eps)).epsilon(1e-12));
}

TEST_CASE("two consecutive lazy updates equal dense Adam applied twice") {
    HostStore store = small_store();
    const AdamHyper hyper;
    const double lr = 1e-2;
    const double w0 = store.layer(0).adapter.w_b.at(5, 1);

    ScalarAdam oracle;
    double w_want = w0;
    CommMeter meter;
    for (double g : {0.3, -0.8}) {
        Matrix ga(3, 1);
        Matrix gb(1, 3);
        gb.at(0, 1) = g;
        scatter_grads(store, meter, 0, {5}, ga, gb);
        sparse_adam_update(store, 0, hyper, lr);
        w_want = oracle.step(w_want, g, hyper, lr);
    }
    CHECK(store.layer(0).adapter.w_b.at(5, 1) == doctest::Approx(w_want).epsilon(1e-15));
    CHECK(store.layer(0).pair_step[5] == 2);
}

TEST_CASE("lazy updates of an intermittently selected pair match its own dense history") {
    // a pair selected at steps 1 and 3 of a run must evolve exactly like a
    // dense Adam trajectory over its own gradient sequence
    HostStore store = small_store();
    const AdamHyper hyper;
    const double lr = 5e-3;
    const double w0 = store.layer(0).adapter.w_a.at(0, 4);

    ScalarAdam oracle;
    double w_want = w0;
    CommMeter meter;
    for (int step = 0; step < 4; ++step) {
        const bool selected = (step == 1 || step == 3);
        Matrix ga(3, 1);
        Matrix gb(1, 3);
        if (selected) {
            const double g = 0.1 * (step + 1);
            ga.at(0, 0) = g;
            scatter_grads(store, meter, 0, {4}, ga, gb);
            w_want = oracle.step(w_want, g, hyper, lr);
        } else {
            // another pair trains this step
            scatter_grads(store, meter, 0, {0}, ga, gb);
        }
        sparse_adam_update(store, 0, hyper, lr);
    }
    CHECK(store.layer(0).adapter.w_a.at(0, 4) == doctest::Approx(w_want).epsilon(1e-15));
    CHECK(store.layer(0).pair_step[4] == 2);
}

TEST_CASE("predicted_cost formula") {
    CHECK(predicted_cost(1, 4, 1, 1, 1, 2.0) == 20);  // 2*4*2 + 4
    // beta*K = r: ceiling case
    CHECK(predicted_cost(2, 4, 8, 1, 3, 1.0) == 2 * (2 * 4 * 8 + 12));
    // beta from an integer union size round-trips exactly
    const double beta = static_cast<double>(1595) / 64.0;
    CHECK(predicted_cost(1, 4096, 64, 2, 256, beta) == 2 * 4096 * 1595 + 2 * 256 * 4096);
}

TEST_CASE("brutal_offload_cost is 2M") {
    CHECK(brutal_offload_cost(1, 4, 8) == 128);
    CHECK(brutal_offload_cost(32, 4096, 6144) == 2LL * 32 * 2 * 4096 * 6144);
}

TEST_CASE("measure_beta normalizations") {
    SelectionSet sel;
    sel.budget = 4;
    sel.per_token = {{0, 1, 2, 3}, {0, 1, 2, 3}};
    sel.unioned = {0, 1, 2, 3};
    const BetaStats b = measure_beta(sel, 1, 2, 4, 16);
    CHECK(b.union_size == 4);
    CHECK(b.beta_paper == doctest::Approx(1.0));
    CHECK(b.dedup_ratio == doctest::Approx(0.5));  // 4 / (1*2*4)
    CHECK(b.activated_fraction == doctest::Approx(0.25));

    SelectionSet disjoint;
    disjoint.budget = 2;
    disjoint.per_token = {{0, 1}, {2, 3}};
    disjoint.unioned = {0, 1, 2, 3};
    const BetaStats b2 = measure_beta(disjoint, 2, 1, 2, 16);
    CHECK(b2.dedup_ratio == doctest::Approx(1.0));
}

TEST_CASE("pipeline mode cannot toggle once metering started") {
    CommMeter meter;
    meter.set_pipeline_mode(true);
    CHECK(meter.pipeline_mode());
    meter.add_hidden(4);
    CHECK_THROWS_AS(meter.set_pipeline_mode(false), std::logic_error);
    meter.set_pipeline_mode(true);  // no-op toggle to the same value is fine
}

TEST_CASE("checkpoint round-trip: save, load, save byte-identical") {
    HostStore store = small_store(2, 3, 6, 2, true, 123);
    // make state non-trivial
    CommMeter meter;
    Matrix ga(3, 2);
    Matrix gb(2, 3);
    ga.at(0, 0) = 0.5;
    scatter_grads(store, meter, 0, {1, 3}, ga, gb);
    sparse_adam_update(store, 0, AdamHyper{}, 1e-3);
    store.global_step = 7;

    const std::string p1 = temp_path("meft_ckpt_1.bin");
    const std::string p2 = temp_path("meft_ckpt_2.bin");
    save_checkpoint(store, p1, R"({"note":"test"})");

    std::string extra;
    HostStore loaded = load_checkpoint(p1, &extra);
    CHECK(extra.find("note") != std::string::npos);
    CHECK(loaded.global_step == 7);
    CHECK(loaded.layer(0).pair_step[1] == 1);
    CHECK(loaded.train_router());

    save_checkpoint(loaded, p2, R"({"note":"test"})");
    CHECK(read_bytes(p1) == read_bytes(p2));

    // moments survive in full double precision
    CHECK(loaded.layer(0).m_a.at(0, 1) == store.layer(0).m_a.at(0, 1));
    CHECK(loaded.layer(0).v_a.at(0, 1) == store.layer(0).v_a.at(0, 1));

    std::filesystem::remove(p1);
    std::filesystem::remove(p2);
}

TEST_CASE("checkpoint error taxonomy") {
    const std::string path = temp_path("meft_ckpt_err.bin");

    {
        std::ofstream out(path, std::ios::binary);
        out << "not json\n";
    }
    CHECK_THROWS_AS(load_checkpoint(path), CheckpointHeaderError);

    {
        std::ofstream out(path, std::ios::binary);
        out << R"({"magic":"WRONG","version":1})" << "\n";
    }
    CHECK_THROWS_AS(load_checkpoint(path), CheckpointHeaderError);

    // truncated payload
    HostStore store = small_store();
    save_checkpoint(store, path);
    const std::string bytes = read_bytes(path);
    {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
    }
    CHECK_THROWS_AS(load_checkpoint(path), CheckpointTruncatedError);

    // trailing garbage
    {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out << "xx";
    }
    CHECK_THROWS_AS(load_checkpoint(path), CheckpointShapeError);

    // missing moments (legacy-style short file) is a truncation error, never
    // a silent zero-fill
    {
        const size_t weights_only = bytes.find('\n') + 1 + (3 * 6 + 6 * 3 + 2 * 3) * sizeof(float);
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out.write(bytes.data(), static_cast<std::streamsize>(weights_only));
    }
    CHECK_THROWS_AS(load_checkpoint(path), CheckpointTruncatedError);

    std::filesystem::remove(path);
}

TEST_CASE("host store init shapes and invariants") {
    HostStore store = small_store(3, 4, 8, 2, false, 5);
    CHECK(store.layers() == 3);
    CHECK(store.dim() == 4);
    CHECK(store.pairs() == 8);
    for (index_t l = 0; l < 3; ++l) {
        CHECK(store.layer(l).adapter.w_a.rows == 4);
        CHECK(store.layer(l).adapter.w_a.cols == 8);
        // values start at zero so training starts from the base function
        for (double v : store.layer(l).adapter.w_b.data) CHECK(v == 0.0);
        for (std::int64_t c : store.layer(l).pair_step) CHECK(c == 0);
    }
    // same seed, same store
    CHECK(HostStore::init(3, 4, 8, 2, false, 5) == HostStore::init(3, 4, 8, 2, false, 5));
    // adapter keys do not depend on the router partition count
    const HostStore n2 = HostStore::init(1, 4, 8, 2, false, 5);
    const HostStore n8 = HostStore::init(1, 4, 8, 8, false, 5);
    CHECK(n2.layer(0).adapter.w_a == n8.layer(0).adapter.w_a);
}
