#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "meft/adapter.hpp"
#include "meft/trainer.hpp"

namespace meft {

// One run configuration: model + task + schedule + sweep axes + output.
// Parsing is fail-closed: unknown keys anywhere are errors.
struct RunConfig {
    TrainOptions opt;

    index_t num_facts = 2000;
    index_t subject_len = 2;
    index_t object_len = 4;
    std::uint64_t data_seed = 7;

    std::vector<index_t> sweep_kv_pairs;
    std::vector<index_t> sweep_k;
    std::vector<index_t> sweep_experts;
    std::vector<index_t> sweep_batch;
    std::vector<std::uint64_t> sweep_batch_seeds;
    index_t sweep_batch_steps = 30;

    std::string out_dir = "out/run";
    bool per_step_records = true;

    nlohmann::json echo;  // normalized config document
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& m) : std::runtime_error(m) {}
};

RunConfig parse_run_config(const nlohmann::json& doc);
RunConfig load_run_config(const std::string& path);

// Schema-versioned run report (docs/report_schema.json documents it).
nlohmann::json run_report_json(const RunConfig& cfg, const TrainResult& res);

// Per-step, per-layer meter records plus beta records.
nlohmann::json meter_export_json(const TrainResult& res);

std::string sweep_csv(const std::vector<SweepRow>& rows, const std::string& axis_name);
std::string batch_sweep_csv(const std::vector<BatchSweepRow>& rows);

// rank, per-layer sorted/cumulative curves, and the cross-layer aggregate
// (position-wise mean of the per-layer sorted curves). One row per pair.
std::string profile_csv(const std::vector<ActivationProfile>& per_layer);

// Position-wise mean of per-layer sorted curves, cumulative renormalized.
ActivationProfile aggregate_profile(const std::vector<ActivationProfile>& per_layer);

void write_text_file(const std::string& path, const std::string& content);

}  // namespace meft
