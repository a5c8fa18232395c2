#include "meft/report.hpp"

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

namespace meft {

using nlohmann::json;

namespace {

void require_keys(const json& obj, const std::string& where,
                  const std::set<std::string>& allowed) {
    if (!obj.is_object()) throw ConfigError("config: " + where + " must be an object");
    for (const auto& item : obj.items()) {
        if (!allowed.count(item.key())) {
            throw ConfigError("config: unknown key '" + item.key() + "' in " + where);
        }
    }
}

template <typename T>
T get_or(const json& obj, const char* key, T fallback) {
    if (!obj.contains(key)) return fallback;
    try {
        return obj.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: bad value for '") + key + "': " + e.what());
    }
}

std::vector<index_t> get_index_list(const json& obj, const char* key) {
    std::vector<index_t> out;
    if (!obj.contains(key)) return out;
    if (!obj.at(key).is_array()) throw ConfigError(std::string("config: '") + key + "' must be an array");
    for (const auto& v : obj.at(key)) out.push_back(v.get<index_t>());
    return out;
}

}  // namespace

RunConfig parse_run_config(const json& doc) {
    require_keys(doc, "top level", {"model", "task", "train", "sweep", "output"});
    RunConfig cfg;

    const json model = doc.value("model", json::object());
    require_keys(model, "model",
                 {"vocab", "dim", "layers", "ffn_width", "adapter_pairs", "experts",
                  "experts_per_token", "activation_budget", "base_activation", "max_seq",
                  "train_router"});
    ToyConfig& m = cfg.opt.model;
    m.vocab = get_or<index_t>(model, "vocab", m.vocab);
    m.dim = get_or<index_t>(model, "dim", m.dim);
    m.layers = get_or<index_t>(model, "layers", m.layers);
    m.ffn_width = get_or<index_t>(model, "ffn_width", m.ffn_width);
    m.pairs = get_or<index_t>(model, "adapter_pairs", m.pairs);
    m.experts = get_or<index_t>(model, "experts", m.experts);
    m.experts_per_token = get_or<index_t>(model, "experts_per_token", m.experts_per_token);
    m.budget = get_or<index_t>(model, "activation_budget", m.budget);
    m.max_seq = get_or<index_t>(model, "max_seq", m.max_seq);
    m.train_router = get_or<bool>(model, "train_router", m.train_router);
    const std::string act = get_or<std::string>(model, "base_activation", "silu");
    if (act == "silu") {
        m.base_act = Activation::SiLU;
    } else if (act == "relu") {
        m.base_act = Activation::ReLU;
    } else {
        throw ConfigError("config: base_activation must be 'silu' or 'relu'");
    }

    const json task = doc.value("task", json::object());
    require_keys(task, "task", {"num_facts", "subject_len", "object_len", "data_seed"});
    cfg.num_facts = get_or<index_t>(task, "num_facts", cfg.num_facts);
    cfg.subject_len = get_or<index_t>(task, "subject_len", cfg.subject_len);
    cfg.object_len = get_or<index_t>(task, "object_len", cfg.object_len);
    cfg.data_seed = get_or<std::uint64_t>(task, "data_seed", cfg.data_seed);

    const json tr = doc.value("train", json::object());
    require_keys(tr, "train",
                 {"epochs", "batch_size", "seq_len", "accum_batch_size", "peak_lr",
                  "warmup_fraction", "adam_beta1", "adam_beta2", "adam_eps", "max_steps",
                  "eval_subset", "seed", "tier_mode", "pipeline"});
    TrainSchedule& s = cfg.opt.schedule;
    s.epochs = get_or<index_t>(tr, "epochs", s.epochs);
    s.batch_size = get_or<index_t>(tr, "batch_size", s.batch_size);
    s.seq_len = get_or<index_t>(tr, "seq_len", s.seq_len);
    s.accum_batch_size = get_or<index_t>(tr, "accum_batch_size", s.batch_size);
    s.peak_lr = get_or<double>(tr, "peak_lr", s.peak_lr);
    s.warmup_fraction = get_or<double>(tr, "warmup_fraction", s.warmup_fraction);
    s.max_steps = get_or<index_t>(tr, "max_steps", s.max_steps);
    cfg.opt.adam.beta1 = get_or<double>(tr, "adam_beta1", cfg.opt.adam.beta1);
    cfg.opt.adam.beta2 = get_or<double>(tr, "adam_beta2", cfg.opt.adam.beta2);
    cfg.opt.adam.eps = get_or<double>(tr, "adam_eps", cfg.opt.adam.eps);
    cfg.opt.eval_subset = get_or<index_t>(tr, "eval_subset", cfg.opt.eval_subset);
    m.seed = get_or<std::uint64_t>(tr, "seed", m.seed);
    cfg.opt.mode = tier_mode_from_name(get_or<std::string>(tr, "tier_mode", "meft"));
    cfg.opt.pipeline = get_or<bool>(tr, "pipeline", false);

    const json sweep = doc.value("sweep", json::object());
    require_keys(sweep, "sweep",
                 {"kv_pairs", "K", "experts", "batch", "batch_seeds", "batch_steps"});
    cfg.sweep_kv_pairs = get_index_list(sweep, "kv_pairs");
    cfg.sweep_k = get_index_list(sweep, "K");
    cfg.sweep_experts = get_index_list(sweep, "experts");
    cfg.sweep_batch = get_index_list(sweep, "batch");
    for (index_t v : get_index_list(sweep, "batch_seeds")) {
        cfg.sweep_batch_seeds.push_back(static_cast<std::uint64_t>(v));
    }
    cfg.sweep_batch_steps = get_or<index_t>(sweep, "batch_steps", cfg.sweep_batch_steps);

    const json output = doc.value("output", json::object());
    require_keys(output, "output", {"dir", "per_step_records"});
    cfg.out_dir = get_or<std::string>(output, "dir", cfg.out_dir);
    cfg.per_step_records = get_or<bool>(output, "per_step_records", cfg.per_step_records);
    cfg.opt.collect_records = cfg.per_step_records;

    // Fail before any allocation happens downstream.
    try {
        m.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    if (s.epochs < 1 || s.batch_size < 1 || s.seq_len < 1) {
        throw ConfigError("config: epochs, batch_size, seq_len must be >= 1");
    }
    if (s.accum_batch_size % s.batch_size != 0) {
        throw ConfigError("config: accum_batch_size must be a multiple of batch_size");
    }
    if (!(s.peak_lr >= 0.0) || !(s.warmup_fraction >= 0.0 && s.warmup_fraction <= 1.0)) {
        throw ConfigError("config: bad learning-rate schedule");
    }
    if (cfg.num_facts < 1 || cfg.subject_len < 1 || cfg.object_len < 1) {
        throw ConfigError("config: task sizes must be >= 1");
    }

    cfg.echo = {
        {"model",
         {{"vocab", m.vocab},
          {"dim", m.dim},
          {"layers", m.layers},
          {"ffn_width", m.ffn_width},
          {"adapter_pairs", m.pairs},
          {"experts", m.experts},
          {"experts_per_token", m.experts_per_token},
          {"activation_budget", m.budget},
          {"base_activation", act},
          {"max_seq", m.max_seq},
          {"train_router", m.train_router}}},
        {"task",
         {{"num_facts", cfg.num_facts},
          {"subject_len", cfg.subject_len},
          {"object_len", cfg.object_len},
          {"data_seed", cfg.data_seed}}},
        {"train",
         {{"epochs", s.epochs},
          {"batch_size", s.batch_size},
          {"seq_len", s.seq_len},
          {"accum_batch_size", s.accum_batch_size},
          {"peak_lr", s.peak_lr},
          {"warmup_fraction", s.warmup_fraction},
          {"adam_beta1", cfg.opt.adam.beta1},
          {"adam_beta2", cfg.opt.adam.beta2},
          {"adam_eps", cfg.opt.adam.eps},
          {"max_steps", s.max_steps},
          {"eval_subset", cfg.opt.eval_subset},
          {"seed", m.seed},
          {"tier_mode", tier_mode_name(cfg.opt.mode)},
          {"pipeline", cfg.opt.pipeline}}},
        {"sweep",
         {{"kv_pairs", cfg.sweep_kv_pairs},
          {"K", cfg.sweep_k},
          {"experts", cfg.sweep_experts},
          {"batch", cfg.sweep_batch},
          {"batch_seeds", cfg.sweep_batch_seeds},
          {"batch_steps", cfg.sweep_batch_steps}}},
        {"output", {{"dir", cfg.out_dir}, {"per_step_records", cfg.per_step_records}}},
    };
    return cfg;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open " + path);
    json doc;
    try {
        in >> doc;
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: invalid JSON: ") + e.what());
    }
    return parse_run_config(doc);
}

json run_report_json(const RunConfig& cfg, const TrainResult& res) {
    json epochs = json::array();
    for (const EpochStats& e : res.epochs) {
        epochs.push_back({{"epoch", e.epoch}, {"mean_loss", e.mean_loss}, {"em", e.em}});
    }
    json histogram = json::array();
    for (const auto& layer : res.expert_histogram) histogram.push_back(layer);
    return json{
        {"schema_version", 1},
        {"config", cfg.echo},
        {"steps", res.steps},
        {"epochs", epochs},
        {"final_em", res.final_em},
        {"comm",
         {{"host_to_device", res.meter.host_to_device},
          {"device_to_host", res.meter.device_to_host},
          {"hidden", res.meter.hidden},
          {"total", res.meter.total()}}},
        {"beta",
         {{"mean_union", res.beta.mean_union},
          {"mean_beta_paper", res.beta.mean_beta_paper},
          {"mean_dedup_ratio", res.beta.mean_dedup_ratio},
          {"mean_activated_fraction", res.beta.mean_activated_fraction},
          {"samples", res.beta.samples}}},
        {"flops",
         {{"tokens", res.flops.tokens},
          {"router", res.flops.router_flops},
          {"expert_scoring", res.flops.expert_scoring_flops},
          {"total", res.flops.total}}},
        {"timing",
         {{"selection_s", res.timing.selection_s},
          {"fetch_s", res.timing.fetch_s},
          {"compute_s", res.timing.compute_s},
          {"scatter_s", res.timing.scatter_s},
          {"update_s", res.timing.update_s},
          {"eval_s", res.timing.eval_s},
          {"total_wall_s", res.timing.total_wall_s},
          {"overlap_serial_s", res.timing.overlap_serial_s},
          {"overlap_merged_s", res.timing.overlap_merged_s},
          {"modeled_wall_s", res.timing.modeled_wall_s}}},
        {"expert_histogram", histogram},
    };
}

json meter_export_json(const TrainResult& res) {
    json records = json::array();
    for (const MeterRecord& r : res.meter.records) {
        records.push_back({{"step", r.step},
                           {"layer", r.layer},
                           {"host_to_device", r.host_to_device},
                           {"device_to_host", r.device_to_host},
                           {"hidden", r.hidden}});
    }
    json betas = json::array();
    for (const BetaRecord& b : res.beta_records) {
        betas.push_back({{"step", b.step},
                         {"micro", b.micro},
                         {"layer", b.layer},
                         {"union_size", b.stats.union_size},
                         {"beta_paper", b.stats.beta_paper},
                         {"dedup_ratio", b.stats.dedup_ratio},
                         {"activated_fraction", b.stats.activated_fraction}});
    }
    return json{
        {"schema_version", 1},
        {"totals",
         {{"host_to_device", res.meter.host_to_device},
          {"device_to_host", res.meter.device_to_host},
          {"hidden", res.meter.hidden},
          {"total", res.meter.total()}}},
        {"records", records},
        {"beta_records", betas},
    };
}

std::string sweep_csv(const std::vector<SweepRow>& rows, const std::string& axis_name) {
    std::ostringstream out;
    out << axis_name
        << ",final_em,comm_total,comm_host_to_device,comm_device_to_host,comm_hidden,"
           "mean_beta_paper,mean_dedup_ratio,mean_activated_fraction,flops_total\n";
    out.precision(12);
    for (const SweepRow& r : rows) {
        out << r.axis_value << "," << r.final_em << "," << r.comm_total << "," << r.comm_h2d
            << "," << r.comm_d2h << "," << r.comm_hidden << "," << r.mean_beta_paper << ","
            << r.mean_dedup_ratio << "," << r.mean_activated_fraction << "," << r.flops_total
            << "\n";
    }
    return out.str();
}

std::string batch_sweep_csv(const std::vector<BatchSweepRow>& rows) {
    std::ostringstream out;
    out << "batch,mean_activated_fraction,mean_dedup_ratio,seeds\n";
    out.precision(12);
    for (const BatchSweepRow& r : rows) {
        out << r.batch << "," << r.mean_activated_fraction << "," << r.mean_dedup_ratio << ","
            << r.per_seed_activated_fraction.size() << "\n";
    }
    return out.str();
}

ActivationProfile aggregate_profile(const std::vector<ActivationProfile>& per_layer) {
    ActivationProfile agg;
    if (per_layer.empty()) return agg;
    const size_t r = per_layer.front().sorted_means.size();
    agg.sorted_means.assign(r, 0.0);
    agg.cumulative.assign(r, 0.0);
    for (const ActivationProfile& p : per_layer) {
        for (size_t i = 0; i < r; ++i) {
            agg.sorted_means[i] += p.sorted_means[i];
            agg.cumulative[i] += p.cumulative[i];
        }
    }
    for (size_t i = 0; i < r; ++i) {
        agg.sorted_means[i] /= static_cast<double>(per_layer.size());
        agg.cumulative[i] /= static_cast<double>(per_layer.size());
    }
    return agg;
}

std::string profile_csv(const std::vector<ActivationProfile>& per_layer) {
    const ActivationProfile agg = aggregate_profile(per_layer);
    std::ostringstream out;
    out << "rank";
    for (size_t l = 0; l < per_layer.size(); ++l) {
        out << ",mean_layer" << l << ",cumulative_layer" << l;
    }
    out << ",mean_aggregate,cumulative_aggregate\n";
    out.precision(12);
    for (size_t i = 0; i < agg.sorted_means.size(); ++i) {
        out << i;
        for (const ActivationProfile& p : per_layer) {
            out << "," << p.sorted_means[i] << "," << p.cumulative[i];
        }
        out << "," << agg.sorted_means[i] << "," << agg.cumulative[i] << "\n";
    }
    return out.str();
}

void write_text_file(const std::string& path, const std::string& content) {
    const std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out << content;
    if (!out) throw std::runtime_error("write failed: " + path);
}

}  // namespace meft
