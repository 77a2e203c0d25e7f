#pragma once

// Flat JSON run configuration. Keys mirror the training and evaluation
// hyperparameters one-to-one; unknown keys are rejected by name and every run
// echoes its resolved configuration next to its outputs.

#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "satd/common.hpp"
#include "satd/sha256.hpp"

namespace satd {

struct RunConfig {
    // run
    std::string stage;      // srd | sgi | eval | probe
    std::string eval_task;  // zeroshot | retrieval | segment | viz (stage == eval)
    std::uint64_t seed = 0;

    // paths and ids
    std::string data_dir;
    std::string bank_dir;
    std::string out_dir;
    std::string checkpoint;
    std::string prompt_manifest;
    std::string import_dir;
    std::string features_file;
    std::string labels_file;
    std::string viz_image;
    std::string viz_class;

    // synthetic data generation; defaults leave room for the default
    // 128-pixel global crops
    std::uint64_t n_images = 64;
    std::uint64_t ms_channels = 6;
    std::uint64_t image_h = 160;
    std::uint64_t image_w = 160;

    // band selection
    std::uint64_t rgb_band_r = 0, rgb_band_g = 1, rgb_band_b = 2;

    // multi-crop views
    std::uint64_t n_global = 2, n_local = 8;
    std::uint64_t global_size = 128, local_size = 96;
    double global_scale_min = 0.4, global_scale_max = 1.0;
    double local_scale_min = 0.05, local_scale_max = 0.4;
    double jitter_strength = 0.4, blur_prob = 0.1, solarize_prob = 0.2, grayscale_prob = 0.2;
    double flip_prob = 0.5;

    // encoders and projectors
    std::uint64_t patch_size = 8;
    std::uint64_t rgb_embed_dim = 32;
    std::uint64_t ms_embed_dim = 32;
    std::uint64_t encoder_depth = 1;
    std::uint64_t d_v = 0;  // 0: defaults to rgb_embed_dim
    std::uint64_t rgb_seed = 101, ms_seed = 202;

    // stage 1
    double tau_s = 0.1, tau_t = 0.06, m_c = 0.9;
    std::uint64_t srd_epochs = 5, srd_batch = 128, srd_steps = 0;
    double srd_lr = 5e-4;
    double weight_decay = 0.0;
    std::uint64_t checkpoint_every = 0;

    // stage 2
    std::uint64_t sgi_epochs = 10, sgi_batch = 1024, sgi_steps = 0;
    double sgi_lr = 4e-5;
    double sgi_tau = 0.07;
    std::string text_pooling = "mean";  // mean | bos | eos | sweep (eval only)
    std::uint64_t d_t = 64, bank_tokens = 8;
    std::string instruction_sampling = "uniform";  // uniform | fixed0
    std::string sgi_train_split = "all";           // all | train

    // text bank
    std::uint64_t pseudo_seed = 9001;

    // linear probe
    std::uint64_t probe_epochs = 30, probe_batch = 128;
    double probe_lr = 1e-4, probe_weight_decay = 0.05;
    double probe_eval_fraction = 0.25;
    double probe_gamma = 0.1, probe_milestone1 = 0.6, probe_milestone2 = 0.8;

    // evaluation
    std::uint64_t map_k = 100;
    std::string map_denominator = "min_k_relevant";  // min_k_relevant | relevant
    double multilabel_margin = 0.0;
    bool multilabel = false;

    std::size_t shared_dim() const {
        return static_cast<std::size_t>(d_v == 0 ? rgb_embed_dim : d_v);
    }
};

namespace configdetail {

enum class Kind { u64, f64, str, boolean };

struct FieldDef {
    const char* name;
    Kind kind;
    bool is_path;  // excluded from the semantic digest
    std::function<void(RunConfig&, const nlohmann::json&)> set;
    std::function<nlohmann::json(const RunConfig&)> get;
};

inline const std::vector<FieldDef>& fields() {
    static const std::vector<FieldDef> defs = [] {
        std::vector<FieldDef> f;
        auto add_u64 = [&f](const char* name, std::uint64_t RunConfig::* m) {
            f.push_back({name, Kind::u64, false,
                         [m, name](RunConfig& c, const nlohmann::json& v) {
                             if (!v.is_number_unsigned() && !v.is_number_integer())
                                 throw ConfigError(cat("config: key \"", name,
                                                       "\" expects an unsigned integer"));
                             c.*m = v.get<std::uint64_t>();
                         },
                         [m](const RunConfig& c) { return nlohmann::json(c.*m); }});
        };
        auto add_f64 = [&f](const char* name, double RunConfig::* m) {
            f.push_back({name, Kind::f64, false,
                         [m, name](RunConfig& c, const nlohmann::json& v) {
                             if (!v.is_number())
                                 throw ConfigError(cat("config: key \"", name,
                                                       "\" expects a number"));
                             c.*m = v.get<double>();
                         },
                         [m](const RunConfig& c) { return nlohmann::json(c.*m); }});
        };
        auto add_str = [&f](const char* name, std::string RunConfig::* m, bool is_path) {
            f.push_back({name, Kind::str, is_path,
                         [m, name](RunConfig& c, const nlohmann::json& v) {
                             if (!v.is_string())
                                 throw ConfigError(cat("config: key \"", name,
                                                       "\" expects a string"));
                             c.*m = v.get<std::string>();
                         },
                         [m](const RunConfig& c) { return nlohmann::json(c.*m); }});
        };
        auto add_bool = [&f](const char* name, bool RunConfig::* m) {
            f.push_back({name, Kind::boolean, false,
                         [m, name](RunConfig& c, const nlohmann::json& v) {
                             if (!v.is_boolean())
                                 throw ConfigError(cat("config: key \"", name,
                                                       "\" expects a boolean"));
                             c.*m = v.get<bool>();
                         },
                         [m](const RunConfig& c) { return nlohmann::json(c.*m); }});
        };

        add_str("stage", &RunConfig::stage, false);
        add_str("eval_task", &RunConfig::eval_task, false);
        add_u64("seed", &RunConfig::seed);
        add_str("data_dir", &RunConfig::data_dir, true);
        add_str("bank_dir", &RunConfig::bank_dir, true);
        add_str("out_dir", &RunConfig::out_dir, true);
        add_str("checkpoint", &RunConfig::checkpoint, true);
        add_str("prompt_manifest", &RunConfig::prompt_manifest, true);
        add_str("import_dir", &RunConfig::import_dir, true);
        add_str("features_file", &RunConfig::features_file, true);
        add_str("labels_file", &RunConfig::labels_file, true);
        add_str("viz_image", &RunConfig::viz_image, false);
        add_str("viz_class", &RunConfig::viz_class, false);
        add_u64("n_images", &RunConfig::n_images);
        add_u64("ms_channels", &RunConfig::ms_channels);
        add_u64("image_h", &RunConfig::image_h);
        add_u64("image_w", &RunConfig::image_w);
        add_u64("rgb_band_r", &RunConfig::rgb_band_r);
        add_u64("rgb_band_g", &RunConfig::rgb_band_g);
        add_u64("rgb_band_b", &RunConfig::rgb_band_b);
        add_u64("n_global", &RunConfig::n_global);
        add_u64("n_local", &RunConfig::n_local);
        add_u64("global_size", &RunConfig::global_size);
        add_u64("local_size", &RunConfig::local_size);
        add_f64("global_scale_min", &RunConfig::global_scale_min);
        add_f64("global_scale_max", &RunConfig::global_scale_max);
        add_f64("local_scale_min", &RunConfig::local_scale_min);
        add_f64("local_scale_max", &RunConfig::local_scale_max);
        add_f64("jitter_strength", &RunConfig::jitter_strength);
        add_f64("blur_prob", &RunConfig::blur_prob);
        add_f64("solarize_prob", &RunConfig::solarize_prob);
        add_f64("grayscale_prob", &RunConfig::grayscale_prob);
        add_f64("flip_prob", &RunConfig::flip_prob);
        add_u64("patch_size", &RunConfig::patch_size);
        add_u64("rgb_embed_dim", &RunConfig::rgb_embed_dim);
        add_u64("ms_embed_dim", &RunConfig::ms_embed_dim);
        add_u64("encoder_depth", &RunConfig::encoder_depth);
        add_u64("d_v", &RunConfig::d_v);
        add_u64("rgb_seed", &RunConfig::rgb_seed);
        add_u64("ms_seed", &RunConfig::ms_seed);
        add_f64("tau_s", &RunConfig::tau_s);
        add_f64("tau_t", &RunConfig::tau_t);
        add_f64("m_c", &RunConfig::m_c);
        add_u64("srd_epochs", &RunConfig::srd_epochs);
        add_u64("srd_batch", &RunConfig::srd_batch);
        add_u64("srd_steps", &RunConfig::srd_steps);
        add_f64("srd_lr", &RunConfig::srd_lr);
        add_f64("weight_decay", &RunConfig::weight_decay);
        add_u64("checkpoint_every", &RunConfig::checkpoint_every);
        add_u64("sgi_epochs", &RunConfig::sgi_epochs);
        add_u64("sgi_batch", &RunConfig::sgi_batch);
        add_u64("sgi_steps", &RunConfig::sgi_steps);
        add_f64("sgi_lr", &RunConfig::sgi_lr);
        add_f64("sgi_tau", &RunConfig::sgi_tau);
        add_str("text_pooling", &RunConfig::text_pooling, false);
        add_u64("d_t", &RunConfig::d_t);
        add_u64("bank_tokens", &RunConfig::bank_tokens);
        add_str("instruction_sampling", &RunConfig::instruction_sampling, false);
        add_str("sgi_train_split", &RunConfig::sgi_train_split, false);
        add_u64("pseudo_seed", &RunConfig::pseudo_seed);
        add_u64("probe_epochs", &RunConfig::probe_epochs);
        add_u64("probe_batch", &RunConfig::probe_batch);
        add_f64("probe_lr", &RunConfig::probe_lr);
        add_f64("probe_weight_decay", &RunConfig::probe_weight_decay);
        add_f64("probe_eval_fraction", &RunConfig::probe_eval_fraction);
        add_f64("probe_gamma", &RunConfig::probe_gamma);
        add_f64("probe_milestone1", &RunConfig::probe_milestone1);
        add_f64("probe_milestone2", &RunConfig::probe_milestone2);
        add_u64("map_k", &RunConfig::map_k);
        add_str("map_denominator", &RunConfig::map_denominator, false);
        add_f64("multilabel_margin", &RunConfig::multilabel_margin);
        add_bool("multilabel", &RunConfig::multilabel);
        return f;
    }();
    return defs;
}

}  // namespace configdetail

inline RunConfig config_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("config: expected a flat JSON object");
    RunConfig cfg;
    const auto& defs = configdetail::fields();
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (it.value().is_object() || it.value().is_array())
            throw ConfigError(cat("config: key \"", it.key(),
                                  "\" must be a scalar (flat object required)"));
        bool known = false;
        for (const auto& d : defs) {
            if (it.key() == d.name) {
                d.set(cfg, it.value());
                known = true;
                break;
            }
        }
        if (!known) throw ConfigError(cat("config: unknown key \"", it.key(), "\""));
    }
    return cfg;
}

inline RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError(cat("config: cannot open '", path.string(), "'"));
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(cat("config: parse failure in '", path.string(), "': ", e.what()));
    }
    return config_from_json(j);
}

inline nlohmann::json resolved_config_json(const RunConfig& cfg) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& d : configdetail::fields()) j[d.name] = d.get(cfg);
    return j;
}

// Resolved config with path-valued keys blanked; what checkpoints embed so
// that runs from different directories stay byte-comparable.
inline nlohmann::json semantic_config_json(const RunConfig& cfg) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& d : configdetail::fields())
        j[d.name] = d.is_path ? nlohmann::json("") : d.get(cfg);
    return j;
}

// Digest over the semantic keys only; paths are excluded so runs in
// different directories compare equal.
inline std::string config_digest(const RunConfig& cfg) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& d : configdetail::fields())
        if (!d.is_path) j[d.name] = d.get(cfg);
    return sha256_hex(j.dump());
}

inline void require_key(const std::string& value, const char* key, const char* verb) {
    if (value.empty())
        throw ConfigError(cat("config: key \"", key, "\" is required for ", verb));
}

}  // namespace satd
