// Run configuration: model dimensions, schedule, data source, and the
// plain-text config file format ([model]/[train]/[data]/[eval] sections,
// key = value lines). Unknown keys are rejected with the offending line
// number; every key has a default so `print-config` documents the format.
#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "sycoca/errors.hpp"

namespace sycoca {

struct ModelConfig {
    int d_model = 64;
    int n_heads = 4;
    int n_layers_img_enc = 2;
    int n_layers_txt_enc = 2;
    int n_layers_img_dec = 2;
    int n_layers_txt_dec = 2;
    int patch_size = 8;
    int image_hw = 32;
    int max_text_len = 16;
    int vocab_size = 512;
    int embed_dim = 64;
    double r_h = 0.5;
    double r_l = 0.5;
    double lambda_ic = 2.0;
    double lambda_tm = 1.0;
    double init_logit_scale = 1.0 / 0.07;

    int grid_hw() const { return image_hw / patch_size; }
    int num_patches() const { return grid_hw() * grid_hw(); }
    int patch_dim() const { return patch_size * patch_size * 3; }
    int mlp_dim() const { return 4 * d_model; }

    void validate() const {
        if (d_model <= 0 || n_heads <= 0 || embed_dim <= 0 || vocab_size <= 0)
            throw ConfigError("model: dimensions must be positive");
        if (d_model % n_heads != 0) throw ConfigError("model: d_model must be divisible by n_heads");
        if (patch_size <= 0 || image_hw <= 0 || image_hw % patch_size != 0)
            throw ConfigError("model: image_hw must be a positive multiple of patch_size");
        if (max_text_len < 4) throw ConfigError("model: max_text_len must be >= 4");
        if (r_h < 0 || r_l < 0 || r_h > 1 || r_l > 1)
            throw ConfigError("model: masking ratios must lie in [0, 1]");
        if (r_h + r_l > 1.0 + 1e-12)
            throw ConfigError("model: r_h + r_l must not exceed 1");
        if (n_layers_img_enc <= 0 || n_layers_txt_enc <= 0 || n_layers_img_dec <= 0 ||
            n_layers_txt_dec <= 0)
            throw ConfigError("model: layer counts must be positive");
        if (init_logit_scale <= 0) throw ConfigError("model: init_logit_scale must be positive");
    }
};

struct Schedule {
    double peak_lr = 3e-3;
    double floor_lr = 0.0;
    int warmup_steps = 100;
    int total_steps = 1000;

    void validate() const {
        if (!(warmup_steps > 0 && warmup_steps < total_steps))
            throw ConfigError("train: need 0 < warmup_steps < steps");
        if (peak_lr <= 0 || floor_lr < 0 || floor_lr > peak_lr)
            throw ConfigError("train: need 0 <= floor_lr <= peak_lr, peak_lr > 0");
    }
};

enum class MaskingMode { Attentive, Random };

struct Objectives {
    bool itc = true;
    bool ic = true;
    bool mim = false;
    bool tgmim = true;
};

enum class DataSource { Synthetic, Manifest };

struct RunConfig {
    ModelConfig model;
    Schedule schedule;
    int batch_size = 32;
    int epochs = 0;  // used only when schedule.total_steps == 0
    std::uint64_t seed = 1;
    Objectives objectives;
    MaskingMode masking = MaskingMode::Attentive;
    double weight_decay = 0.05;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double clip_norm = 1.0;  // 0 disables clipping
    bool tgmim_raw_sum = false;
    int threads = 0;  // 0 = hardware concurrency (results do not depend on it)
    std::string checkpoint_path = "sycoca.ckpt";
    int checkpoint_every = 0;  // 0 = only at the end
    std::string log_path = "metrics.log";

    DataSource data_source = DataSource::Synthetic;
    std::string manifest_path;
    std::string vocab_file = "vocab.bpe";
    int synthetic_count = 256;
    std::uint64_t synthetic_seed = 7;
    bool synthetic_exhaustive = true;

    std::string prompt_template = "a photo of a {name}";
    std::string results_path;

    void validate() const {
        model.validate();
        schedule.validate();
        if (batch_size < 2) throw ConfigError("train: batch_size must be >= 2 (ITC needs negatives)");
        if (objectives.mim && objectives.tgmim)
            throw ConfigError("train: at most one of mim/tgmim may be enabled");
        if (weight_decay < 0 || clip_norm < 0) throw ConfigError("train: negative decay/clip");
        if (data_source == DataSource::Manifest && manifest_path.empty())
            throw ConfigError("data: source=manifest requires manifest_path");
        if (synthetic_count < 2) throw ConfigError("data: synthetic_count must be >= 2");
    }

    bool mim_variant() const { return objectives.mim || objectives.tgmim; }
    // The IC pass sees the low mask whenever masks are in play (any MIM
    // variant) or attentive masking is explicitly enabled.
    bool ic_uses_low_mask() const {
        return mim_variant() || (objectives.ic && masking == MaskingMode::Attentive);
    }
};

// ----- config file parsing -----

namespace detail {

inline std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

struct KeyBinding {
    std::string section;
    std::string key;
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

inline bool parse_bool(const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw std::invalid_argument("expected boolean, got \"" + v + "\"");
}

inline std::string fmt_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

inline const std::vector<KeyBinding>& key_bindings() {
    auto ikey = [](const char* sec, const char* key, auto member) {
        return KeyBinding{sec, key,
                          [member](RunConfig& c, const std::string& v) { c.*member = std::stoi(v); },
                          [member](const RunConfig& c) { return std::to_string(c.*member); }};
    };
    auto mkey = [](const char* key, auto member) {
        return KeyBinding{"model", key,
                          [member](RunConfig& c, const std::string& v) { c.model.*member = std::stoi(v); },
                          [member](const RunConfig& c) { return std::to_string(c.model.*member); }};
    };
    auto mdkey = [](const char* key, auto member) {
        return KeyBinding{"model", key,
                          [member](RunConfig& c, const std::string& v) { c.model.*member = std::stod(v); },
                          [member](const RunConfig& c) { return fmt_double(c.model.*member); }};
    };
    auto dkey = [](const char* sec, const char* key, auto member) {
        return KeyBinding{sec, key,
                          [member](RunConfig& c, const std::string& v) { c.*member = std::stod(v); },
                          [member](const RunConfig& c) { return fmt_double(c.*member); }};
    };
    auto bkey = [](const char* sec, const char* key, auto member) {
        return KeyBinding{sec, key,
                          [member](RunConfig& c, const std::string& v) { c.*member = parse_bool(v); },
                          [member](const RunConfig& c) { return (c.*member) ? "true" : "false"; }};
    };
    auto skey = [](const char* sec, const char* key, auto member) {
        return KeyBinding{sec, key, [member](RunConfig& c, const std::string& v) { c.*member = v; },
                          [member](const RunConfig& c) { return c.*member; }};
    };
    auto ukey = [](const char* sec, const char* key, auto member) {
        return KeyBinding{sec, key,
                          [member](RunConfig& c, const std::string& v) { c.*member = std::stoull(v); },
                          [member](const RunConfig& c) { return std::to_string(c.*member); }};
    };

    static const std::vector<KeyBinding> bindings = {
        mkey("d_model", &ModelConfig::d_model),
        mkey("n_heads", &ModelConfig::n_heads),
        mkey("n_layers_img_enc", &ModelConfig::n_layers_img_enc),
        mkey("n_layers_txt_enc", &ModelConfig::n_layers_txt_enc),
        mkey("n_layers_img_dec", &ModelConfig::n_layers_img_dec),
        mkey("n_layers_txt_dec", &ModelConfig::n_layers_txt_dec),
        mkey("patch_size", &ModelConfig::patch_size),
        mkey("image_hw", &ModelConfig::image_hw),
        mkey("max_text_len", &ModelConfig::max_text_len),
        mkey("vocab_size", &ModelConfig::vocab_size),
        mkey("embed_dim", &ModelConfig::embed_dim),
        mdkey("r_h", &ModelConfig::r_h),
        mdkey("r_l", &ModelConfig::r_l),
        mdkey("lambda_ic", &ModelConfig::lambda_ic),
        mdkey("lambda_tm", &ModelConfig::lambda_tm),
        mdkey("init_logit_scale", &ModelConfig::init_logit_scale),
        {"train", "peak_lr",
         [](RunConfig& c, const std::string& v) { c.schedule.peak_lr = std::stod(v); },
         [](const RunConfig& c) { return fmt_double(c.schedule.peak_lr); }},
        {"train", "floor_lr",
         [](RunConfig& c, const std::string& v) { c.schedule.floor_lr = std::stod(v); },
         [](const RunConfig& c) { return fmt_double(c.schedule.floor_lr); }},
        {"train", "warmup_steps",
         [](RunConfig& c, const std::string& v) { c.schedule.warmup_steps = std::stoi(v); },
         [](const RunConfig& c) { return std::to_string(c.schedule.warmup_steps); }},
        {"train", "steps",
         [](RunConfig& c, const std::string& v) { c.schedule.total_steps = std::stoi(v); },
         [](const RunConfig& c) { return std::to_string(c.schedule.total_steps); }},
        ikey("train", "batch_size", &RunConfig::batch_size),
        ikey("train", "epochs", &RunConfig::epochs),
        ukey("train", "seed", &RunConfig::seed),
        {"train", "itc",
         [](RunConfig& c, const std::string& v) { c.objectives.itc = parse_bool(v); },
         [](const RunConfig& c) { return c.objectives.itc ? "true" : "false"; }},
        {"train", "ic", [](RunConfig& c, const std::string& v) { c.objectives.ic = parse_bool(v); },
         [](const RunConfig& c) { return c.objectives.ic ? "true" : "false"; }},
        {"train", "mim",
         [](RunConfig& c, const std::string& v) { c.objectives.mim = parse_bool(v); },
         [](const RunConfig& c) { return c.objectives.mim ? "true" : "false"; }},
        {"train", "tgmim",
         [](RunConfig& c, const std::string& v) { c.objectives.tgmim = parse_bool(v); },
         [](const RunConfig& c) { return c.objectives.tgmim ? "true" : "false"; }},
        {"train", "masking",
         [](RunConfig& c, const std::string& v) {
             if (v == "attentive")
                 c.masking = MaskingMode::Attentive;
             else if (v == "random")
                 c.masking = MaskingMode::Random;
             else
                 throw std::invalid_argument("masking must be attentive or random");
         },
         [](const RunConfig& c) {
             return c.masking == MaskingMode::Attentive ? "attentive" : "random";
         }},
        dkey("train", "weight_decay", &RunConfig::weight_decay),
        dkey("train", "beta1", &RunConfig::beta1),
        dkey("train", "beta2", &RunConfig::beta2),
        dkey("train", "adam_eps", &RunConfig::adam_eps),
        dkey("train", "clip_norm", &RunConfig::clip_norm),
        bkey("train", "tgmim_raw_sum", &RunConfig::tgmim_raw_sum),
        ikey("train", "threads", &RunConfig::threads),
        skey("train", "checkpoint_path", &RunConfig::checkpoint_path),
        ikey("train", "checkpoint_every", &RunConfig::checkpoint_every),
        skey("train", "log_path", &RunConfig::log_path),
        {"data", "source",
         [](RunConfig& c, const std::string& v) {
             if (v == "synthetic")
                 c.data_source = DataSource::Synthetic;
             else if (v == "manifest")
                 c.data_source = DataSource::Manifest;
             else
                 throw std::invalid_argument("source must be synthetic or manifest");
         },
         [](const RunConfig& c) {
             return c.data_source == DataSource::Synthetic ? "synthetic" : "manifest";
         }},
        skey("data", "manifest_path", &RunConfig::manifest_path),
        skey("data", "vocab_file", &RunConfig::vocab_file),
        ikey("data", "synthetic_count", &RunConfig::synthetic_count),
        ukey("data", "synthetic_seed", &RunConfig::synthetic_seed),
        bkey("data", "synthetic_exhaustive", &RunConfig::synthetic_exhaustive),
        skey("eval", "prompt_template", &RunConfig::prompt_template),
        skey("eval", "results_path", &RunConfig::results_path),
    };
    return bindings;
}

}  // namespace detail

inline RunConfig parse_config_text(const std::string& text) {
    RunConfig cfg;
    std::istringstream in(text);
    std::string line;
    std::string section;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string t = detail::trim(line);
        if (t.empty() || t[0] == '#' || t[0] == ';') continue;
        if (t.front() == '[') {
            if (t.back() != ']')
                throw ConfigError("config line " + std::to_string(line_no) + ": unterminated section");
            section = t.substr(1, t.size() - 2);
            if (section != "model" && section != "train" && section != "data" && section != "eval")
                throw ConfigError("config line " + std::to_string(line_no) + ": unknown section [" +
                                  section + "]");
            continue;
        }
        const auto eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
        const std::string key = detail::trim(t.substr(0, eq));
        const std::string value = detail::trim(t.substr(eq + 1));
        if (section.empty())
            throw ConfigError("config line " + std::to_string(line_no) + ": key outside any section");
        bool found = false;
        for (const auto& b : detail::key_bindings()) {
            if (b.section == section && b.key == key) {
                try {
                    b.set(cfg, value);
                } catch (const std::exception& e) {
                    throw ConfigError("config line " + std::to_string(line_no) + ": bad value for " +
                                      key + ": " + e.what());
                }
                found = true;
                break;
            }
        }
        if (!found)
            throw ConfigError("config line " + std::to_string(line_no) + ": unknown key \"" + key +
                              "\" in [" + section + "]");
    }
    return cfg;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open config file: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse_config_text(ss.str());
}

// Canonical serialization: every key in a fixed order. Parsing it back
// reproduces the RunConfig, which is what the checkpoint blob relies on.
inline std::string serialize_config(const RunConfig& cfg) {
    std::ostringstream out;
    std::string section;
    for (const auto& b : detail::key_bindings()) {
        if (b.section != section) {
            if (!section.empty()) out << "\n";
            out << "[" << b.section << "]\n";
            section = b.section;
        }
        out << b.key << " = " << b.get(cfg) << "\n";
    }
    return out.str();
}

}  // namespace sycoca
