#pragma once

#include <cctype>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mdst/data.hpp"
#include "mdst/errors.hpp"
#include "mdst/model.hpp"

namespace mdst {

// Flat key = value text with optional one-level [section] headers; keys in a
// section are stored as "section.key". Values use TOML literal syntax for
// numbers, booleans, strings and arrays; '#' starts a comment outside strings.
using ConfigMap = std::map<std::string, nlohmann::json>;

namespace detail {

inline std::string trim(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

inline std::string strip_comment(const std::string& line) {
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        if (line[i] == '"' && (i == 0 || line[i - 1] != '\\')) quoted = !quoted;
        if (line[i] == '#' && !quoted) return line.substr(0, i);
    }
    return line;
}

inline bool valid_key(const std::string& k) {
    if (k.empty()) return false;
    for (char c : k) {
        if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_' && c != '-' && c != '.') return false;
    }
    return true;
}

}  // namespace detail

inline ConfigMap parse_config(std::istream& is, const std::string& source = "<config>") {
    ConfigMap out;
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const std::string text = detail::trim(detail::strip_comment(line));
        if (text.empty()) continue;
        const std::string where = source + ":" + std::to_string(lineno);
        if (text.front() == '[') {
            if (text.back() != ']') throw ConfigError(where + ": unterminated section header");
            section = detail::trim(text.substr(1, text.size() - 2));
            if (!detail::valid_key(section)) throw ConfigError(where + ": invalid section name '" + section + "'");
            continue;
        }
        const auto eq = text.find('=');
        if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
        const std::string key = detail::trim(text.substr(0, eq));
        const std::string raw = detail::trim(text.substr(eq + 1));
        if (!detail::valid_key(key)) throw ConfigError(where + ": invalid key '" + key + "'");
        if (raw.empty()) throw ConfigError(where + ": missing value for '" + key + "'");
        nlohmann::json value;
        try {
            value = nlohmann::json::parse(raw);
        } catch (const nlohmann::json::parse_error&) {
            throw ConfigError(where + ": cannot parse value '" + raw + "' for '" + key + "'");
        }
        const std::string full = section.empty() ? key : section + "." + key;
        if (!out.emplace(full, std::move(value)).second) throw ConfigError(where + ": duplicate key '" + full + "'");
    }
    return out;
}

inline ConfigMap parse_config_text(const std::string& text) {
    std::istringstream is(text);
    return parse_config(is);
}

inline ConfigMap load_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config " + path.string());
    return parse_config(is, path.string());
}

namespace detail {

template <class T>
T config_get(const nlohmann::json& v, const std::string& key) {
    try {
        return v.get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError("config key '" + key + "' has the wrong type: " + v.dump());
    }
}

inline std::size_t config_count(const nlohmann::json& v, const std::string& key) {
    if (!v.is_number_integer() || v.get<long long>() < 0) {
        throw ConfigError("config key '" + key + "' must be a non-negative integer, got " + v.dump());
    }
    return v.get<std::size_t>();
}

inline StageSchedule config_stages(const nlohmann::json& v) {
    if (!v.is_array()) throw ConfigError("stages must be an array of [timesteps, units] pairs");
    std::vector<Stage> stages;
    for (const auto& s : v) {
        if (!s.is_array() || s.size() != 2) throw ConfigError("each stage must be [timesteps, units], got " + s.dump());
        stages.push_back({config_count(s[0], "stages"), config_count(s[1], "stages")});
    }
    try {
        return StageSchedule(std::move(stages));
    } catch (const ContractError& e) {
        throw ConfigError(std::string("invalid stages: ") + e.what());
    }
}

}  // namespace detail

// Applies one model key. Returns false for keys this function does not own.
inline bool apply_model_key(ModelConfig& c, const std::string& key, const nlohmann::json& v) {
    using detail::config_count;
    using detail::config_get;
    auto num = [&] { return config_get<double>(v, key); };
    if (key == "model") c.variant = parse_variant(config_get<std::string>(v, key));
    else if (key == "body") c.body = parse_body(config_get<std::string>(v, key));
    else if (key == "profile") c.apply_profile(config_get<std::string>(v, key));
    else if (key == "enc_hidden") c.enc_hidden = config_count(v, key);
    else if (key == "emb") c.emb = config_count(v, key);
    else if (key == "proj_hidden") c.proj_hidden = config_count(v, key);
    else if (key == "word_dim") c.word_dim = config_count(v, key);
    else if (key == "word_hidden") c.word_hidden = config_count(v, key);
    else if (key == "heads") c.heads = config_count(v, key);
    else if (key == "head_dim") c.head_dim = config_count(v, key);
    else if (key == "snn_hidden") c.snn_hidden = config_count(v, key);
    else if (key == "tokens") c.tokens = config_count(v, key);
    else if (key == "tau_m") c.lif.tau_m = num();
    else if (key == "resistance") c.lif.resistance = num();
    else if (key == "v_reset") c.lif.v_reset = num();
    else if (key == "v_th_init") c.lif.v_th_init = num();
    else if (key == "surrogate_alpha") c.lif.surrogate_alpha = num();
    else if (key == "stages") c.stages = detail::config_stages(v);
    else if (key == "mdst_timesteps") c.mdst_timesteps = config_count(v, key);
    else if (key == "stage_weights") c.stage_weights = config_get<std::vector<double>>(v, key);
    else if (key == "snn_norm") c.snn_norm = parse_norm(config_get<std::string>(v, key));
    else if (key == "motion") c.motion = config_get<bool>(v, key);
    else if (key == "dynamic_threshold") c.dynamic_threshold = config_get<bool>(v, key);
    else if (key == "contrast_threshold") c.contrast_threshold = num();
    else if (key == "gamma") c.gamma = num();
    else if (key == "lr") c.lr = num();
    else if (key == "epochs") c.epochs = config_count(v, key);
    else if (key == "batch_size") c.batch_size = config_count(v, key);
    else if (key == "dropout_enc") c.dropout.enc = num();
    else if (key == "dropout_dec") c.dropout.dec = num();
    else if (key == "dropout_wproj") c.dropout.wproj = num();
    else return false;
    return true;
}

inline bool apply_data_key(SyntheticSpec& s, const std::string& key, const nlohmann::json& v) {
    using detail::config_count;
    using detail::config_get;
    auto num = [&] { return config_get<double>(v, key); };
    if (key == "n_seen_classes") s.n_seen_classes = config_count(v, key);
    else if (key == "n_unseen_classes") s.n_unseen_classes = config_count(v, key);
    else if (key == "samples_per_class") s.samples_per_class = config_count(v, key);
    else if (key == "frames") s.frames = config_count(v, key);
    else if (key == "feature_dim") s.feature_dim = config_count(v, key);
    else if (key == "attributes") s.attributes = config_count(v, key);
    else if (key == "word_dim") s.word_dim = config_count(v, key);
    else if (key == "classes_per_group") s.classes_per_group = config_count(v, key);
    else if (key == "background_level") s.background_level = num();
    else if (key == "background_spread") s.background_spread = num();
    else if (key == "background_jitter") s.background_jitter = num();
    else if (key == "motion_amplitude") s.motion_amplitude = num();
    else if (key == "noise_sigma") s.noise_sigma = num();
    else if (key == "latent_separation") s.latent_separation = num();
    else if (key == "word_structure") s.word_structure = num();
    else if (key == "word_norm") s.word_norm = num();
    else if (key == "test_seen_fraction") s.test_seen_fraction = num();
    else return false;
    return true;
}

struct RunConfig {
    ModelConfig model = ModelConfig::desk();
    SyntheticSpec data;
    std::uint64_t data_seed = 0;
    bool data_seed_set = false;
};

// Top-level keys configure the model; keys under [data] the synthetic
// generator (plus data.seed). Unknown keys are errors.
inline RunConfig apply_config(const ConfigMap& map, RunConfig base = {}) {
    // Profile first so explicit dropout keys override it.
    if (const auto it = map.find("profile"); it != map.end()) apply_model_key(base.model, it->first, it->second);
    for (const auto& [key, value] : map) {
        if (key == "profile") continue;
        if (key.rfind("data.", 0) == 0) {
            const std::string k = key.substr(5);
            if (k == "seed") {
                base.data_seed = detail::config_count(value, key);
                base.data_seed_set = true;
            } else if (!apply_data_key(base.data, k, value)) {
                throw ConfigError("unknown config key '" + key + "'");
            }
        } else if (!apply_model_key(base.model, key, value)) {
            throw ConfigError("unknown config key '" + key + "'");
        }
    }
    base.model.validate();
    base.data.validate();
    return base;
}

// Rebuilds a model config from its JSON form (model.json "config").
inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    // Profile first so explicit dropout entries override it.
    if (j.contains("profile")) apply_model_key(c, "profile", j.at("profile"));
    for (const auto& [key, value] : j.items()) {
        if (key == "profile") continue;
        if (!apply_model_key(c, key, value)) throw ConfigError("unknown model config key '" + key + "'");
    }
    c.validate();
    return c;
}

inline nlohmann::json to_json(const SyntheticSpec& s) {
    return {{"n_seen_classes", s.n_seen_classes},
            {"n_unseen_classes", s.n_unseen_classes},
            {"samples_per_class", s.samples_per_class},
            {"frames", s.frames},
            {"feature_dim", s.feature_dim},
            {"attributes", s.attributes},
            {"word_dim", s.word_dim},
            {"classes_per_group", s.classes_per_group},
            {"background_level", s.background_level},
            {"background_spread", s.background_spread},
            {"background_jitter", s.background_jitter},
            {"motion_amplitude", s.motion_amplitude},
            {"noise_sigma", s.noise_sigma},
            {"latent_separation", s.latent_separation},
            {"word_structure", s.word_structure},
            {"word_norm", s.word_norm},
            {"test_seen_fraction", s.test_seen_fraction}};
}

inline SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j) {
    SyntheticSpec s;
    for (const auto& [key, value] : j.items()) {
        if (!apply_data_key(s, key, value)) throw ConfigError("unknown data key '" + key + "'");
    }
    s.validate();
    return s;
}

}  // namespace mdst
