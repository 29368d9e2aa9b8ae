#pragma once

// Architecture hyperparameters for the toy MoE transformer, with JSON
// round-trip and validation.

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "moescope/common.hpp"

namespace moescope {

enum class FfnKind { Dense, Moe };
enum class NormKind { Rms, LayerNorm };

inline std::string to_string(FfnKind k) { return k == FfnKind::Dense ? "dense" : "moe"; }
inline std::string to_string(NormKind k) { return k == NormKind::Rms ? "rms" : "layernorm"; }

inline FfnKind ffn_kind_from_string(const std::string& s) {
    if (s == "dense") return FfnKind::Dense;
    if (s == "moe") return FfnKind::Moe;
    throw ConfigError("unknown ffn_kind: " + s);
}

inline NormKind norm_kind_from_string(const std::string& s) {
    if (s == "rms") return NormKind::Rms;
    if (s == "layernorm") return NormKind::LayerNorm;
    throw ConfigError("unknown norm_kind: " + s);
}

struct ModelConfig {
    int d_model = 0;
    int n_layers = 0;
    int n_heads = 0;
    int d_ff = 0;
    int vocab_size = 0;
    int n_experts = 1;
    int n_active = 1;
    int n_shared = 0;
    std::vector<FfnKind> ffn_kind;  // one entry per layer
    NormKind norm_kind = NormKind::Rms;
    std::uint64_t seed = 0;

    double routing_sparsity() const {
        return static_cast<double>(n_active) / static_cast<double>(n_experts);
    }

    bool has_moe_layer() const {
        for (FfnKind k : ffn_kind)
            if (k == FfnKind::Moe) return true;
        return false;
    }

    void validate() const {
        if (d_model <= 0) throw ConfigError("d_model must be positive");
        if (n_layers <= 0) throw ConfigError("n_layers must be positive");
        if (n_heads <= 0 || d_model % n_heads != 0)
            throw ConfigError("n_heads must be positive and divide d_model");
        if (d_ff <= 0) throw ConfigError("d_ff must be positive");
        if (vocab_size <= 0) throw ConfigError("vocab_size must be positive");
        if (n_experts < 1) throw ConfigError("n_experts must be >= 1");
        if (n_active < 1 || n_active > n_experts)
            throw ConfigError("n_active must satisfy 1 <= n_active <= n_experts");
        if (n_shared < 0) throw ConfigError("n_shared must be >= 0");
        if (n_active + n_shared > n_experts)
            throw ConfigError("n_active + n_shared must not exceed n_experts");
        if (static_cast<int>(ffn_kind.size()) != n_layers)
            throw ConfigError("ffn_kind must list one entry per layer");
        if (!has_moe_layer() && (n_experts != 1 || n_active != 1))
            throw ConfigError("dense-only models require n_experts = 1 and n_active = 1");
    }
};

inline nlohmann::json to_json(const ModelConfig& c) {
    nlohmann::json kinds = nlohmann::json::array();
    for (FfnKind k : c.ffn_kind) kinds.push_back(to_string(k));
    return nlohmann::json{
        {"d_model", c.d_model},       {"n_layers", c.n_layers},
        {"n_heads", c.n_heads},       {"d_ff", c.d_ff},
        {"vocab_size", c.vocab_size}, {"n_experts", c.n_experts},
        {"n_active", c.n_active},     {"n_shared", c.n_shared},
        {"ffn_kind", kinds},          {"norm_kind", to_string(c.norm_kind)},
        {"seed", c.seed},
    };
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    try {
        c.d_model = j.at("d_model").get<int>();
        c.n_layers = j.at("n_layers").get<int>();
        c.n_heads = j.at("n_heads").get<int>();
        c.d_ff = j.at("d_ff").get<int>();
        c.vocab_size = j.at("vocab_size").get<int>();
        c.n_experts = j.at("n_experts").get<int>();
        c.n_active = j.at("n_active").get<int>();
        c.n_shared = j.at("n_shared").get<int>();
        for (const auto& k : j.at("ffn_kind"))
            c.ffn_kind.push_back(ffn_kind_from_string(k.get<std::string>()));
        c.norm_kind = norm_kind_from_string(j.at("norm_kind").get<std::string>());
        c.seed = j.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad model config: ") + e.what());
    }
    c.validate();
    return c;
}

inline void save_config(const ModelConfig& c, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write config: " + path);
    out << to_json(c).dump(2) << "\n";
}

inline ModelConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config parse error: ") + e.what());
    }
    return config_from_json(j);
}

}  // namespace moescope
