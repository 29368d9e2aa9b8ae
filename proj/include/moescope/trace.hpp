#pragma once

// Per-token activation records captured during a forward pass. Traces own
// their storage; a model never mutates a trace after returning it.

#include <cstdint>
#include <span>
#include <vector>

#include "moescope/common.hpp"
#include "moescope/tensor.hpp"
#include "moescope/tokenizer.hpp"

namespace moescope {

struct ExpertRecord {
    int expert = -1;
    float score = 0.0f;
    float gate = 0.0f;
    Vec h;    // d_ff intermediate activations
    Vec out;  // d expert output E_i(x)
};

struct SublayerRecord {
    Vec residual_in;   // r^(l) entering this layer at this position
    Vec attn_update;   // delta r from attention
    Vec ffn_update;    // delta r from the FFN/MoE sublayer
    Vec scores;        // router scores, one per expert (dense: single 0)
    Vec gates;         // gates, 0 for unselected experts
    std::vector<ExpertRecord> selected;  // records for experts with gate > 0
};

struct ForwardTrace {
    std::vector<TokenId> tokens;
    std::vector<std::vector<SublayerRecord>> layers;  // [layer][position]
    std::vector<Vec> final_residual;                  // per position
    Mat logits;                                       // positions x |V|

    std::size_t seq_len() const { return tokens.size(); }
    std::size_t n_layers() const { return layers.size(); }

    const SublayerRecord& at(std::size_t layer, std::size_t pos) const {
        return layers[layer][pos];
    }

    float gate(std::size_t layer, std::size_t pos, int expert) const {
        return layers[layer][pos].gates[static_cast<std::size_t>(expert)];
    }

    // Record for a routed expert, or nullptr when the gate is zero.
    const ExpertRecord* expert_record(std::size_t layer, std::size_t pos, int expert) const {
        for (const auto& r : layers[layer][pos].selected)
            if (r.expert == expert) return &r;
        return nullptr;
    }
};

}  // namespace moescope
