#pragma once

// Planted-weight constructors. A planted expert is wired so that (a) it wins
// the router exactly on a chosen trigger-token set, (b) a single chosen
// neuron carries the activation, and (c) its down-projection promotes a
// chosen vocabulary token. Everything else is small seeded noise confined to
// a subspace orthogonal to the planted signal directions, which is what makes
// the downstream oracles exact.

#include <algorithm>
#include <set>
#include <string>
#include <vector>

#include "moescope/common.hpp"
#include "moescope/config.hpp"
#include "moescope/weights.hpp"

namespace moescope {

struct PlantSpec {
    int layer = 0;
    int expert = 0;
    std::vector<TokenId> trigger_tokens;
    int neuron = 0;
    TokenId promoted_token = 0;
    // Off-trigger behaviour: with ambient routing the expert stays selected
    // (mid-rank) at every position, without it the expert is never routed off
    // its triggers. The top-score-on-trigger contract holds either way.
    bool ambient_routing = false;
    // Smearing spreads the signal across `smear` consecutive neurons starting
    // at `neuron` with uniform-magnitude random-sign coefficients, and
    // `signal_noise` couples those neurons to the embedding noise. Used to
    // build the polysemantic dense control.
    int smear = 1;
    double signal_noise = 0.0;
};

namespace plant_detail {

inline constexpr double kTriggerStrength = 1.0;
inline constexpr double kOnComponent = 1.0;
inline constexpr double kRouterTrigger = 50.0;
inline constexpr double kRouterCeilHigh = 1.4;
inline constexpr double kRouterCeilLow = 0.6;
inline constexpr double kRouterNoiseNorm = 0.01;
inline constexpr double kGateOpen = 4.0;
inline constexpr double kDownGain = 4.0;
inline constexpr double kExpertNoiseNorm = 0.05;

}  // namespace plant_detail

inline Weights plant_experts(const ModelConfig& cfg, const std::vector<PlantSpec>& specs,
                             std::uint64_t seed) {
    namespace pd = plant_detail;
    cfg.validate();
    if (specs.empty()) throw ConfigError("plant_experts: no specs given");

    const int n_signal = static_cast<int>(specs.size());
    const int on_dim = n_signal;
    const int noise_begin = n_signal + 1;
    const int n_noise = cfg.d_model - noise_begin;
    if (n_noise < 8)
        throw ConfigError("plant_experts: d_model too small for " +
                          std::to_string(n_signal) + " planted experts");

    std::set<TokenId> seen_triggers;
    for (std::size_t a = 0; a < specs.size(); ++a) {
        const auto& s = specs[a];
        if (s.layer < 0 || s.layer >= cfg.n_layers)
            throw ConfigError("plant_experts: layer out of range");
        const bool moe = cfg.ffn_kind[static_cast<std::size_t>(s.layer)] == FfnKind::Moe;
        if (moe) {
            if (s.expert < cfg.n_shared || s.expert >= cfg.n_experts)
                throw ConfigError("plant_experts: expert out of range or shared");
            if (s.ambient_routing && cfg.n_active < 3)
                throw ConfigError("plant_experts: ambient routing needs n_active >= 3");
        } else if (s.expert != 0) {
            throw ConfigError("plant_experts: dense layers have a single expert 0");
        }
        if (s.neuron < 0 || s.smear < 1 || s.neuron + s.smear > cfg.d_ff)
            throw ConfigError("plant_experts: neuron range [" + std::to_string(s.neuron) +
                              ", +" + std::to_string(s.smear) + ") exceeds d_ff");
        if (s.trigger_tokens.empty())
            throw ConfigError("plant_experts: empty trigger set");
        for (TokenId t : s.trigger_tokens) {
            if (t >= static_cast<TokenId>(cfg.vocab_size))
                throw ConfigError("plant_experts: trigger token out of range");
            if (!seen_triggers.insert(t).second)
                throw ConfigError("plant_experts: trigger sets must be disjoint");
        }
        if (s.promoted_token >= static_cast<TokenId>(cfg.vocab_size))
            throw ConfigError("plant_experts: promoted token out of range");
    }

    Weights w = zero_weights(cfg);
    Rng rng(derive_seed(seed, "plant"));
    const double noise_dim_std = 1.0 / std::sqrt(static_cast<double>(n_noise));

    auto fill_noise_row = [&](std::span<float> row, double norm) {
        // Gaussian entries in the noise dims only, expected row norm `norm`.
        const double entry_std = norm / std::sqrt(static_cast<double>(n_noise));
        for (int i = noise_begin; i < cfg.d_model; ++i)
            row[static_cast<std::size_t>(i)] = static_cast<float>(entry_std * rng.next_normal());
    };

    // Embeddings: always-on component, noise-dim spread, plus the trigger
    // direction for trigger tokens.
    for (int v = 0; v < cfg.vocab_size; ++v) {
        auto row = w.embedding.row(static_cast<std::size_t>(v));
        row[static_cast<std::size_t>(on_dim)] = static_cast<float>(pd::kOnComponent);
        for (int i = noise_begin; i < cfg.d_model; ++i)
            row[static_cast<std::size_t>(i)] = static_cast<float>(noise_dim_std * rng.next_normal());
    }
    for (std::size_t a = 0; a < specs.size(); ++a) {
        for (TokenId t : specs[a].trigger_tokens)
            w.embedding.row(t)[a] = static_cast<float>(pd::kTriggerStrength);
    }

    // Unembedding reads only the noise dims, so planted outputs cannot feed
    // back into any router's signal direction.
    const double wu_std = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
    for (int i = noise_begin; i < cfg.d_model; ++i) {
        auto row = w.unembedding.row(static_cast<std::size_t>(i));
        for (int v = 0; v < cfg.vocab_size; ++v)
            row[static_cast<std::size_t>(v)] = static_cast<float>(wu_std * rng.next_normal());
    }

    for (int l = 0; l < cfg.n_layers; ++l) {
        auto& lw = w.layers[static_cast<std::size_t>(l)];
        // Attention output stays zero: updates must not disturb the planted
        // signal dims. Q/K/V are irrelevant behind a zero W_O.
        for (std::size_t r = 0; r < lw.w_q.rows(); ++r) {
            fill_noise_row(lw.w_q.row(r), 0.1);
            fill_noise_row(lw.w_k.row(r), 0.1);
            fill_noise_row(lw.w_v.row(r), 0.1);
        }
        for (auto& e : lw.experts) {
            for (int j = 0; j < cfg.d_ff; ++j) {
                fill_noise_row(e.w_gate.row(static_cast<std::size_t>(j)), pd::kExpertNoiseNorm);
                fill_noise_row(e.w_up.row(static_cast<std::size_t>(j)), pd::kExpertNoiseNorm);
            }
            // w_down rows index residual dims; only noise-dim rows carry
            // weight so expert outputs stay out of the signal dims.
            const double down_std = pd::kExpertNoiseNorm / std::sqrt(static_cast<double>(n_noise));
            for (int i = noise_begin; i < cfg.d_model; ++i) {
                auto row = e.w_down.row(static_cast<std::size_t>(i));
                for (std::size_t j = 0; j < row.size(); ++j)
                    row[j] = static_cast<float>(down_std * rng.next_normal());
            }
        }
        if (!lw.router.empty()) {
            // Non-planted experts ride the always-on dim with descending
            // coefficients; planted rows are overwritten below.
            std::vector<int> routed;
            for (int e = cfg.n_shared; e < cfg.n_experts; ++e) routed.push_back(e);
            const int count = static_cast<int>(routed.size());
            for (int k = 0; k < count; ++k) {
                auto row = lw.router.row(static_cast<std::size_t>(routed[k]));
                const double c = count == 1
                                     ? pd::kRouterCeilHigh
                                     : pd::kRouterCeilHigh -
                                           (pd::kRouterCeilHigh - pd::kRouterCeilLow) * k / (count - 1);
                row[static_cast<std::size_t>(on_dim)] = static_cast<float>(c);
                fill_noise_row(row, pd::kRouterNoiseNorm);
            }
        }
    }

    for (std::size_t a = 0; a < specs.size(); ++a) {
        const auto& s = specs[a];
        auto& lw = w.layers[static_cast<std::size_t>(s.layer)];
        const bool moe = !lw.router.empty();

        if (moe) {
            auto row = lw.router.row(static_cast<std::size_t>(s.expert));
            std::fill(row.begin(), row.end(), 0.0f);
            row[a] = static_cast<float>(pd::kRouterTrigger);
            if (s.ambient_routing) {
                // Mid-rank ambient score: strictly below the two highest
                // non-planted coefficients, above the third.
                std::vector<double> cs;
                for (int e = cfg.n_shared; e < cfg.n_experts; ++e) {
                    if (e == s.expert) continue;
                    cs.push_back(lw.router.row(static_cast<std::size_t>(e))[static_cast<std::size_t>(on_dim)]);
                }
                std::sort(cs.rbegin(), cs.rend());
                if (cs.size() < 3)
                    throw ConfigError("plant_experts: ambient routing needs >= 3 non-planted experts");
                row[static_cast<std::size_t>(on_dim)] = static_cast<float>((cs[1] + cs[2]) / 2.0);
            }
        }

        auto& ew = lw.experts[static_cast<std::size_t>(moe ? s.expert : 0)];
        // The planted expert's own neurons: clean slate, then the signal
        // block. Gate rows open on the always-on dim so activation strength
        // is carried by W_up alone.
        for (int j = 0; j < cfg.d_ff; ++j) {
            auto g = ew.w_gate.row(static_cast<std::size_t>(j));
            auto u = ew.w_up.row(static_cast<std::size_t>(j));
            std::fill(g.begin(), g.end(), 0.0f);
            std::fill(u.begin(), u.end(), 0.0f);
        }
        for (std::size_t r = 0; r < ew.w_down.rows(); ++r)
            std::fill(ew.w_down.row(r).begin(), ew.w_down.row(r).end(), 0.0f);

        // Uniform-magnitude random-sign coefficients (a Householder image of
        // e1, so genuinely a rotated unit vector when smear > 1).
        std::vector<double> coeff(static_cast<std::size_t>(s.smear));
        if (s.smear == 1) {
            coeff[0] = 1.0;
        } else {
            const double mag = 1.0 / std::sqrt(static_cast<double>(s.smear));
            for (auto& c : coeff) c = (rng.next_double() < 0.5 ? -mag : mag);
        }

        Vec promoted_dir(static_cast<std::size_t>(cfg.d_model), 0.0f);
        {
            double nrm = 0.0;
            for (int i = noise_begin; i < cfg.d_model; ++i) {
                const float x = w.unembedding.at(static_cast<std::size_t>(i), s.promoted_token);
                nrm += static_cast<double>(x) * x;
            }
            nrm = std::sqrt(nrm);
            if (nrm < 1e-12) throw ConfigError("plant_experts: degenerate promoted column");
            for (int i = noise_begin; i < cfg.d_model; ++i)
                promoted_dir[static_cast<std::size_t>(i)] = static_cast<float>(
                    w.unembedding.at(static_cast<std::size_t>(i), s.promoted_token) / nrm);
        }

        for (int k = 0; k < s.smear; ++k) {
            const std::size_t j = static_cast<std::size_t>(s.neuron + k);
            ew.w_gate.row(j)[static_cast<std::size_t>(on_dim)] = static_cast<float>(pd::kGateOpen);
            ew.w_up.row(j)[a] = static_cast<float>(coeff[static_cast<std::size_t>(k)]);
            // Row norm sigma*sqrt(n_noise) makes the dot with a unit-norm
            // embedding noise vector come out with std sigma.
            if (s.signal_noise > 0.0)
                fill_noise_row(ew.w_up.row(j), s.signal_noise * std::sqrt(static_cast<double>(n_noise)));
            for (int i = 0; i < cfg.d_model; ++i)
                ew.w_down.at(static_cast<std::size_t>(i), j) = static_cast<float>(
                    pd::kDownGain * coeff[static_cast<std::size_t>(k)] *
                    promoted_dir[static_cast<std::size_t>(i)]);
        }
    }
    return w;
}

inline Weights plant_expert(const ModelConfig& cfg, const PlantSpec& spec) {
    return plant_experts(cfg, {spec}, cfg.seed);
}

}  // namespace moescope
