#pragma once

// Expert specialization: k-means over the unembedding columns, routing and
// functional cluster distributions, Jensen-Shannon divergence against the
// layer base rate, and the multinomial random-expert baseline.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "moescope/attribution.hpp"
#include "moescope/common.hpp"
#include "moescope/defaults.hpp"
#include "moescope/model.hpp"

namespace moescope {

struct ClusterMap {
    int k = 0;
    std::vector<int> assignment;  // token id -> cluster id in [0, k)
    Mat centroids;                // k x d
    double inertia = 0.0;
    std::uint64_t seed = 0;
    std::vector<int> empty_clusters;

    int cluster_of(TokenId v) const { return assignment[v]; }
};

// k-means over the unembedding columns (one point per vocabulary token),
// k-means++ seeding, Lloyd iterations capped at kKmeansMaxIter, converged
// when assignments are stable. Single-threaded for determinism.
inline ClusterMap cluster_unembedding(const Mat& unembedding, int k, std::uint64_t seed) {
    const int n = static_cast<int>(unembedding.cols());  // tokens
    const int d = static_cast<int>(unembedding.rows());
    if (k < 1 || k > n)
        throw ConfigError("cluster_unembedding: k must satisfy 1 <= k <= |V| (k=" +
                          std::to_string(k) + ", |V|=" + std::to_string(n) + ")");

    // Column-major extraction once; points are rows afterwards.
    std::vector<double> pts(static_cast<std::size_t>(n) * static_cast<std::size_t>(d));
    for (int v = 0; v < n; ++v)
        for (int i = 0; i < d; ++i)
            pts[static_cast<std::size_t>(v) * d + i] =
                unembedding.at(static_cast<std::size_t>(i), static_cast<std::size_t>(v));

    auto dist2 = [&](const double* a, const double* b) {
        double s = 0.0;
        for (int i = 0; i < d; ++i) {
            const double diff = a[i] - b[i];
            s += diff * diff;
        }
        return s;
    };

    Rng rng(derive_seed(seed, "kmeans"));
    std::vector<double> centers(static_cast<std::size_t>(k) * d);
    std::vector<double> min_d2(static_cast<std::size_t>(n), 0.0);

    // k-means++ seeding.
    {
        const auto first = static_cast<std::size_t>(rng.next_below(static_cast<std::uint64_t>(n)));
        std::copy_n(&pts[first * d], d, centers.begin());
        for (int v = 0; v < n; ++v)
            min_d2[static_cast<std::size_t>(v)] = dist2(&pts[static_cast<std::size_t>(v) * d], centers.data());
        for (int c = 1; c < k; ++c) {
            double total = 0.0;
            for (double x : min_d2) total += x;
            std::size_t pick = 0;
            if (total <= 0.0) {
                pick = static_cast<std::size_t>(rng.next_below(static_cast<std::uint64_t>(n)));
            } else {
                double r = rng.next_double() * total;
                for (std::size_t v = 0; v < static_cast<std::size_t>(n); ++v) {
                    r -= min_d2[v];
                    if (r <= 0.0) {
                        pick = v;
                        break;
                    }
                    pick = v;
                }
            }
            std::copy_n(&pts[pick * d], d, centers.begin() + static_cast<std::ptrdiff_t>(c) * d);
            for (std::size_t v = 0; v < static_cast<std::size_t>(n); ++v)
                min_d2[v] = std::min(min_d2[v], dist2(&pts[v * d], &centers[static_cast<std::size_t>(c) * d]));
        }
    }

    ClusterMap cm;
    cm.k = k;
    cm.seed = seed;
    cm.assignment.assign(static_cast<std::size_t>(n), -1);
    std::vector<int> counts(static_cast<std::size_t>(k), 0);

    for (int iter = 0; iter < defaults::kKmeansMaxIter; ++iter) {
        bool changed = false;
        for (int v = 0; v < n; ++v) {
            int best = 0;
            double best_d = dist2(&pts[static_cast<std::size_t>(v) * d], centers.data());
            for (int c = 1; c < k; ++c) {
                const double dd = dist2(&pts[static_cast<std::size_t>(v) * d],
                                        &centers[static_cast<std::size_t>(c) * d]);
                if (dd < best_d) {
                    best_d = dd;
                    best = c;
                }
            }
            if (cm.assignment[static_cast<std::size_t>(v)] != best) {
                cm.assignment[static_cast<std::size_t>(v)] = best;
                changed = true;
            }
        }
        if (!changed) break;
        std::fill(centers.begin(), centers.end(), 0.0);
        std::fill(counts.begin(), counts.end(), 0);
        for (int v = 0; v < n; ++v) {
            const int c = cm.assignment[static_cast<std::size_t>(v)];
            counts[static_cast<std::size_t>(c)]++;
            for (int i = 0; i < d; ++i)
                centers[static_cast<std::size_t>(c) * d + i] += pts[static_cast<std::size_t>(v) * d + i];
        }
        for (int c = 0; c < k; ++c) {
            if (counts[static_cast<std::size_t>(c)] == 0) continue;  // empty: keep at origin, flagged later
            for (int i = 0; i < d; ++i)
                centers[static_cast<std::size_t>(c) * d + i] /= counts[static_cast<std::size_t>(c)];
        }
    }

    std::fill(counts.begin(), counts.end(), 0);
    cm.inertia = 0.0;
    for (int v = 0; v < n; ++v) {
        const int c = cm.assignment[static_cast<std::size_t>(v)];
        counts[static_cast<std::size_t>(c)]++;
        cm.inertia += dist2(&pts[static_cast<std::size_t>(v) * d], &centers[static_cast<std::size_t>(c) * d]);
    }
    for (int c = 0; c < k; ++c)
        if (counts[static_cast<std::size_t>(c)] == 0) cm.empty_clusters.push_back(c);

    cm.centroids = Mat(static_cast<std::size_t>(k), static_cast<std::size_t>(d));
    for (int c = 0; c < k; ++c)
        for (int i = 0; i < d; ++i)
            cm.centroids.at(static_cast<std::size_t>(c), static_cast<std::size_t>(i)) =
                static_cast<float>(centers[static_cast<std::size_t>(c) * d + i]);
    return cm;
}

enum class DistributionKind { Routing, Functional };

struct ClusterDistribution {
    std::vector<double> p;        // over k clusters, sums to 1 when n_tokens > 0
    std::int64_t n_tokens = 0;    // sample count behind p
    DistributionKind kind = DistributionKind::Routing;
    bool empty_flag = false;      // expert never observed
};

namespace spec_detail {

inline ClusterDistribution distribution_from_counts(const std::vector<std::int64_t>& counts,
                                                    int k, DistributionKind kind) {
    ClusterDistribution d;
    d.kind = kind;
    d.p.assign(static_cast<std::size_t>(k), 0.0);
    std::int64_t total = 0;
    for (int c = 0; c < k; ++c) total += counts[static_cast<std::size_t>(c)];
    d.n_tokens = total;
    if (total == 0) {
        d.empty_flag = true;
        return d;
    }
    for (int c = 0; c < k; ++c)
        d.p[static_cast<std::size_t>(c)] =
            static_cast<double>(counts[static_cast<std::size_t>(c)]) / static_cast<double>(total);
    return d;
}

}  // namespace spec_detail

// Counts the tokens routed to (layer, expert) in one trace.
inline void accumulate_routing_counts(const ForwardTrace& trace, std::size_t layer, int expert,
                                      const ClusterMap& cmap, std::vector<std::int64_t>& counts) {
    for (std::size_t p = 0; p < trace.seq_len(); ++p) {
        if (trace.gate(layer, p, expert) > 0.0f)
            counts[static_cast<std::size_t>(cmap.cluster_of(trace.tokens[p]))]++;
    }
}

// Counts the top-n_top Logit Lens tokens of g_i * E_i(x) at each routed
// position of (layer, expert) in one trace.
inline void accumulate_functional_counts(const Model& model, const ForwardTrace& trace,
                                         std::size_t layer, int expert, int n_top,
                                         const ClusterMap& cmap,
                                         std::vector<std::int64_t>& counts) {
    const std::size_t d = static_cast<std::size_t>(model.config().d_model);
    for (std::size_t p = 0; p < trace.seq_len(); ++p) {
        const ExpertRecord* er = trace.expert_record(layer, p, expert);
        if (!er) continue;
        Vec update(d);
        for (std::size_t i = 0; i < d; ++i) update[i] = er->gate * er->out[i];
        const LensResult lens = logit_lens(update, model.unembedding(), n_top);
        for (const auto& [tok, logit] : lens.top)
            counts[static_cast<std::size_t>(cmap.cluster_of(tok))]++;
    }
}

// f_i over tokens with g_i > 0, pushed through the cluster assignment.
inline ClusterDistribution routing_distribution(const std::vector<ForwardTrace>& traces,
                                                std::size_t layer, int expert,
                                                const ClusterMap& cmap) {
    std::vector<std::int64_t> counts(static_cast<std::size_t>(cmap.k), 0);
    for (const auto& t : traces) accumulate_routing_counts(t, layer, expert, cmap, counts);
    return spec_detail::distribution_from_counts(counts, cmap.k, DistributionKind::Routing);
}

inline ClusterDistribution functional_distribution(const Model& model,
                                                   const std::vector<ForwardTrace>& traces,
                                                   std::size_t layer, int expert,
                                                   const ClusterMap& cmap,
                                                   int n_top = defaults::kFunctionalTopN) {
    std::vector<std::int64_t> counts(static_cast<std::size_t>(cmap.k), 0);
    for (const auto& t : traces)
        accumulate_functional_counts(model, t, layer, expert, n_top, cmap, counts);
    return spec_detail::distribution_from_counts(counts, cmap.k, DistributionKind::Functional);
}

// Jensen-Shannon divergence, log base 2, 0*log0 = 0; in [0, 1].
inline double jsd(const std::vector<double>& p, const std::vector<double>& q) {
    if (p.size() != q.size()) throw DataError("jsd: dimension mismatch");
    const double inv_log2 = 1.0 / std::log(2.0);
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double m = 0.5 * (p[i] + q[i]);
        if (p[i] > 0.0) acc += 0.5 * p[i] * std::log(p[i] / m) * inv_log2;
        if (q[i] > 0.0) acc += 0.5 * q[i] * std::log(q[i] / m) * inv_log2;
    }
    return acc;
}

struct BaselineEstimate {
    double mean = 0.0;
    double stderr_ = 0.0;
    int mc_samples = 0;
    bool zero_sample_flag = false;  // n = 0: defined as 0
};

// Monte Carlo estimate of E[JSD(P_hat || q)] with counts ~ Multinomial(n, q).
// Alias-method category sampling keeps draws exact and platform-stable.
inline BaselineEstimate random_baseline(const std::vector<double>& q, std::int64_t n,
                                        int mc_samples, std::uint64_t seed) {
    if (mc_samples <= 0) throw ConfigError("random_baseline: mc_samples must be positive");
    BaselineEstimate est;
    est.mc_samples = mc_samples;
    if (n == 0) {
        est.zero_sample_flag = true;
        return est;
    }
    const std::size_t k = q.size();

    // Alias table (Vose).
    std::vector<double> prob(k);
    std::vector<std::size_t> alias(k, 0);
    {
        std::vector<double> scaled(k);
        for (std::size_t i = 0; i < k; ++i) scaled[i] = q[i] * static_cast<double>(k);
        std::vector<std::size_t> small, large;
        for (std::size_t i = 0; i < k; ++i) (scaled[i] < 1.0 ? small : large).push_back(i);
        while (!small.empty() && !large.empty()) {
            const std::size_t s = small.back();
            small.pop_back();
            const std::size_t l = large.back();
            large.pop_back();
            prob[s] = scaled[s];
            alias[s] = l;
            scaled[l] = scaled[l] + scaled[s] - 1.0;
            (scaled[l] < 1.0 ? small : large).push_back(l);
        }
        for (std::size_t i : large) prob[i] = 1.0;
        for (std::size_t i : small) prob[i] = 1.0;
    }

    Rng rng(derive_seed(seed, "baseline"));
    std::vector<double> values(static_cast<std::size_t>(mc_samples));
    std::vector<std::int64_t> counts(k);
    std::vector<double> phat(k);
    for (int m = 0; m < mc_samples; ++m) {
        std::fill(counts.begin(), counts.end(), 0);
        for (std::int64_t i = 0; i < n; ++i) {
            const auto cell = static_cast<std::size_t>(rng.next_below(k));
            const std::size_t c = rng.next_double() < prob[cell] ? cell : alias[cell];
            counts[c]++;
        }
        for (std::size_t c = 0; c < k; ++c)
            phat[c] = static_cast<double>(counts[c]) / static_cast<double>(n);
        values[static_cast<std::size_t>(m)] = jsd(phat, q);
    }
    double mean = 0.0;
    for (double v : values) mean += v;
    mean /= static_cast<double>(mc_samples);
    double var = 0.0;
    for (double v : values) var += (v - mean) * (v - mean);
    est.mean = mean;
    est.stderr_ = mc_samples > 1 ? std::sqrt(var / static_cast<double>(mc_samples - 1)) /
                                       std::sqrt(static_cast<double>(mc_samples))
                                 : 0.0;
    return est;
}

struct ExpertSpecialization {
    int expert = -1;
    double s_raw = 0.0;       // JSD(P_i || Q_L)
    double s_baseline = 0.0;  // expected JSD of a same-size random expert
    double s_adjusted = 0.0;  // raw minus baseline, may be negative
    double baseline_stderr = 0.0;
    std::int64_t n_tokens = 0;
    bool scored = false;  // false for experts with no observations
};

struct SpecializationReport {
    int layer = 0;
    int k = 0;
    DistributionKind kind = DistributionKind::Routing;
    int n_top = 0;  // functional only; stamped because scores depend on it
    int mc_samples = 0;
    bool weighted_base_rate = false;
    std::vector<double> base_rate;  // Q_L
    std::vector<ExpertSpecialization> experts;
    std::vector<ClusterDistribution> distributions;
    bool empty_flag = false;  // no routed tokens anywhere in the layer
};

struct SpecializationParams {
    int mc_samples = defaults::kBaselineMcSamples;
    std::uint64_t seed = 0;
    int n_top = defaults::kFunctionalTopN;
    // Appendix-style unweighted mean over experts by default; token-weighted
    // base rate available for sensitivity analysis.
    bool weighted_base_rate = false;
    int n_threads = 1;
};

// Builds the per-expert scores from precomputed distributions. Experts with
// no observations are kept but flagged unscored and excluded from Q_L.
inline SpecializationReport specialization_report(
    const std::vector<ClusterDistribution>& dists, int layer, const ClusterMap& cmap,
    DistributionKind kind, const SpecializationParams& params) {
    SpecializationReport rep;
    rep.layer = layer;
    rep.k = cmap.k;
    rep.kind = kind;
    rep.n_top = kind == DistributionKind::Functional ? params.n_top : 0;
    rep.mc_samples = params.mc_samples;
    rep.weighted_base_rate = params.weighted_base_rate;
    rep.distributions = dists;

    std::vector<std::size_t> live;
    for (std::size_t e = 0; e < dists.size(); ++e)
        if (!dists[e].empty_flag) live.push_back(e);
    if (live.empty()) {
        rep.empty_flag = true;
        rep.experts.resize(dists.size());
        for (std::size_t e = 0; e < dists.size(); ++e)
            rep.experts[e].expert = static_cast<int>(e);
        return rep;
    }

    rep.base_rate.assign(static_cast<std::size_t>(cmap.k), 0.0);
    if (params.weighted_base_rate) {
        double total = 0.0;
        for (std::size_t e : live) total += static_cast<double>(dists[e].n_tokens);
        for (std::size_t e : live)
            for (std::size_t c = 0; c < rep.base_rate.size(); ++c)
                rep.base_rate[c] += dists[e].p[c] * static_cast<double>(dists[e].n_tokens) / total;
    } else {
        for (std::size_t e : live)
            for (std::size_t c = 0; c < rep.base_rate.size(); ++c)
                rep.base_rate[c] += dists[e].p[c] / static_cast<double>(live.size());
    }

    rep.experts.resize(dists.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
        for (;;) {
            const std::size_t e = next.fetch_add(1);
            if (e >= dists.size()) return;
            auto& ex = rep.experts[e];
            ex.expert = static_cast<int>(e);
            if (dists[e].empty_flag) continue;
            ex.scored = true;
            ex.n_tokens = dists[e].n_tokens;
            ex.s_raw = jsd(dists[e].p, rep.base_rate);
            const auto base = random_baseline(rep.base_rate, dists[e].n_tokens, params.mc_samples,
                                              derive_seed(params.seed, e));
            ex.s_baseline = base.mean;
            ex.baseline_stderr = base.stderr_;
            ex.s_adjusted = ex.s_raw - ex.s_baseline;
        }
    };
    std::vector<std::thread> pool;
    for (int t = 0; t < std::max(1, params.n_threads); ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    return rep;
}

inline void save_cluster_map(const ClusterMap& cm, const std::string& json_path,
                             const std::string& centroid_path) {
    // Centroid tensor in the weight-container format.
    std::string data;
    detail::append_f32_le(data, cm.centroids.data(), cm.centroids.size());
    nlohmann::json header;
    header["centroids"] = {{"dtype", "f32"},
                           {"shape", nlohmann::json::array({cm.centroids.rows(), cm.centroids.cols()})},
                           {"offset", 0}};
    header["__meta__"] = {{"checksum", hex64(fnv1a64(data.data(), data.size()))},
                          {"format", "moescope-weights-v1"}};
    const std::string header_str = header.dump();
    std::string blob;
    detail::put_u64_le(blob, header_str.size());
    blob += header_str;
    blob += data;
    std::ofstream bin(centroid_path, std::ios::binary);
    if (!bin) throw IoError("cannot write centroids: " + centroid_path);
    bin.write(blob.data(), static_cast<std::streamsize>(blob.size()));

    nlohmann::json j{{"k", cm.k},
                     {"seed", cm.seed},
                     {"inertia", cm.inertia},
                     {"assignment", cm.assignment},
                     {"empty_clusters", cm.empty_clusters},
                     {"centroids_ref", centroid_path}};
    std::ofstream out(json_path);
    if (!out) throw IoError("cannot write cluster map: " + json_path);
    out << j.dump() << "\n";
}

inline void write_specialization_csv(const std::vector<SpecializationReport>& reports,
                                     const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write specialization csv: " + path);
    out << "expert,layer,k,kind,n_top,s_raw,s_baseline,s_adjusted,n_tokens,scored\n";
    for (const auto& rep : reports) {
        for (const auto& ex : rep.experts) {
            out << ex.expert << "," << rep.layer << "," << rep.k << ","
                << (rep.kind == DistributionKind::Routing ? "routing" : "functional") << ","
                << rep.n_top << "," << ex.s_raw << "," << ex.s_baseline << "," << ex.s_adjusted
                << "," << ex.n_tokens << "," << (ex.scored ? 1 : 0) << "\n";
        }
    }
}

// Plot-ready per-layer series: mean adjusted score per (layer, k, kind).
inline nlohmann::json specialization_series_json(const std::vector<SpecializationReport>& reports) {
    nlohmann::json series = nlohmann::json::array();
    for (const auto& rep : reports) {
        double mean = 0.0;
        int n = 0;
        for (const auto& ex : rep.experts) {
            if (!ex.scored) continue;
            mean += ex.s_adjusted;
            ++n;
        }
        if (n > 0) mean /= n;
        series.push_back({{"layer", rep.layer},
                          {"k", rep.k},
                          {"kind", rep.kind == DistributionKind::Routing ? "routing" : "functional"},
                          {"n_top", rep.n_top},
                          {"mean_adjusted", mean},
                          {"n_scored", n}});
    }
    return {{"series", series}};
}

}  // namespace moescope
