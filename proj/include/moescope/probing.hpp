#pragma once

// k-sparse probing: neuron selection by absolute mean-activation difference,
// L2-regularized logistic probes on the selected dimensions (L-BFGS, full
// batch), held-out F1, and the (concept x site x k) sweep with best-site
// selection.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "moescope/common.hpp"
#include "moescope/dataset.hpp"
#include "moescope/defaults.hpp"
#include "moescope/model.hpp"

namespace moescope {

struct NeuronRanking {
    std::vector<double> a;    // a_j = |E[h_j|y=1] - E[h_j|y=0]|
    std::vector<int> order;   // descending by a, ties to the lowest index

    std::vector<int> top_k(int k) const {
        if (k < 1 || k > static_cast<int>(order.size()))
            throw ConfigError("top_k: k out of range");
        return {order.begin(), order.begin() + k};
    }
};

// activations: n rows of d_ff values, row-major.
inline NeuronRanking rank_neurons(const std::vector<std::vector<double>>& activations,
                                  const std::vector<int>& labels) {
    if (activations.size() != labels.size() || activations.empty())
        throw DataError("rank_neurons: shape mismatch or empty input");
    const std::size_t d = activations[0].size();
    std::vector<double> mean1(d, 0.0), mean0(d, 0.0);
    std::size_t n1 = 0, n0 = 0;
    for (std::size_t i = 0; i < activations.size(); ++i) {
        auto& m = labels[i] ? mean1 : mean0;
        (labels[i] ? n1 : n0)++;
        for (std::size_t j = 0; j < d; ++j) m[j] += activations[i][j];
    }
    if (n1 == 0 || n0 == 0) throw DataError("rank_neurons: both classes must be present");
    NeuronRanking r;
    r.a.resize(d);
    for (std::size_t j = 0; j < d; ++j)
        r.a[j] = std::abs(mean1[j] / static_cast<double>(n1) - mean0[j] / static_cast<double>(n0));
    r.order.resize(d);
    for (std::size_t j = 0; j < d; ++j) r.order[j] = static_cast<int>(j);
    std::stable_sort(r.order.begin(), r.order.end(),
                     [&](int x, int y) { return r.a[static_cast<std::size_t>(x)] > r.a[static_cast<std::size_t>(y)]; });
    return r;
}

struct ProbeSite {
    int layer = 0;
    int expert = -1;  // -1 = dense FFN site

    bool is_dense() const { return expert < 0; }
    std::string str() const {
        return "L" + std::to_string(layer) + (is_dense() ? ":dense" : ":E" + std::to_string(expert));
    }
    friend bool operator<(const ProbeSite& a, const ProbeSite& b) {
        return std::pair(a.layer, a.expert) < std::pair(b.layer, b.expert);
    }
    friend bool operator==(const ProbeSite& a, const ProbeSite& b) {
        return a.layer == b.layer && a.expert == b.expert;
    }
};

struct ProbeResult {
    std::string concept_name;
    ProbeSite site;
    int k = 0;
    std::vector<int> selected;
    std::vector<double> weights;
    double bias = 0.0;
    double lambda = 0.0;
    double train_loss = 0.0;
    double test_f1 = 0.0;
    int n_train = 0;
    int n_test = 0;
    bool converged = false;
    bool skipped = false;
    std::string skip_reason;
};

namespace probe_detail {

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// log(1 + exp(z)) without overflow.
inline double log1pexp(double z) {
    if (z > 35.0) return z;
    if (z < -35.0) return std::exp(z);
    return std::log1p(std::exp(z));
}

struct Objective {
    const std::vector<std::vector<double>>& x;  // n rows of k features
    const std::vector<int>& y;
    double lambda;

    // theta = [w_0..w_{k-1}, b]; returns loss, fills grad.
    double eval(const std::vector<double>& theta, std::vector<double>& grad) const {
        const std::size_t n = x.size();
        const std::size_t k = theta.size() - 1;
        std::fill(grad.begin(), grad.end(), 0.0);
        double loss = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double z = theta[k];
            for (std::size_t j = 0; j < k; ++j) z += theta[j] * x[i][j];
            loss += y[i] ? log1pexp(-z) : log1pexp(z);
            const double r = sigmoid(z) - static_cast<double>(y[i]);
            for (std::size_t j = 0; j < k; ++j) grad[j] += r * x[i][j];
            grad[k] += r;
        }
        const double inv_n = 1.0 / static_cast<double>(n);
        loss *= inv_n;
        for (double& g : grad) g *= inv_n;
        for (std::size_t j = 0; j < k; ++j) {
            loss += 0.5 * lambda * theta[j] * theta[j];
            grad[j] += lambda * theta[j];
        }
        return loss;
    }
};

inline double max_abs(const std::vector<double>& v) {
    double m = 0.0;
    for (double x : v) m = std::max(m, std::abs(x));
    return m;
}

// Full-batch L-BFGS with Armijo backtracking. Deterministic; the convex
// objective has a unique optimum, so any convergent run lands on it.
inline bool lbfgs_minimize(const Objective& f, std::vector<double>& theta, double tol,
                           int max_iter, double& final_loss) {
    const std::size_t dim = theta.size();
    const std::size_t history = 10;
    std::vector<std::vector<double>> s_hist, y_hist;
    std::vector<double> rho_hist;
    std::vector<double> grad(dim), new_grad(dim);
    double loss = f.eval(theta, grad);
    for (int iter = 0; iter < max_iter; ++iter) {
        if (max_abs(grad) < tol) {
            final_loss = loss;
            return true;
        }
        // Two-loop recursion.
        std::vector<double> q = grad;
        std::vector<double> alpha(s_hist.size());
        for (std::size_t h = s_hist.size(); h-- > 0;) {
            double sq = 0.0;
            for (std::size_t i = 0; i < dim; ++i) sq += s_hist[h][i] * q[i];
            alpha[h] = rho_hist[h] * sq;
            for (std::size_t i = 0; i < dim; ++i) q[i] -= alpha[h] * y_hist[h][i];
        }
        if (!s_hist.empty()) {
            double sy = 0.0, yy = 0.0;
            const auto& s = s_hist.back();
            const auto& yv = y_hist.back();
            for (std::size_t i = 0; i < dim; ++i) {
                sy += s[i] * yv[i];
                yy += yv[i] * yv[i];
            }
            const double gamma = sy / std::max(yy, 1e-300);
            for (double& v : q) v *= gamma;
        }
        for (std::size_t h = 0; h < s_hist.size(); ++h) {
            double yq = 0.0;
            for (std::size_t i = 0; i < dim; ++i) yq += y_hist[h][i] * q[i];
            const double beta = rho_hist[h] * yq;
            for (std::size_t i = 0; i < dim; ++i) q[i] += s_hist[h][i] * (alpha[h] - beta);
        }
        // q is the ascent-correction direction; step along -q.
        double dir_dot_grad = 0.0;
        for (std::size_t i = 0; i < dim; ++i) dir_dot_grad += q[i] * grad[i];
        if (dir_dot_grad <= 0.0) {
            // Fall back to steepest descent if curvature info went bad.
            q = grad;
            dir_dot_grad = 0.0;
            for (double g : grad) dir_dot_grad += g * g;
        }
        double step = 1.0;
        std::vector<double> trial(dim);
        double new_loss = loss;
        bool moved = false;
        for (int ls = 0; ls < 60; ++ls) {
            for (std::size_t i = 0; i < dim; ++i) trial[i] = theta[i] - step * q[i];
            new_loss = f.eval(trial, new_grad);
            if (new_loss <= loss - 1e-4 * step * dir_dot_grad) {
                moved = true;
                break;
            }
            step *= 0.5;
        }
        if (!moved) {
            final_loss = loss;
            return max_abs(grad) < tol;
        }
        std::vector<double> s(dim), yv(dim);
        double sy = 0.0;
        for (std::size_t i = 0; i < dim; ++i) {
            s[i] = trial[i] - theta[i];
            yv[i] = new_grad[i] - grad[i];
            sy += s[i] * yv[i];
        }
        if (sy > 1e-12) {
            s_hist.push_back(std::move(s));
            y_hist.push_back(std::move(yv));
            rho_hist.push_back(1.0 / sy);
            if (s_hist.size() > history) {
                s_hist.erase(s_hist.begin());
                y_hist.erase(y_hist.begin());
                rho_hist.erase(rho_hist.begin());
            }
        }
        theta = trial;
        grad = new_grad;
        loss = new_loss;
    }
    final_loss = loss;
    return max_abs(grad) < tol;
}

}  // namespace probe_detail

// Fits an L2 logistic probe on pre-selected feature columns. The bias is
// unregularized; convergence is grad max-norm < tol.
inline ProbeResult fit_probe(const std::vector<std::vector<double>>& x_train,
                             const std::vector<int>& y_train, double lambda,
                             int max_iter = defaults::kProbeMaxIter,
                             double tol = defaults::kProbeTol) {
    if (x_train.empty() || x_train.size() != y_train.size())
        throw DataError("fit_probe: empty or mismatched training data");
    int n1 = 0, n0 = 0;
    for (int y : y_train) (y ? n1 : n0)++;
    if (n1 < 2 || n0 < 2) throw DataError("fit_probe: need at least 2 samples per class");
    for (const auto& row : x_train)
        for (double v : row)
            if (!std::isfinite(v)) throw DataError("fit_probe: non-finite activation");
    const std::size_t k = x_train[0].size();
    if (k < 1) throw ConfigError("fit_probe: k must be >= 1");

    probe_detail::Objective obj{x_train, y_train, lambda};
    std::vector<double> theta(k + 1, 0.0);
    double final_loss = 0.0;
    const bool converged =
        probe_detail::lbfgs_minimize(obj, theta, tol, max_iter, final_loss);

    ProbeResult r;
    r.k = static_cast<int>(k);
    r.weights.assign(theta.begin(), theta.begin() + static_cast<std::ptrdiff_t>(k));
    r.bias = theta[k];
    r.lambda = lambda;
    r.train_loss = final_loss;
    r.n_train = static_cast<int>(x_train.size());
    r.converged = converged;
    return r;
}

inline int predict_label(const ProbeResult& probe, const std::vector<double>& x) {
    double z = probe.bias;
    for (std::size_t j = 0; j < probe.weights.size(); ++j) z += probe.weights[j] * x[j];
    return probe_detail::sigmoid(z) >= defaults::kDecisionThreshold ? 1 : 0;
}

// F1 of class 1 at threshold 0.5; 0 when precision + recall is 0.
inline double evaluate_f1(const ProbeResult& probe, const std::vector<std::vector<double>>& x_test,
                          const std::vector<int>& y_test) {
    if (x_test.empty() || x_test.size() != y_test.size())
        throw DataError("evaluate_f1: empty or mismatched test set");
    long tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < x_test.size(); ++i) {
        const int pred = predict_label(probe, x_test[i]);
        if (pred == 1 && y_test[i] == 1) ++tp;
        else if (pred == 1 && y_test[i] == 0) ++fp;
        else if (pred == 0 && y_test[i] == 1) ++fn;
    }
    const long denom = 2 * tp + fp + fn;
    return denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
}

// Per-sample activations for every probe site, built from one forward pass
// per document. Immutable once built; safe to share across sweep workers.
class ActivationCache {
public:
    ActivationCache(const Model& model, const TokenizedCorpus& corpus,
                    const std::vector<Sample>& samples, int n_threads = 1) {
        const auto& cfg = model.config();
        n_layers_ = cfg.n_layers;
        n_experts_ = cfg.n_experts;
        gates_.resize(samples.size());
        h_.resize(samples.size());

        std::map<int, std::vector<std::size_t>> by_doc;
        for (std::size_t i = 0; i < samples.size(); ++i) by_doc[samples[i].doc].push_back(i);
        std::vector<std::pair<int, std::vector<std::size_t>>> docs(by_doc.begin(), by_doc.end());

        std::atomic<std::size_t> next{0};
        auto worker = [&]() {
            for (;;) {
                const std::size_t d = next.fetch_add(1);
                if (d >= docs.size()) return;
                const auto& [doc_id, idxs] = docs[d];
                const auto trace = model.forward(corpus.documents[static_cast<std::size_t>(doc_id)].tokens);
                for (std::size_t i : idxs) {
                    const auto pos = static_cast<std::size_t>(samples[i].pos);
                    gates_[i].resize(static_cast<std::size_t>(n_layers_));
                    h_[i].resize(static_cast<std::size_t>(n_layers_));
                    for (int l = 0; l < n_layers_; ++l) {
                        const auto& rec = trace.at(static_cast<std::size_t>(l), pos);
                        gates_[i][static_cast<std::size_t>(l)] = rec.gates;
                        for (const auto& er : rec.selected)
                            h_[i][static_cast<std::size_t>(l)].emplace_back(er.expert, er.h);
                    }
                }
            }
        };
        std::vector<std::thread> pool;
        const int threads = std::max(1, n_threads);
        for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }

    int n_layers() const { return n_layers_; }

    // Dense sites are always routed with gate 1.
    float gate(std::size_t sample, const ProbeSite& site) const {
        if (site.is_dense()) return 1.0f;
        return gates_[sample][static_cast<std::size_t>(site.layer)]
                     [static_cast<std::size_t>(site.expert)];
    }

    const Vec* h(std::size_t sample, const ProbeSite& site) const {
        const int expert = site.is_dense() ? 0 : site.expert;
        for (const auto& [e, vec] : h_[sample][static_cast<std::size_t>(site.layer)])
            if (e == expert) return &vec;
        return nullptr;
    }

private:
    int n_layers_ = 0;
    int n_experts_ = 0;
    std::vector<std::vector<Vec>> gates_;  // [sample][layer] -> per-expert gates
    std::vector<std::vector<std::vector<std::pair<int, Vec>>>> h_;  // selected experts only
};

struct SweepOptions {
    int n_samples = defaults::kProbeSampleCount;
    std::vector<int> k_values{defaults::kSweepK.begin(), defaults::kSweepK.end()};
    std::optional<double> lambda;  // default 1/n_train
    std::uint64_t seed = 0;
    int n_threads = 1;
};

struct SweepResult {
    std::vector<ProbeResult> grid;  // every (concept, site, k), skips included
    // Best site per (concept, k): max test F1, ties to lowest (layer, expert).
    std::map<std::pair<std::string, int>, ProbeResult> best;
};

inline std::vector<ProbeSite> all_sites(const ModelConfig& cfg) {
    std::vector<ProbeSite> sites;
    for (int l = 0; l < cfg.n_layers; ++l) {
        if (cfg.ffn_kind[static_cast<std::size_t>(l)] == FfnKind::Moe) {
            for (int e = 0; e < cfg.n_experts; ++e) sites.push_back({l, e});
        } else {
            sites.push_back({l, -1});
        }
    }
    return sites;
}

inline void validate_sites(const ModelConfig& cfg, const std::vector<ProbeSite>& sites) {
    for (const auto& s : sites) {
        if (s.layer < 0 || s.layer >= cfg.n_layers)
            throw ConfigError("probe site layer out of range: " + s.str());
        const bool moe = cfg.ffn_kind[static_cast<std::size_t>(s.layer)] == FfnKind::Moe;
        if (moe && s.is_dense())
            throw ConfigError("site kind mismatch: dense site on MoE layer " + s.str());
        if (!moe && !s.is_dense())
            throw ConfigError("site kind mismatch: expert site on dense layer " + s.str());
        if (!s.is_dense() && s.expert >= cfg.n_experts)
            throw ConfigError("probe site expert out of range: " + s.str());
    }
}

inline std::vector<ProbeResult> sweep_one_site(const ConceptDataset& ds,
                                               const ActivationCache& cache,
                                               const std::string& concept_name,
                                               const ProbeSite& site, const SweepOptions& opt) {
    std::vector<ProbeResult> out;
    auto gate_fn = [&](std::size_t idx, const Sample&) { return cache.gate(idx, site); };
    const ConceptDataset fds = filter_routed(ds, gate_fn, opt.seed);

    auto skipped_result = [&](int k, const std::string& reason) {
        ProbeResult r;
        r.concept_name = concept_name;
        r.site = site;
        r.k = k;
        r.skipped = true;
        r.skip_reason = reason;
        return r;
    };
    if (fds.skipped) {
        for (int k : opt.k_values) out.push_back(skipped_result(k, fds.skip_reason));
        return out;
    }

    // Map filtered samples back to cache rows via their position in ds.
    std::vector<std::size_t> cache_row(fds.samples.size());
    {
        std::size_t w = 0;
        for (std::size_t i = 0; i < ds.samples.size(); ++i) {
            const auto& s = ds.samples[i];
            if (w < fds.samples.size() && fds.samples[w].doc == s.doc &&
                fds.samples[w].pos == s.pos && fds.samples[w].label == s.label) {
                cache_row[w++] = i;
            }
        }
    }

    auto full_h = [&](std::size_t filtered_idx) -> const Vec* {
        return cache.h(cache_row[filtered_idx], site);
    };

    std::vector<std::vector<double>> x_train, x_test;
    std::vector<int> y_train, y_test;
    for (std::size_t i : fds.train_idx) {
        const Vec* h = full_h(i);
        if (!h) throw DataError("activation missing for routed sample");
        x_train.emplace_back(h->begin(), h->end());
        y_train.push_back(fds.samples[i].label);
    }
    for (std::size_t i : fds.test_idx) {
        const Vec* h = full_h(i);
        if (!h) throw DataError("activation missing for routed sample");
        x_test.emplace_back(h->begin(), h->end());
        y_test.push_back(fds.samples[i].label);
    }

    int train1 = 0, train0 = 0;
    for (int y : y_train) (y ? train1 : train0)++;
    int test1 = 0;
    for (int y : y_test) test1 += y;
    if (train1 < 2 || train0 < 2 || y_test.empty() || test1 == 0 ||
        test1 == static_cast<int>(y_test.size())) {
        for (int k : opt.k_values)
            out.push_back(skipped_result(k, "degenerate split after routing filter"));
        return out;
    }

    const NeuronRanking ranking = rank_neurons(x_train, y_train);
    const double lambda = opt.lambda.value_or(1.0 / static_cast<double>(x_train.size()));
    const int d_ff = static_cast<int>(ranking.order.size());

    for (int k : opt.k_values) {
        const int kk = std::min(k, d_ff);
        const auto sel = ranking.top_k(kk);
        auto restrict_rows = [&](const std::vector<std::vector<double>>& rows) {
            std::vector<std::vector<double>> r(rows.size(), std::vector<double>(sel.size()));
            for (std::size_t i = 0; i < rows.size(); ++i)
                for (std::size_t j = 0; j < sel.size(); ++j)
                    r[i][j] = rows[i][static_cast<std::size_t>(sel[j])];
            return r;
        };
        ProbeResult r = fit_probe(restrict_rows(x_train), y_train, lambda);
        r.concept_name = concept_name;
        r.site = site;
        r.k = k;
        r.selected = sel;
        r.n_test = static_cast<int>(y_test.size());
        r.test_f1 = evaluate_f1(r, restrict_rows(x_test), y_test);
        out.push_back(std::move(r));
    }
    return out;
}

// The full probing protocol for one model: per concept, build a balanced
// dataset, then per site filter to routed tokens, rank neurons on the train
// split, and fit/evaluate a probe for every k.
inline SweepResult run_sweep(const Model& model, const TokenizedCorpus& corpus,
                             const std::vector<ConceptSpec>& concepts,
                             const std::vector<ProbeSite>& sites, const SweepOptions& opt) {
    validate_sites(model.config(), sites);
    SweepResult result;

    for (const auto& spec : concepts) {
        const ConceptDataset ds = build_dataset(corpus, spec, opt.n_samples, opt.seed);
        const ActivationCache cache(model, corpus, ds.samples, opt.n_threads);

        std::vector<std::vector<ProbeResult>> per_site(sites.size());
        std::atomic<std::size_t> next{0};
        auto worker = [&]() {
            for (;;) {
                const std::size_t si = next.fetch_add(1);
                if (si >= sites.size()) return;
                per_site[si] = sweep_one_site(ds, cache, spec.name, sites[si], opt);
            }
        };
        std::vector<std::thread> pool;
        for (int t = 0; t < std::max(1, opt.n_threads); ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();

        for (auto& v : per_site)
            for (auto& r : v) result.grid.push_back(std::move(r));
    }

    for (const auto& r : result.grid) {
        if (r.skipped) continue;
        const auto key = std::make_pair(r.concept_name, r.k);
        auto it = result.best.find(key);
        if (it == result.best.end() || r.test_f1 > it->second.test_f1 ||
            (r.test_f1 == it->second.test_f1 && r.site < it->second.site)) {
            result.best[key] = r;
        }
    }
    return result;
}

inline void write_sweep_csv(const SweepResult& sweep, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write sweep csv: " + path);
    out << "concept,layer,expert,k,n_train,n_test,lambda,converged,train_loss,test_f1,skipped\n";
    for (const auto& r : sweep.grid) {
        out << r.concept_name << "," << r.site.layer << ","
            << (r.site.is_dense() ? std::string("dense") : std::to_string(r.site.expert)) << ","
            << r.k << "," << r.n_train << "," << r.n_test << "," << r.lambda << ","
            << (r.converged ? 1 : 0) << "," << r.train_loss << "," << r.test_f1 << ","
            << (r.skipped ? 1 : 0) << "\n";
    }
}

inline nlohmann::json best_sites_json(const SweepResult& sweep) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& [key, r] : sweep.best) {
        j.push_back({{"concept", key.first},
                     {"k", key.second},
                     {"layer", r.site.layer},
                     {"expert", r.site.is_dense() ? nlohmann::json(nullptr)
                                                  : nlohmann::json(r.site.expert)},
                     {"test_f1", r.test_f1}});
    }
    return j;
}

// Plot-ready series: per k, mean best-site F1 over concepts with a normal
// 95% confidence band (1.96 * stderr).
inline nlohmann::json sweep_series_json(const SweepResult& sweep) {
    std::map<int, std::vector<double>> by_k;
    for (const auto& [key, r] : sweep.best) by_k[key.second].push_back(r.test_f1);
    nlohmann::json points = nlohmann::json::array();
    for (const auto& [k, f1s] : by_k) {
        double mean = 0.0;
        for (double f : f1s) mean += f;
        mean /= static_cast<double>(f1s.size());
        double var = 0.0;
        for (double f : f1s) var += (f - mean) * (f - mean);
        const double stderr_ =
            f1s.size() > 1 ? std::sqrt(var / static_cast<double>(f1s.size() - 1)) /
                                 std::sqrt(static_cast<double>(f1s.size()))
                           : 0.0;
        points.push_back({{"k", k},
                          {"mean_f1", mean},
                          {"ci95", 1.96 * stderr_},
                          {"n_concepts", f1s.size()}});
    }
    return {{"series", points}, {"ci_method", "normal approximation, 1.96 * stderr over concepts"}};
}

}  // namespace moescope
