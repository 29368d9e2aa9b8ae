#pragma once

// Balanced binary token datasets for probing: seeded class-balanced sampling,
// 75/25 split, and routed-token filtering for MoE sites.

#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "moescope/common.hpp"
#include "moescope/corpus.hpp"
#include "moescope/defaults.hpp"

namespace moescope {

struct Sample {
    int doc = 0;
    int pos = 0;
    TokenId token = 0;  // activation key: which token's activation is probed
    int label = 0;
};

struct ConceptDataset {
    std::string concept_name;
    std::vector<Sample> samples;
    std::vector<std::size_t> train_idx;
    std::vector<std::size_t> test_idx;
    int n_pos = 0;
    int n_neg = 0;
    bool skipped = false;
    std::string skip_reason;
};

namespace dataset_detail {

// Exact 3/4 by sample count: n=4 gives 3/1, n=5000 gives 3750/1250.
inline std::size_t train_count(std::size_t n) { return n * 3 / 4; }

inline void apply_split(ConceptDataset& ds, std::uint64_t seed) {
    std::vector<std::size_t> order(ds.samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(derive_seed(seed, "split"));
    rng.shuffle(order);
    const std::size_t n_train = train_count(order.size());
    ds.train_idx.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
    ds.test_idx.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
}

inline void count_classes(ConceptDataset& ds) {
    ds.n_pos = ds.n_neg = 0;
    for (const auto& s : ds.samples) (s.label ? ds.n_pos : ds.n_neg)++;
}

}  // namespace dataset_detail

// Uniform seeded sampling without replacement per class; positives get the
// extra sample when n is odd. Split is applied after sampling.
inline ConceptDataset build_dataset(const TokenizedCorpus& corpus, const ConceptSpec& spec,
                                    int n, std::uint64_t seed) {
    if (n < 2) throw DataError("build_dataset: n must be at least 2");
    const auto labels = label_tokens(corpus, spec);
    std::vector<Sample> pos, neg;
    for (std::size_t d = 0; d < corpus.documents.size(); ++d) {
        const auto& doc = corpus.documents[d];
        for (std::size_t p = 0; p < doc.tokens.size(); ++p) {
            Sample s{static_cast<int>(d), static_cast<int>(p), doc.tokens[p], labels[d][p]};
            (s.label ? pos : neg).push_back(s);
        }
    }
    const std::size_t want_pos = static_cast<std::size_t>((n + 1) / 2);
    const std::size_t want_neg = static_cast<std::size_t>(n / 2);
    if (pos.size() < want_pos || neg.size() < want_neg) {
        throw DataError("build_dataset('" + spec.name + "'): need " + std::to_string(want_pos) +
                        "/" + std::to_string(want_neg) + " per class, corpus has " +
                        std::to_string(pos.size()) + " positives and " + std::to_string(neg.size()) +
                        " negatives");
    }
    Rng rng(derive_seed(seed, "sample:" + spec.name));
    auto draw = [&rng](std::vector<Sample>& from, std::size_t k) {
        // Partial Fisher-Yates: first k entries are a uniform sample.
        for (std::size_t i = 0; i < k; ++i) {
            const std::size_t j = i + static_cast<std::size_t>(rng.next_below(from.size() - i));
            std::swap(from[i], from[j]);
        }
        from.resize(k);
    };
    draw(pos, want_pos);
    draw(neg, want_neg);

    ConceptDataset ds;
    ds.concept_name = spec.name;
    ds.samples = pos;
    ds.samples.insert(ds.samples.end(), neg.begin(), neg.end());
    dataset_detail::count_classes(ds);
    dataset_detail::apply_split(ds, derive_seed(seed, "sample:" + spec.name));
    return ds;
}

// Keeps samples routed to the target site (gate > 0) and recomputes the
// split. Never invents samples; may come out unbalanced, which is recorded
// in the class counts. Below kMinSamplesPerClass per class the dataset is a
// skip marker rather than an error.
inline ConceptDataset filter_routed(const ConceptDataset& ds,
                                    const std::function<float(std::size_t, const Sample&)>& gate,
                                    std::uint64_t seed) {
    ConceptDataset out;
    out.concept_name = ds.concept_name;
    for (std::size_t i = 0; i < ds.samples.size(); ++i)
        if (gate(i, ds.samples[i]) > 0.0f) out.samples.push_back(ds.samples[i]);
    dataset_detail::count_classes(out);
    if (out.n_pos < defaults::kMinSamplesPerClass || out.n_neg < defaults::kMinSamplesPerClass) {
        out.skipped = true;
        out.skip_reason = "after routing filter: " + std::to_string(out.n_pos) + " positives, " +
                          std::to_string(out.n_neg) + " negatives (need >= " +
                          std::to_string(defaults::kMinSamplesPerClass) + " each)";
        out.train_idx.clear();
        out.test_idx.clear();
        return out;
    }
    dataset_detail::apply_split(out, derive_seed(seed, "sample:" + ds.concept_name));
    return out;
}

inline void write_dataset_jsonl(const ConceptDataset& ds, const std::string& path) {
    std::ofstream outf(path);
    if (!outf) throw IoError("cannot write dataset: " + path);
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        const auto& s = ds.samples[i];
        std::string split = "train";
        for (std::size_t t : ds.test_idx)
            if (t == i) { split = "test"; break; }
        outf << nlohmann::json{{"concept", ds.concept_name}, {"doc", s.doc},    {"pos", s.pos},
                               {"token", s.token},      {"label", s.label}, {"split", split}}
                    .dump()
             << "\n";
    }
}

}  // namespace moescope
