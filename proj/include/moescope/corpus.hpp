#pragma once

// Corpus ingestion and regex-based binary concept labeling. Concepts mark
// character spans; a token is positive when its byte span overlaps a marked
// span. Labeling is a pure function of (text, rule).

#include <filesystem>
#include <fstream>
#include <regex>
#include <string>
#include <vector>

#include <json.hpp>

#include "moescope/common.hpp"
#include "moescope/tokenizer.hpp"

namespace moescope {

struct Document {
    std::string text;
    std::vector<TokenId> tokens;
    std::vector<std::size_t> offsets;  // token byte offsets, one extra end entry
};

struct TokenizedCorpus {
    std::vector<Document> documents;
    std::string tokenizer_id;
    std::string source_path;
    std::string content_hash;

    std::size_t total_tokens() const {
        std::size_t n = 0;
        for (const auto& d : documents) n += d.tokens.size();
        return n;
    }
};

inline TokenizedCorpus corpus_from_texts(const std::vector<std::string>& texts,
                                         const std::string& source = "<memory>") {
    const Tokenizer& tok = shipped_tokenizer();
    TokenizedCorpus c;
    c.tokenizer_id = tok.id();
    c.source_path = source;
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& t : texts) {
        Document d;
        d.text = t;
        d.tokens = tok.tokenize(t);
        d.offsets = tok.token_offsets(d.tokens);
        h = fnv1a64(t.data(), t.size(), h);
        c.documents.push_back(std::move(d));
    }
    c.content_hash = hex64(h);
    return c;
}

// UTF-8 text file (one document) or JSON-lines {"text": ...} (one per line).
inline TokenizedCorpus load_corpus(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read corpus: " + path);
    std::vector<std::string> texts;
    if (std::filesystem::path(path).extension() == ".jsonl") {
        std::string line;
        std::size_t line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            if (line.empty()) continue;
            try {
                auto j = nlohmann::json::parse(line);
                texts.push_back(j.at("text").get<std::string>());
            } catch (const nlohmann::json::exception& e) {
                throw DataError("corpus line " + std::to_string(line_no) + ": " + e.what());
            }
        }
    } else {
        texts.emplace_back((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    }
    TokenizedCorpus c = corpus_from_texts(texts, path);
    return c;
}

enum class ConceptCategory { Pos, Latex, Code, Text };

inline std::string to_string(ConceptCategory c) {
    switch (c) {
        case ConceptCategory::Pos: return "pos";
        case ConceptCategory::Latex: return "latex";
        case ConceptCategory::Code: return "code";
        case ConceptCategory::Text: return "text";
    }
    return "?";
}

inline ConceptCategory concept_category_from_string(const std::string& s) {
    if (s == "pos") return ConceptCategory::Pos;
    if (s == "latex") return ConceptCategory::Latex;
    if (s == "code") return ConceptCategory::Code;
    if (s == "text") return ConceptCategory::Text;
    throw ConfigError("unknown concept category: " + s);
}

struct ConceptSpec {
    std::string name;
    ConceptCategory category = ConceptCategory::Text;
    std::string pattern;  // capture group 1, when present, marks the span
    std::string description;
    std::vector<std::string> fixture_positive;
    std::vector<std::string> fixture_negative;

    std::regex compile() const {
        try {
            return std::regex(pattern, std::regex::ECMAScript);
        } catch (const std::regex_error& e) {
            throw ConfigError("concept '" + name + "' regex error: " + e.what());
        }
    }
};

struct CharSpan {
    std::size_t begin = 0;
    std::size_t end = 0;
};

// Non-overlapping matches, leftmost-first; the marked span is capture group 1
// when the pattern defines one, the whole match otherwise.
inline std::vector<CharSpan> concept_spans(const std::string& text, const ConceptSpec& spec) {
    const std::regex re = spec.compile();
    std::vector<CharSpan> spans;
    auto begin = std::sregex_iterator(text.begin(), text.end(), re);
    auto end = std::sregex_iterator();
    for (auto it = begin; it != end; ++it) {
        const std::smatch& m = *it;
        if (m.size() > 1 && m[1].matched) {
            const auto b = static_cast<std::size_t>(m.position(1));
            spans.push_back({b, b + static_cast<std::size_t>(m.length(1))});
        } else {
            const auto b = static_cast<std::size_t>(m.position(0));
            spans.push_back({b, b + static_cast<std::size_t>(m.length(0))});
        }
    }
    return spans;
}

// Per-token binary labels for one document.
inline std::vector<int> label_document(const Document& doc, const ConceptSpec& spec) {
    const auto spans = concept_spans(doc.text, spec);
    std::vector<int> labels(doc.tokens.size(), 0);
    std::size_t si = 0;
    for (std::size_t t = 0; t < doc.tokens.size(); ++t) {
        const std::size_t tb = doc.offsets[t];
        const std::size_t te = doc.offsets[t + 1];
        while (si < spans.size() && spans[si].end <= tb) ++si;
        for (std::size_t k = si; k < spans.size() && spans[k].begin < te; ++k) {
            if (spans[k].end > tb && spans[k].begin < te) {
                labels[t] = 1;
                break;
            }
        }
    }
    return labels;
}

inline std::vector<std::vector<int>> label_tokens(const TokenizedCorpus& corpus,
                                                  const ConceptSpec& spec) {
    std::vector<std::vector<int>> labels;
    labels.reserve(corpus.documents.size());
    for (const auto& d : corpus.documents) labels.push_back(label_document(d, spec));
    return labels;
}

inline ConceptSpec concept_from_json(const nlohmann::json& j, ConceptCategory category) {
    ConceptSpec c;
    try {
        c.name = j.at("name").get<std::string>();
        c.category = category;
        c.pattern = j.at("pattern").get<std::string>();
        c.description = j.value("description", "");
        if (j.contains("fixtures")) {
            for (const auto& s : j["fixtures"].value("positive", nlohmann::json::array()))
                c.fixture_positive.push_back(s.get<std::string>());
            for (const auto& s : j["fixtures"].value("negative", nlohmann::json::array()))
                c.fixture_negative.push_back(s.get<std::string>());
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad concept entry: ") + e.what());
    }
    c.compile();  // surface regex errors at load time
    return c;
}

// One registry document per category: {"category": ..., "concepts": [...]}.
inline std::vector<ConceptSpec> load_concept_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read concept registry: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("concept registry parse error in " + path + ": " + e.what());
    }
    const auto category = concept_category_from_string(j.at("category").get<std::string>());
    std::vector<ConceptSpec> out;
    for (const auto& entry : j.at("concepts")) out.push_back(concept_from_json(entry, category));
    return out;
}

inline std::vector<ConceptSpec> load_concept_registry(const std::string& dir) {
    std::vector<ConceptSpec> all;
    for (const char* name : {"pos.json", "latex.json", "code.json", "text.json"}) {
        const auto path = std::filesystem::path(dir) / name;
        if (!std::filesystem::exists(path)) continue;
        auto part = load_concept_file(path.string());
        all.insert(all.end(), part.begin(), part.end());
    }
    if (all.empty()) throw ConfigError("no concept registry files found in " + dir);
    return all;
}

}  // namespace moescope
