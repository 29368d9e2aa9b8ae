#include <catch2/catch_amalgamated.hpp>

#include "moescope/tokenizer.hpp"

#include <string>

using namespace moescope;

TEST_CASE("empty input tokenizes to nothing") {
    const auto& tok = shipped_tokenizer();
    CHECK(tok.tokenize("").empty());
    CHECK(tok.detokenize({}).empty());
}

TEST_CASE("round trip is byte-exact for arbitrary byte strings") {
    const auto& tok = shipped_tokenizer();
    Rng rng(1234);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t len = static_cast<std::size_t>(rng.next_below(300));
        std::string s;
        for (std::size_t i = 0; i < len; ++i) {
            // Any byte value, including invalid UTF-8 and NUL.
            s.push_back(static_cast<char>(rng.next_below(256)));
        }
        const auto ids = tok.tokenize(s);
        REQUIRE(tok.detokenize(ids) == s);
        for (TokenId id : ids) CHECK(id < tok.vocab_size());
    }
}

TEST_CASE("round trip on natural text") {
    const auto& tok = shipped_tokenizer();
    const std::string s =
        "The quick brown fox, naturally, jumps over 42 lazy dogs.\n"
        "  def f(x):\n    return x ** 2  # comment\n"
        "\\frac{a}{b} caf\xc3\xa9 \xe2\x88\x91";
    CHECK(tok.detokenize(tok.tokenize(s)) == s);
}

TEST_CASE("tokenization is deterministic and repeated words share ids") {
    const auto& tok = shipped_tokenizer();
    const auto a = tok.tokenize("the cat saw the cat");
    const auto b = tok.tokenize("the cat saw the cat");
    REQUIRE(a == b);
    // Both " the cat" occurrences produce identical id subsequences.
    const auto unit = tok.tokenize(" the cat");
    std::size_t found = 0;
    for (std::size_t i = 0; i + unit.size() <= a.size(); ++i) {
        bool match = true;
        for (std::size_t j = 0; j < unit.size(); ++j)
            if (a[i + j] != unit[j]) { match = false; break; }
        if (match) ++found;
    }
    CHECK(found >= 1);
}

TEST_CASE("vocabulary is versioned and words merge to single tokens") {
    const auto& tok = shipped_tokenizer();
    CHECK(tok.id().rfind("bytebpe-v1:", 0) == 0);
    CHECK(tok.vocab_size() > 256);
    TokenId id = 0;
    REQUIRE(tok.lookup(" the", id));
    CHECK(tok.tokenize(" the") == std::vector<TokenId>{id});
    REQUIRE(tok.lookup(" fjord", id));
    CHECK(tok.tokenize(" fjord") == std::vector<TokenId>{id});
}

TEST_CASE("token offsets partition the text") {
    const auto& tok = shipped_tokenizer();
    const std::string s = "We saw the sphinx by the fjord in Japan.";
    const auto ids = tok.tokenize(s);
    const auto offs = tok.token_offsets(ids);
    REQUIRE(offs.size() == ids.size() + 1);
    CHECK(offs.front() == 0);
    CHECK(offs.back() == s.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        CHECK(s.substr(offs[i], offs[i + 1] - offs[i]) == tok.token_text(ids[i]));
    }
}

TEST_CASE("token_text rejects out-of-range ids") {
    const auto& tok = shipped_tokenizer();
    CHECK_THROWS_AS(tok.token_text(static_cast<TokenId>(tok.vocab_size())), DataError);
}
