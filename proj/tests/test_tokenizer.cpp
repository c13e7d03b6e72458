#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "mgcg/align.hpp"
#include "mgcg/tokenizer.hpp"

using namespace mgcg;

TEST_CASE("encode basics: empty string and repeated padding") {
    Vocab vocab = Vocab::builtin();
    CHECK(vocab.encode("").empty());

    TokenSeq bangs = vocab.encode("! ! !");
    REQUIRE(bangs.size() == 3);
    for (int id : bangs) CHECK(id == vocab.special().pad_bang);
}

TEST_CASE("unknown symbols are named in the error") {
    Vocab vocab = Vocab::builtin();
    try {
        vocab.encode("make a zeppelin");
        FAIL("expected VocabularyError");
    } catch (const VocabularyError& e) {
        CHECK(std::string(e.what()).find("zeppelin") != std::string::npos);
    }
}

TEST_CASE("round trip over a generated corpus") {
    Vocab vocab = Vocab::builtin();
    auto corpus = generate_corpus(BehaviorSpec::builtin(), vocab, 120, 99);
    for (const TokenSeq& line : corpus) {
        std::string text = vocab.decode(line);
        CHECK(vocab.encode(text) == line);
        CHECK(vocab.decode(vocab.encode(text)) == text);
    }
}

TEST_CASE("pad_suffix extends with the bang token and never truncates") {
    Vocab vocab = Vocab::builtin();
    TokenSeq suffix = vocab.encode("make a cake");
    TokenSeq padded = pad_suffix(suffix, 10, vocab);
    REQUIRE(padded.size() == 10);
    for (std::size_t i = 0; i < suffix.size(); ++i) CHECK(padded[i] == suffix[i]);
    for (std::size_t i = suffix.size(); i < 10; ++i) {
        CHECK(padded[i] == vocab.special().pad_bang);
    }

    CHECK(pad_suffix(suffix, static_cast<int>(suffix.size()), vocab) == suffix);
    CHECK_THROWS_AS(pad_suffix(padded, 5, vocab), ContractError);
}

TEST_CASE("pad then strip recovers the original suffix") {
    Vocab vocab = Vocab::builtin();
    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        int len = 1 + static_cast<int>(uniform_index(rng, 12));
        TokenSeq suffix;
        for (int i = 0; i < len; ++i) {
            int id;
            do {
                id = static_cast<int>(uniform_index(rng, vocab.size()));
            } while (id == vocab.special().pad_bang);
            suffix.push_back(id);
        }
        int target = len + static_cast<int>(uniform_index(rng, 10));
        CHECK(strip_trailing_pad(pad_suffix(suffix, target, vocab), vocab) == suffix);
    }
}

TEST_CASE("paper padding protocol: 20 to 30 adds ten bangs") {
    Vocab vocab = Vocab::builtin();
    TokenSeq suffix(20, vocab.special().pad_bang);
    suffix[3] = vocab.id("cake");
    suffix[19] = vocab.id("map");
    TokenSeq padded = pad_suffix(suffix, 30, vocab);
    REQUIRE(padded.size() == 30);
    CHECK(TokenSeq(padded.begin(), padded.begin() + 20) == suffix);
    for (int i = 20; i < 30; ++i) CHECK(padded[i] == vocab.special().pad_bang);
}

TEST_CASE("vocab json round trip") {
    Vocab vocab = Vocab::builtin();
    std::filesystem::path path = std::filesystem::temp_directory_path() / "mgcg_vocab.json";
    vocab.save(path.string());
    Vocab loaded = Vocab::load(path.string());
    CHECK(loaded.symbols() == vocab.symbols());
    CHECK(loaded.special().bos == vocab.special().bos);
    CHECK(loaded.special().pad_bang == vocab.special().pad_bang);
    CHECK(loaded.decode(loaded.encode("how to bake a cake ?")) == "how to bake a cake ?");
    std::filesystem::remove(path);
}

TEST_CASE("vocab rejects duplicates and bad special ids") {
    CHECK_THROWS_AS(Vocab({"a", "a"}, SpecialTokens{0, 0, 0, 0, 0}), ConfigError);
    CHECK_THROWS_AS(Vocab({"a", "b"}, SpecialTokens{0, 1, 5, 0, 1}), ConfigError);
}

TEST_CASE("symbol lookup is the exact inverse of the symbol list") {
    Vocab vocab = Vocab::builtin();
    for (int i = 0; i < vocab.size(); ++i) {
        CHECK(vocab.id(vocab.symbol(i)) == i);
    }
    CHECK_THROWS_AS(vocab.symbol(vocab.size()), IndexError);
}
