#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <set>

#include "mgcg/align.hpp"
#include "test_util.hpp"

using namespace mgcg;
using namespace mgcg::test;

namespace {

bool query_has_marker(const Vocab& vocab, const BehaviorSpec& spec, const TokenSeq& line) {
    const SpecialTokens& sp = vocab.special();
    auto user_it = std::find(line.begin(), line.end(), sp.user);
    auto asst_it = std::find(line.begin(), line.end(), sp.assistant);
    std::set<int> marker_ids;
    for (const std::string& m : spec.harmful_markers) marker_ids.insert(vocab.id(m));
    for (auto it = user_it + 1; it != asst_it; ++it) {
        if (marker_ids.count(*it)) return true;
    }
    return false;
}

}  // namespace

TEST_CASE("corpus generation is deterministic in the seed") {
    Vocab vocab = Vocab::builtin();
    BehaviorSpec spec = BehaviorSpec::builtin();
    auto a = generate_corpus(spec, vocab, 100, 42);
    auto b = generate_corpus(spec, vocab, 100, 42);
    auto c = generate_corpus(spec, vocab, 100, 43);
    CHECK(a == b);
    CHECK(a != c);
}

TEST_CASE("corpus lines are well formed and responses match the class") {
    Vocab vocab = Vocab::builtin();
    BehaviorSpec spec = BehaviorSpec::builtin();
    const SpecialTokens& sp = vocab.special();
    const TokenSeq refusal = vocab.encode(spec.refusal_phrase);
    const TokenSeq compliance = vocab.encode(spec.compliance_prefix);

    auto corpus = generate_corpus(spec, vocab, 300, 7);
    for (const TokenSeq& line : corpus) {
        REQUIRE(line.size() >= 6);
        CHECK(line[0] == sp.bos);
        CHECK(line[1] == sp.user);
        CHECK(line.back() == sp.eot);
        auto asst_it = std::find(line.begin(), line.end(), sp.assistant);
        REQUIRE(asst_it != line.end());
        TokenSeq response(asst_it + 1, line.end() - 1);
        if (query_has_marker(vocab, spec, line)) {
            REQUIRE(response.size() >= refusal.size());
            CHECK(std::equal(refusal.begin(), refusal.end(), response.begin()));
        } else {
            REQUIRE(response.size() >= compliance.size());
            CHECK(std::equal(compliance.begin(), compliance.end(), response.begin()));
        }
    }
}

TEST_CASE("class balance sits inside 45-55% at n=2000") {
    Vocab vocab = Vocab::builtin();
    BehaviorSpec spec = BehaviorSpec::builtin();
    auto corpus = generate_corpus(spec, vocab, 2000, 11);
    int harmful = 0;
    for (const TokenSeq& line : corpus) harmful += query_has_marker(vocab, spec, line) ? 1 : 0;
    const double frac = harmful / 2000.0;
    CHECK(frac >= 0.45);
    CHECK(frac <= 0.55);
}

TEST_CASE("excluded queries never appear in the corpus") {
    Vocab vocab = Vocab::builtin();
    BehaviorSpec spec = BehaviorSpec::builtin();
    auto tasks = make_benchmark_tasks(spec, vocab, 10, 555);
    std::vector<std::string> exclude;
    for (const auto& t : tasks) exclude.push_back(t.query);
    std::set<std::string> excluded(exclude.begin(), exclude.end());

    auto corpus = generate_corpus(spec, vocab, 500, 13, exclude);
    const SpecialTokens& sp = vocab.special();
    for (const TokenSeq& line : corpus) {
        auto user_it = std::find(line.begin(), line.end(), sp.user);
        auto asst_it = std::find(line.begin(), line.end(), sp.assistant);
        TokenSeq query(user_it + 1, asst_it);
        CHECK(excluded.count(vocab.decode(query)) == 0);
    }
}

TEST_CASE("benchmark tasks are distinct harmful queries with affirmative targets") {
    Vocab vocab = Vocab::builtin();
    BehaviorSpec spec = BehaviorSpec::builtin();
    auto tasks = make_benchmark_tasks(spec, vocab, 20, 555);
    REQUIRE(tasks.size() == 20);
    std::set<std::string> queries;
    std::set<int> marker_ids;
    for (const std::string& m : spec.harmful_markers) marker_ids.insert(vocab.id(m));
    for (const auto& t : tasks) {
        queries.insert(t.query);
        bool has_marker = false;
        for (int id : vocab.encode(t.query)) has_marker |= marker_ids.count(id) > 0;
        CHECK(has_marker);
        CHECK(t.target.rfind(spec.compliance_prefix, 0) == 0);
    }
    CHECK(queries.size() == 20);

    // round trip through json
    auto path = std::filesystem::temp_directory_path() / "mgcg_tasks.json";
    save_tasks(path.string(), tasks);
    auto loaded = load_tasks(path.string());
    REQUIRE(loaded.size() == tasks.size());
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        CHECK(loaded[i].id == tasks[i].id);
        CHECK(loaded[i].query == tasks[i].query);
        CHECK(loaded[i].target == tasks[i].target);
    }
    std::filesystem::remove(path);
}

TEST_CASE("corpus text round trip") {
    Vocab vocab = Vocab::builtin();
    auto corpus = generate_corpus(BehaviorSpec::builtin(), vocab, 50, 17);
    auto path = std::filesystem::temp_directory_path() / "mgcg_corpus.txt";
    save_corpus(path.string(), corpus, vocab);
    auto loaded = load_corpus(path.string(), vocab);
    CHECK(loaded == corpus);
    std::filesystem::remove(path);
}

TEST_CASE("zero epochs leaves parameters untouched") {
    Vocab vocab = Vocab::builtin();
    BehaviorSpec spec = BehaviorSpec::builtin();
    auto corpus = generate_corpus(spec, vocab, 40, 19);
    ModelParams params = tiny_model(vocab.size(), 16, 1, 2, 32, 21);
    TrainConfig cfg;
    cfg.epochs = 0;
    cfg.corpus_size = 40;
    ModelParams out = train(params, corpus, cfg, vocab, spec);
    auto a = params.parameters();
    auto b = out.parameters();
    for (std::size_t i = 0; i < a.size(); ++i) {
        for (std::size_t j = 0; j < a[i]->numel(); ++j) CHECK(a[i]->at(j) == b[i]->at(j));
    }
}

TEST_CASE("training lowers held-out loss and is seed-reproducible") {
    Vocab vocab = Vocab::builtin();
    BehaviorSpec spec = BehaviorSpec::builtin();
    auto corpus = generate_corpus(spec, vocab, 300, 23);
    ModelParams params = tiny_model(vocab.size(), 32, 1, 2, 32, 25);
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch = 16;
    cfg.lr = 0.5;
    cfg.seed = 77;
    cfg.corpus_size = 300;

    TrainReport report;
    ModelParams trained = train(params, corpus, cfg, vocab, spec, &report);
    CHECK(report.final_heldout_loss < report.initial_heldout_loss);

    ModelParams again = train(params, corpus, cfg, vocab, spec);
    auto a = trained.parameters();
    auto b = again.parameters();
    for (std::size_t i = 0; i < a.size(); ++i) {
        for (std::size_t j = 0; j < a[i]->numel(); ++j) CHECK(a[i]->at(j) == b[i]->at(j));
    }
}

TEST_CASE("train validates its inputs") {
    Vocab vocab = Vocab::builtin();
    BehaviorSpec spec = BehaviorSpec::builtin();
    ModelParams params = tiny_model(vocab.size(), 16, 1, 2, 32, 27);
    TrainConfig cfg;
    CHECK_THROWS_AS(train(params, {}, cfg, vocab, spec), ContractError);
    TrainConfig bad;
    bad.lr = 0.0;
    auto corpus = generate_corpus(spec, vocab, 10, 29);
    CHECK_THROWS_AS(train(params, corpus, bad, vocab, spec), ConfigError);
}

TEST_CASE("behavior spec validation") {
    Vocab vocab = Vocab::builtin();
    BehaviorSpec spec = BehaviorSpec::builtin();
    spec.validate(vocab);  // must not throw

    BehaviorSpec overlapping = spec;
    overlapping.refusal_phrase = "i cannot help with bomb";
    CHECK_THROWS_AS(overlapping.validate(vocab), ConfigError);

    BehaviorSpec unknown = spec;
    unknown.harmful_markers.push_back("zeppelin");
    CHECK_THROWS_AS(unknown.validate(vocab), ConfigError);
}
