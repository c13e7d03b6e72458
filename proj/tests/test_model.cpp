#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "mgcg/mask.hpp"
#include "mgcg/model.hpp"
#include "test_util.hpp"

using namespace mgcg;
using namespace mgcg::test;

TEST_CASE("single token forward: 1xV logits and trivial attention") {
    ModelParams params = tiny_model(16, 16, 2, 2, 32, 3);
    ForwardOutput out = forward(params, {5});
    CHECK(out.logits.shape() == std::vector<int>{1, 16});
    REQUIRE(out.attentions.size() == 2);
    REQUIRE(out.attentions[0].size() == 2);
    CHECK(out.attentions[0][0].numel() == 1);
    CHECK(out.attentions[0][0].at(0) == 1.0);
}

TEST_CASE("forward is deterministic") {
    ModelParams params = tiny_model(16, 16, 2, 2, 32, 5);
    Rng rng(8);
    TokenSeq tokens = random_tokens(rng, 9, 16);
    ForwardOutput a = forward(params, tokens);
    ForwardOutput b = forward(params, tokens);
    for (std::size_t i = 0; i < a.logits.numel(); ++i) CHECK(a.logits.at(i) == b.logits.at(i));
}

TEST_CASE("forward equals forward_embedded over one-hot matmul") {
    ModelParams params = tiny_model(20, 16, 2, 2, 32, 7);
    Rng rng(9);
    TokenSeq tokens = random_tokens(rng, 8, 20);

    Tensor onehots = Tensor::zeros({8, 20});
    for (int i = 0; i < 8; ++i) onehots.at(i * 20 + tokens[i]) = 1.0;
    Tensor emb = matmul(onehots, params.embedding);

    ForwardOutput direct = forward(params, tokens);
    ForwardOutput relaxed = forward_embedded(params, emb);
    double worst = 0.0;
    for (std::size_t i = 0; i < direct.logits.numel(); ++i) {
        worst = std::max(worst, std::fabs(direct.logits.at(i) - relaxed.logits.at(i)));
    }
    CHECK(worst <= 1e-10);
}

TEST_CASE("all-ones mask reproduces the unmasked forward bit for bit") {
    ModelParams params = tiny_model(20, 16, 2, 2, 32, 11);
    Rng rng(10);
    TokenSeq tokens = random_tokens(rng, 7, 20);
    Tensor ones = Tensor::full({7}, 1.0);
    ForwardOutput masked = forward_embedded(params, masked_embeddings(params, tokens, ones));
    ForwardOutput direct = forward(params, tokens);
    for (std::size_t i = 0; i < direct.logits.numel(); ++i) {
        CHECK(masked.logits.at(i) == direct.logits.at(i));
    }
}

TEST_CASE("all-zero mask zeroes the suffix embeddings") {
    ModelParams params = tiny_model(20, 16, 1, 2, 32, 13);
    TokenSeq suffix = {3, 4, 5};
    Tensor emb = masked_embeddings(params, suffix, Tensor::zeros({3}));
    for (std::size_t i = 0; i < emb.numel(); ++i) CHECK(emb.at(i) == 0.0);
}

TEST_CASE("attention rows are causal probability distributions") {
    ModelParams params = tiny_model(24, 16, 2, 4, 32, 15);
    Rng rng(12);
    TokenSeq tokens = random_tokens(rng, 10, 24);
    ForwardOutput out = forward(params, tokens);
    for (const auto& layer : out.attentions) {
        for (const Tensor& attn : layer) {
            const int t = attn.rows();
            for (int q = 0; q < t; ++q) {
                double sum = 0.0;
                for (int j = 0; j < t; ++j) {
                    const double w = attn.at(q * t + j);
                    CHECK(w >= 0.0);
                    if (j > q) CHECK(w == 0.0);
                    sum += w;
                }
                CHECK(std::fabs(sum - 1.0) <= 1e-6);
            }
        }
    }
}

TEST_CASE("causality: mutating position j leaves earlier logits untouched") {
    ModelParams params = tiny_model(24, 16, 2, 2, 32, 17);
    Rng rng(14);
    for (int trial = 0; trial < 5; ++trial) {
        TokenSeq tokens = random_tokens(rng, 9, 24);
        const int j = 3 + static_cast<int>(uniform_index(rng, 5));
        TokenSeq mutated = tokens;
        mutated[j] = (mutated[j] + 1 + static_cast<int>(uniform_index(rng, 22))) % 24;
        ForwardOutput a = forward(params, tokens);
        ForwardOutput b = forward(params, mutated);
        for (int row = 0; row < j; ++row) {
            for (int v = 0; v < 24; ++v) {
                CHECK(a.logits.at(row * 24 + v) == b.logits.at(row * 24 + v));
            }
        }
    }
}

TEST_CASE("sequence beyond the context window is rejected") {
    ModelParams params = tiny_model(16, 16, 1, 2, 8, 19);
    TokenSeq long_seq(9, 1);
    CHECK_THROWS_AS(forward(params, long_seq), CapacityError);
}

TEST_CASE("embedding-input gradients match finite differences on the full model") {
    ModelParams params = tiny_model(16, 16, 2, 2, 32, 21);
    Rng rng(16);
    TokenSeq tokens = random_tokens(rng, 6, 16);
    TokenSeq targets = random_tokens(rng, 6, 16);

    Tensor emb = lookup_rows(params.embedding, tokens).clone_detached();
    emb.set_requires_grad(true);
    auto loss_of = [&] {
        ForwardOutput out = forward_embedded(params, emb);
        return cross_entropy(out.logits, targets);
    };
    {
        GradTape tape;
        tape.backward(loss_of());
    }
    auto f = [&] { return loss_of().item(); };
    CHECK(max_rel_err(emb.grad_vector(), finite_diff(f, emb)) < 1e-4);
}

TEST_CASE("mask-scalar gradients match finite differences through the model") {
    ModelParams params = tiny_model(16, 16, 2, 2, 32, 23);
    Rng rng(18);
    TokenSeq prompt = random_tokens(rng, 3, 16);
    TokenSeq suffix = random_tokens(rng, 4, 16);
    TokenSeq target = random_tokens(rng, 3, 16);

    Tensor p = Tensor::from_data({4}, {0.9, 0.4, 0.7, 0.2});
    p.set_requires_grad(true);
    auto loss_of = [&] {
        Tensor emb = masked_embeddings(params, suffix, p);
        return attack_loss_tensor(params, prompt, suffix, target, &emb);
    };
    {
        GradTape tape;
        tape.backward(loss_of());
    }
    auto f = [&] { return loss_of().item(); };
    CHECK(max_rel_err(p.grad_vector(), finite_diff(f, p)) < 1e-4);
}

TEST_CASE("onehot gradient: self-substitution predicts zero loss change") {
    ModelParams params = tiny_model(16, 16, 1, 2, 32, 25);
    Rng rng(20);
    TokenSeq prompt = random_tokens(rng, 3, 16);
    TokenSeq suffix = random_tokens(rng, 4, 16);
    TokenSeq target = random_tokens(rng, 3, 16);
    Tensor grad = onehot_gradient(params, prompt, suffix, target);
    for (int i = 0; i < 4; ++i) {
        // predicted first-order delta for replacing a token with itself
        const double predicted =
            grad.at(i * 16 + suffix[i]) - grad.at(i * 16 + suffix[i]);
        CHECK(predicted == 0.0);
    }
}

TEST_CASE("onehot gradient matches finite differences over interpolated one-hots") {
    ModelParams params = tiny_model(16, 16, 2, 2, 32, 27);
    Rng rng(22);
    TokenSeq prompt = random_tokens(rng, 2, 16);
    TokenSeq suffix = random_tokens(rng, 3, 16);
    TokenSeq target = random_tokens(rng, 3, 16);

    Tensor grad = onehot_gradient(params, prompt, suffix, target);

    Tensor onehots = Tensor::zeros({3, 16});
    for (int i = 0; i < 3; ++i) onehots.at(i * 16 + suffix[i]) = 1.0;
    auto f = [&] {
        Tensor emb = matmul(onehots, params.embedding);
        return attack_loss_tensor(params, prompt, suffix, target, &emb).item();
    };
    std::vector<double> analytic(grad.data(), grad.data() + grad.numel());
    CHECK(max_rel_err(analytic, finite_diff(f, onehots)) < 1e-4);
}

TEST_CASE("onehot gradient requires nonempty suffix and target") {
    ModelParams params = tiny_model(16, 16, 1, 2, 32, 29);
    CHECK_THROWS_AS(onehot_gradient(params, {1, 2}, {}, {3}), ContractError);
    CHECK_THROWS_AS(onehot_gradient(params, {1, 2}, {3}, {}), ContractError);
}

TEST_CASE("most negative gradient coordinate tracks exhaustive best swaps") {
    // first-order proxy check on a 1-layer model: the argmin-gradient token
    // lands in the true top-4 single-swap loss reducers in >= 60% of trials
    ModelParams params = tiny_model(16, 16, 1, 2, 32, 31);
    Rng rng(24);
    const int trials = 40;
    int hits = 0;
    for (int trial = 0; trial < trials; ++trial) {
        TokenSeq prompt = random_tokens(rng, 3, 16);
        TokenSeq suffix = random_tokens(rng, 4, 16);
        TokenSeq target = random_tokens(rng, 3, 16);
        const int pos = static_cast<int>(uniform_index(rng, 4));

        Tensor grad = onehot_gradient(params, prompt, suffix, target);
        int grad_argmin = 0;
        for (int v = 1; v < 16; ++v) {
            if (grad.at(pos * 16 + v) < grad.at(pos * 16 + grad_argmin)) grad_argmin = v;
        }

        std::vector<std::pair<double, int>> swaps;
        for (int v = 0; v < 16; ++v) {
            TokenSeq cand = suffix;
            cand[pos] = v;
            swaps.push_back({attack_loss(params, prompt, cand, target), v});
        }
        std::sort(swaps.begin(), swaps.end());
        for (int k = 0; k < 4; ++k) {
            if (swaps[k].second == grad_argmin) {
                hits += 1;
                break;
            }
        }
    }
    CHECK(hits >= trials * 60 / 100);
}

TEST_CASE("generate: empty budget, determinism, truncation flag") {
    ModelParams params = tiny_model(16, 16, 1, 2, 8, 33);
    CHECK(generate(params, {1, 2}, 0, -1).tokens.empty());

    GenerateResult a = generate(params, {1, 2}, 4, -1);
    GenerateResult b = generate(params, {1, 2}, 4, -1);
    CHECK(a.tokens == b.tokens);
    CHECK_FALSE(a.truncated);

    TokenSeq near_full(7, 1);
    GenerateResult c = generate(params, near_full, 5, -1);
    CHECK(c.truncated);
    CHECK(c.tokens.size() == 1);  // one slot left in the window

    CHECK_THROWS_AS(generate(params, {}, 3, -1), ContractError);
}

TEST_CASE("checkpoint round trip preserves every tensor and the config") {
    ModelParams params = tiny_model(20, 16, 2, 2, 16, 35);
    std::filesystem::path dir =
        std::filesystem::temp_directory_path() / "mgcg_ckpt_test";
    std::filesystem::create_directories(dir);
    const std::string path = (dir / "model.bin").string();

    save_checkpoint(path, params);
    ModelParams loaded = load_checkpoint(path);

    auto a = params.parameters();
    auto b = loaded.parameters();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        REQUIRE(a[i]->numel() == b[i]->numel());
        for (std::size_t j = 0; j < a[i]->numel(); ++j) {
            CHECK(a[i]->at(j) == b[i]->at(j));
        }
    }
    CHECK(std::filesystem::exists(dir / "config.json"));

    // saving the loaded params again produces identical bytes
    const std::string path2 = (dir / "model2.bin").string();
    save_checkpoint(path2, loaded);
    std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
    std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(s1 == s2);
    std::filesystem::remove_all(dir);
}

TEST_CASE("corrupt checkpoints are rejected") {
    std::filesystem::path dir =
        std::filesystem::temp_directory_path() / "mgcg_ckpt_bad";
    std::filesystem::create_directories(dir);
    const std::string path = (dir / "bad.bin").string();
    {
        std::ofstream out(path, std::ios::binary);
        out << "NOPE garbage";
    }
    CHECK_THROWS_AS(load_checkpoint(path), ConfigError);
    CHECK_THROWS_AS(load_checkpoint((dir / "missing.bin").string()), ConfigError);
    std::filesystem::remove_all(dir);
}

TEST_CASE("model config validation") {
    ModelConfig bad;
    bad.d_model = 10;
    bad.n_heads = 4;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad.d_model = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}
