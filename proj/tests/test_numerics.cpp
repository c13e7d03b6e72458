#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mgcg/tensor.hpp"
#include "test_util.hpp"

using namespace mgcg;
using namespace mgcg::test;

namespace {

// Scalar readout with fixed random weights so FD can probe matrix-valued ops.
Tensor weighted_readout(const Tensor& x, const Tensor& weights) {
    return sum_all(mul(x, weights));
}

}  // namespace

TEST_CASE("matmul identity and hand-computed products") {
    Rng rng(7);
    Tensor a = Tensor::randn({3, 3}, rng);
    Tensor eye = Tensor::zeros({3, 3});
    for (int i = 0; i < 3; ++i) eye.at(i * 3 + i) = 1.0;
    Tensor prod = matmul(eye, a);
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(prod.at(i) == a.at(i));

    Tensor b = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    Tensor ones = Tensor::from_data({2, 1}, {1, 1});
    Tensor r = matmul(b, ones);
    CHECK(r.at(0) == 3.0);
    CHECK(r.at(1) == 7.0);
}

TEST_CASE("matmul rejects mismatched shapes naming both") {
    Tensor a = Tensor::zeros({4, 5});
    Tensor b = Tensor::zeros({3, 2});
    try {
        matmul(a, b);
        FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
        std::string msg = e.what();
        CHECK(msg.find("[4,5]") != std::string::npos);
        CHECK(msg.find("[3,2]") != std::string::npos);
    }
}

TEST_CASE("matmul gradients match finite differences") {
    Rng rng(11);
    Tensor a = Tensor::randn({4, 5}, rng);
    Tensor b = Tensor::randn({5, 3}, rng);
    Tensor w = Tensor::randn({4, 3}, rng);
    a.set_requires_grad(true);
    b.set_requires_grad(true);
    {
        GradTape tape;
        Tensor loss = weighted_readout(matmul(a, b), w);
        tape.backward(loss);
    }
    auto f = [&] { return weighted_readout(matmul(a, b), w).item(); };
    CHECK(max_rel_err(a.grad_vector(), finite_diff(f, a)) < 1e-6);
    CHECK(max_rel_err(b.grad_vector(), finite_diff(f, b)) < 1e-6);
}

TEST_CASE("matmul_transb matches matmul against explicit transpose semantics") {
    Rng rng(13);
    Tensor a = Tensor::randn({3, 4}, rng);
    Tensor b = Tensor::randn({5, 4}, rng);
    Tensor out = matmul_transb(a, b);
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 5; ++j) {
            double acc = 0.0;
            for (int k = 0; k < 4; ++k) acc += a.at(i * 4 + k) * b.at(j * 4 + k);
            CHECK(out.at(i * 5 + j) == doctest::Approx(acc).epsilon(1e-12));
        }
    }
    Tensor w = Tensor::randn({3, 5}, rng);
    a.set_requires_grad(true);
    b.set_requires_grad(true);
    {
        GradTape tape;
        tape.backward(weighted_readout(matmul_transb(a, b), w));
    }
    auto f = [&] { return weighted_readout(matmul_transb(a, b), w).item(); };
    CHECK(max_rel_err(a.grad_vector(), finite_diff(f, a)) < 1e-6);
    CHECK(max_rel_err(b.grad_vector(), finite_diff(f, b)) < 1e-6);
}

TEST_CASE("softmax of zeros is uniform and extreme logits stay stable") {
    Tensor zeros = Tensor::zeros({4});
    Tensor sm = softmax_rows(zeros);
    for (int j = 0; j < 4; ++j) CHECK(sm.at(j) == doctest::Approx(0.25).epsilon(1e-15));

    Tensor extreme = Tensor::from_data({2}, {1000.0, 0.0});
    Tensor sm2 = softmax_rows(extreme);
    CHECK(std::fabs(sm2.at(0) - 1.0) < 1e-12);
    CHECK(sm2.at(1) < 1e-12);
    CHECK(std::isfinite(sm2.at(0)));
}

TEST_CASE("softmax rows sum to one and reject empties") {
    Rng rng(17);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor x = Tensor::randn({3, 5}, rng, 4.0);
        Tensor sm = softmax_rows(x);
        for (int i = 0; i < 3; ++i) {
            double sum = 0.0;
            for (int j = 0; j < 5; ++j) sum += sm.at(i * 5 + j);
            CHECK(std::fabs(sum - 1.0) <= 1e-9);
        }
    }
    CHECK_THROWS_AS(softmax_rows(Tensor::zeros({0})), DomainError);
}

TEST_CASE("softmax gradients match finite differences") {
    Rng rng(19);
    Tensor x = Tensor::randn({3, 3}, rng);
    Tensor w = Tensor::randn({3, 3}, rng);
    x.set_requires_grad(true);
    {
        GradTape tape;
        tape.backward(weighted_readout(softmax_rows(x), w));
    }
    auto f = [&] { return weighted_readout(softmax_rows(x), w).item(); };
    CHECK(max_rel_err(x.grad_vector(), finite_diff(f, x)) < 1e-5);
}

TEST_CASE("cross entropy saturated, uniform, and error cases") {
    // one logit +50, rest -50, on the target -> probability ~1
    Tensor logits = Tensor::full({1, 6}, -50.0);
    logits.at(2) = 50.0;
    CHECK(cross_entropy(logits, {2}).item() < 1e-10);

    Tensor uniform = Tensor::zeros({3, 8});
    CHECK(cross_entropy(uniform, {0, 5, 7}).item() ==
          doctest::Approx(std::log(8.0)).epsilon(1e-12));

    CHECK_THROWS_AS(cross_entropy(uniform, {0, 1, 99}), IndexError);
    CHECK_THROWS_AS(cross_entropy(uniform, {0}), DimensionError);
}

TEST_CASE("cross entropy is nonnegative and matches finite differences") {
    Rng rng(23);
    for (int trial = 0; trial < 5; ++trial) {
        Tensor logits = Tensor::randn({5, 8}, rng, 2.0);
        TokenSeq targets = random_tokens(rng, 5, 8);
        CHECK(cross_entropy(logits, targets).item() >= 0.0);

        logits.set_requires_grad(true);
        {
            GradTape tape;
            tape.backward(cross_entropy(logits, targets));
        }
        auto f = [&] { return cross_entropy(logits, targets).item(); };
        CHECK(max_rel_err(logits.grad_vector(), finite_diff(f, logits)) < 1e-5);
        logits.set_requires_grad(false);
    }
}

TEST_CASE("backward on linear and quadratic scalars") {
    Tensor x = Tensor::from_data({3}, {1.0, -2.0, 0.5});
    x.set_requires_grad(true);
    {
        GradTape tape;
        tape.backward(sum_all(x));
    }
    for (int i = 0; i < 3; ++i) CHECK(x.grad()[i] == 1.0);

    Tensor y = Tensor::scalar(2.0);
    y.set_requires_grad(true);
    {
        GradTape tape;
        tape.backward(sum_all(mul(y, y)));
    }
    CHECK(y.grad()[0] == 4.0);
}

TEST_CASE("backward contract and state errors") {
    Tensor x = Tensor::from_data({2}, {1.0, 2.0});
    x.set_requires_grad(true);
    GradTape tape;
    Tensor v = mul(x, x);
    CHECK_THROWS_AS(tape.backward(v), ContractError);  // not scalar

    Tensor loss = sum_all(v);
    tape.backward(loss);
    CHECK_THROWS_AS(tape.backward(loss), StateError);  // consumed
}

TEST_CASE("loss not recorded on a tape is rejected") {
    Tensor loose = Tensor::scalar(1.0);
    GradTape tape;
    CHECK_THROWS_AS(tape.backward(loose), ContractError);
}

TEST_CASE("elementwise and structural op gradients, randomized trials") {
    Rng rng(29);
    for (int trial = 0; trial < 20; ++trial) {
        const int r = 2 + static_cast<int>(uniform_index(rng, 3));
        const int c = 2 + static_cast<int>(uniform_index(rng, 3));
        Tensor a = Tensor::randn({r, c}, rng);
        Tensor b = Tensor::randn({r, c}, rng);
        Tensor w = Tensor::randn({r, c}, rng);
        // keep relu inputs away from the kink
        for (std::size_t i = 0; i < a.numel(); ++i) {
            if (std::fabs(a.at(i)) < 0.05) a.at(i) += 0.2;
        }
        a.set_requires_grad(true);
        b.set_requires_grad(true);
        auto compute = [&] {
            Tensor h = add(mul(relu(a), b), scale(sigmoid(a), 0.7));
            return weighted_readout(h, w);
        };
        {
            GradTape tape;
            tape.backward(compute());
        }
        auto f = [&] { return compute().item(); };
        CHECK(max_rel_err(a.grad_vector(), finite_diff(f, a)) < 1e-4);
        CHECK(max_rel_err(b.grad_vector(), finite_diff(f, b)) < 1e-4);
    }
}

TEST_CASE("layer norm, scale_rows, slicing and concat gradients") {
    Rng rng(31);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor x = Tensor::randn({4, 6}, rng);
        Tensor gain = Tensor::randn({6}, rng, 0.5);
        Tensor bias = Tensor::randn({6}, rng, 0.5);
        Tensor p = Tensor::randn({4}, rng, 0.5);
        Tensor w = Tensor::randn({4, 3}, rng);
        x.set_requires_grad(true);
        gain.set_requires_grad(true);
        bias.set_requires_grad(true);
        p.set_requires_grad(true);
        auto compute = [&] {
            Tensor normed = layer_norm_rows(x, gain, bias);
            Tensor scaled = scale_rows(normed, p);
            Tensor left = slice_cols(scaled, 0, 3);
            Tensor right = slice_cols(scaled, 3, 3);
            Tensor joined = concat_rows({slice_rows(add(left, right), 0, 2),
                                         slice_rows(add(left, right), 2, 2)});
            return weighted_readout(joined, w);
        };
        {
            GradTape tape;
            tape.backward(compute());
        }
        auto f = [&] { return compute().item(); };
        CHECK(max_rel_err(x.grad_vector(), finite_diff(f, x)) < 1e-4);
        CHECK(max_rel_err(gain.grad_vector(), finite_diff(f, gain)) < 1e-4);
        CHECK(max_rel_err(bias.grad_vector(), finite_diff(f, bias)) < 1e-4);
        CHECK(max_rel_err(p.grad_vector(), finite_diff(f, p)) < 1e-4);
    }
}

TEST_CASE("forward results are deterministic") {
    Rng rng(37);
    Tensor a = Tensor::randn({5, 5}, rng);
    Tensor b = Tensor::randn({5, 5}, rng);
    Tensor first = matmul(softmax_rows(a), b);
    Tensor second = matmul(softmax_rows(a), b);
    for (std::size_t i = 0; i < first.numel(); ++i) CHECK(first.at(i) == second.at(i));
}

TEST_CASE("causal mask zeroes future positions exactly after softmax") {
    Rng rng(41);
    Tensor scores = Tensor::randn({5, 5}, rng, 3.0);
    Tensor sm = softmax_rows(causal_mask(scores));
    for (int i = 0; i < 5; ++i) {
        for (int j = i + 1; j < 5; ++j) CHECK(sm.at(i * 5 + j) == 0.0);
        double sum = 0.0;
        for (int j = 0; j <= i; ++j) sum += sm.at(i * 5 + j);
        CHECK(std::fabs(sum - 1.0) <= 1e-9);
    }
}

TEST_CASE("tensor invariants: shape/data agreement and grad shape") {
    Tensor t = Tensor::zeros({3, 4});
    CHECK(t.numel() == 12);
    t.set_requires_grad(true);
    CHECK(t.has_grad());
    CHECK_THROWS_AS(Tensor::from_data({2, 2}, {1.0}), DimensionError);
}
