#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "mgcg/model.hpp"
#include "mgcg/tensor.hpp"

namespace mgcg::test {

// Central finite differences of a scalar function with respect to every entry
// of `leaf`. The function must recompute the value from current tensor data.
inline std::vector<double> finite_diff(const std::function<double()>& f, Tensor& leaf,
                                       double h = 1e-5) {
    std::vector<double> grads(leaf.numel());
    for (std::size_t i = 0; i < leaf.numel(); ++i) {
        const double saved = leaf.at(i);
        leaf.at(i) = saved + h;
        const double up = f();
        leaf.at(i) = saved - h;
        const double down = f();
        leaf.at(i) = saved;
        grads[i] = (up - down) / (2.0 * h);
    }
    return grads;
}

inline double rel_err(double a, double b) {
    const double denom = std::max({1e-4, std::fabs(a), std::fabs(b)});
    return std::fabs(a - b) / denom;
}

inline double max_rel_err(const std::vector<double>& analytic,
                          const std::vector<double>& numeric) {
    double worst = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        worst = std::max(worst, rel_err(analytic[i], numeric[i]));
    }
    return worst;
}

inline ModelParams tiny_model(int vocab, int d, int layers, int heads, int max_seq,
                              std::uint64_t seed, int ffn_mult = 2) {
    ModelConfig cfg;
    cfg.vocab_size = vocab;
    cfg.d_model = d;
    cfg.n_layers = layers;
    cfg.n_heads = heads;
    cfg.max_seq_len = max_seq;
    cfg.ffn_mult = ffn_mult;
    Rng rng(seed);
    return ModelParams::init(cfg, rng, 0.3);
}

inline TokenSeq random_tokens(Rng& rng, int len, int vocab) {
    TokenSeq out(len);
    for (int i = 0; i < len; ++i) out[i] = static_cast<int>(uniform_index(rng, vocab));
    return out;
}

}  // namespace mgcg::test
