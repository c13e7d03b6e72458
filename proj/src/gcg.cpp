#include "mgcg/gcg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace mgcg {

void GcgConfig::validate() const {
    if (n_steps < 0) throw ConfigError("gcg: n_steps must be >= 0");
    if (batch_size < 1) throw ConfigError("gcg: batch_size must be >= 1");
    if (top_k < 1) throw ConfigError("gcg: top_k must be >= 1");
    if (position_weights) {
        double sum = 0.0;
        for (double w : *position_weights) {
            if (w < 0.0) throw ConfigError("gcg: negative position weight");
            sum += w;
        }
        if (std::abs(sum - 1.0) > 1e-9) {
            throw ConfigError("gcg: position weights must sum to 1");
        }
    }
}

TokenSeq apply_candidate(const TokenSeq& suffix, const Candidate& c) {
    if (c.position < 0 || c.position >= static_cast<int>(suffix.size())) {
        throw ContractError("candidate position " + std::to_string(c.position) +
                            " outside suffix of length " + std::to_string(suffix.size()));
    }
    TokenSeq out = suffix;
    out[c.position] = c.token;
    return out;
}

CandidateBatch sample_candidates(const Tensor& grad, const TokenSeq& suffix,
                                 const GcgConfig& cfg, Rng& rng) {
    cfg.validate();
    const int l = static_cast<int>(suffix.size());
    if (l == 0) throw ContractError("sample_candidates: empty suffix");
    if (grad.rank() != 2 || grad.rows() != l) {
        throw DimensionError("sample_candidates: gradient " + grad.shape_string() +
                             " does not match suffix length " + std::to_string(l));
    }
    const int v = grad.cols();
    const int k = std::min(cfg.top_k, v);
    if (cfg.position_weights && static_cast<int>(cfg.position_weights->size()) != l) {
        throw ContractError("sample_candidates: position weights length mismatch");
    }

    // Per position: the top_k most-negative gradient coordinates (descent
    // directions on the one-hot relaxation). Ties broken by token id so the
    // candidate set is deterministic.
    std::vector<std::vector<int>> top_tokens(l);
    std::vector<int> order(v);
    for (int i = 0; i < l; ++i) {
        std::iota(order.begin(), order.end(), 0);
        const double* row = grad.data() + static_cast<std::size_t>(i) * v;
        std::partial_sort(order.begin(), order.begin() + k, order.end(),
                          [row](int a, int b) {
                              if (row[a] != row[b]) return row[a] < row[b];
                              return a < b;
                          });
        top_tokens[i].assign(order.begin(), order.begin() + k);
    }

    CandidateBatch batch;
    batch.includes_incumbent = true;
    batch.entries.reserve(cfg.batch_size + 1);
    batch.entries.push_back(Candidate{0, suffix[0]});  // self-substitution == incumbent
    for (int b = 0; b < cfg.batch_size; ++b) {
        int pos;
        if (cfg.position_weights) {
            pos = static_cast<int>(weighted_index(rng, *cfg.position_weights));
        } else {
            pos = static_cast<int>(uniform_index(rng, l));
        }
        int tok = top_tokens[pos][uniform_index(rng, k)];
        batch.entries.push_back(Candidate{pos, tok});
    }
    return batch;
}

std::vector<double> evaluate_candidates_serial(const ModelParams& params,
                                               const TokenSeq& prompt, const TokenSeq& target,
                                               const TokenSeq& suffix,
                                               const CandidateBatch& batch) {
    if (batch.entries.empty()) throw ContractError("evaluate_candidates: empty batch");
    std::vector<double> losses(batch.entries.size());
    for (std::size_t i = 0; i < batch.entries.size(); ++i) {
        losses[i] = attack_loss(params, prompt, apply_candidate(suffix, batch.entries[i]), target);
    }
    return losses;
}

std::vector<double> evaluate_candidates(const ModelParams& params, const TokenSeq& prompt,
                                        const TokenSeq& target, const TokenSeq& suffix,
                                        const CandidateBatch& batch) {
    if (batch.entries.empty()) throw ContractError("evaluate_candidates: empty batch");
    const int n = static_cast<int>(batch.entries.size());
    std::vector<double> losses(n);
#pragma omp parallel for schedule(static)
    for (int i = 0; i < n; ++i) {
        losses[i] = attack_loss(params, prompt, apply_candidate(suffix, batch.entries[i]), target);
    }
    return losses;
}

StepResult gcg_step(const ModelParams& params, const TokenSeq& prompt, const TokenSeq& target,
                    const TokenSeq& suffix, const GcgConfig& cfg, Rng& rng) {
    if (suffix.empty()) throw ContractError("gcg_step: empty suffix");
    Tensor grad = onehot_gradient(params, prompt, suffix, target);
    CandidateBatch batch = sample_candidates(grad, suffix, cfg, rng);
    std::vector<double> losses = evaluate_candidates(params, prompt, target, suffix, batch);
    std::size_t best = 0;
    for (std::size_t i = 1; i < losses.size(); ++i) {
        if (losses[i] < losses[best]) best = i;  // ties keep the lowest index
    }
    StepResult result;
    result.suffix = apply_candidate(suffix, batch.entries[best]);
    result.loss = losses[best];
    result.evaluated = static_cast<int>(batch.entries.size());
    return result;
}

AttackTrace run_gcg(const ModelParams& params, const TokenSeq& prompt, const TokenSeq& target,
                    const TokenSeq& suffix0, const GcgConfig& cfg,
                    const SuccessChecker& success) {
    if (suffix0.empty()) throw ContractError("run_gcg: empty initial suffix");
    cfg.validate();
    Rng rng(cfg.seed);

    AttackTrace trace;
    TokenSeq suffix = suffix0;

    TraceStep initial;
    initial.step = 0;
    initial.loss = attack_loss(params, prompt, suffix, target);
    initial.suffix = suffix;
    initial.forward_passes = 1;
    trace.steps.push_back(initial);

    for (int i = 1; i <= cfg.n_steps; ++i) {
        StepResult step = gcg_step(params, prompt, target, suffix, cfg, rng);
        suffix = step.suffix;
        SuccessCheck check = success ? success(suffix) : SuccessCheck{false, 0};

        TraceStep rec;
        rec.step = i;
        rec.loss = step.loss;
        rec.suffix = suffix;
        // one gradient forward + candidate evaluations + decode forwards
        rec.forward_passes = 1 + step.evaluated + check.forward_passes;
        trace.steps.push_back(rec);
        trace.iterations = i;

        if (check.success) {
            trace.success = true;
            break;
        }
    }

    trace.final_suffix = suffix;
    for (const TraceStep& s : trace.steps) trace.total_forward_passes += s.forward_passes;
    return trace;
}

}  // namespace mgcg
