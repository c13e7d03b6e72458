#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "mgcg/model.hpp"
#include "mgcg/rng.hpp"
#include "mgcg/trace.hpp"

namespace mgcg {

struct GcgConfig {
    int n_steps = 250;
    int batch_size = 512;
    int top_k = 256;          // clamped to the vocabulary size at use
    std::uint64_t seed = 0;
    // When set (by the mask layer), positions are drawn from this distribution
    // instead of uniformly. Must sum to 1 and match the suffix length.
    std::optional<std::vector<double>> position_weights;

    void validate() const;
};

struct Candidate {
    int position;
    int token;
};

// B sampled single-token substitutions. When includes_incumbent, entry 0 is a
// self-substitution that reproduces the unmodified suffix.
struct CandidateBatch {
    std::vector<Candidate> entries;
    bool includes_incumbent = false;
};

struct StepResult {
    TokenSeq suffix;
    double loss = 0.0;
    int evaluated = 0;        // candidate forward passes in this step
};

// Result of a success probe. forward_passes reports the decode cost so the
// trace's per-step accounting stays exact without a global counter.
struct SuccessCheck {
    bool success = false;
    long forward_passes = 0;
};

// Called with the current suffix after each iteration; success stops the run.
// Implementations typically decode greedily and scan for refusal patterns.
using SuccessChecker = std::function<SuccessCheck(const TokenSeq& suffix)>;

CandidateBatch sample_candidates(const Tensor& grad, const TokenSeq& suffix,
                                 const GcgConfig& cfg, Rng& rng);

// One exact attack loss per candidate, order matching the batch. The OpenMP
// variant fans candidates out across threads; per-candidate results are
// bitwise identical to the serial reference at any thread count.
std::vector<double> evaluate_candidates(const ModelParams& params, const TokenSeq& prompt,
                                        const TokenSeq& target, const TokenSeq& suffix,
                                        const CandidateBatch& batch);
std::vector<double> evaluate_candidates_serial(const ModelParams& params,
                                               const TokenSeq& prompt, const TokenSeq& target,
                                               const TokenSeq& suffix,
                                               const CandidateBatch& batch);

TokenSeq apply_candidate(const TokenSeq& suffix, const Candidate& c);

// Gradient + sample + evaluate + greedy argmin. The incumbent is always in
// the batch, so the returned loss never exceeds the incumbent's.
StepResult gcg_step(const ModelParams& params, const TokenSeq& prompt, const TokenSeq& target,
                    const TokenSeq& suffix, const GcgConfig& cfg, Rng& rng);

AttackTrace run_gcg(const ModelParams& params, const TokenSeq& prompt, const TokenSeq& target,
                    const TokenSeq& suffix0, const GcgConfig& cfg,
                    const SuccessChecker& success);

}  // namespace mgcg
