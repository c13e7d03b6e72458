#pragma once

#include <optional>
#include <vector>

#include "mgcg/gcg.hpp"
#include "mgcg/model.hpp"
#include "mgcg/trace.hpp"

namespace mgcg {

// Learnable per-position mask over the suffix: logits m, the temperature of
// the sigmoid relaxation, and the moment buffers of the adaptive update. All
// vectors stay the same length as the suffix; pruning shrinks them together.
struct MaskState {
    std::vector<double> m;
    std::vector<double> moment1;
    std::vector<double> moment2;
    double tau = 1.0;
    int step = 0;
    double lr = 0.05;

    int length() const { return static_cast<int>(m.size()); }
};

struct TemperatureSchedule {
    double tau_max = 1.0;
    double tau_min = 0.1;
    int horizon = 250;

    void validate() const;
};

// Attention statistics behind the importance score: per layer (last K, front
// of the vectors is the shallowest used layer), the target-dependency channel
// R and the global-influence channel F for each suffix position.
struct ImportanceScores {
    std::vector<double> w;
    std::vector<std::vector<double>> target_dependency;   // [layer][pos]
    std::vector<std::vector<double>> global_influence;    // [layer][pos]
    std::vector<double> layer_weights;                    // positive, sums to 1
    double alpha_balance = 0.5;
    int layers_used = 0;
};

// Seeded two-layer ReLU MLP used once, at initialization. Weights are fixed
// nonnegative so higher importance cannot map to a lower initial mask.
struct MlpInit {
    int hidden = 16;
    double noise_scale = 0.01;
    std::uint64_t seed = 0;
};

struct PruneConfig {
    double threshold = 0.3;   // tau_prune
    int frequency = 10;       // attempt every f iterations
    int min_length = 8;
    double lambda_reg = 0.3;

    void validate() const;
};

// p_i = sigmoid(m_i / tau)
std::vector<double> mask_probabilities(const MaskState& state);

// Cosine annealing from tau_max at step 0 to tau_min at the horizon; steps
// past the horizon clamp to tau_min.
double anneal_temperature(const TemperatureSchedule& sched, int step);

// Row i of the suffix embedding scaled by p[i]; positional embeddings are not
// touched (the model adds them afterwards).
Tensor masked_embeddings(const ModelParams& params, const TokenSeq& suffix, const Tensor& p);
Tensor masked_embeddings(const ModelParams& params, const TokenSeq& suffix,
                         const std::vector<double>& p);

// Bare mean of the mask probabilities; the regularization weight is applied
// once, in the total-loss combination.
double regularization_loss(const std::vector<double>& p);

struct MaskLossResult {
    double total = 0.0;
    double attack = 0.0;
    double reg = 0.0;
    std::vector<double> grad_m;
};

// Attack loss through the masked continuous path plus lambda_reg * mean(p),
// differentiated with respect to the mask logits.
MaskLossResult total_mask_loss(const ModelParams& params, const TokenSeq& prompt,
                               const TokenSeq& suffix, const TokenSeq& target,
                               const MaskState& state, const PruneConfig& cfg);

// One bias-corrected adaptive moment step on the mask logits.
void mask_update(MaskState& state, const std::vector<double>& grad_m);

ImportanceScores attention_importance(const ForwardOutput& out, int suffix_begin,
                                      int suffix_end, int target_begin, int target_end,
                                      int k_layers, double alpha_balance);

struct MaskInit {
    MaskState state;
    bool zscore_degenerate = false;
};

MaskInit init_mask(const ImportanceScores& scores, const MlpInit& init, double lr,
                   double tau0);

struct PruneOutcome {
    TokenSeq suffix;
    MaskState state;
    std::optional<PruneEvent> event;
    long forward_passes = 0;
};

// Threshold pruning with rollback. On schedule, removes the argmin-probability
// position when its probability is under the threshold, reinitializes the
// optimizer moments, and reverts everything if the discrete attack loss rose.
PruneOutcome prune_step(const TokenSeq& suffix, const MaskState& state,
                        const ModelParams& params, const TokenSeq& prompt,
                        const TokenSeq& target, const PruneConfig& cfg, int iteration,
                        std::optional<double> current_loss = std::nullopt);

struct MaskGcgOptions {
    double mask_lr = 0.05;
    double alpha_balance = 0.5;
    int k_layers = 0;                 // 0 -> min(4, n_layers)
    bool use_position_weights = false;
};

AttackTrace run_mask_gcg(const ModelParams& params, const TokenSeq& prompt,
                         const TokenSeq& target, const TokenSeq& suffix0,
                         const GcgConfig& gcg_cfg, const PruneConfig& prune_cfg,
                         const TemperatureSchedule& sched, const MlpInit& mlp_init,
                         const SuccessChecker& success, const MaskGcgOptions& options = {});

}  // namespace mgcg
