#include "mgcg/mask.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace mgcg {

void TemperatureSchedule::validate() const {
    if (!(tau_max >= tau_min) || !(tau_min > 0.0)) {
        throw ConfigError("temperature schedule requires tau_max >= tau_min > 0");
    }
    if (horizon < 1) throw ConfigError("temperature schedule requires horizon >= 1");
}

void PruneConfig::validate() const {
    if (threshold < 0.0 || threshold >= 1.0) {
        throw ConfigError("prune threshold must lie in [0,1)");
    }
    if (frequency < 1) throw ConfigError("prune frequency must be >= 1");
    if (min_length < 1) throw ConfigError("prune min_length must be >= 1");
    if (lambda_reg < 0.0) throw ConfigError("lambda_reg must be >= 0");
}

std::vector<double> mask_probabilities(const MaskState& state) {
    if (!(state.tau > 0.0)) {
        throw ContractError("mask_probabilities: temperature must be positive");
    }
    std::vector<double> p(state.m.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
        p[i] = 1.0 / (1.0 + std::exp(-state.m[i] / state.tau));
    }
    return p;
}

double anneal_temperature(const TemperatureSchedule& sched, int step) {
    sched.validate();
    if (step < 0) throw ContractError("anneal_temperature: negative step");
    if (step >= sched.horizon) return sched.tau_min;
    const double phase = M_PI * static_cast<double>(step) / sched.horizon;
    return sched.tau_min + 0.5 * (sched.tau_max - sched.tau_min) * (1.0 + std::cos(phase));
}

Tensor masked_embeddings(const ModelParams& params, const TokenSeq& suffix, const Tensor& p) {
    if (p.numel() != suffix.size()) {
        throw ContractError("masked_embeddings: mask length " + std::to_string(p.numel()) +
                            " does not match suffix length " + std::to_string(suffix.size()));
    }
    return scale_rows(lookup_rows(params.embedding, suffix), p);
}

Tensor masked_embeddings(const ModelParams& params, const TokenSeq& suffix,
                         const std::vector<double>& p) {
    return masked_embeddings(params, suffix,
                             Tensor::from_data({static_cast<int>(p.size())}, p));
}

double regularization_loss(const std::vector<double>& p) {
    if (p.empty()) throw ContractError("regularization_loss: empty mask");
    double sum = 0.0;
    for (double v : p) sum += v;
    return sum / static_cast<double>(p.size());
}

MaskLossResult total_mask_loss(const ModelParams& params, const TokenSeq& prompt,
                               const TokenSeq& suffix, const TokenSeq& target,
                               const MaskState& state, const PruneConfig& cfg) {
    if (state.length() != static_cast<int>(suffix.size())) {
        throw ContractError("total_mask_loss: mask length does not match suffix");
    }
    if (!(state.tau > 0.0)) throw ContractError("total_mask_loss: temperature must be positive");

    GradTape tape;
    Tensor m = Tensor::from_data({state.length()}, state.m);
    m.set_requires_grad(true);
    Tensor p = sigmoid(scale(m, 1.0 / state.tau));
    Tensor emb = masked_embeddings(params, suffix, p);
    Tensor attack = attack_loss_tensor(params, prompt, suffix, target, &emb);
    Tensor reg = mean_all(p);
    Tensor total = add(attack, scale(reg, cfg.lambda_reg));
    tape.backward(total);

    MaskLossResult result;
    result.total = total.item();
    result.attack = attack.item();
    result.reg = reg.item();
    result.grad_m = m.grad_vector();
    return result;
}

void mask_update(MaskState& state, const std::vector<double>& grad_m) {
    if (grad_m.size() != state.m.size()) {
        throw ContractError("mask_update: gradient length does not match mask");
    }
    for (double g : grad_m) {
        if (!std::isfinite(g)) throw UpdateError("mask_update: non-finite gradient");
    }
    constexpr double kBeta1 = 0.9;
    constexpr double kBeta2 = 0.999;
    constexpr double kEps = 1e-8;
    state.step += 1;
    const double bc1 = 1.0 - std::pow(kBeta1, state.step);
    const double bc2 = 1.0 - std::pow(kBeta2, state.step);
    for (std::size_t i = 0; i < state.m.size(); ++i) {
        state.moment1[i] = kBeta1 * state.moment1[i] + (1.0 - kBeta1) * grad_m[i];
        state.moment2[i] = kBeta2 * state.moment2[i] + (1.0 - kBeta2) * grad_m[i] * grad_m[i];
        const double m_hat = state.moment1[i] / bc1;
        const double v_hat = state.moment2[i] / bc2;
        state.m[i] -= state.lr * m_hat / (std::sqrt(v_hat) + kEps);
    }
}

ImportanceScores attention_importance(const ForwardOutput& out, int suffix_begin,
                                      int suffix_end, int target_begin, int target_end,
                                      int k_layers, double alpha_balance) {
    const int n_layers = static_cast<int>(out.attentions.size());
    if (n_layers == 0) throw ContractError("attention_importance: no attention data");
    const int t = out.attentions[0][0].rows();
    if (suffix_begin >= suffix_end || target_begin >= target_end) {
        throw ContractError("attention_importance: empty span");
    }
    if (suffix_begin < 0 || suffix_end > t || target_begin < 0 || target_end > t) {
        throw ContractError("attention_importance: span outside sequence");
    }
    if (suffix_end > target_begin && target_end > suffix_begin) {
        throw ContractError("attention_importance: spans overlap");
    }
    if (k_layers < 1 || k_layers > n_layers) {
        throw ContractError("attention_importance: k_layers must lie in [1, n_layers]");
    }
    if (alpha_balance < 0.0 || alpha_balance > 1.0) {
        throw ContractError("attention_importance: alpha must lie in [0,1]");
    }

    const int l = suffix_end - suffix_begin;
    ImportanceScores scores;
    scores.alpha_balance = alpha_balance;
    scores.layers_used = k_layers;
    scores.w.assign(l, 0.0);

    // Layer weights ramp linearly with depth over the last K layers.
    double beta_sum = 0.0;
    for (int li = n_layers - k_layers; li < n_layers; ++li) beta_sum += li + 1;
    for (int li = n_layers - k_layers; li < n_layers; ++li) {
        scores.layer_weights.push_back((li + 1) / beta_sum);
    }

    for (int idx = 0; idx < k_layers; ++idx) {
        const int li = n_layers - k_layers + idx;
        const auto& heads = out.attentions[li];
        const int n_heads = static_cast<int>(heads.size());
        std::vector<double> r(l, 0.0), f(l, 0.0);
        for (int i = 0; i < l; ++i) {
            const int col = suffix_begin + i;
            double r_acc = 0.0, f_acc = 0.0;
            for (const Tensor& attn : heads) {
                for (int q = target_begin; q < target_end; ++q) {
                    r_acc += attn.at(static_cast<std::size_t>(q) * t + col);
                }
                for (int q = 0; q < t; ++q) {
                    if (q == col) continue;  // self-attention excluded
                    f_acc += attn.at(static_cast<std::size_t>(q) * t + col);
                }
            }
            r[i] = r_acc / (static_cast<double>(n_heads) * (target_end - target_begin));
            f[i] = f_acc / (static_cast<double>(n_heads) * (t - 1));
        }
        const double beta = scores.layer_weights[idx];
        for (int i = 0; i < l; ++i) {
            scores.w[i] += beta * (alpha_balance * r[i] + (1.0 - alpha_balance) * f[i]);
        }
        scores.target_dependency.push_back(std::move(r));
        scores.global_influence.push_back(std::move(f));
    }
    return scores;
}

MaskInit init_mask(const ImportanceScores& scores, const MlpInit& init, double lr,
                   double tau0) {
    const int l = static_cast<int>(scores.w.size());
    if (l == 0) throw ContractError("init_mask: empty importance scores");
    if (init.hidden < 1) throw ConfigError("init_mask: hidden width must be >= 1");

    MaskInit result;
    // z-score normalization; a zero-variance score vector degenerates to zeros.
    double mean = 0.0;
    for (double v : scores.w) mean += v;
    mean /= l;
    double var = 0.0;
    for (double v : scores.w) var += (v - mean) * (v - mean);
    var /= l;
    std::vector<double> z(l, 0.0);
    if (var > 0.0) {
        const double istd = 1.0 / std::sqrt(var);
        for (int i = 0; i < l; ++i) z[i] = (scores.w[i] - mean) * istd;
    } else {
        result.zscore_degenerate = true;
    }

    // Two linear layers with a rectifier between, weights fixed at their
    // seeded draw. Both layers are nonnegative, which makes the map monotone:
    // higher importance never maps to a lower initial logit.
    Rng rng(init.seed);
    const int h = init.hidden;
    std::vector<double> w1(h), b1(h), w2(h);
    for (int j = 0; j < h; ++j) w1[j] = std::fabs(normal(rng));
    for (int j = 0; j < h; ++j) b1[j] = normal(rng, 0.0, 0.5);
    for (int j = 0; j < h; ++j) w2[j] = std::fabs(normal(rng)) / h;

    MaskState state;
    state.lr = lr;
    state.tau = tau0;
    state.m.resize(l);
    state.moment1.assign(l, 0.0);
    state.moment2.assign(l, 0.0);
    for (int i = 0; i < l; ++i) {
        double acc = 0.0;
        for (int j = 0; j < h; ++j) {
            const double hj = w1[j] * z[i] + b1[j];
            if (hj > 0.0) acc += w2[j] * hj;
        }
        const double noise = init.noise_scale > 0.0 ? normal(rng, 0.0, init.noise_scale) : 0.0;
        state.m[i] = acc + noise;
    }
    result.state = std::move(state);
    return result;
}

PruneOutcome prune_step(const TokenSeq& suffix, const MaskState& state,
                        const ModelParams& params, const TokenSeq& prompt,
                        const TokenSeq& target, const PruneConfig& cfg, int iteration,
                        std::optional<double> current_loss) {
    cfg.validate();
    if (state.length() != static_cast<int>(suffix.size())) {
        throw ContractError("prune_step: mask length does not match suffix");
    }
    PruneOutcome out;
    out.suffix = suffix;
    out.state = state;
    if (iteration % cfg.frequency != 0) return out;
    if (static_cast<int>(suffix.size()) <= cfg.min_length) return out;

    const std::vector<double> p = mask_probabilities(state);
    int k = 0;
    for (int i = 1; i < static_cast<int>(p.size()); ++i) {
        if (p[i] < p[k]) k = i;
    }
    if (p[k] >= cfg.threshold) return out;

    double loss_old;
    if (current_loss) {
        loss_old = *current_loss;
    } else {
        loss_old = attack_loss(params, prompt, suffix, target);
        out.forward_passes += 1;
    }

    TokenSeq pruned = suffix;
    pruned.erase(pruned.begin() + k);
    MaskState next = state;
    next.m.erase(next.m.begin() + k);
    next.moment1.assign(next.m.size(), 0.0);   // optimizer reinitialized
    next.moment2.assign(next.m.size(), 0.0);
    next.step = 0;

    const double loss_new = attack_loss(params, prompt, pruned, target);
    out.forward_passes += 1;

    PruneEvent event;
    event.iteration = iteration;
    event.removed_position = k;
    event.removed_token = suffix[k];
    event.p_value = p[k];
    event.loss_before = loss_old;
    event.loss_after = loss_new;
    if (loss_new > loss_old) {
        event.rolled_back = true;   // out keeps the untouched suffix/state
    } else {
        event.rolled_back = false;
        out.suffix = std::move(pruned);
        out.state = std::move(next);
    }
    out.event = event;
    return out;
}

AttackTrace run_mask_gcg(const ModelParams& params, const TokenSeq& prompt,
                         const TokenSeq& target, const TokenSeq& suffix0,
                         const GcgConfig& gcg_cfg, const PruneConfig& prune_cfg,
                         const TemperatureSchedule& sched, const MlpInit& mlp_init,
                         const SuccessChecker& success, const MaskGcgOptions& options) {
    if (suffix0.empty()) throw ContractError("run_mask_gcg: empty initial suffix");
    gcg_cfg.validate();
    prune_cfg.validate();
    sched.validate();

    Rng rng(gcg_cfg.seed);
    AttackTrace trace;
    TokenSeq suffix = suffix0;
    std::vector<int> original_positions(suffix.size());
    std::iota(original_positions.begin(), original_positions.end(), 0);

    // Attention-guided initialization from one forward over the assembled task.
    TokenSeq seq = prompt;
    seq.insert(seq.end(), suffix.begin(), suffix.end());
    seq.insert(seq.end(), target.begin(), target.end());
    ForwardOutput fwd = forward(params, seq);
    const int s_begin = static_cast<int>(prompt.size());
    const int s_end = s_begin + static_cast<int>(suffix.size());
    const int t_end = s_end + static_cast<int>(target.size());
    const int k_layers =
        options.k_layers > 0 ? options.k_layers : std::min(4, params.config.n_layers);
    ImportanceScores scores =
        attention_importance(fwd, s_begin, s_end, s_end, t_end, k_layers,
                             options.alpha_balance);
    MaskInit init = init_mask(scores, mlp_init, options.mask_lr, anneal_temperature(sched, 0));
    MaskState state = std::move(init.state);

    double cur_loss = attack_loss(params, prompt, suffix, target);

    TraceStep initial;
    initial.step = 0;
    initial.loss = cur_loss;
    initial.suffix = suffix;
    initial.forward_passes = 2;  // importance forward + initial loss
    initial.mask_p = mask_probabilities(state);
    initial.tau = state.tau;
    initial.positions = original_positions;
    trace.steps.push_back(initial);

    for (int i = 1; i <= gcg_cfg.n_steps; ++i) {
        long fw = 0;

        // Mask learning on the continuous masked path.
        state.tau = anneal_temperature(sched, i - 1);
        MaskLossResult mask_loss = total_mask_loss(params, prompt, suffix, target, state,
                                                   prune_cfg);
        mask_update(state, mask_loss.grad_m);
        fw += 1;

        // Token optimization (the host GCG step). Position weights, when the
        // hook is enabled, follow the current mask probabilities.
        GcgConfig step_cfg = gcg_cfg;
        std::vector<double> p = mask_probabilities(state);
        if (options.use_position_weights) {
            double sum = 0.0;
            for (double v : p) sum += v;
            std::vector<double> weights(p.size());
            for (std::size_t j = 0; j < p.size(); ++j) weights[j] = p[j] / sum;
            step_cfg.position_weights = std::move(weights);
        }
        StepResult step = gcg_step(params, prompt, target, suffix, step_cfg, rng);
        suffix = step.suffix;
        cur_loss = step.loss;
        fw += 1 + step.evaluated;

        // Mask pruning with rollback.
        PruneOutcome prune = prune_step(suffix, state, params, prompt, target, prune_cfg, i,
                                        cur_loss);
        fw += prune.forward_passes;
        if (prune.event && !prune.event->rolled_back) {
            suffix = prune.suffix;
            state = prune.state;
            cur_loss = prune.event->loss_after;
            p = mask_probabilities(state);
            original_positions.erase(original_positions.begin() +
                                     prune.event->removed_position);
        }

        SuccessCheck check = success ? success(suffix) : SuccessCheck{false, 0};
        fw += check.forward_passes;

        TraceStep rec;
        rec.step = i;
        rec.loss = cur_loss;
        rec.suffix = suffix;
        rec.forward_passes = fw;
        rec.mask_p = p;
        rec.tau = state.tau;
        rec.positions = original_positions;
        rec.prune = prune.event;
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
