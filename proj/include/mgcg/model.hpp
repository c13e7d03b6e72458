#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mgcg/tensor.hpp"
#include "mgcg/tokenizer.hpp"

namespace mgcg {

struct ModelConfig {
    int vocab_size = 130;
    int d_model = 64;
    int n_layers = 2;
    int n_heads = 4;
    int max_seq_len = 128;
    int ffn_mult = 4;

    void validate() const;
    int head_dim() const { return d_model / n_heads; }
};

struct LayerParams {
    Tensor ln1_gain, ln1_bias;
    Tensor wq, wk, wv, wo;        // each [d,d]
    Tensor ln2_gain, ln2_bias;
    Tensor w_ff1;                 // [d, ffn_mult*d]
    Tensor w_ff2;                 // [ffn_mult*d, d]
};

// Micro causal decoder-only transformer. The output projection is tied to the
// embedding matrix; positional embeddings are learned absolute and are added
// after any masking of the token embeddings.
struct ModelParams {
    ModelConfig config;
    Tensor embedding;             // [V,d], also the output projection
    Tensor positional;            // [max_seq_len,d]
    std::vector<LayerParams> layers;
    Tensor lnf_gain, lnf_bias;

    static ModelParams init(const ModelConfig& cfg, Rng& rng, double init_std = 0.08);

    // Tensors in checkpoint declaration order.
    std::vector<Tensor*> parameters();
    std::vector<const Tensor*> parameters() const;

    ModelParams clone() const;
    void set_requires_grad(bool flag);
    void zero_grad();
};

struct ForwardOutput {
    Tensor logits;                                 // [T,V]
    std::vector<std::vector<Tensor>> attentions;   // [layer][head], each [T,T]
};

ForwardOutput forward(const ModelParams& params, const TokenSeq& tokens);

// Same semantics as forward after the embedding lookup; gradients flow to the
// supplied embeddings when a tape is active.
ForwardOutput forward_embedded(const ModelParams& params, const Tensor& embeddings);

// Attack loss (cross-entropy of the target continuation): the scored sequence
// is prompt || suffix || target and the loss is the mean -log P(target_j | ...)
// over target positions. suffix_embedding, when given, replaces the embedding
// lookup of the suffix tokens (one-hot relaxations, masked embeddings).
Tensor attack_loss_tensor(const ModelParams& params, const TokenSeq& prompt,
                          const TokenSeq& suffix, const TokenSeq& target,
                          const Tensor* suffix_embedding = nullptr);
double attack_loss(const ModelParams& params, const TokenSeq& prompt,
                   const TokenSeq& suffix, const TokenSeq& target);

// Gradient of the attack loss with respect to a one-hot relaxation of each
// suffix position; row i corresponds to suffix position i.
Tensor onehot_gradient(const ModelParams& params, const TokenSeq& prompt,
                       const TokenSeq& suffix, const TokenSeq& target);

// Mean next-token cross-entropy of tokens [from, end) given their prefixes.
// label_smoothing_eps > 0 smooths the targets (trainer use; 0 = exact).
Tensor sequence_loss_tensor(const ModelParams& params, const TokenSeq& tokens, int from,
                            double label_smoothing_eps = 0.0);

struct GenerateResult {
    TokenSeq tokens;        // generated continuation (prompt excluded)
    bool truncated = false; // hit the context window before max_new/eot
};

// Greedy argmax decoding; stops at max_new tokens or at eot_id (pass -1 to
// disable the stop token).
GenerateResult generate(const ModelParams& params, const TokenSeq& prompt, int max_new,
                        int eot_id);

// Checkpoint: binary little-endian, header {magic "MGCG", version u32, config
// fields u32}, then tensors in declaration order as f64 arrays. A config.json
// mirror is written next to the checkpoint.
void save_checkpoint(const std::string& path, const ModelParams& params);
ModelParams load_checkpoint(const std::string& path);

// Process-wide count of transformer forward passes (each generate step counts
// as one). Used by the harness to verify trace accounting.
std::uint64_t forward_pass_count();
void reset_forward_pass_count();

}  // namespace mgcg
