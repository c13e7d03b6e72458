#include "mgcg/model.hpp"

#include <atomic>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace mgcg {

namespace {

std::atomic<std::uint64_t> g_forward_calls{0};

struct BlocksOut {
    Tensor hidden;                                 // [T,d] after final layer norm
    std::vector<std::vector<Tensor>> attentions;   // [layer][head]
};

// Everything up to (and including) the final layer norm. One call here is one
// forward pass for accounting purposes.
BlocksOut run_blocks(const ModelParams& params, const Tensor& emb) {
    const ModelConfig& cfg = params.config;
    if (emb.rank() != 2 || emb.cols() != cfg.d_model) {
        throw DimensionError("forward_embedded: embeddings " + emb.shape_string() +
                             " do not match d_model " + std::to_string(cfg.d_model));
    }
    const int t = emb.rows();
    if (t > cfg.max_seq_len) {
        throw CapacityError("sequence length " + std::to_string(t) + " exceeds max_seq_len " +
                            std::to_string(cfg.max_seq_len));
    }
    if (t == 0) throw ContractError("forward: empty sequence");
    g_forward_calls.fetch_add(1, std::memory_order_relaxed);

    const int dh = cfg.head_dim();
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    Tensor x = add(emb, slice_rows(params.positional, 0, t));
    BlocksOut out;
    out.attentions.reserve(cfg.n_layers);
    for (const LayerParams& layer : params.layers) {
        Tensor h = layer_norm_rows(x, layer.ln1_gain, layer.ln1_bias);
        Tensor q = matmul(h, layer.wq);
        Tensor k = matmul(h, layer.wk);
        Tensor v = matmul(h, layer.wv);
        std::vector<Tensor> head_ctx;
        std::vector<Tensor> head_attn;
        head_ctx.reserve(cfg.n_heads);
        head_attn.reserve(cfg.n_heads);
        for (int hh = 0; hh < cfg.n_heads; ++hh) {
            Tensor qh = slice_cols(q, hh * dh, dh);
            Tensor kh = slice_cols(k, hh * dh, dh);
            Tensor vh = slice_cols(v, hh * dh, dh);
            Tensor scores = causal_mask(scale(matmul_transb(qh, kh), inv_sqrt_dh));
            Tensor attn = softmax_rows(scores);
            head_attn.push_back(attn);
            head_ctx.push_back(matmul(attn, vh));
        }
        out.attentions.push_back(std::move(head_attn));
        x = add(x, matmul(concat_cols(head_ctx), layer.wo));
        Tensor h2 = layer_norm_rows(x, layer.ln2_gain, layer.ln2_bias);
        x = add(x, matmul(relu(matmul(h2, layer.w_ff1)), layer.w_ff2));
    }
    out.hidden = layer_norm_rows(x, params.lnf_gain, params.lnf_bias);
    return out;
}

void check_token_range(const TokenSeq& tokens, int vocab_size, const char* what) {
    for (int id : tokens) {
        if (id < 0 || id >= vocab_size) {
            throw IndexError(std::string(what) + ": token " + std::to_string(id) +
                             " outside vocabulary of size " + std::to_string(vocab_size));
        }
    }
}

}  // namespace

void ModelConfig::validate() const {
    if (vocab_size < 1 || d_model < 1 || n_layers < 1 || n_heads < 1 || max_seq_len < 1 ||
        ffn_mult < 1) {
        throw ConfigError("model config: all counts must be >= 1");
    }
    if (d_model % n_heads != 0) {
        throw ConfigError("model config: d_model " + std::to_string(d_model) +
                          " not divisible by n_heads " + std::to_string(n_heads));
    }
}

ModelParams ModelParams::init(const ModelConfig& cfg, Rng& rng, double init_std) {
    cfg.validate();
    ModelParams p;
    p.config = cfg;
    p.embedding = Tensor::randn({cfg.vocab_size, cfg.d_model}, rng, init_std);
    p.positional = Tensor::randn({cfg.max_seq_len, cfg.d_model}, rng, init_std);
    for (int l = 0; l < cfg.n_layers; ++l) {
        LayerParams layer;
        layer.ln1_gain = Tensor::full({cfg.d_model}, 1.0);
        layer.ln1_bias = Tensor::zeros({cfg.d_model});
        layer.wq = Tensor::randn({cfg.d_model, cfg.d_model}, rng, init_std);
        layer.wk = Tensor::randn({cfg.d_model, cfg.d_model}, rng, init_std);
        layer.wv = Tensor::randn({cfg.d_model, cfg.d_model}, rng, init_std);
        layer.wo = Tensor::randn({cfg.d_model, cfg.d_model}, rng, init_std);
        layer.ln2_gain = Tensor::full({cfg.d_model}, 1.0);
        layer.ln2_bias = Tensor::zeros({cfg.d_model});
        layer.w_ff1 = Tensor::randn({cfg.d_model, cfg.ffn_mult * cfg.d_model}, rng, init_std);
        layer.w_ff2 = Tensor::randn({cfg.ffn_mult * cfg.d_model, cfg.d_model}, rng, init_std);
        p.layers.push_back(std::move(layer));
    }
    p.lnf_gain = Tensor::full({cfg.d_model}, 1.0);
    p.lnf_bias = Tensor::zeros({cfg.d_model});
    return p;
}

std::vector<Tensor*> ModelParams::parameters() {
    std::vector<Tensor*> out = {&embedding, &positional};
    for (LayerParams& l : layers) {
        out.insert(out.end(), {&l.ln1_gain, &l.ln1_bias, &l.wq, &l.wk, &l.wv, &l.wo,
                               &l.ln2_gain, &l.ln2_bias, &l.w_ff1, &l.w_ff2});
    }
    out.push_back(&lnf_gain);
    out.push_back(&lnf_bias);
    return out;
}

std::vector<const Tensor*> ModelParams::parameters() const {
    auto mutable_list = const_cast<ModelParams*>(this)->parameters();
    return std::vector<const Tensor*>(mutable_list.begin(), mutable_list.end());
}

ModelParams ModelParams::clone() const {
    ModelParams out;
    out.config = config;
    out.embedding = embedding.clone_detached();
    out.positional = positional.clone_detached();
    for (const LayerParams& l : layers) {
        LayerParams c;
        c.ln1_gain = l.ln1_gain.clone_detached();
        c.ln1_bias = l.ln1_bias.clone_detached();
        c.wq = l.wq.clone_detached();
        c.wk = l.wk.clone_detached();
        c.wv = l.wv.clone_detached();
        c.wo = l.wo.clone_detached();
        c.ln2_gain = l.ln2_gain.clone_detached();
        c.ln2_bias = l.ln2_bias.clone_detached();
        c.w_ff1 = l.w_ff1.clone_detached();
        c.w_ff2 = l.w_ff2.clone_detached();
        out.layers.push_back(std::move(c));
    }
    out.lnf_gain = lnf_gain.clone_detached();
    out.lnf_bias = lnf_bias.clone_detached();
    return out;
}

void ModelParams::set_requires_grad(bool flag) {
    for (Tensor* t : parameters()) t->set_requires_grad(flag);
}

void ModelParams::zero_grad() {
    for (Tensor* t : parameters()) t->zero_grad();
}

ForwardOutput forward(const ModelParams& params, const TokenSeq& tokens) {
    check_token_range(tokens, params.config.vocab_size, "forward");
    return forward_embedded(params, lookup_rows(params.embedding, tokens));
}

ForwardOutput forward_embedded(const ModelParams& params, const Tensor& embeddings) {
    BlocksOut blocks = run_blocks(params, embeddings);
    ForwardOutput out;
    out.logits = matmul_transb(blocks.hidden, params.embedding);
    out.attentions = std::move(blocks.attentions);
    return out;
}

Tensor attack_loss_tensor(const ModelParams& params, const TokenSeq& prompt,
                          const TokenSeq& suffix, const TokenSeq& target,
                          const Tensor* suffix_embedding) {
    if (suffix.empty()) throw ContractError("attack_loss: empty suffix");
    if (target.empty()) throw ContractError("attack_loss: empty target");
    check_token_range(prompt, params.config.vocab_size, "attack_loss prompt");
    check_token_range(suffix, params.config.vocab_size, "attack_loss suffix");
    check_token_range(target, params.config.vocab_size, "attack_loss target");

    std::vector<Tensor> parts;
    if (!prompt.empty()) parts.push_back(lookup_rows(params.embedding, prompt));
    if (suffix_embedding != nullptr) {
        if (suffix_embedding->rows() != static_cast<int>(suffix.size())) {
            throw DimensionError("attack_loss: suffix embedding rows " +
                                 suffix_embedding->shape_string() + " do not match suffix length " +
                                 std::to_string(suffix.size()));
        }
        parts.push_back(*suffix_embedding);
    } else {
        parts.push_back(lookup_rows(params.embedding, suffix));
    }
    parts.push_back(lookup_rows(params.embedding, target));
    Tensor emb = concat_rows(parts);

    BlocksOut blocks = run_blocks(params, emb);
    const int target_start = static_cast<int>(prompt.size() + suffix.size());
    const int m = static_cast<int>(target.size());
    // Row t-1 predicts token t, so the logits that score the target live on
    // rows [target_start-1, target_start+m-1). Only those rows hit the
    // (tied) output projection.
    Tensor rows = slice_rows(blocks.hidden, target_start - 1, m);
    Tensor logits = matmul_transb(rows, params.embedding);
    return cross_entropy(logits, target);
}

double attack_loss(const ModelParams& params, const TokenSeq& prompt, const TokenSeq& suffix,
                   const TokenSeq& target) {
    return attack_loss_tensor(params, prompt, suffix, target).item();
}

Tensor sequence_loss_tensor(const ModelParams& params, const TokenSeq& tokens, int from,
                            double label_smoothing_eps) {
    if (from < 1 || from >= static_cast<int>(tokens.size())) {
        throw ContractError("sequence_loss: scoring span is empty");
    }
    check_token_range(tokens, params.config.vocab_size, "sequence_loss");
    BlocksOut blocks = run_blocks(params, lookup_rows(params.embedding, tokens));
    const int m = static_cast<int>(tokens.size()) - from;
    Tensor rows = slice_rows(blocks.hidden, from - 1, m);
    Tensor logits = matmul_transb(rows, params.embedding);
    TokenSeq targets(tokens.begin() + from, tokens.end());
    if (label_smoothing_eps > 0.0) {
        return cross_entropy_smoothed(logits, targets, label_smoothing_eps);
    }
    return cross_entropy(logits, targets);
}

Tensor onehot_gradient(const ModelParams& params, const TokenSeq& prompt,
                       const TokenSeq& suffix, const TokenSeq& target) {
    if (suffix.empty() || target.empty()) {
        throw ContractError("onehot_gradient: suffix and target must be nonempty");
    }
    const int l = static_cast<int>(suffix.size());
    const int v = params.config.vocab_size;
    check_token_range(suffix, v, "onehot_gradient suffix");

    GradTape tape;
    Tensor onehots = Tensor::zeros({l, v});
    for (int i = 0; i < l; ++i) onehots.at(static_cast<std::size_t>(i) * v + suffix[i]) = 1.0;
    onehots.set_requires_grad(true);
    Tensor suffix_emb = matmul(onehots, params.embedding);
    Tensor loss = attack_loss_tensor(params, prompt, suffix, target, &suffix_emb);
    tape.backward(loss);
    return Tensor::from_data({l, v}, onehots.grad_vector());
}

GenerateResult generate(const ModelParams& params, const TokenSeq& prompt, int max_new,
                        int eot_id) {
    if (prompt.empty()) throw ContractError("generate: empty prompt");
    check_token_range(prompt, params.config.vocab_size, "generate");
    GenerateResult result;
    TokenSeq seq = prompt;
    for (int step = 0; step < max_new; ++step) {
        if (static_cast<int>(seq.size()) >= params.config.max_seq_len) {
            result.truncated = true;
            break;
        }
        BlocksOut blocks = run_blocks(params, lookup_rows(params.embedding, seq));
        Tensor last = slice_rows(blocks.hidden, static_cast<int>(seq.size()) - 1, 1);
        Tensor logits = matmul_transb(last, params.embedding);
        int best = 0;
        for (int j = 1; j < params.config.vocab_size; ++j) {
            if (logits.at(j) > logits.at(best)) best = j;
        }
        seq.push_back(best);
        result.tokens.push_back(best);
        if (best == eot_id) break;
    }
    return result;
}

// ---- checkpoint io ----------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'M', 'G', 'C', 'G'};
constexpr std::uint32_t kVersion = 1;

void write_u32(std::ofstream& out, std::uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint32_t read_u32(std::ifstream& in) {
    std::uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const ModelParams& params) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write checkpoint: " + path);
    out.write(kMagic, 4);
    write_u32(out, kVersion);
    const ModelConfig& c = params.config;
    for (int field : {c.vocab_size, c.d_model, c.n_layers, c.n_heads, c.max_seq_len, c.ffn_mult}) {
        write_u32(out, static_cast<std::uint32_t>(field));
    }
    for (const Tensor* t : params.parameters()) {
        out.write(reinterpret_cast<const char*>(t->data()),
                  static_cast<std::streamsize>(t->numel() * sizeof(double)));
    }
    if (!out) throw ConfigError("checkpoint write failed: " + path);

    nlohmann::json j = {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},
                        {"n_layers", c.n_layers},     {"n_heads", c.n_heads},
                        {"max_seq_len", c.max_seq_len}, {"ffn_mult", c.ffn_mult}};
    std::filesystem::path mirror = std::filesystem::path(path).parent_path() / "config.json";
    std::ofstream jm(mirror);
    if (jm) jm << j.dump(2) << "\n";
}

ModelParams load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot read checkpoint: " + path);
    char magic[4];
    in.read(magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0) {
        throw ConfigError("bad checkpoint magic in " + path);
    }
    if (read_u32(in) != kVersion) throw ConfigError("unsupported checkpoint version");
    ModelConfig c;
    c.vocab_size = static_cast<int>(read_u32(in));
    c.d_model = static_cast<int>(read_u32(in));
    c.n_layers = static_cast<int>(read_u32(in));
    c.n_heads = static_cast<int>(read_u32(in));
    c.max_seq_len = static_cast<int>(read_u32(in));
    c.ffn_mult = static_cast<int>(read_u32(in));
    c.validate();
    Rng dummy(0);
    ModelParams params = ModelParams::init(c, dummy);
    for (Tensor* t : params.parameters()) {
        in.read(reinterpret_cast<char*>(t->data()),
                static_cast<std::streamsize>(t->numel() * sizeof(double)));
    }
    if (!in) throw ConfigError("checkpoint truncated: " + path);
    return params;
}

std::uint64_t forward_pass_count() {
    return g_forward_calls.load(std::memory_order_relaxed);
}

void reset_forward_pass_count() {
    g_forward_calls.store(0, std::memory_order_relaxed);
}

}  // namespace mgcg
