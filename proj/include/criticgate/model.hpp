#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "criticgate/matrix.hpp"
#include "criticgate/tokenizer.hpp"

namespace criticgate {

struct ModelConfig {
    int n_layers = 2;
    int d_model = 64;
    int n_heads = 4;
    int d_ff = 256;
    int max_ctx = 512;
    int vocab_size = Tokenizer::kVocabSize;
    int lora_rank = 16;
    double lora_alpha = 32.0;
    uint64_t init_seed = 5;

    int head_dim() const { return d_model / n_heads; }

    void validate() const {
        if (n_layers < 1 || d_model < 1 || n_heads < 1 || d_ff < 1 || max_ctx < 1)
            throw std::invalid_argument("ModelConfig: non-positive dimension");
        if (d_model % n_heads != 0)
            throw std::invalid_argument("ModelConfig: d_model not divisible by n_heads");
        if (lora_rank < 1 || lora_rank > d_model)
            throw std::invalid_argument("ModelConfig: bad lora rank");
    }

    bool operator==(const ModelConfig&) const = default;
};

// Low-rank update on one projection matrix: dW = (alpha/r) * B * A.
// B starts at zero so an untrained adapter is an exact no-op.
struct LoraAdapter {
    Matrix B;  // d_out x r
    Matrix A;  // r x d_in
    int rank = 0;
    double alpha = 0.0;

    double scale() const { return alpha / rank; }
};

// Adapters for the four attention projections of one layer.
struct AttnLora {
    LoraAdapter q, k, v, o;
};

struct LayerWeights {
    Matrix ln1_g, ln1_b;  // 1 x d
    Matrix wq, wk, wv, wo;  // d x d
    Matrix ln2_g, ln2_b;
    Matrix w1;  // d_ff x d
    Matrix w2;  // d x d_ff
};

// Micro-transformer critic: frozen base weights plus trainable LoRA
// adapters on W_{q,k,v,o}. Pre-LN blocks, GELU FFN, learned positional
// embeddings, untied unembedding. Immutable once loaded; safe to share
// across concurrent forward calls.
struct CriticModel {
    ModelConfig cfg;
    Matrix tok_emb;  // vocab x d
    Matrix pos_emb;  // max_ctx x d
    std::vector<LayerWeights> layers;
    Matrix lnf_g, lnf_b;
    Matrix unemb;  // vocab x d
    std::vector<AttnLora> adapters;
};

struct SequenceTooLongError : std::runtime_error {
    int required;
    int available;
    SequenceTooLongError(int req, int avail)
        : std::runtime_error("input of " + std::to_string(req) +
                             " tokens exceeds max_ctx " + std::to_string(avail)),
          required(req), available(avail) {}
};

struct PrefillResult {
    std::vector<double> logits;  // length vocab_size, final position only
    int tokens_processed = 0;
};

// Activation cache for one sequence; reused across calls to avoid realloc
// churn in the training loop.
struct ForwardCache {
    int L = 0;
    struct LayerCache {
        std::vector<double> xhat1, rstd1;       // LN1: normalized input (L*d), 1/std (L)
        std::vector<double> x_ln1;              // LN1 output (L*d)
        std::vector<double> q, k, v;            // L*d each
        std::vector<double> aq, ak, av, ao;     // LoRA intermediates A*x (L*r)
        std::vector<double> probs;              // n_heads*L*L attention weights
        std::vector<double> ctx;                // L*d
        std::vector<double> h_mid;              // residual after attention (L*d)
        std::vector<double> xhat2, rstd2, x_ln2;
        std::vector<double> u1, act;            // L*d_ff
        std::vector<double> h_out;              // L*d
    };
    std::vector<double> h0;  // embeddings (L*d)
    std::vector<LayerCache> layer;
    std::vector<double> lnf_xhat;  // final-position LN cache (d)
    double lnf_rstd = 0.0;
};

// Gradients w.r.t. adapter parameters only (base is frozen).
struct AdapterGrads {
    struct Site {
        Matrix gB, gA;
    };
    struct Layer {
        Site q, k, v, o;
    };
    std::vector<Layer> layers;

    static AdapterGrads zeros_like(const CriticModel& m);
    void zero();
    void scale(double s);
    void add(const AdapterGrads& other);
};

// Construct the frozen base ("pretrained" stand-in) plus zero-initialized
// adapters, deterministically from cfg.init_seed.
CriticModel build_model(const ModelConfig& cfg);

// W = W0 + (alpha/r) * B * A. Shape-checked.
Matrix merge_adapter(const Matrix& w0, const LoraAdapter& adapter);

// Bake all adapters into the base weights and drop them; used by the
// merged-vs-side-path equivalence oracle.
CriticModel merge_all_adapters(const CriticModel& m);

// Single causal forward pass over the whole input; logits at the final
// position only. No autoregressive loop, no truncation.
PrefillResult forward_prefill(const CriticModel& m, std::span<const TokenId> tokens,
                              ForwardCache* cache = nullptr);

// Forward + cross-entropy at the final token + backward into adapter grads
// (accumulated). Returns the per-example loss -log P(label | tokens).
double loss_and_grad(const CriticModel& m, std::span<const TokenId> tokens, TokenId label,
                     AdapterGrads& grads, ForwardCache& cache);

// Flat views over adapter parameters / their gradients, in a stable order.
std::vector<Matrix*> adapter_param_ptrs(CriticModel& m);
std::vector<const Matrix*> adapter_param_ptrs(const CriticModel& m);
std::vector<Matrix*> grad_ptrs(AdapterGrads& g);

}  // namespace criticgate
