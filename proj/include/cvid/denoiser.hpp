#pragma once

#include <functional>
#include <string>
#include <vector>

#include "cvid/autodiff.hpp"
#include "cvid/rng.hpp"
#include "cvid/schedule.hpp"
#include "cvid/tensor.hpp"

namespace cvid {

struct DenoiserConfig {
    int64_t frames = 8;
    int64_t channels = 48;  // 3 * patch^2 so the autoencoder is a bijection
    int64_t height = 8;     // latent grid
    int64_t width = 8;
    int64_t hidden = 48;
    int heads = 2;
    int blocks = 2;
    int64_t prompt_dim = 16;
    int64_t patch = 4;
    int lora_rank = 4;
    int64_t vocab = 8;
    int64_t mlp_mult = 2;

    int64_t positions() const { return height * width; }
    int64_t pixel_h() const { return height * patch; }
    int64_t pixel_w() const { return width * patch; }
    void validate() const;  // throws std::domain_error on bad fields
};

struct PromptEmbedding {
    Tensor tokens{std::vector<int64_t>{0}};  // [L, k]
    int custom_token_index = -1;             // position bound to the tuned token param
    std::vector<std::string> token_labels;   // size L, word label per token
};

struct LoRAAdapter {
    Tensor A{std::vector<int64_t>{0}};  // [r, k]
    Tensor B{std::vector<int64_t>{0}};  // [d, r], zero before training
};

// (W0 + B A) x for a single vector x of dim k
Tensor lora_linear(const Tensor& x, const Tensor& W0, const LoRAAdapter& adapter);

struct AttentionMaps {
    std::vector<Tensor> self_maps;   // per block, [F, heads, S, 2S]
    std::vector<Tensor> cross_maps;  // per block, [F, heads, S, L]
};

struct DenoiseResult {
    Tensor eps{std::vector<int64_t>{0}};  // shape of z_t
    AttentionMaps maps;
};

// [F,C,H,W] <-> [F*H*W, C]; token (f, y*W + x) carries the channel vector
Tensor tokens_from_latent(const Tensor& z);
Tensor latent_from_tokens(const Tensor& tokens, int64_t F, int64_t C, int64_t H, int64_t W);

// classic transformer sin/cos features of a scalar position
Tensor sinusoidal_embedding(double pos, int64_t dim);

// Fixed orthonormal per-patch transform; decode is the exact inverse. The
// basis is seeded by an internal constant so every process agrees on it.
class PatchAutoencoder {
  public:
    explicit PatchAutoencoder(int64_t patch);
    Tensor encode(const Tensor& frames) const;  // [F,3,H',W'] -> [F,C,H,W]
    Tensor decode(const Tensor& latent) const;  // exact inverse
    int64_t patch() const { return patch_; }
    int64_t channels() const { return basis_.dim(0); }

  private:
    int64_t patch_;
    Tensor basis_;  // [C, C] orthonormal rows
};

// Mutates per-block self-attention weights [F, heads, S, 2S] during a no-grad
// forward (attention remix); never invoked on training graphs.
using SelfAttnHook = std::function<void(int block, Tensor& weights)>;
// Same contract for the prompt cross-attention weights [F, heads, S, L].
using CrossAttnHook = std::function<void(int block, Tensor& weights)>;

class Denoiser {
  public:
    Denoiser(const DenoiserConfig& cfg, Rng& rng);

    const DenoiserConfig& config() const { return cfg_; }
    ParamSet& params() { return params_; }
    const ParamSet& params() const { return params_; }
    const PatchAutoencoder& autoencoder() const { return ae_; }

    struct BuildSpec {
        int t = 1;
        const PromptEmbedding* prompt = nullptr;
        const std::vector<int>* residuals = nullptr;  // node per block, [F*S, hidden]
        AttentionMaps* maps_out = nullptr;            // capture; no-grad graphs only
        const SelfAttnHook* self_hook = nullptr;      // no-grad graphs only
        const CrossAttnHook* cross_hook = nullptr;    // no-grad graphs only
        bool use_lora = true;
    };

    // Builds eps prediction in token layout [F*S, C] into g and returns its
    // node id. z_tokens is a node of shape [F*S, C].
    int build_eps(Graph& g, int z_tokens, const BuildSpec& spec);

    // Inference wrapper: full [F,C,H,W] in/out, gradients off, maps returned.
    DenoiseResult denoise(const VideoLatent& z_t, int t, const PromptEmbedding& prompt,
                          const std::vector<Tensor>* residuals = nullptr,
                          const SelfAttnHook* self_hook = nullptr,
                          const CrossAttnHook* cross_hook = nullptr, bool use_lora = true);

    Tensor encode(const Tensor& frames) const { return ae_.encode(frames); }
    Tensor decode(const Tensor& latent) const { return ae_.decode(latent); }

    // prompt from word ids out of the embedding table; custom_index, if in
    // range, marks the position replaced by the tuned token param
    PromptEmbedding make_prompt(const std::vector<int64_t>& word_ids,
                                const std::vector<std::string>& labels,
                                int custom_index = -1) const;

    // sparse-causal kv row indices: frame f attends to frame 0 then f-1
    std::vector<int64_t> sparse_causal_indices() const;

  private:
    DenoiserConfig cfg_;
    ParamSet params_;
    PatchAutoencoder ae_;
};

}  // namespace cvid
