#pragma once

#include <string>
#include <vector>

#include "cvid/denoiser.hpp"

namespace cvid {

struct ControlSequence {
    Tensor maps{std::vector<int64_t>{0}};  // [F, 1, H', W'], values in [0,1]
    std::string kind = "edge";             // edge | sketch | pose-raster
};

// ControlNet-style side branch at half the denoiser width. Registers its
// parameters (prefix "guide.") into the denoiser's ParamSet so checkpoints
// and the frozen-model hash cover both networks. Residual output projections
// are zero-initialized, so an untrained branch is exactly transparent.
class StructureGuide {
  public:
    StructureGuide(Denoiser& denoiser, Rng& rng);

    int64_t width() const { return den_.config().hidden / 2; }

    // Graph-level assembly used by training: one residual node per denoiser
    // block, each [F*S, hidden]. z_tokens is the shared [F*S, C] input node.
    std::vector<int> build_residuals(Graph& g, const ControlSequence& ctrl, int z_tokens, int t,
                                     const PromptEmbedding& prompt);

    // Inference wrappers
    std::vector<Tensor> encode_control(const ControlSequence& ctrl, const VideoLatent& z_t, int t,
                                       const PromptEmbedding& prompt);
    DenoiseResult guide_denoise(const VideoLatent& z_t, int t, const PromptEmbedding& prompt,
                                const ControlSequence& ctrl);

    Denoiser& denoiser() { return den_; }

  private:
    Denoiser& den_;
};

void validate_control(const ControlSequence& ctrl, const DenoiserConfig& cfg);

}  // namespace cvid
