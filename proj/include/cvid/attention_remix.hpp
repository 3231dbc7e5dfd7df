#pragma once

#include <string>
#include <utility>
#include <vector>

#include "cvid/archive.hpp"
#include "cvid/structure_guide.hpp"

namespace cvid {

// Attention recorded during guided inversion: steps[t-1] holds every block's
// self and cross maps for timestep t, plus the final inverted latent.
struct AttentionStore {
    int total_steps = 0;
    std::vector<AttentionMaps> steps;
    VideoLatent z_T;

    void validate() const;  // T entries, consistent layer sets, row-stochastic 1e-5
};

struct RemixConfig {
    double tau = 0.3;
    int t_lo = 0;  // 0 picks the default window start (T+1)/2; t_lo > T disables fusion
    std::vector<std::string> target_words;

    int resolve_t_lo(int T) const { return t_lo == 0 ? (T + 1) / 2 : t_lo; }
    void validate() const;
};

// Position of a labeled word; unknown labels raise an error listing the
// available ones.
int64_t word_index(const PromptEmbedding& prompt, const std::string& label);

// M[i] = 1 where normalized[i] >= tau
Tensor threshold_mask(const Tensor& normalized, double tau);

// Mean over layers and heads of one word's attention column, per-frame
// max-normalized to [0,1]. cross_maps are [F, heads, S, L] per layer.
Tensor word_activation(const std::vector<Tensor>& cross_maps, int64_t word);

Tensor get_mask(const AttentionStore& store, int t, const PromptEmbedding& prompt,
                const std::string& word, double tau);
// Union of the per-word masks; empty word list gives an all-zero mask.
Tensor get_mask_union(const AttentionStore& store, int t, const PromptEmbedding& prompt,
                      const std::vector<std::string>& words, double tau);

// s_final = M (.) s_edit + (1-M) (.) s_src with rows renormalized; mask [F,S]
// selects per query position.
Tensor remix_self_attention(const Tensor& s_src, const Tensor& s_edit, const Tensor& mask);

// DDIM inversion t = 1..T under structure guidance, recording every block's
// attention at each step.
std::pair<VideoLatent, AttentionStore> invert_with_guidance(StructureGuide& guide,
                                                            const VideoLatent& z0,
                                                            const ControlSequence& ctrl,
                                                            const PromptEmbedding& prompt,
                                                            const NoiseSchedule& sched);

// DDIM generation t = T..1 with self-attention remixed inside [t_lo, T] and
// cross-attention of retained words replayed from the store. prompt_source
// defaults to prompt_target (identity edit).
VideoLatent generate_with_remix(StructureGuide& guide, const VideoLatent& z_T,
                                const AttentionStore& store, const ControlSequence& ctrl_edit,
                                const PromptEmbedding& prompt_target, const RemixConfig& cfg,
                                const NoiseSchedule& sched,
                                const PromptEmbedding* prompt_source = nullptr);

Archive store_to_archive(const AttentionStore& store);
AttentionStore store_from_archive(const Archive& a);

}  // namespace cvid
