#include "cvid/attention_remix.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace cvid {

namespace {

void check_row_stochastic(const Tensor& m, const char* what) {
    int64_t nk = m.dim(m.ndim() - 1);
    int64_t rows = m.numel() / nk;
    for (int64_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (int64_t j = 0; j < nk; ++j) s += m.data[r * nk + j];
        if (std::abs(s - 1.0) > 1e-5)
            throw std::runtime_error(std::string(what) + ": stored map row is not stochastic");
    }
}

void renormalize_rows(Tensor& m) {
    int64_t nk = m.dim(m.ndim() - 1);
    int64_t rows = m.numel() / nk;
    for (int64_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (int64_t j = 0; j < nk; ++j) s += m.data[r * nk + j];
        if (s > 0.0)
            for (int64_t j = 0; j < nk; ++j) m.data[r * nk + j] /= s;
    }
}

}  // namespace

void AttentionStore::validate() const {
    if (total_steps < 1) throw std::domain_error("AttentionStore: total_steps must be >= 1");
    if ((int)steps.size() != total_steps)
        throw std::runtime_error("AttentionStore: entry count disagrees with total_steps");
    size_t blocks = steps.front().self_maps.size();
    for (const AttentionMaps& m : steps) {
        if (m.self_maps.size() != blocks || m.cross_maps.size() != blocks)
            throw std::runtime_error("AttentionStore: layer set differs across timesteps");
        for (const Tensor& t : m.self_maps) check_row_stochastic(t, "AttentionStore self");
        for (const Tensor& t : m.cross_maps) check_row_stochastic(t, "AttentionStore cross");
    }
}

void RemixConfig::validate() const {
    if (!(tau > 0.0 && tau < 1.0)) throw std::domain_error("RemixConfig: tau must lie in (0,1)");
    if (t_lo < 0) throw std::domain_error("RemixConfig: t_lo must be >= 1 (or 0 for the default)");
}

int64_t word_index(const PromptEmbedding& prompt, const std::string& label) {
    for (size_t i = 0; i < prompt.token_labels.size(); ++i)
        if (prompt.token_labels[i] == label) return (int64_t)i;
    std::ostringstream os;
    os << "unknown word label '" << label << "'; available:";
    for (const std::string& l : prompt.token_labels) os << " " << l;
    throw std::invalid_argument(os.str());
}

Tensor threshold_mask(const Tensor& normalized, double tau) {
    Tensor m(normalized.shape);
    for (int64_t i = 0; i < m.numel(); ++i) m[i] = normalized[i] >= tau ? 1.0 : 0.0;
    return m;
}

Tensor word_activation(const std::vector<Tensor>& cross_maps, int64_t word) {
    if (cross_maps.empty()) throw std::invalid_argument("word_activation: no maps");
    const Tensor& first = cross_maps.front();
    if (first.ndim() != 4) throw std::invalid_argument("word_activation: maps must be rank 4");
    int64_t F = first.dim(0), heads = first.dim(1), S = first.dim(2), L = first.dim(3);
    if (word < 0 || word >= L) throw std::invalid_argument("word_activation: word index");
    Tensor acc({F, S});
    for (const Tensor& m : cross_maps) {
        if (m.shape != first.shape)
            throw std::invalid_argument("word_activation: layer shapes disagree");
        for (int64_t f = 0; f < F; ++f)
            for (int64_t h = 0; h < heads; ++h)
                for (int64_t s = 0; s < S; ++s) acc.at(f, s) += m.at(f, h, s, word);
    }
    double inv = 1.0 / (double)(cross_maps.size() * heads);
    for (double& v : acc.data) v *= inv;
    for (int64_t f = 0; f < F; ++f) {
        double mx = 0.0;
        for (int64_t s = 0; s < S; ++s) mx = std::max(mx, acc.at(f, s));
        if (mx > 0.0)
            for (int64_t s = 0; s < S; ++s) acc.at(f, s) /= mx;
    }
    return acc;
}

Tensor get_mask(const AttentionStore& store, int t, const PromptEmbedding& prompt,
                const std::string& word, double tau) {
    if (t < 1 || t > store.total_steps) throw std::domain_error("get_mask: timestep out of range");
    int64_t w = word_index(prompt, word);
    return threshold_mask(word_activation(store.steps[t - 1].cross_maps, w), tau);
}

Tensor get_mask_union(const AttentionStore& store, int t, const PromptEmbedding& prompt,
                      const std::vector<std::string>& words, double tau) {
    if (t < 1 || t > store.total_steps)
        throw std::domain_error("get_mask_union: timestep out of range");
    const Tensor& any = store.steps[t - 1].cross_maps.front();
    Tensor m({any.dim(0), any.dim(2)});
    for (const std::string& w : words) {
        Tensor one = get_mask(store, t, prompt, w, tau);
        for (int64_t i = 0; i < m.numel(); ++i) m[i] = std::max(m[i], one[i]);
    }
    return m;
}

Tensor remix_self_attention(const Tensor& s_src, const Tensor& s_edit, const Tensor& mask) {
    if (s_src.shape != s_edit.shape)
        throw std::domain_error("remix_self_attention: source and edit shapes disagree");
    if (s_src.ndim() != 4) throw std::domain_error("remix_self_attention: maps must be rank 4");
    int64_t F = s_src.dim(0), heads = s_src.dim(1), S = s_src.dim(2), N = s_src.dim(3);
    if (mask.ndim() != 2 || mask.dim(0) != F || mask.dim(1) != S)
        throw std::domain_error("remix_self_attention: mask must be [F,S]");
    Tensor out(s_src.shape);
    for (int64_t f = 0; f < F; ++f)
        for (int64_t h = 0; h < heads; ++h)
            for (int64_t q = 0; q < S; ++q) {
                double m = mask.at(f, q);
                int64_t base = ((f * heads + h) * S + q) * N;
                for (int64_t j = 0; j < N; ++j)
                    out.data[base + j] = m * s_edit.data[base + j] + (1.0 - m) * s_src.data[base + j];
            }
    renormalize_rows(out);
    return out;
}

std::pair<VideoLatent, AttentionStore> invert_with_guidance(StructureGuide& guide,
                                                            const VideoLatent& z0,
                                                            const ControlSequence& ctrl,
                                                            const PromptEmbedding& prompt,
                                                            const NoiseSchedule& sched) {
    AttentionStore store;
    store.total_steps = sched.total_steps;
    store.steps.reserve(sched.total_steps);

    VideoLatent z = z0;
    z.t = 0;
    for (int t = 1; t <= sched.total_steps; ++t) {
        DenoiseResult r = guide.guide_denoise(z, t, prompt, ctrl);
        z = ddim_invert_step(z, r.eps, t, sched);
        if (!z.data.all_finite()) {
            std::ostringstream os;
            os << "invert_with_guidance: non-finite latent at timestep " << t;
            throw std::runtime_error(os.str());
        }
        store.steps.push_back(std::move(r.maps));
    }
    store.z_T = z;
    return {z, store};
}

VideoLatent generate_with_remix(StructureGuide& guide, const VideoLatent& z_T,
                                const AttentionStore& store, const ControlSequence& ctrl_edit,
                                const PromptEmbedding& prompt_target, const RemixConfig& cfg,
                                const NoiseSchedule& sched, const PromptEmbedding* prompt_source) {
    cfg.validate();
    if (store.total_steps != sched.total_steps || (int)store.steps.size() != sched.total_steps)
        throw std::invalid_argument(
            "generate_with_remix: store and schedule disagree on step count");
    const PromptEmbedding& src_prompt = prompt_source ? *prompt_source : prompt_target;
    int t_lo = cfg.resolve_t_lo(sched.total_steps);

    // word-swap editing: positions whose label is unchanged replay the
    // source cross maps; a changed length disables the replay. Words named as
    // edit targets are the subject of the edit, not "unchanged", so their maps
    // stay live and can follow the edited control.
    std::vector<int64_t> retained;
    if (src_prompt.token_labels.size() == prompt_target.token_labels.size()) {
        for (size_t i = 0; i < prompt_target.token_labels.size(); ++i) {
            const std::string& label = prompt_target.token_labels[i];
            if (label != src_prompt.token_labels[i]) continue;
            bool targeted = std::find(cfg.target_words.begin(), cfg.target_words.end(), label) !=
                            cfg.target_words.end();
            if (!targeted) retained.push_back((int64_t)i);
        }
    }

    VideoLatent z = z_T;
    for (int t = sched.total_steps; t >= 1; --t) {
        bool fuse = t >= t_lo;
        Tensor mask;
        if (fuse) mask = get_mask_union(store, t, src_prompt, cfg.target_words, cfg.tau);

        SelfAttnHook shook = [&](int block, Tensor& w) {
            if (!fuse) return;
            const Tensor& src = store.steps[t - 1].self_maps.at(block);
            w = remix_self_attention(src, w, mask);
        };
        CrossAttnHook chook = [&](int block, Tensor& w) {
            if (!fuse || retained.empty()) return;
            const Tensor& src = store.steps[t - 1].cross_maps.at(block);
            if (src.shape != w.shape) return;
            int64_t L = w.dim(3);
            int64_t rows = w.numel() / L;
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t i : retained) w.data[r * L + i] = src.data[r * L + i];
            renormalize_rows(w);
        };

        std::vector<Tensor> res = guide.encode_control(ctrl_edit, z, t, prompt_target);
        DenoiseResult r =
            guide.denoiser().denoise(z, t, prompt_target, &res, &shook, &chook);
        z = ddim_denoise_step(z, r.eps, t, sched);
        if (!z.data.all_finite()) {
            std::ostringstream os;
            os << "generate_with_remix: non-finite latent at timestep " << t;
            throw std::runtime_error(os.str());
        }
    }
    return z;
}

Archive store_to_archive(const AttentionStore& store) {
    store.validate();
    Archive a;
    int64_t blocks = (int64_t)store.steps.front().self_maps.size();
    Tensor meta({2}, {(double)store.total_steps, (double)blocks});
    a.add("meta", meta);
    a.add("z_T", store.z_T.data);
    for (int t = 1; t <= store.total_steps; ++t) {
        const AttentionMaps& m = store.steps[t - 1];
        for (int64_t b = 0; b < blocks; ++b) {
            std::string key = "t" + std::to_string(t) + ".l" + std::to_string(b);
            a.add(key + ".self", m.self_maps[b]);
            a.add(key + ".cross", m.cross_maps[b]);
        }
    }
    return a;
}

AttentionStore store_from_archive(const Archive& a) {
    Tensor meta = a.tensor("meta");
    if (meta.numel() != 2) throw std::runtime_error("attention store archive: bad meta entry");
    AttentionStore store;
    store.total_steps = (int)meta[0];
    int64_t blocks = (int64_t)meta[1];
    store.z_T.data = a.tensor("z_T");
    store.z_T.t = store.total_steps;
    store.steps.resize(store.total_steps);
    for (int t = 1; t <= store.total_steps; ++t) {
        AttentionMaps& m = store.steps[t - 1];
        for (int64_t b = 0; b < blocks; ++b) {
            std::string key = "t" + std::to_string(t) + ".l" + std::to_string(b);
            m.self_maps.push_back(a.tensor(key + ".self"));
            m.cross_maps.push_back(a.tensor(key + ".cross"));
        }
    }
    store.validate();
    return store;
}

}  // namespace cvid
