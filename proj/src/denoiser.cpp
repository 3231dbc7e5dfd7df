#include "cvid/denoiser.hpp"

#include <cmath>
#include <stdexcept>

#include "cvid/kernels.hpp"

namespace cvid {

void DenoiserConfig::validate() const {
    if (frames < 1 || channels < 1 || height < 1 || width < 1 || hidden < 1 || heads < 1 ||
        blocks < 1 || prompt_dim < 1 || patch < 1 || vocab < 1 || mlp_mult < 1)
        throw std::domain_error("DenoiserConfig: all fields must be positive");
    if (channels != 3 * patch * patch)
        throw std::domain_error("DenoiserConfig: channels must equal 3*patch^2");
    if (hidden % heads != 0) throw std::domain_error("DenoiserConfig: heads must divide hidden");
    if (hidden % 2 != 0 || (hidden / 2) % heads != 0)
        throw std::domain_error("DenoiserConfig: guide width hidden/2 must divide by heads");
    if (lora_rank < 1 || lora_rank >= std::min(hidden, prompt_dim))
        throw std::domain_error("DenoiserConfig: lora_rank must be in [1, min(hidden,k))");
}

Tensor lora_linear(const Tensor& x, const Tensor& W0, const LoRAAdapter& adapter) {
    if (W0.ndim() != 2) throw std::invalid_argument("lora_linear: W0 must be a matrix");
    int64_t d = W0.dim(0), k = W0.dim(1);
    if (x.numel() != k) throw std::invalid_argument("lora_linear: x length must equal cols(W0)");
    bool has = adapter.A.numel() > 0 || adapter.B.numel() > 0;
    int64_t r = 0;
    if (has) {
        if (adapter.A.ndim() != 2 || adapter.B.ndim() != 2)
            throw std::invalid_argument("lora_linear: adapter factors must be matrices");
        r = adapter.A.dim(0);
        if (adapter.A.dim(1) != k || adapter.B.dim(0) != d || adapter.B.dim(1) != r)
            throw std::invalid_argument("lora_linear: adapter dims disagree with W0");
    }
    Tensor y({d});
    for (int64_t i = 0; i < d; ++i) {
        double s = 0;
        for (int64_t j = 0; j < k; ++j) s += W0.data[i * k + j] * x.data[j];
        y.data[i] = s;
    }
    if (has) {
        std::vector<double> ax(r, 0.0);
        for (int64_t p = 0; p < r; ++p)
            for (int64_t j = 0; j < k; ++j) ax[p] += adapter.A.data[p * k + j] * x.data[j];
        for (int64_t i = 0; i < d; ++i)
            for (int64_t p = 0; p < r; ++p) y.data[i] += adapter.B.data[i * r + p] * ax[p];
    }
    return y;
}

Tensor tokens_from_latent(const Tensor& z) {
    if (z.ndim() != 4) throw std::invalid_argument("tokens_from_latent: [F,C,H,W] required");
    int64_t F = z.dim(0), C = z.dim(1), H = z.dim(2), W = z.dim(3);
    Tensor t({F * H * W, C});
    for (int64_t f = 0; f < F; ++f)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t y = 0; y < H; ++y)
                for (int64_t x = 0; x < W; ++x)
                    t.data[(f * H * W + y * W + x) * C + c] = z.data[((f * C + c) * H + y) * W + x];
    return t;
}

Tensor latent_from_tokens(const Tensor& tokens, int64_t F, int64_t C, int64_t H, int64_t W) {
    if (tokens.ndim() != 2 || tokens.dim(0) != F * H * W || tokens.dim(1) != C)
        throw std::invalid_argument("latent_from_tokens: shape disagrees with F,C,H,W");
    Tensor z({F, C, H, W});
    for (int64_t f = 0; f < F; ++f)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t y = 0; y < H; ++y)
                for (int64_t x = 0; x < W; ++x)
                    z.data[((f * C + c) * H + y) * W + x] = tokens.data[(f * H * W + y * W + x) * C + c];
    return z;
}

Tensor sinusoidal_embedding(double pos, int64_t dim) {
    if (dim < 2 || dim % 2 != 0)
        throw std::invalid_argument("sinusoidal_embedding: dim must be even and >= 2");
    Tensor e({dim});
    for (int64_t i = 0; i < dim / 2; ++i) {
        double freq = std::pow(10000.0, -2.0 * double(i) / double(dim));
        e.data[2 * i] = std::sin(pos * freq);
        e.data[2 * i + 1] = std::cos(pos * freq);
    }
    return e;
}

// ===== autoencoder =====

namespace {
// the basis must be identical in every process, so the seed is a constant
constexpr uint64_t kBasisSeed = 0x0c01dba5;
}  // namespace

PatchAutoencoder::PatchAutoencoder(int64_t patch) : patch_(patch), basis_({1, 1}) {
    if (patch < 1) throw std::domain_error("PatchAutoencoder: patch must be positive");
    int64_t C = 3 * patch * patch;
    Rng rng(kBasisSeed);
    Tensor m = rng.randn({C, C});
    // modified Gram-Schmidt on rows
    for (int64_t i = 0; i < C; ++i) {
        double* ri = m.data.data() + i * C;
        for (int64_t j = 0; j < i; ++j) {
            const double* rj = m.data.data() + j * C;
            double d = 0;
            for (int64_t c = 0; c < C; ++c) d += ri[c] * rj[c];
            for (int64_t c = 0; c < C; ++c) ri[c] -= d * rj[c];
        }
        double n = 0;
        for (int64_t c = 0; c < C; ++c) n += ri[c] * ri[c];
        n = std::sqrt(n);
        if (n < 1e-10) throw std::runtime_error("PatchAutoencoder: degenerate basis draw");
        for (int64_t c = 0; c < C; ++c) ri[c] /= n;
    }
    basis_ = std::move(m);
}

Tensor PatchAutoencoder::encode(const Tensor& frames) const {
    if (frames.ndim() != 4 || frames.dim(1) != 3)
        throw std::invalid_argument("encode: [F,3,H,W] required");
    int64_t F = frames.dim(0), Hp = frames.dim(2), Wp = frames.dim(3);
    if (Hp % patch_ != 0 || Wp % patch_ != 0)
        throw std::domain_error("encode: pixel dims must divide by the patch factor");
    int64_t H = Hp / patch_, W = Wp / patch_, C = channels();
    Tensor z({F, C, H, W});
#pragma omp parallel for collapse(3) schedule(static) if (kernels::parallel_enabled())
    for (int64_t f = 0; f < F; ++f)
        for (int64_t py = 0; py < H; ++py)
            for (int64_t px = 0; px < W; ++px) {
                std::vector<double> v(C);
                for (int64_t c = 0; c < 3; ++c)
                    for (int64_t iy = 0; iy < patch_; ++iy)
                        for (int64_t ix = 0; ix < patch_; ++ix)
                            v[(c * patch_ + iy) * patch_ + ix] =
                                frames.data[((f * 3 + c) * Hp + py * patch_ + iy) * Wp +
                                            px * patch_ + ix];
                for (int64_t u = 0; u < C; ++u) {
                    double s = 0;
                    for (int64_t c = 0; c < C; ++c) s += basis_.data[u * C + c] * v[c];
                    z.data[((f * C + u) * H + py) * W + px] = s;
                }
            }
    return z;
}

Tensor PatchAutoencoder::decode(const Tensor& latent) const {
    if (latent.ndim() != 4 || latent.dim(1) != channels())
        throw std::invalid_argument("decode: [F,C,H,W] latent required");
    int64_t F = latent.dim(0), H = latent.dim(2), W = latent.dim(3), C = channels();
    int64_t Hp = H * patch_, Wp = W * patch_;
    Tensor out({F, 3, Hp, Wp});
#pragma omp parallel for collapse(3) schedule(static) if (kernels::parallel_enabled())
    for (int64_t f = 0; f < F; ++f)
        for (int64_t py = 0; py < H; ++py)
            for (int64_t px = 0; px < W; ++px) {
                std::vector<double> v(C);
                for (int64_t c = 0; c < C; ++c) {
                    double s = 0;
                    for (int64_t u = 0; u < C; ++u)
                        s += basis_.data[u * C + c] * latent.data[((f * C + u) * H + py) * W + px];
                    v[c] = s;
                }
                for (int64_t c = 0; c < 3; ++c)
                    for (int64_t iy = 0; iy < patch_; ++iy)
                        for (int64_t ix = 0; ix < patch_; ++ix)
                            out.data[((f * 3 + c) * Hp + py * patch_ + iy) * Wp + px * patch_ +
                                     ix] = v[(c * patch_ + iy) * patch_ + ix];
            }
    return out;
}

// ===== denoiser =====

Denoiser::Denoiser(const DenoiserConfig& cfg, Rng& rng) : cfg_(cfg), ae_(cfg.patch) {
    cfg_.validate();
    int64_t h = cfg_.hidden, C = cfg_.channels, k = cfg_.prompt_dim, r = cfg_.lora_rank;
    double sh = 1.0 / std::sqrt((double)h);
    double sc = 1.0 / std::sqrt((double)C);
    double sk = 1.0 / std::sqrt((double)k);

    auto frozen = [&](const std::string& n, std::vector<int64_t> shape, double std) -> Param& {
        Param& p = params_.add_normal(n, std::move(shape), std, rng);
        p.trainable = false;
        return p;
    };
    auto fconst = [&](const std::string& n, std::vector<int64_t> shape, double fill) -> Param& {
        Param& p = params_.add_const(n, std::move(shape), fill);
        p.trainable = false;
        return p;
    };

    frozen("token_table", {cfg_.vocab, k}, sk);
    params_.add_normal("custom_token", {k}, sk, rng);  // trainable

    frozen("in_proj.w", {h, C}, sc);
    fconst("in_proj.b", {h}, 0.0);
    for (int b = 0; b < cfg_.blocks; ++b) {
        std::string p = "blk" + std::to_string(b) + ".";
        fconst(p + "self.ln.g", {h}, 1.0);
        fconst(p + "self.ln.b", {h}, 0.0);
        for (const char* nm : {"q", "k", "v", "o"}) {
            frozen(p + "self." + nm + ".w", {h, h}, sh);
            fconst(p + "self." + nm + ".b", {h}, 0.0);
        }
        fconst(p + "cross.ln.g", {h}, 1.0);
        fconst(p + "cross.ln.b", {h}, 0.0);
        frozen(p + "cross.q.w", {h, h}, sh);
        fconst(p + "cross.q.b", {h}, 0.0);
        frozen(p + "cross.k.w", {h, k}, sk);
        fconst(p + "cross.k.b", {h}, 0.0);
        frozen(p + "cross.v.w", {h, k}, sk);
        fconst(p + "cross.v.b", {h}, 0.0);
        frozen(p + "cross.o.w", {h, h}, sh);
        fconst(p + "cross.o.b", {h}, 0.0);
        params_.add_normal(p + "cross.q.lora.A", {r, h}, sh, rng);
        params_.add_const(p + "cross.q.lora.B", {h, r}, 0.0);
        params_.add_normal(p + "cross.k.lora.A", {r, k}, sk, rng);
        params_.add_const(p + "cross.k.lora.B", {h, r}, 0.0);
        params_.add_normal(p + "cross.v.lora.A", {r, k}, sk, rng);
        params_.add_const(p + "cross.v.lora.B", {h, r}, 0.0);
        fconst(p + "mlp.ln.g", {h}, 1.0);
        fconst(p + "mlp.ln.b", {h}, 0.0);
        frozen(p + "mlp.fc1.w", {h * cfg_.mlp_mult, h}, sh);
        fconst(p + "mlp.fc1.b", {h * cfg_.mlp_mult}, 0.0);
        frozen(p + "mlp.fc2.w", {h, h * cfg_.mlp_mult}, 1.0 / std::sqrt((double)(h * cfg_.mlp_mult)));
        fconst(p + "mlp.fc2.b", {h}, 0.0);
    }
    frozen("out_proj.w", {C, h}, sh);
    fconst("out_proj.b", {C}, 0.0);
}

std::vector<int64_t> Denoiser::sparse_causal_indices() const {
    int64_t F = cfg_.frames, S = cfg_.positions();
    std::vector<int64_t> idx(F * 2 * S);
    for (int64_t f = 0; f < F; ++f) {
        int64_t prev = f == 0 ? 0 : f - 1;
        for (int64_t j = 0; j < S; ++j) {
            idx[f * 2 * S + j] = 0 * S + j;
            idx[f * 2 * S + S + j] = prev * S + j;
        }
    }
    return idx;
}

PromptEmbedding Denoiser::make_prompt(const std::vector<int64_t>& word_ids,
                                      const std::vector<std::string>& labels,
                                      int custom_index) const {
    if (word_ids.empty()) throw std::invalid_argument("make_prompt: need at least one token");
    if (labels.size() != word_ids.size())
        throw std::invalid_argument("make_prompt: one label per token required");
    const Tensor& table = params_.find("token_table")->value;
    int64_t k = cfg_.prompt_dim;
    PromptEmbedding pe;
    pe.tokens = Tensor({(int64_t)word_ids.size(), k});
    for (size_t i = 0; i < word_ids.size(); ++i) {
        int64_t id = word_ids[i];
        if (id < 0 || id >= cfg_.vocab) throw std::domain_error("make_prompt: word id out of vocab");
        for (int64_t j = 0; j < k; ++j) pe.tokens.data[i * k + j] = table.data[id * k + j];
    }
    pe.token_labels = labels;
    if (custom_index >= (int)word_ids.size())
        throw std::invalid_argument("make_prompt: custom index out of range");
    pe.custom_token_index = custom_index;
    return pe;
}

int Denoiser::build_eps(Graph& g, int z_tokens, const BuildSpec& spec) {
    if (!spec.prompt) throw std::invalid_argument("build_eps: prompt required");
    const PromptEmbedding& prompt = *spec.prompt;
    int64_t F = cfg_.frames, S = cfg_.positions(), h = cfg_.hidden;
    const Tensor& zv = g.value(z_tokens);
    if (zv.ndim() != 2 || zv.dim(0) != F * S || zv.dim(1) != cfg_.channels)
        throw std::invalid_argument("build_eps: z tokens must be [F*S, C]");
    if (prompt.tokens.ndim() != 2 || prompt.tokens.dim(1) != cfg_.prompt_dim)
        throw std::invalid_argument("build_eps: prompt embedding dim mismatch");
    if ((spec.maps_out || spec.self_hook || spec.cross_hook) && g.grad_enabled())
        throw std::logic_error("build_eps: map capture and hooks need gradients disabled");
    if (spec.residuals) {
        if ((int)spec.residuals->size() != cfg_.blocks)
            throw std::invalid_argument("build_eps: one residual per block required");
        for (int rid : *spec.residuals) {
            const Tensor& rv = g.value(rid);
            if (rv.ndim() != 2 || rv.dim(0) != F * S || rv.dim(1) != h)
                throw std::invalid_argument("build_eps: residual shape mismatch");
        }
    }
    int64_t L = prompt.tokens.dim(0);
    double scale = 1.0 / std::sqrt((double)(h / cfg_.heads));

    auto P = [&](const std::string& n) { return g.param(params_.at(n)); };
    auto lora_lin = [&](int x, const std::string& base, const std::string& lora) {
        int y = g.linear(x, P(base + ".w"), P(base + ".b"));
        if (spec.use_lora) {
            int ax = g.matmul(x, P(lora + ".lora.A"), false, true);
            int bax = g.matmul(ax, P(lora + ".lora.B"), false, true);
            y = g.add(y, bax);
        }
        return y;
    };

    int p = g.leaf(prompt.tokens);
    if (prompt.custom_token_index >= 0) {
        if (prompt.custom_token_index >= L)
            throw std::invalid_argument("build_eps: custom token index out of range");
        p = g.set_row(p, P("custom_token"), prompt.custom_token_index);
    }

    int temb = g.leaf(sinusoidal_embedding((double)spec.t, h));
    auto sc_idx = sparse_causal_indices();

    int x = g.linear(z_tokens, P("in_proj.w"), P("in_proj.b"));
    for (int b = 0; b < cfg_.blocks; ++b) {
        std::string pre = "blk" + std::to_string(b) + ".";
        x = g.add_rowvec(x, temb);

        // sparse-causal self attention
        int a = g.layernorm(x, P(pre + "self.ln.g"), P(pre + "self.ln.b"));
        int q = g.linear(a, P(pre + "self.q.w"), P(pre + "self.q.b"));
        int kk = g.linear(a, P(pre + "self.k.w"), P(pre + "self.k.b"));
        int vv = g.linear(a, P(pre + "self.v.w"), P(pre + "self.v.b"));
        int q3 = g.reshape(q, {F, S, h});
        int k3 = g.reshape(g.gather_rows(kk, sc_idx), {F, 2 * S, h});
        int v3 = g.reshape(g.gather_rows(vv, sc_idx), {F, 2 * S, h});
        AttnHook shook;
        if (spec.maps_out || spec.self_hook) {
            AttentionMaps* mo = spec.maps_out;
            const SelfAttnHook* sh = spec.self_hook;
            shook = [b, mo, sh](Tensor& w) {
                if (sh && *sh) (*sh)(b, w);
                if (mo) mo->self_maps.push_back(w);
            };
        }
        int att = g.attention(q3, k3, v3, cfg_.heads, scale, shook);
        x = g.add(x, g.linear(g.reshape(att, {F * S, h}), P(pre + "self.o.w"), P(pre + "self.o.b")));

        // prompt cross attention with LoRA on q/k/v
        a = g.layernorm(x, P(pre + "cross.ln.g"), P(pre + "cross.ln.b"));
        int cq = lora_lin(a, pre + "cross.q", pre + "cross.q");
        int ck = lora_lin(p, pre + "cross.k", pre + "cross.k");
        int cv = lora_lin(p, pre + "cross.v", pre + "cross.v");
        int cq3 = g.reshape(cq, {F, S, h});
        int ck3 = g.expand_batch(ck, F);
        int cv3 = g.expand_batch(cv, F);
        AttnHook chook;
        if (spec.maps_out || spec.cross_hook) {
            AttentionMaps* mo = spec.maps_out;
            const CrossAttnHook* ch = spec.cross_hook;
            chook = [b, mo, ch](Tensor& w) {
                if (ch && *ch) (*ch)(b, w);
                if (mo) mo->cross_maps.push_back(w);
            };
        }
        int catt = g.attention(cq3, ck3, cv3, cfg_.heads, scale, chook);
        x = g.add(x, g.linear(g.reshape(catt, {F * S, h}), P(pre + "cross.o.w"),
                              P(pre + "cross.o.b")));

        // mlp
        a = g.layernorm(x, P(pre + "mlp.ln.g"), P(pre + "mlp.ln.b"));
        int m = g.linear(a, P(pre + "mlp.fc1.w"), P(pre + "mlp.fc1.b"));
        m = g.gelu(m);
        m = g.linear(m, P(pre + "mlp.fc2.w"), P(pre + "mlp.fc2.b"));
        x = g.add(x, m);

        if (spec.residuals) x = g.add(x, (*spec.residuals)[b]);
    }
    return g.linear(x, P("out_proj.w"), P("out_proj.b"));
}

DenoiseResult Denoiser::denoise(const VideoLatent& z_t, int t, const PromptEmbedding& prompt,
                                const std::vector<Tensor>* residuals,
                                const SelfAttnHook* self_hook, const CrossAttnHook* cross_hook,
                                bool use_lora) {
    int64_t F = cfg_.frames, C = cfg_.channels, H = cfg_.height, W = cfg_.width;
    if (z_t.data.ndim() != 4 || z_t.data.dim(0) != F || z_t.data.dim(1) != C ||
        z_t.data.dim(2) != H || z_t.data.dim(3) != W)
        throw std::invalid_argument("denoise: latent shape disagrees with config");

    Graph g(false);
    int z = g.leaf(tokens_from_latent(z_t.data));
    std::vector<int> res_nodes;
    if (residuals) {
        for (const Tensor& r : *residuals) res_nodes.push_back(g.leaf(r));
    }
    DenoiseResult out;
    BuildSpec bs;
    bs.t = t;
    bs.prompt = &prompt;
    bs.residuals = residuals ? &res_nodes : nullptr;
    bs.maps_out = &out.maps;
    bs.self_hook = self_hook;
    bs.cross_hook = cross_hook;
    bs.use_lora = use_lora;
    int eps = build_eps(g, z, bs);
    out.eps = latent_from_tokens(g.value(eps), F, C, H, W);
    return out;
}

}  // namespace cvid
