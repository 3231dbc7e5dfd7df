#include "cvid/structure_guide.hpp"

#include <cmath>
#include <stdexcept>

namespace cvid {

void validate_control(const ControlSequence& ctrl, const DenoiserConfig& cfg) {
    if (ctrl.kind != "edge" && ctrl.kind != "sketch" && ctrl.kind != "pose-raster")
        throw std::domain_error("control kind must be edge, sketch or pose-raster");
    if (ctrl.maps.ndim() != 4 || ctrl.maps.dim(1) != 1)
        throw std::invalid_argument("control maps must be [F,1,H',W']");
    if (ctrl.maps.dim(0) != cfg.frames)
        throw std::domain_error("control frame count disagrees with the video");
    if (ctrl.maps.dim(2) != cfg.pixel_h() || ctrl.maps.dim(3) != cfg.pixel_w())
        throw std::domain_error("control spatial dims disagree with the pixel video");
    for (double v : ctrl.maps.data)
        if (!(v >= 0.0 && v <= 1.0))
            throw std::domain_error("control map values must lie in [0,1]");
}

StructureGuide::StructureGuide(Denoiser& denoiser, Rng& rng) : den_(denoiser) {
    const DenoiserConfig& cfg = den_.config();
    ParamSet& ps = den_.params();
    if (ps.find("guide.stem.w")) throw std::logic_error("guide branch already attached");

    int64_t gw = width(), h = cfg.hidden, C = cfg.channels, k = cfg.prompt_dim;
    double sg = 1.0 / std::sqrt((double)gw);

    auto frozen = [&](const std::string& n, std::vector<int64_t> shape, double std) {
        ps.add_normal("guide." + n, std::move(shape), std, rng).trainable = false;
    };
    auto fconst = [&](const std::string& n, std::vector<int64_t> shape, double fill) {
        ps.add_const("guide." + n, std::move(shape), fill).trainable = false;
    };

    frozen("stem.w", {gw, 1, cfg.patch, cfg.patch}, 1.0 / (double)cfg.patch);
    fconst("stem.b", {gw}, 0.0);
    frozen("zin.w", {gw, C}, 1.0 / std::sqrt((double)C));
    fconst("zin.b", {gw}, 0.0);
    frozen("pin.w", {gw, k}, 1.0 / std::sqrt((double)k));
    fconst("pin.b", {gw}, 0.0);
    for (int b = 0; b < cfg.blocks; ++b) {
        std::string p = "blk" + std::to_string(b) + ".";
        fconst(p + "spatial.ln.g", {gw}, 1.0);
        fconst(p + "spatial.ln.b", {gw}, 0.0);
        for (const char* nm : {"q", "k", "v", "o"}) {
            frozen(p + "spatial." + nm + ".w", {gw, gw}, sg);
            fconst(p + "spatial." + nm + ".b", {gw}, 0.0);
        }
        // the temporal layers and the zero projections are the branch trainables
        ps.add_const("guide." + p + "temporal.ln.g", {gw}, 1.0);
        ps.add_const("guide." + p + "temporal.ln.b", {gw}, 0.0);
        for (const char* nm : {"q", "k", "v", "o"}) {
            ps.add_normal("guide." + p + "temporal." + nm + ".w", {gw, gw}, sg, rng);
            ps.add_const("guide." + p + "temporal." + nm + ".b", {gw}, 0.0);
        }
        fconst(p + "mlp.ln.g", {gw}, 1.0);
        fconst(p + "mlp.ln.b", {gw}, 0.0);
        frozen(p + "mlp.fc1.w", {gw * cfg.mlp_mult, gw}, sg);
        fconst(p + "mlp.fc1.b", {gw * cfg.mlp_mult}, 0.0);
        frozen(p + "mlp.fc2.w", {gw, gw * cfg.mlp_mult},
               1.0 / std::sqrt((double)(gw * cfg.mlp_mult)));
        fconst(p + "mlp.fc2.b", {gw}, 0.0);
        ps.add_const("guide." + p + "out.w", {h, gw}, 0.0);
        ps.add_const("guide." + p + "out.b", {h}, 0.0);
    }
}

std::vector<int> StructureGuide::build_residuals(Graph& g, const ControlSequence& ctrl,
                                                 int z_tokens, int t,
                                                 const PromptEmbedding& prompt) {
    const DenoiserConfig& cfg = den_.config();
    validate_control(ctrl, cfg);
    int64_t F = cfg.frames, S = cfg.positions(), H = cfg.height, W = cfg.width;
    int64_t gw = width();
    const Tensor& zv = g.value(z_tokens);
    if (zv.ndim() != 2 || zv.dim(0) != F * S || zv.dim(1) != cfg.channels)
        throw std::invalid_argument("build_residuals: z tokens must be [F*S, C]");
    if (prompt.tokens.ndim() != 2 || prompt.tokens.dim(1) != cfg.prompt_dim)
        throw std::invalid_argument("build_residuals: prompt embedding dim mismatch");
    int64_t L = prompt.tokens.dim(0);
    double scale = 1.0 / std::sqrt((double)(gw / cfg.heads));
    ParamSet& ps = den_.params();
    auto P = [&](const std::string& n) { return g.param(ps.at("guide." + n)); };

    // stem conv, then permute [F,gw,H,W] into token layout [F*S, gw]
    int c = g.leaf(ctrl.maps);
    int stem = g.conv2d(c, P("stem.w"), P("stem.b"), cfg.patch);
    std::vector<int64_t> to_tok(F * S * gw);
    for (int64_t f = 0; f < F; ++f)
        for (int64_t y = 0; y < H; ++y)
            for (int64_t x = 0; x < W; ++x)
                for (int64_t u = 0; u < gw; ++u)
                    to_tok[(f * S + y * W + x) * gw + u] = ((f * gw + u) * H + y) * W + x;
    int x = g.reshape(g.gather_rows(g.reshape(stem, {F * gw * S, 1}), to_tok), {F * S, gw});

    x = g.add(x, g.linear(z_tokens, P("zin.w"), P("zin.b")));

    int p = g.leaf(prompt.tokens);
    if (prompt.custom_token_index >= 0) {
        if (prompt.custom_token_index >= L)
            throw std::invalid_argument("build_residuals: custom token index out of range");
        p = g.set_row(p, g.param(ps.at("custom_token")), prompt.custom_token_index);
    }
    int pool = g.matmul(g.leaf(Tensor::full({1, L}, 1.0 / (double)L)), p);
    x = g.add_rowvec(x, g.reshape(g.linear(pool, P("pin.w"), P("pin.b")), {gw}));

    Tensor fpos({F * S, gw});
    for (int64_t f = 0; f < F; ++f) {
        Tensor e = sinusoidal_embedding((double)f, gw);
        for (int64_t s = 0; s < S; ++s)
            std::copy(e.data.begin(), e.data.end(), fpos.data.begin() + (f * S + s) * gw);
    }
    x = g.add(x, g.leaf(fpos));

    int temb = g.leaf(sinusoidal_embedding((double)t, gw));
    std::vector<int64_t> perm(F * S), perm_inv(F * S);
    for (int64_t s = 0; s < S; ++s)
        for (int64_t f = 0; f < F; ++f) {
            perm[s * F + f] = f * S + s;
            perm_inv[f * S + s] = s * F + f;
        }

    std::vector<int> residuals;
    for (int b = 0; b < cfg.blocks; ++b) {
        std::string pre = "blk" + std::to_string(b) + ".";
        x = g.add_rowvec(x, temb);

        // per-frame spatial attention
        int a = g.layernorm(x, P(pre + "spatial.ln.g"), P(pre + "spatial.ln.b"));
        int q = g.reshape(g.linear(a, P(pre + "spatial.q.w"), P(pre + "spatial.q.b")), {F, S, gw});
        int kk = g.reshape(g.linear(a, P(pre + "spatial.k.w"), P(pre + "spatial.k.b")), {F, S, gw});
        int vv = g.reshape(g.linear(a, P(pre + "spatial.v.w"), P(pre + "spatial.v.b")), {F, S, gw});
        int att = g.reshape(g.attention(q, kk, vv, cfg.heads, scale), {F * S, gw});
        x = g.add(x, g.linear(att, P(pre + "spatial.o.w"), P(pre + "spatial.o.b")));

        // temporal attention: each grid position attends across frames
        a = g.layernorm(x, P(pre + "temporal.ln.g"), P(pre + "temporal.ln.b"));
        int ar = g.gather_rows(a, perm);
        q = g.reshape(g.linear(ar, P(pre + "temporal.q.w"), P(pre + "temporal.q.b")), {S, F, gw});
        kk = g.reshape(g.linear(ar, P(pre + "temporal.k.w"), P(pre + "temporal.k.b")), {S, F, gw});
        vv = g.reshape(g.linear(ar, P(pre + "temporal.v.w"), P(pre + "temporal.v.b")), {S, F, gw});
        att = g.reshape(g.attention(q, kk, vv, cfg.heads, scale), {S * F, gw});
        int ot = g.linear(att, P(pre + "temporal.o.w"), P(pre + "temporal.o.b"));
        x = g.add(x, g.gather_rows(ot, perm_inv));

        // mlp
        a = g.layernorm(x, P(pre + "mlp.ln.g"), P(pre + "mlp.ln.b"));
        int m = g.linear(a, P(pre + "mlp.fc1.w"), P(pre + "mlp.fc1.b"));
        m = g.gelu(m);
        m = g.linear(m, P(pre + "mlp.fc2.w"), P(pre + "mlp.fc2.b"));
        x = g.add(x, m);

        residuals.push_back(g.linear(x, P(pre + "out.w"), P(pre + "out.b")));
    }
    return residuals;
}

std::vector<Tensor> StructureGuide::encode_control(const ControlSequence& ctrl,
                                                   const VideoLatent& z_t, int t,
                                                   const PromptEmbedding& prompt) {
    Graph g(false);
    int z = g.leaf(tokens_from_latent(z_t.data));
    std::vector<int> nodes = build_residuals(g, ctrl, z, t, prompt);
    std::vector<Tensor> out;
    out.reserve(nodes.size());
    for (int id : nodes) out.push_back(g.value(id));
    return out;
}

DenoiseResult StructureGuide::guide_denoise(const VideoLatent& z_t, int t,
                                            const PromptEmbedding& prompt,
                                            const ControlSequence& ctrl) {
    std::vector<Tensor> res = encode_control(ctrl, z_t, t, prompt);
    return den_.denoise(z_t, t, prompt, &res);
}

}  // namespace cvid
