#include "miniweave/unet.hpp"

#include <cmath>

#include "miniweave/error.hpp"

namespace miniweave {

namespace {

constexpr uint64_t kSaltConv = 11, kSaltAttn = 13, kSaltTemb = 17;

Tensor conv_weight(Rng& rng, int64_t o, int64_t c, int64_t kh, int64_t kw, float gain = 1.0f) {
    float std = gain * static_cast<float>(std::sqrt(2.0 / static_cast<double>(c * kh * kw)));
    return Tensor::randn({o, c, kh, kw}, rng, std);
}

Tensor linear_weight(Rng& rng, int64_t o, int64_t i) {
    float std = static_cast<float>(1.0 / std::sqrt(static_cast<double>(i)));
    return Tensor::randn({o, i}, rng, std);
}

// (1, dim) sinusoidal embedding of an integer timestep
Tensor timestep_embedding(int64_t t, int64_t dim) {
    Tensor e = Tensor::zeros({1, dim});
    int64_t half = dim / 2;
    for (int64_t i = 0; i < half; ++i) {
        double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
        e.data()[i] = static_cast<float>(std::sin(static_cast<double>(t) * freq));
        e.data()[half + i] = static_cast<float>(std::cos(static_cast<double>(t) * freq));
    }
    return e;
}

// (F,C,H,W) -> (F, H*W, C)
Tensor to_tokens(const Tensor& x) {
    int64_t F = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
    return reshape(permute(x, {0, 2, 3, 1}), {F, H * W, C});
}

// (F, H*W, C) -> (F,C,H,W)
Tensor from_tokens(const Tensor& tok, int64_t H, int64_t W) {
    int64_t F = tok.size(0), C = tok.size(2);
    return permute(reshape(tok, {F, H, W, C}), {0, 3, 1, 2});
}

// (F,P,D) -> (F,heads,P,dh)
Tensor split_heads(const Tensor& x, int64_t heads, int64_t dh) {
    int64_t F = x.size(0), P = x.size(1);
    return permute(reshape(x, {F, P, heads, dh}), {0, 2, 1, 3});
}

// (F,heads,P,dh) -> (F,P,heads*dh)
Tensor merge_heads(const Tensor& x) {
    int64_t F = x.size(0), heads = x.size(1), P = x.size(2), dh = x.size(3);
    return reshape(permute(x, {0, 2, 1, 3}), {F, P, heads * dh});
}

Tensor tile_leading(const Tensor& x, int64_t n) {
    Shape sh = x.shape();
    sh.insert(sh.begin(), 1);
    Tensor r = reshape(x, sh);
    return concat(std::vector<Tensor>(static_cast<size_t>(n), r), 0);
}

}  // namespace

/*=============================================== construction ===============================================*/

static void build_res_block(ParamStore& ps, const std::string& name, ResBlock& rb, int64_t cin, int64_t c,
                            int64_t temb_dim, Rng& rng) {
    rb.gn1_g = ps.add(name + ".gn1.g", Tensor::full({cin}, 1.0f));
    rb.gn1_b = ps.add(name + ".gn1.b", Tensor::zeros({cin}));
    rb.conv1_w = ps.add(name + ".conv1.w", conv_weight(rng, c, cin, 3, 3));
    rb.conv1_b = ps.add(name + ".conv1.b", Tensor::zeros({c}));
    rb.temb_w = ps.add(name + ".temb.w", linear_weight(rng, c, temb_dim));
    rb.temb_b = ps.add(name + ".temb.b", Tensor::zeros({c}));
    rb.gn2_g = ps.add(name + ".gn2.g", Tensor::full({c}, 1.0f));
    rb.gn2_b = ps.add(name + ".gn2.b", Tensor::zeros({c}));
    rb.conv2_w = ps.add(name + ".conv2.w", conv_weight(rng, c, c, 3, 3));
    rb.conv2_b = ps.add(name + ".conv2.b", Tensor::zeros({c}));
    if (cin != c) rb.skip_w = ps.add(name + ".skip.w", conv_weight(rng, c, cin, 1, 1));
}

static void build_tconv(ParamStore& ps, const std::string& name, TemporalConvBlock& tc, int64_t c, int64_t rank_div,
                        Rng& rng) {
    int64_t r = std::max<int64_t>(4, c / rank_div);
    float std_in = static_cast<float>(std::sqrt(2.0 / static_cast<double>(c * 3)));
    tc.w_in = ps.add(name + ".win", Tensor::randn({r, c, 3}, rng, std_in));
    tc.b_in = ps.add(name + ".bin", Tensor::zeros({r}));
    tc.w_out = ps.add(name + ".wout", Tensor::zeros({c, r, 3}));  // identity at init
    tc.b_out = ps.add(name + ".bout", Tensor::zeros({c}));
}

static Linear build_linear(ParamStore& ps, const std::string& name, int64_t o, int64_t i, bool bias, Rng& rng,
                           bool zero_init = false) {
    Linear lin;
    lin.w = ps.add(name, zero_init ? Tensor::zeros({o, i}) : linear_weight(rng, o, i));
    if (bias) lin.b = ps.add(name + ".b", Tensor::zeros({o}));
    return lin;
}

static void register_linear(LinearRegistry& reg, const std::string& name, Linear& lin) {
    reg.emplace_back(name, &lin);
}

static void build_attention(ParamStore& ps, LinearRegistry& reg, const std::string& name, AttentionBlock& ab,
                            int64_t c, int64_t text_dim, int64_t heads, int64_t head_dim, Rng& rng) {
    int64_t d = heads * head_dim;
    ab.st_gn_g = ps.add(name + ".stattn.gn.g", Tensor::full({c}, 1.0f));
    ab.st_gn_b = ps.add(name + ".stattn.gn.b", Tensor::zeros({c}));
    ab.st_q = build_linear(ps, name + ".stattn.wq", d, c, false, rng);
    ab.st_k = build_linear(ps, name + ".stattn.wk", d, c, false, rng);
    ab.st_v = build_linear(ps, name + ".stattn.wv", d, c, false, rng);
    ab.st_o = build_linear(ps, name + ".stattn.wo", c, d, true, rng);

    ab.cr_gn_g = ps.add(name + ".cross.gn.g", Tensor::full({c}, 1.0f));
    ab.cr_gn_b = ps.add(name + ".cross.gn.b", Tensor::zeros({c}));
    ab.cr_q = build_linear(ps, name + ".cross.wq", d, c, false, rng);
    ab.cr_k = build_linear(ps, name + ".cross.wk", d, text_dim, false, rng);
    ab.cr_v = build_linear(ps, name + ".cross.wv", d, text_dim, false, rng);
    ab.cr_o = build_linear(ps, name + ".cross.wo", c, d, true, rng);

    ab.ts_gn_g = ps.add(name + ".tsa.gn.g", Tensor::full({c}, 1.0f));
    ab.ts_gn_b = ps.add(name + ".tsa.gn.b", Tensor::zeros({c}));
    ab.ts_q = build_linear(ps, name + ".tsa.wq", d, c, false, rng);
    ab.ts_k = build_linear(ps, name + ".tsa.wk", d, c, false, rng);
    ab.ts_v = build_linear(ps, name + ".tsa.wv", d, c, false, rng);
    ab.ts_o = build_linear(ps, name + ".tsa.wo", c, d, true, rng, /*zero_init=*/true);

    register_linear(reg, name + ".stattn.wq", ab.st_q);
    register_linear(reg, name + ".stattn.wk", ab.st_k);
    register_linear(reg, name + ".stattn.wv", ab.st_v);
    register_linear(reg, name + ".stattn.wo", ab.st_o);
    register_linear(reg, name + ".cross.wq", ab.cr_q);
    register_linear(reg, name + ".cross.wk", ab.cr_k);
    register_linear(reg, name + ".cross.wv", ab.cr_v);
    register_linear(reg, name + ".cross.wo", ab.cr_o);
    register_linear(reg, name + ".tsa.wq", ab.ts_q);
    register_linear(reg, name + ".tsa.wk", ab.ts_k);
    register_linear(reg, name + ".tsa.wv", ab.ts_v);
    register_linear(reg, name + ".tsa.wo", ab.ts_o);
}

static void build_block(ParamStore& ps, LinearRegistry& reg, UNetBlock& b, const std::string& name, int64_t cin,
                        int64_t c, int64_t hw, const UNetConfig& cfg, Rng& rng) {
    b.name = name;
    b.channels = c;
    b.hw = hw;
    build_res_block(ps, name + ".res", b.res, cin, c, cfg.temb_dim, rng);
    build_tconv(ps, name + ".tconv", b.tconv, c, cfg.temporal_rank_div, rng);
    build_attention(ps, reg, name, b.attn, c, cfg.text_dim, cfg.heads, cfg.head_dim, rng);
}

UNet::UNet(const UNetConfig& config, uint64_t seed) : cfg(config) {
    if (cfg.widths.size() != 2) throw ConfigError("unet: expected two level widths");
    if (cfg.latent_hw % 2 != 0) throw ConfigError("unet: latent_hw must be even");
    Rng root(seed);
    Rng conv_rng = root.fork(kSaltConv), attn_rng = root.fork(kSaltAttn), temb_rng = root.fork(kSaltTemb);
    int64_t c0 = cfg.widths[0], c1 = cfg.widths[1];
    int64_t hw0 = cfg.latent_hw, hw1 = cfg.latent_hw / 2;

    conv_in_w = params.add("conv_in.w", conv_weight(conv_rng, c0, cfg.in_channels, 3, 3));
    conv_in_b = params.add("conv_in.b", Tensor::zeros({c0}));

    temb_w1 = params.add("temb.w1", linear_weight(temb_rng, cfg.temb_dim, 64));
    temb_b1 = params.add("temb.b1", Tensor::zeros({cfg.temb_dim}));
    temb_w2 = params.add("temb.w2", linear_weight(temb_rng, cfg.temb_dim, cfg.temb_dim));
    temb_b2 = params.add("temb.b2", Tensor::zeros({cfg.temb_dim}));

    build_block(params, linears, down0, "down0", c0, c0, hw0, cfg, attn_rng);
    downsample_w = params.add("downsample.w", conv_weight(conv_rng, c1, c0, 3, 3));
    downsample_b = params.add("downsample.b", Tensor::zeros({c1}));
    build_block(params, linears, down1, "down1", c1, c1, hw1, cfg, attn_rng);
    build_block(params, linears, mid, "mid", c1, c1, hw1, cfg, attn_rng);
    build_block(params, linears, up1, "up1", 2 * c1, c1, hw1, cfg, attn_rng);
    upsample_w = params.add("upsample.w", conv_weight(conv_rng, c0, c1, 3, 3));
    upsample_b = params.add("upsample.b", Tensor::zeros({c0}));
    build_block(params, linears, up0, "up0", 2 * c0, c0, hw0, cfg, attn_rng);

    out_gn_g = params.add("out.gn.g", Tensor::full({c0}, 1.0f));
    out_gn_b = params.add("out.gn.b", Tensor::zeros({c0}));
    // small output gain keeps fresh noise predictions near zero but trainable
    conv_out_w = params.add("conv_out.w", conv_weight(conv_rng, cfg.in_channels, c0, 3, 3, 0.2f));
    conv_out_b = params.add("conv_out.b", Tensor::zeros({cfg.in_channels}));

    params.freeze_all();
}

/*=============================================== forward ===============================================*/

Tensor UNet::apply_probe(const std::string& layer, AttnKind kind, Tensor probs, AttentionProbe* probe) {
    auto it = pending_injections_.find(layer);
    if (it != pending_injections_.end()) {
        Tensor injected = it->second;
        pending_injections_.erase(it);
        if (injected.shape() != probs.shape())
            throw ControlError("inject_attention: override shape " + shape_str(injected.shape()) +
                               " does not match layer " + layer + " " + shape_str(probs.shape()));
        return injected;
    }
    return probe ? probe->process(layer, kind, probs) : probs;
}

static Tensor res_forward(const ResBlock& rb, const Tensor& x, const Tensor& temb, int64_t groups) {
    Tensor h = silu(group_norm(x, groups, rb.gn1_g, rb.gn1_b));
    h = conv2d(h, rb.conv1_w, rb.conv1_b, 1, 1);
    Tensor tb = add_rowvec(matmul_nt(silu(temb), rb.temb_w), rb.temb_b);  // (1, C)
    h = add_channel_bias(h, reshape(tb, {tb.size(1)}));
    h = silu(group_norm(h, groups, rb.gn2_g, rb.gn2_b));
    h = conv2d(h, rb.conv2_w, rb.conv2_b, 1, 1);
    Tensor skip = rb.skip_w.valid() ? conv2d(x, rb.skip_w, Tensor()) : x;
    return add(skip, h);
}

static Tensor tconv_forward(const TemporalConvBlock& tc, const Tensor& x) {
    Tensor h = silu(conv1d_temporal(x, tc.w_in, tc.b_in));
    return conv1d_temporal(h, tc.w_out, tc.b_out);
}

Tensor UNet::run_block(UNetBlock& block, const Tensor& x, const Tensor& temb, const PromptEmbedding& cond,
                       AttentionProbe* probe, bool training, Rng* rng) {
    int64_t heads = cfg.heads, dh = cfg.head_dim;
    int64_t H = x.size(2), W = x.size(3);
    int64_t F = x.size(0);

    Tensor h = res_forward(block.res, x, temb, cfg.groups);
    if (cfg.temporal_modules) h = add(h, tconv_forward(block.tconv, h));

    // ST-Attn: queries from each frame; keys/values from [first; former] frames
    {
        Tensor tok = to_tokens(group_norm(h, cfg.groups, block.attn.st_gn_g, block.attn.st_gn_b));
        Tensor q = block.attn.st_q.forward(tok, training, rng);  // (F,P,D)
        Tensor first = slice(tok, 0, 0, 1);                      // (1,P,C)
        // former frame of f is f-1; frame 0 duplicates the first frame
        Tensor former = F > 1 ? concat<float>({first, slice(tok, 0, 0, F - 1)}, 0) : first;
        Tensor kv_src = concat<float>({concat(std::vector<Tensor>(static_cast<size_t>(F), first), 0), former}, 1);
        Tensor k = block.attn.st_k.forward(kv_src, training, rng);  // (F,2P,D)
        Tensor v = block.attn.st_v.forward(kv_src, training, rng);
        Tensor qh = split_heads(q, heads, dh);
        Tensor kh = split_heads(k, heads, dh);
        Tensor vh = split_heads(v, heads, dh);
        Tensor logits = scale(matmul_nt(qh, kh), 1.0f / static_cast<float>(std::sqrt(static_cast<double>(dh))));
        Tensor probs = softmax(logits, 3);  // (F,heads,P,2P)
        probs = apply_probe(block.name + ".stattn", AttnKind::SpatioTemporal, probs, probe);
        Tensor out = block.attn.st_o.forward(merge_heads(matmul(probs, vh)), training, rng);
        h = add(h, from_tokens(out, H, W));
    }

    // cross-attention on the prompt embedding
    {
        Tensor tok = to_tokens(group_norm(h, cfg.groups, block.attn.cr_gn_g, block.attn.cr_gn_b));
        Tensor q = block.attn.cr_q.forward(tok, training, rng);                  // (F,P,D)
        Tensor k = block.attn.cr_k.forward(cond.embeddings, training, rng);     // (L,D)
        Tensor v = block.attn.cr_v.forward(cond.embeddings, training, rng);     // (L,D); LoRA attach point
        int64_t L = k.size(0);
        Tensor kh = tile_leading(permute(reshape(k, {L, heads, dh}), {1, 0, 2}), F);  // (F,heads,L,dh)
        Tensor vh = tile_leading(permute(reshape(v, {L, heads, dh}), {1, 0, 2}), F);
        Tensor qh = split_heads(q, heads, dh);
        Tensor logits = scale(matmul_nt(qh, kh), 1.0f / static_cast<float>(std::sqrt(static_cast<double>(dh))));
        Tensor probs = softmax(logits, 3);  // (F,heads,P,L)
        probs = apply_probe(block.name + ".cross", AttnKind::Cross, probs, probe);
        Tensor out = block.attn.cr_o.forward(merge_heads(matmul(probs, vh)), training, rng);
        h = add(h, from_tokens(out, H, W));
    }

    // temporal self-attention across frames per spatial position
    if (cfg.temporal_modules) {
        Tensor tok = to_tokens(group_norm(h, cfg.groups, block.attn.ts_gn_g, block.attn.ts_gn_b));
        int64_t P = tok.size(1);
        auto to_temporal = [&](const Tensor& x) {
            return permute(reshape(x, {F, P, heads, dh}), {1, 2, 0, 3});  // (P,heads,F,dh)
        };
        Tensor qp = to_temporal(block.attn.ts_q.forward(tok, training, rng));
        Tensor kp = to_temporal(block.attn.ts_k.forward(tok, training, rng));
        Tensor vp = to_temporal(block.attn.ts_v.forward(tok, training, rng));
        Tensor logits = scale(matmul_nt(qp, kp), 1.0f / static_cast<float>(std::sqrt(static_cast<double>(dh))));
        Tensor probs = softmax(logits, 3);  // (P,heads,F,F); stays live, not probed
        Tensor out = reshape(permute(matmul(probs, vp), {2, 0, 1, 3}), {F, P, heads * dh});
        h = add(h, from_tokens(block.attn.ts_o.forward(out, training, rng), H, W));
    }
    return h;
}

Tensor UNet::predict_noise(const Tensor& z, int64_t t, const PromptEmbedding& cond, AttentionProbe* probe,
                           bool training, Rng* rng) {
    if (z.dim() != 4 || z.size(1) != cfg.in_channels || z.size(2) != cfg.latent_hw || z.size(3) != cfg.latent_hw)
        throw DimensionError("predict_noise: expected (F," + std::to_string(cfg.in_channels) + "," +
                             std::to_string(cfg.latent_hw) + "," + std::to_string(cfg.latent_hw) + "), got " +
                             shape_str(z.shape()));
    if (t < 0 || t >= cfg.train_timesteps) throw ContractError("predict_noise: timestep out of range");
    if (cond.embeddings.size(0) != cfg.max_tokens || cond.embeddings.size(1) != cfg.text_dim)
        throw DimensionError("predict_noise: prompt embedding shape mismatch");

    Tensor temb = add_rowvec(matmul_nt(timestep_embedding(t, 64), temb_w1), temb_b1);
    temb = add_rowvec(matmul_nt(silu(temb), temb_w2), temb_b2);  // (1, temb_dim)

    Tensor h = conv2d(z, conv_in_w, conv_in_b, 1, 1);
    Tensor d0 = run_block(down0, h, temb, cond, probe, training, rng);
    Tensor d1 = run_block(down1, conv2d(d0, downsample_w, downsample_b, 2, 1), temb, cond, probe, training, rng);
    Tensor m = run_block(mid, d1, temb, cond, probe, training, rng);
    Tensor u1 = run_block(up1, concat<float>({m, d1}, 1), temb, cond, probe, training, rng);
    Tensor up = conv2d(upsample_nearest2x(u1), upsample_w, upsample_b, 1, 1);
    Tensor u0 = run_block(up0, concat<float>({up, d0}, 1), temb, cond, probe, training, rng);
    return conv2d(silu(group_norm(u0, cfg.groups, out_gn_g, out_gn_b)), conv_out_w, conv_out_b, 1, 1);
}

/*=============================================== introspection ===============================================*/

std::vector<CrossLayerInfo> UNet::cross_layers() const {
    int64_t hw0 = cfg.latent_hw, hw1 = cfg.latent_hw / 2;
    std::vector<CrossLayerInfo> out;
    for (const auto& [name, hw] : std::vector<std::pair<std::string, int64_t>>{
             {"down0", hw0}, {"down1", hw1}, {"mid", hw1}, {"up1", hw1}, {"up0", hw0}})
        out.push_back({name + ".cross", hw, hw, hw * hw});
    return out;
}

std::vector<std::string> UNet::stattn_layers() const {
    return {"down0.stattn", "down1.stattn", "mid.stattn", "up1.stattn", "up0.stattn"};
}

void UNet::inject_attention(const std::string& layer_id, Tensor override_probs) {
    bool known = false;
    for (const auto& info : cross_layers()) known = known || info.id == layer_id;
    for (const auto& id : stattn_layers()) known = known || id == layer_id;
    if (!known) throw ControlError("inject_attention: unknown layer '" + layer_id + "'");
    pending_injections_[layer_id] = std::move(override_probs);
}

std::vector<std::string> UNet::dps_trainable_names() const {
    std::vector<std::string> out;
    for (const auto& sel : {".tconv.", ".stattn.wq", ".cross.wq", ".tsa."})
        for (const auto& n : params.match(sel)) out.push_back(n);
    return out;
}

}  // namespace miniweave
