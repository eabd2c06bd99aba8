#ifndef MINIWEAVE_UNET_HPP
#define MINIWEAVE_UNET_HPP

#include <map>
#include <string>
#include <vector>

#include "miniweave/nn.hpp"
#include "miniweave/tensor.hpp"
#include "miniweave/text_encoder.hpp"

namespace miniweave {

enum class AttnKind : uint8_t { SpatioTemporal, Cross };

// Observes or overrides post-softmax attention probabilities during a
// forward pass. Shapes: SpatioTemporal (F, heads, P, 2P); Cross (F, heads,
// P, tokens). The returned tensor is used downstream, so a probe can swap or
// blend matrices while the values keep coming from live latents.
struct AttentionProbe {
    virtual ~AttentionProbe() = default;
    virtual Tensor process(const std::string& layer, AttnKind kind, const Tensor& probs) { return probs; }
};

struct UNetConfig {
    int64_t in_channels = 48;
    int64_t latent_hw = 16;  // input latents are (F, in_channels, latent_hw, latent_hw)
    int64_t text_dim = 64;
    int64_t max_tokens = 16;
    std::vector<int64_t> widths = {64, 128};
    int64_t heads = 4;
    int64_t head_dim = 16;
    int64_t temb_dim = 128;
    int64_t groups = 8;
    int64_t temporal_rank_div = 8;  // temporal conv bottleneck r = max(4, C/div)
    int64_t train_timesteps = 1000;
    bool temporal_modules = true;  // false runs the per-frame 2D path
};

struct ResBlock {
    Tensor gn1_g, gn1_b, conv1_w, conv1_b;
    Tensor temb_w, temb_b;  // (C, temb_dim) per-channel shift from the timestep embedding
    Tensor gn2_g, gn2_b, conv2_w, conv2_b;
    Tensor skip_w;  // 1x1 projection when channel count changes; invalid otherwise
};

// Low-rank temporal conv pair with a zero-initialized output conv; the block
// is an exact identity at initialization (residual of zero).
struct TemporalConvBlock {
    Tensor w_in, b_in;    // (r, C, 3)
    Tensor w_out, b_out;  // (C, r, 3), zero-init
};

// ST-Attn + cross-attn + temporal self-attn with per-path pre-norms. The
// temporal self-attn output projection is zero-initialized, making that path
// an exact identity at initialization.
struct AttentionBlock {
    Tensor st_gn_g, st_gn_b;
    Linear st_q, st_k, st_v, st_o;
    Tensor cr_gn_g, cr_gn_b;
    Linear cr_q, cr_k, cr_v, cr_o;
    Tensor ts_gn_g, ts_gn_b;
    Linear ts_q, ts_k, ts_v, ts_o;
};

struct UNetBlock {
    std::string name;
    int64_t channels = 0;
    int64_t hw = 0;  // spatial side length at this block
    ResBlock res;
    TemporalConvBlock tconv;
    AttentionBlock attn;
};

struct CrossLayerInfo {
    std::string id;     // "<block>.cross"
    int64_t height = 0;
    int64_t width = 0;
    int64_t positions = 0;  // height * width
};

// Temporally extended noise predictor: 2 down blocks, mid, 2 up blocks, with
// ST-Attn, text cross-attention and zero-initialized temporal modules at
// every block. Cross-attention value projections are the LoRA attach points.
struct UNet {
    UNetConfig cfg;
    ParamStore params;
    LinearRegistry linears;

    Tensor conv_in_w, conv_in_b;
    Tensor temb_w1, temb_b1, temb_w2, temb_b2;
    UNetBlock down0, down1, mid, up1, up0;
    Tensor downsample_w, downsample_b;
    Tensor upsample_w, upsample_b;
    Tensor out_gn_g, out_gn_b, conv_out_w, conv_out_b;

    UNet(const UNetConfig& config, uint64_t seed);
    UNet(const UNet&) = delete;
    UNet& operator=(const UNet&) = delete;

    // z (F, in_channels, latent_hw, latent_hw), t in [0, train_timesteps)
    Tensor predict_noise(const Tensor& z, int64_t t, const PromptEmbedding& cond, AttentionProbe* probe = nullptr,
                         bool training = false, Rng* rng = nullptr);

    // the K text cross-attention layers in forward order, with resolutions
    std::vector<CrossLayerInfo> cross_layers() const;
    std::vector<std::string> stattn_layers() const;

    // one-shot probability override for the next forward pass
    void inject_attention(const std::string& layer_id, Tensor override_probs);

    // trainable name sets
    std::vector<std::string> dps_trainable_names() const;

private:
    std::map<std::string, Tensor> pending_injections_;

    Tensor run_block(UNetBlock& block, const Tensor& x, const Tensor& temb, const PromptEmbedding& cond,
                     AttentionProbe* probe, bool training, Rng* rng);
    Tensor apply_probe(const std::string& layer, AttnKind kind, Tensor probs, AttentionProbe* probe);
};

}  // namespace miniweave

#endif
