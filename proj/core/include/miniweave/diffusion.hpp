#ifndef MINIWEAVE_DIFFUSION_HPP
#define MINIWEAVE_DIFFUSION_HPP

#include <functional>
#include <vector>

#include "miniweave/tensor.hpp"
#include "miniweave/unet.hpp"

namespace miniweave {

// Linear beta schedule. alpha_bar is strictly decreasing in (0,1); the
// virtual timestep -1 is the clean endpoint with alpha_bar exactly 1.
struct NoiseSchedule {
    int64_t t_train = 1000;
    std::vector<float> beta;
    std::vector<double> alpha_bar;

    explicit NoiseSchedule(int64_t t_train_steps = 1000, double beta_start = 8.5e-4, double beta_end = 1.2e-2);

    double abar(int64_t t) const;  // t in [-1, t_train)
};

struct SamplerConfig {
    int64_t steps = 50;
    float guidance = 12.5f;
    float eta = 0.0f;  // deterministic DDIM only
};

// z_t = sqrt(abar_t) z0 + sqrt(1-abar_t) eps
Tensor add_noise(const NoiseSchedule& ns, const Tensor& z0, const Tensor& eps, int64_t t);

// deterministic DDIM update between noise levels; t_to must be below t_from
Tensor ddim_step(const NoiseSchedule& ns, const Tensor& z_t, const Tensor& eps_hat, int64_t t_from, int64_t t_to);
// algebraic reverse of ddim_step under a locally constant eps_hat; t_to above t_from
Tensor ddim_invert_step(const NoiseSchedule& ns, const Tensor& z_t, const Tensor& eps_hat, int64_t t_from,
                        int64_t t_to);

// classifier-free guidance: uncond + scale * (cond - uncond)
Tensor guided_noise(const Tensor& eps_cond, const Tensor& eps_uncond, float scale);

// evenly spaced timestep grid {0, stride, ..., t_train - stride}; steps must
// divide t_train
std::vector<int64_t> ddim_grid(const NoiseSchedule& ns, int64_t steps);

struct InversionTrace {
    std::vector<int64_t> timesteps;  // ascending grid, one per step
    std::vector<Tensor> latents;     // latents[i]: state fed to the noise predictor at step i
    Tensor z_terminal;               // the fully inverted latent
};

// DDIM inversion and guided sampling around one UNet. The probe provider is
// consulted once per step with (step index, timestep) and may return a probe
// for that step's conditional forward; nullptr leaves attention live.
struct DiffusionSampler {
    UNet& unet;
    const NoiseSchedule& schedule;
    SamplerConfig cfg;

    using ProbeProvider = std::function<AttentionProbe*(int64_t step, int64_t t)>;

    DiffusionSampler(UNet& u, const NoiseSchedule& ns, SamplerConfig sc);

    // runs conditioned on the source prompt at guidance 1; stores per-step
    // pre-update latents so records can be recomputed later
    InversionTrace invert(const Tensor& z0, const PromptEmbedding& cond, const ProbeProvider& probe = nullptr);

    // guided DDIM sampling from z_T; step index 0 is the noisiest step. The
    // probe only ever touches the conditional branch.
    Tensor sample(const Tensor& z_terminal, const PromptEmbedding& cond, const PromptEmbedding& uncond,
                  const ProbeProvider& probe = nullptr);
};

}  // namespace miniweave

#endif
