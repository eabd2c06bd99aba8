#include "miniweave/diffusion.hpp"

#include <cmath>

#include "miniweave/error.hpp"

namespace miniweave {

NoiseSchedule::NoiseSchedule(int64_t t_train_steps, double beta_start, double beta_end) : t_train(t_train_steps) {
    if (t_train < 2) throw ConfigError("schedule needs at least 2 timesteps");
    if (!(beta_start > 0.0) || !(beta_end < 1.0) || beta_start > beta_end)
        throw ConfigError("schedule betas must satisfy 0 < beta_start <= beta_end < 1");
    beta.resize(static_cast<size_t>(t_train));
    alpha_bar.resize(static_cast<size_t>(t_train));
    double prod = 1.0;
    for (int64_t t = 0; t < t_train; ++t) {
        double b = beta_start + (beta_end - beta_start) * static_cast<double>(t) / static_cast<double>(t_train - 1);
        beta[static_cast<size_t>(t)] = static_cast<float>(b);
        prod *= 1.0 - b;
        alpha_bar[static_cast<size_t>(t)] = prod;
    }
}

double NoiseSchedule::abar(int64_t t) const {
    if (t == -1) return 1.0;
    if (t < 0 || t >= t_train) throw ContractError("abar: timestep out of range");
    return alpha_bar[static_cast<size_t>(t)];
}

Tensor add_noise(const NoiseSchedule& ns, const Tensor& z0, const Tensor& eps, int64_t t) {
    check_same_shape("add_noise", z0, eps);
    if (t < 0 || t >= ns.t_train) throw ContractError("add_noise: timestep out of range");
    double a = ns.abar(t);
    float sa = static_cast<float>(std::sqrt(a));
    float sb = static_cast<float>(std::sqrt(1.0 - a));
    return add(scale(z0, sa), scale(eps, sb));
}

namespace {

Tensor ddim_update(const NoiseSchedule& ns, const Tensor& z, const Tensor& eps_hat, int64_t t_from, int64_t t_to) {
    check_same_shape("ddim", z, eps_hat);
    double a_from = ns.abar(t_from), a_to = ns.abar(t_to);
    float sa_from = static_cast<float>(std::sqrt(a_from));
    float sb_from = static_cast<float>(std::sqrt(1.0 - a_from));
    float sa_to = static_cast<float>(std::sqrt(a_to));
    float sb_to = static_cast<float>(std::sqrt(1.0 - a_to));
    // z0_pred = (z - sb_from * eps) / sa_from; z_to = sa_to * z0_pred + sb_to * eps
    Tensor z0_pred = scale(sub(z, scale(eps_hat, sb_from)), 1.0f / sa_from);
    return add(scale(z0_pred, sa_to), scale(eps_hat, sb_to));
}

}  // namespace

Tensor ddim_step(const NoiseSchedule& ns, const Tensor& z_t, const Tensor& eps_hat, int64_t t_from, int64_t t_to) {
    if (t_to >= t_from) throw ContractError("ddim_step: target timestep must descend");
    return ddim_update(ns, z_t, eps_hat, t_from, t_to);
}

Tensor ddim_invert_step(const NoiseSchedule& ns, const Tensor& z_t, const Tensor& eps_hat, int64_t t_from,
                        int64_t t_to) {
    if (t_to <= t_from) throw ContractError("ddim_invert_step: target timestep must ascend");
    return ddim_update(ns, z_t, eps_hat, t_from, t_to);
}

Tensor guided_noise(const Tensor& eps_cond, const Tensor& eps_uncond, float scale_factor) {
    check_same_shape("guided_noise", eps_cond, eps_uncond);
    return add(eps_uncond, scale(sub(eps_cond, eps_uncond), scale_factor));
}

std::vector<int64_t> ddim_grid(const NoiseSchedule& ns, int64_t steps) {
    if (steps < 1 || ns.t_train % steps != 0)
        throw ContractError("ddim grid: step count " + std::to_string(steps) + " must divide " +
                            std::to_string(ns.t_train));
    int64_t stride = ns.t_train / steps;
    std::vector<int64_t> ts(static_cast<size_t>(steps));
    for (int64_t i = 0; i < steps; ++i) ts[static_cast<size_t>(i)] = i * stride;
    return ts;
}

DiffusionSampler::DiffusionSampler(UNet& u, const NoiseSchedule& ns, SamplerConfig sc)
    : unet(u), schedule(ns), cfg(sc) {
    if (cfg.eta != 0.0f) throw ConfigError("sampler: only deterministic DDIM (eta = 0) is supported");
    ddim_grid(ns, cfg.steps);  // validates divisibility up front
}

InversionTrace DiffusionSampler::invert(const Tensor& z0, const PromptEmbedding& cond, const ProbeProvider& probe) {
    auto ts = ddim_grid(schedule, cfg.steps);
    InversionTrace trace;
    trace.timesteps = ts;
    trace.latents.reserve(ts.size());
    Tensor z = z0.detach();
    for (size_t i = 0; i < ts.size(); ++i) {
        AttentionProbe* p = probe ? probe(static_cast<int64_t>(i), ts[i]) : nullptr;
        Tensor eps = unet.predict_noise(z, ts[i], cond, p);
        trace.latents.push_back(z);
        int64_t t_from = i == 0 ? -1 : ts[i - 1];
        z = ddim_invert_step(schedule, z, eps, t_from, ts[i]);
    }
    trace.z_terminal = z;
    return trace;
}

Tensor DiffusionSampler::sample(const Tensor& z_terminal, const PromptEmbedding& cond, const PromptEmbedding& uncond,
                                const ProbeProvider& probe) {
    auto ts = ddim_grid(schedule, cfg.steps);
    Tensor z = z_terminal.detach();
    for (int64_t k = 0; k < cfg.steps; ++k) {
        int64_t i = cfg.steps - 1 - k;
        int64_t t = ts[static_cast<size_t>(i)];
        AttentionProbe* p = probe ? probe(k, t) : nullptr;
        Tensor eps = unet.predict_noise(z, t, cond, p);
        if (cfg.guidance != 1.0f)
            eps = guided_noise(eps, unet.predict_noise(z, t, uncond), cfg.guidance);
        int64_t t_to = i == 0 ? -1 : ts[static_cast<size_t>(i - 1)];
        z = ddim_step(schedule, z, eps, t, t_to);
    }
    return z;
}

}  // namespace miniweave
