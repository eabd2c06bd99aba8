#ifndef MINIWEAVE_LORA_HPP
#define MINIWEAVE_LORA_HPP

#include <string>

#include "miniweave/rng.hpp"
#include "miniweave/tensor.hpp"

namespace miniweave {

// Low-rank additive delta on a frozen (d,k) linear projection. b starts at
// zero so the delta is exactly zero at creation; a is seeded Gaussian.
struct LoraAdapter {
    std::string target;  // name of the base projection, e.g. "down0.cross.wv"
    Tensor a;            // (rank, k)
    Tensor b;            // (d, rank)
    int64_t rank = 4;
    float scale = 1.0f;
    float dropout_p = 0.1f;
};

// rank must satisfy r <= min(d,k)/2; ConfigError otherwise
LoraAdapter make_lora(const std::string& target, int64_t d_out, int64_t d_in, int64_t rank, float scale,
                      float dropout_p, Rng& rng);

// W0 x + scale * B (A drop(x)); dropout hits only the adapter path and only
// while training. x rows are inputs: (..., k) -> (..., d).
Tensor lora_apply(const Tensor& x, const Tensor& w0, const LoraAdapter& adapter, bool training = false,
                  Rng* rng = nullptr);

// W0 + scale * B A
Tensor lora_merge(const LoraAdapter& adapter, const Tensor& w0);

}  // namespace miniweave

#endif
