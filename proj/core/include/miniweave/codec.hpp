#ifndef MINIWEAVE_CODEC_HPP
#define MINIWEAVE_CODEC_HPP

#include <cstdint>

#include "miniweave/tensor.hpp"

namespace miniweave {

// Exactly invertible latent codec standing in for a pretrained autoencoder:
// 4x4 space-to-depth followed by a fixed seeded orthogonal channel mixing.
// encode is linear; decode is the transpose mixing + depth-to-space + clamp
// to [0,1], so decode(encode(x)) == x within float error for unit-interval x.
struct LatentCodec {
    static constexpr int64_t kPatch = 4;
    static constexpr int64_t kLatentChannels = 48;  // 3 * 4 * 4
    static constexpr uint64_t kDefaultSeed = 0x4d57636f646563ull;

    Tensor mixer;  // (48,48) orthogonal

    explicit LatentCodec(uint64_t seed = kDefaultSeed);

    // (F,3,H,W) -> (F,48,H/4,W/4); H,W must be divisible by 4
    Tensor encode(const Tensor& video) const;
    // (F,48,h,w) -> (F,3,4h,4w), clamped to [0,1]
    Tensor decode(const Tensor& latent) const;
};

}  // namespace miniweave

#endif
