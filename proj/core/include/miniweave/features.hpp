#ifndef MINIWEAVE_FEATURES_HPP
#define MINIWEAVE_FEATURES_HPP

#include <cstdint>
#include <vector>

#include "miniweave/tensor.hpp"

namespace miniweave {

// bilinear resize of a (C,H,W) image
Tensor resize_bilinear(const Tensor& img, int64_t out_h, int64_t out_w);

// Frozen seeded strided-conv stack mapping an RGB frame or crop to a
// unit-normalized 128-d vector. Used only by the evaluation metrics.
struct FeatureExtractor {
    static constexpr int64_t kInputSize = 32;
    static constexpr int64_t kDim = 128;
    static constexpr uint64_t kDefaultSeed = 0x4d57666561ull;

    Tensor w1, b1;  // conv 3->16, stride 2
    Tensor w2, b2;  // conv 16->32, stride 2
    Tensor w3, b3;  // conv 32->64, stride 2
    Tensor wout;    // linear 64*4*4 -> 128

    explicit FeatureExtractor(uint64_t seed = kDefaultSeed);

    // (3,H,W), any H,W >= 1 -> unit vector of length 128.
    // An all-zero input maps to the first basis vector.
    std::vector<float> extract(const Tensor& rgb) const;
};

float cosine(const std::vector<float>& a, const std::vector<float>& b);

}  // namespace miniweave

#endif
