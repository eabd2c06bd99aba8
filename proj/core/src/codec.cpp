#include "miniweave/codec.hpp"

#include <cmath>

#include "miniweave/error.hpp"
#include "miniweave/rng.hpp"

namespace miniweave {

namespace {

// seeded Gaussian matrix orthonormalized by modified Gram-Schmidt
Tensor seeded_orthogonal(int64_t n, uint64_t seed) {
    Rng rng(seed);
    std::vector<double> m(static_cast<size_t>(n * n));
    for (auto& v : m) v = rng.gaussian();
    for (int64_t i = 0; i < n; ++i) {
        double* ri = m.data() + i * n;
        for (int64_t j = 0; j < i; ++j) {
            const double* rj = m.data() + j * n;
            double dot = 0;
            for (int64_t k = 0; k < n; ++k) dot += ri[k] * rj[k];
            for (int64_t k = 0; k < n; ++k) ri[k] -= dot * rj[k];
        }
        double norm = 0;
        for (int64_t k = 0; k < n; ++k) norm += ri[k] * ri[k];
        norm = std::sqrt(norm);
        for (int64_t k = 0; k < n; ++k) ri[k] /= norm;
    }
    std::vector<float> out(m.size());
    for (size_t i = 0; i < m.size(); ++i) out[i] = static_cast<float>(m[i]);
    return Tensor::from_data({n, n}, std::move(out));
}

}  // namespace

LatentCodec::LatentCodec(uint64_t seed) : mixer(seeded_orthogonal(kLatentChannels, seed)) {}

Tensor LatentCodec::encode(const Tensor& video) const {
    if (video.dim() != 4 || video.size(1) != 3)
        throw DimensionError("encode: expected (F,3,H,W), got " + shape_str(video.shape()));
    int64_t F = video.size(0), H = video.size(2), W = video.size(3);
    if (H % kPatch != 0 || W % kPatch != 0)
        throw DimensionError("encode: spatial dims must be divisible by " + std::to_string(kPatch));
    int64_t h = H / kPatch, w = W / kPatch;
    const int64_t C = kLatentChannels;

    Tensor out = Tensor::zeros({F, C, h, w});
    std::vector<float> patch(static_cast<size_t>(C));
    const float* q = mixer.data();
    for (int64_t f = 0; f < F; ++f)
        for (int64_t y = 0; y < h; ++y)
            for (int64_t x = 0; x < w; ++x) {
                for (int64_t c = 0; c < 3; ++c)
                    for (int64_t py = 0; py < kPatch; ++py)
                        for (int64_t px = 0; px < kPatch; ++px)
                            patch[static_cast<size_t>((c * kPatch + py) * kPatch + px)] =
                                video.data()[((f * 3 + c) * H + y * kPatch + py) * W + x * kPatch + px];
                for (int64_t k = 0; k < C; ++k) {
                    float acc = 0;
                    for (int64_t j = 0; j < C; ++j) acc += q[k * C + j] * patch[static_cast<size_t>(j)];
                    out.data()[((f * C + k) * h + y) * w + x] = acc;
                }
            }
    return out;
}

Tensor LatentCodec::decode(const Tensor& latent) const {
    if (latent.dim() != 4 || latent.size(1) != kLatentChannels)
        throw DimensionError("decode: expected (F,48,h,w), got " + shape_str(latent.shape()));
    int64_t F = latent.size(0), h = latent.size(2), w = latent.size(3);
    int64_t H = h * kPatch, W = w * kPatch;
    const int64_t C = kLatentChannels;

    Tensor out = Tensor::zeros({F, 3, H, W});
    std::vector<float> patch(static_cast<size_t>(C));
    const float* q = mixer.data();
    for (int64_t f = 0; f < F; ++f)
        for (int64_t y = 0; y < h; ++y)
            for (int64_t x = 0; x < w; ++x) {
                for (int64_t j = 0; j < C; ++j) {
                    float acc = 0;
                    for (int64_t k = 0; k < C; ++k)
                        acc += q[k * C + j] * latent.data()[((f * C + k) * h + y) * w + x];
                    patch[static_cast<size_t>(j)] = acc;
                }
                for (int64_t c = 0; c < 3; ++c)
                    for (int64_t py = 0; py < kPatch; ++py)
                        for (int64_t px = 0; px < kPatch; ++px) {
                            float v = patch[static_cast<size_t>((c * kPatch + py) * kPatch + px)];
                            out.data()[((f * 3 + c) * H + y * kPatch + py) * W + x * kPatch + px] =
                                std::min(1.0f, std::max(0.0f, v));
                        }
            }
    return out;
}

}  // namespace miniweave
