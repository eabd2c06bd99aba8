#include "miniweave/features.hpp"

#include <cmath>

#include "miniweave/error.hpp"
#include "miniweave/rng.hpp"

namespace miniweave {

Tensor resize_bilinear(const Tensor& img, int64_t out_h, int64_t out_w) {
    if (img.dim() != 3) throw DimensionError("resize_bilinear: expected (C,H,W)");
    int64_t C = img.size(0), H = img.size(1), W = img.size(2);
    Tensor out = Tensor::zeros({C, out_h, out_w});
    for (int64_t c = 0; c < C; ++c)
        for (int64_t oy = 0; oy < out_h; ++oy) {
            double sy = out_h > 1 ? static_cast<double>(oy) * (H - 1) / (out_h - 1) : 0.0;
            int64_t y0 = static_cast<int64_t>(sy);
            int64_t y1 = std::min(y0 + 1, H - 1);
            double fy = sy - static_cast<double>(y0);
            for (int64_t ox = 0; ox < out_w; ++ox) {
                double sx = out_w > 1 ? static_cast<double>(ox) * (W - 1) / (out_w - 1) : 0.0;
                int64_t x0 = static_cast<int64_t>(sx);
                int64_t x1 = std::min(x0 + 1, W - 1);
                double fx = sx - static_cast<double>(x0);
                auto px = [&](int64_t y, int64_t x) { return static_cast<double>(img.data()[(c * H + y) * W + x]); };
                double v = (1 - fy) * ((1 - fx) * px(y0, x0) + fx * px(y0, x1)) +
                           fy * ((1 - fx) * px(y1, x0) + fx * px(y1, x1));
                out.data()[(c * out_h + oy) * out_w + ox] = static_cast<float>(v);
            }
        }
    return out;
}

FeatureExtractor::FeatureExtractor(uint64_t seed) {
    Rng rng(seed);
    auto he = [](int64_t fan_in) { return static_cast<float>(std::sqrt(2.0 / static_cast<double>(fan_in))); };
    Rng r1 = rng.fork(1), r2 = rng.fork(2), r3 = rng.fork(3), r4 = rng.fork(4);
    w1 = Tensor::randn({16, 3, 3, 3}, r1, he(27));
    b1 = Tensor::zeros({16});
    w2 = Tensor::randn({32, 16, 3, 3}, r2, he(144));
    b2 = Tensor::zeros({32});
    w3 = Tensor::randn({64, 32, 3, 3}, r3, he(288));
    b3 = Tensor::zeros({64});
    wout = Tensor::randn({kDim, 64 * 4 * 4}, r4, he(1024));
}

std::vector<float> FeatureExtractor::extract(const Tensor& rgb) const {
    if (rgb.dim() != 3 || rgb.size(0) != 3) throw DimensionError("extract: expected (3,H,W)");
    Tensor x = resize_bilinear(rgb, kInputSize, kInputSize);
    x = reshape(x, {1, 3, kInputSize, kInputSize});
    x = silu(conv2d(x, w1, b1, 2, 1));  // 16x16
    x = silu(conv2d(x, w2, b2, 2, 1));  // 8x8
    x = silu(conv2d(x, w3, b3, 2, 1));  // 4x4
    Tensor flat = reshape(x, {1, 64 * 4 * 4});
    Tensor feat = matmul(flat, permute(wout, {1, 0}));  // (1,128)

    std::vector<float> v(feat.data(), feat.data() + kDim);
    double norm = 0;
    for (float f : v) norm += static_cast<double>(f) * f;
    norm = std::sqrt(norm);
    if (norm < 1e-12) {
        std::fill(v.begin(), v.end(), 0.0f);
        v[0] = 1.0f;  // degenerate-input rule
        return v;
    }
    float inv = static_cast<float>(1.0 / norm);
    for (auto& f : v) f *= inv;
    return v;
}

float cosine(const std::vector<float>& a, const std::vector<float>& b) {
    if (a.size() != b.size()) throw DimensionError("cosine: length mismatch");
    double dot = 0, na = 0, nb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += static_cast<double>(a[i]) * b[i];
        na += static_cast<double>(a[i]) * a[i];
        nb += static_cast<double>(b[i]) * b[i];
    }
    if (na < 1e-24 || nb < 1e-24) throw DataError("cosine: zero-norm vector");
    return static_cast<float>(dot / (std::sqrt(na) * std::sqrt(nb)));
}

}  // namespace miniweave
