#include "miniweave/lora.hpp"

#include <cmath>

#include "miniweave/error.hpp"

namespace miniweave {

LoraAdapter make_lora(const std::string& target, int64_t d_out, int64_t d_in, int64_t rank, float scale,
                      float dropout_p, Rng& rng) {
    if (rank < 1 || rank > std::min(d_out, d_in) / 2)
        throw ConfigError("lora rank " + std::to_string(rank) + " must be in [1, min(d,k)/2] for (" +
                          std::to_string(d_out) + "," + std::to_string(d_in) + ")");
    if (dropout_p < 0.0f || dropout_p >= 1.0f) throw ConfigError("lora dropout must be in [0,1)");
    LoraAdapter ad;
    ad.target = target;
    ad.rank = rank;
    ad.scale = scale;
    ad.dropout_p = dropout_p;
    ad.a = Tensor::randn({rank, d_in}, rng, static_cast<float>(1.0 / std::sqrt(static_cast<double>(d_in))));
    ad.b = Tensor::zeros({d_out, rank});
    return ad;
}

Tensor lora_apply(const Tensor& x, const Tensor& w0, const LoraAdapter& adapter, bool training, Rng* rng) {
    if (w0.dim() != 2 || adapter.a.dim() != 2 || adapter.b.dim() != 2)
        throw ConfigError("lora_apply: expected 2-d weights");
    if (adapter.a.size(1) != w0.size(1) || adapter.b.size(0) != w0.size(0) ||
        adapter.a.size(0) != adapter.rank || adapter.b.size(1) != adapter.rank)
        throw ConfigError("lora_apply: adapter shapes do not match base weight " + shape_str(w0.shape()));
    Tensor base = matmul_nt(x, w0);
    Tensor adapter_in = x;
    if (training && adapter.dropout_p > 0.0f) {
        if (!rng) throw ConfigError("lora_apply: training dropout needs an rng");
        adapter_in = dropout(x, adapter.dropout_p, *rng, true);
    }
    Tensor delta = matmul_nt(matmul_nt(adapter_in, adapter.a), adapter.b);
    return add(base, scale(delta, adapter.scale));
}

Tensor lora_merge(const LoraAdapter& adapter, const Tensor& w0) {
    if (adapter.b.size(0) != w0.size(0) || adapter.a.size(1) != w0.size(1))
        throw ConfigError("lora_merge: adapter shapes do not match base weight");
    return add(w0, scale(matmul(adapter.b, adapter.a), adapter.scale));
}

}  // namespace miniweave
