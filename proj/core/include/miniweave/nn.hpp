#ifndef MINIWEAVE_NN_HPP
#define MINIWEAVE_NN_HPP

#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "miniweave/lora.hpp"
#include "miniweave/tensor.hpp"

namespace miniweave {

// Ordered name -> parameter registry. Tensors are shared handles, so the
// store and the owning layer alias the same storage; loading data into the
// store updates the layer in place.
struct ParamStore {
    std::vector<std::pair<std::string, Tensor>> items;
    std::unordered_map<std::string, size_t> index;

    Tensor& add(const std::string& name, Tensor t);
    Tensor* find(const std::string& name);
    const Tensor* find(const std::string& name) const;
    std::vector<std::string> names() const;

    // exact name set becomes trainable; everything else is frozen
    void set_trainable(const std::vector<std::string>& trainable);
    void freeze_all();
    std::vector<std::string> trainable_names() const;

    // names containing `selector` as a substring
    std::vector<std::string> match(const std::string& selector) const;
};

// Linear projection y = x W^T (+ b), with an optional attached low-rank
// adapter on the weight.
struct Linear {
    Tensor w;  // (out, in)
    Tensor b;  // optional; invalid tensor means no bias
    const LoraAdapter* lora = nullptr;

    Tensor forward(const Tensor& x, bool training = false, Rng* rng = nullptr) const {
        Tensor y = lora ? lora_apply(x, w, *lora, training, rng) : matmul_nt(x, w);
        return b.valid() ? add_rowvec(y, b) : y;
    }
};

using LinearRegistry = std::vector<std::pair<std::string, Linear*>>;

// Adapters plus their own parameter store ("<target>.lora_a"/"<target>.lora_b").
struct LoraSet {
    std::vector<std::unique_ptr<LoraAdapter>> adapters;
    ParamStore params;
    bool empty() const { return adapters.empty(); }
};

// Attaches a fresh adapter to every registered projection whose name contains
// `selector`. ConfigError when nothing matches.
LoraSet lora_attach(LinearRegistry& registry, const std::string& selector, int64_t rank, float scale,
                    float dropout_p, Rng& rng);

// Restores plain base projections; outputs are bit-identical to pre-attach.
void lora_detach(LinearRegistry& registry);

}  // namespace miniweave

#endif
