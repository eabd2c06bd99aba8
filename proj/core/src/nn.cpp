#include "miniweave/nn.hpp"

#include "miniweave/error.hpp"

namespace miniweave {

Tensor& ParamStore::add(const std::string& name, Tensor t) {
    if (index.count(name)) throw ConfigError("parameter name collision: " + name);
    index[name] = items.size();
    items.emplace_back(name, std::move(t));
    return items.back().second;
}

Tensor* ParamStore::find(const std::string& name) {
    auto it = index.find(name);
    return it == index.end() ? nullptr : &items[it->second].second;
}

const Tensor* ParamStore::find(const std::string& name) const {
    auto it = index.find(name);
    return it == index.end() ? nullptr : &items[it->second].second;
}

std::vector<std::string> ParamStore::names() const {
    std::vector<std::string> out;
    out.reserve(items.size());
    for (const auto& [n, t] : items) out.push_back(n);
    return out;
}

void ParamStore::set_trainable(const std::vector<std::string>& trainable) {
    freeze_all();
    for (const auto& name : trainable) {
        Tensor* t = find(name);
        if (!t) throw ConfigError("set_trainable: unknown parameter " + name);
        t->set_requires_grad(true);
    }
}

void ParamStore::freeze_all() {
    for (auto& [n, t] : items) t.set_requires_grad(false);
}

std::vector<std::string> ParamStore::trainable_names() const {
    std::vector<std::string> out;
    for (const auto& [n, t] : items)
        if (t.requires_grad()) out.push_back(n);
    return out;
}

std::vector<std::string> ParamStore::match(const std::string& selector) const {
    std::vector<std::string> out;
    for (const auto& [n, t] : items)
        if (n.find(selector) != std::string::npos) out.push_back(n);
    return out;
}

LoraSet lora_attach(LinearRegistry& registry, const std::string& selector, int64_t rank, float scale,
                    float dropout_p, Rng& rng) {
    LoraSet set;
    for (auto& [name, linear] : registry) {
        if (name.find(selector) == std::string::npos) continue;
        if (linear->lora) throw ConfigError("projection already has an adapter: " + name);
        auto ad = std::make_unique<LoraAdapter>(
            make_lora(name, linear->w.size(0), linear->w.size(1), rank, scale, dropout_p, rng));
        set.params.add(name + ".lora_a", ad->a);
        set.params.add(name + ".lora_b", ad->b);
        linear->lora = ad.get();
        set.adapters.push_back(std::move(ad));
    }
    if (set.adapters.empty()) throw ConfigError("lora selector matched no projection: '" + selector + "'");
    return set;
}

void lora_detach(LinearRegistry& registry) {
    for (auto& [name, linear] : registry) linear->lora = nullptr;
}

}  // namespace miniweave
