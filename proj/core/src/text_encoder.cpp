#include "miniweave/text_encoder.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "miniweave/error.hpp"
#include "miniweave/rng.hpp"

namespace miniweave {

/*=============================================== Vocabulary ===============================================*/

Vocabulary Vocabulary::from_words(const std::vector<std::string>& words) {
    Vocabulary v;
    auto push = [&v](const std::string& w) {
        if (v.index.count(w)) return;
        v.index[w] = static_cast<int64_t>(v.tokens.size());
        v.tokens.push_back(w);
    };
    push(kPadToken);
    push(kEmptyToken);
    for (const auto& w : words)
        if (!is_concept_token(w)) push(w);
    return v;
}

Vocabulary Vocabulary::load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("vocabulary manifest not found: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("bad vocabulary manifest " + path + ": " + e.what());
    }
    if (!j.is_array()) throw IoError("vocabulary manifest must be a JSON list of token strings");
    Vocabulary v;
    for (const auto& item : j) {
        std::string w = item.get<std::string>();
        if (v.index.count(w)) throw IoError("duplicate token in manifest: " + w);
        v.index[w] = static_cast<int64_t>(v.tokens.size());
        v.tokens.push_back(w);
    }
    if (v.tokens.size() < 2 || v.tokens[0] != kPadToken || v.tokens[1] != kEmptyToken)
        throw IoError("vocabulary manifest must start with reserved tokens " + std::string(kPadToken) + ", " +
                      std::string(kEmptyToken));
    return v;
}

void Vocabulary::save_manifest(const std::string& path) const {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& t : tokens) j.push_back(t);
    std::ofstream out(path);
    if (!out) throw IoError("cannot write vocabulary manifest: " + path);
    out << j.dump(2) << "\n";
}

int64_t Vocabulary::id(const std::string& token) const {
    auto it = index.find(token);
    if (it == index.end()) throw VocabularyError("unknown token: '" + token + "'");
    return it->second;
}

std::vector<std::string> split_prompt(const std::string& prompt) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : prompt) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    for (auto& w : out)
        if (!is_concept_token(w))
            std::transform(w.begin(), w.end(), w.begin(), [](unsigned char c) { return std::tolower(c); });
    return out;
}

std::vector<int64_t> TokenizedPrompt::positions_with_role(TokenRole r) const {
    std::vector<int64_t> out;
    for (size_t i = 0; i < roles.size(); ++i)
        if (roles[i] == r) out.push_back(static_cast<int64_t>(i));
    return out;
}

/*=============================================== TextEncoder ===============================================*/

namespace {

Tensor sinusoidal_table(int64_t len, int64_t dim) {
    Tensor t = Tensor::zeros({len, dim});
    for (int64_t p = 0; p < len; ++p)
        for (int64_t i = 0; i < dim / 2; ++i) {
            double freq = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(dim));
            t.data()[p * dim + 2 * i] = static_cast<float>(std::sin(p * freq));
            t.data()[p * dim + 2 * i + 1] = static_cast<float>(std::cos(p * freq));
        }
    return t;
}

}  // namespace

TextEncoder::TextEncoder(const Vocabulary& vocab, const std::vector<std::string>& concepts, uint64_t seed) {
    Rng rng(seed);
    Rng base_rng = rng.fork(1), mix_rng = rng.fork(2), slot_rng = rng.fork(3);
    base_table = Tensor::randn({vocab.size(), dim}, base_rng, 0.1f);
    positional = sinusoidal_table(max_len, dim);
    mixer = Tensor::randn({dim, dim}, mix_rng, static_cast<float>(1.0 / std::sqrt(static_cast<double>(dim))));
    for (const auto& c : concepts) {
        if (!is_concept_token(c)) throw ConfigError("concept token must start with '$': " + c);
        if (concept_index.count(c)) throw ConfigError("duplicate concept token: " + c);
        concept_index[c] = static_cast<int64_t>(concept_names.size());
        concept_names.push_back(c);
    }
    int64_t n = std::max<int64_t>(1, static_cast<int64_t>(concept_names.size()));
    concept_slots = Tensor::randn({n, dim}, slot_rng, 0.1f);
}

void TextEncoder::init_concept_from(const std::string& concept_token, int64_t initializer_id) {
    auto it = concept_index.find(concept_token);
    if (it == concept_index.end()) throw ConfigError("unknown concept token: " + concept_token);
    if (initializer_id < 0 || initializer_id >= base_table.size(0))
        throw ConfigError("initializer token id out of range");
    std::copy(base_table.data() + initializer_id * dim, base_table.data() + (initializer_id + 1) * dim,
              concept_slots.data() + it->second * dim);
}

TokenizedPrompt TextEncoder::tokenize(const Vocabulary& vocab, const std::string& prompt) const {
    TokenizedPrompt tp;
    tp.words = split_prompt(prompt);
    if (static_cast<int64_t>(tp.words.size()) > max_len)
        throw ConfigError("prompt longer than " + std::to_string(max_len) + " tokens");
    tp.ids.assign(static_cast<size_t>(max_len), Vocabulary::kPadId);
    tp.roles.assign(static_cast<size_t>(max_len), TokenRole::Pad);
    tp.concept_slots.assign(static_cast<size_t>(max_len), -1);
    for (size_t i = 0; i < tp.words.size(); ++i) {
        const std::string& w = tp.words[i];
        if (is_concept_token(w)) {
            auto it = concept_index.find(w);
            if (it == concept_index.end()) throw VocabularyError("concept token has no slot: '" + w + "'");
            tp.ids[i] = Vocabulary::kPadId;
            tp.concept_slots[i] = it->second;
            tp.roles[i] = TokenRole::Concept;
        } else {
            tp.ids[i] = vocab.id(w);
            tp.roles[i] = TokenRole::Base;
        }
    }
    return tp;
}

PromptEmbedding TextEncoder::encode(const TokenizedPrompt& prompt) const {
    if (static_cast<int64_t>(prompt.ids.size()) != max_len) throw ContractError("tokenized prompt has wrong length");
    // per-position rows from the base table or the trainable slot table
    std::vector<Tensor> rows;
    rows.reserve(prompt.ids.size());
    for (size_t i = 0; i < prompt.ids.size(); ++i) {
        if (prompt.concept_slots[i] >= 0)
            rows.push_back(slice(concept_slots, 0, prompt.concept_slots[i], 1));
        else
            rows.push_back(embedding_rows(base_table, {prompt.ids[i]}));
    }
    Tensor stacked = concat(rows, 0);                       // (max_len, dim)
    Tensor mixed = matmul(add(stacked, positional), mixer); // frozen mixing
    PromptEmbedding pe;
    pe.embeddings = mixed;
    pe.roles = prompt.roles;
    pe.ids = prompt.ids;
    return pe;
}

PromptEmbedding TextEncoder::encode_empty() const {
    TokenizedPrompt tp;
    tp.ids.assign(static_cast<size_t>(max_len), Vocabulary::kPadId);
    tp.roles.assign(static_cast<size_t>(max_len), TokenRole::Pad);
    tp.concept_slots.assign(static_cast<size_t>(max_len), -1);
    return encode(tp);
}

}  // namespace miniweave
