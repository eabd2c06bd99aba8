#ifndef MINIWEAVE_TEXT_ENCODER_HPP
#define MINIWEAVE_TEXT_ENCODER_HPP

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "miniweave/tensor.hpp"

namespace miniweave {

enum class TokenRole : uint8_t { Base, Concept, Replaced, Target, Pad };

// Token-string table. Ids are dense and follow manifest order, so the same
// manifest always yields the same ids. Concept tokens start with '$' and live
// in the encoder's trainable slot table, not here.
struct Vocabulary {
    static constexpr const char* kPadToken = "<pad>";
    static constexpr const char* kEmptyToken = "<empty>";
    static constexpr int64_t kPadId = 0;
    static constexpr int64_t kEmptyId = 1;

    std::vector<std::string> tokens;
    std::unordered_map<std::string, int64_t> index;

    // builds from plain words; reserved tokens are prepended, duplicates dropped
    static Vocabulary from_words(const std::vector<std::string>& words);
    static Vocabulary load_manifest(const std::string& path);
    void save_manifest(const std::string& path) const;

    int64_t id(const std::string& token) const;  // VocabularyError if unknown
    bool contains(const std::string& token) const { return index.count(token) > 0; }
    int64_t size() const { return static_cast<int64_t>(tokens.size()); }
};

inline bool is_concept_token(const std::string& tok) { return !tok.empty() && tok[0] == '$'; }

// whitespace split; non-concept tokens lowercased
std::vector<std::string> split_prompt(const std::string& prompt);

struct TokenizedPrompt {
    std::vector<int64_t> ids;            // length max_len; pad id past the words
    std::vector<TokenRole> roles;        // same length
    std::vector<int64_t> concept_slots;  // per position: slot index or -1
    std::vector<std::string> words;      // the unpadded token strings

    std::vector<int64_t> positions_with_role(TokenRole r) const;
    bool empty() const { return words.empty(); }
};

struct PromptEmbedding {
    Tensor embeddings;  // (max_len, dim)
    std::vector<TokenRole> roles;
    std::vector<int64_t> ids;
};

// Frozen text-encoder stand-in with trainable concept slots. Base table,
// positional table and the mixing layer never receive gradients; per token
// the output row is mix(base_or_slot + positional).
struct TextEncoder {
    static constexpr uint64_t kDefaultSeed = 0x4d5774657874ull;

    int64_t max_len = 16;
    int64_t dim = 64;
    Tensor base_table;   // (V, dim), frozen
    Tensor positional;   // (max_len, dim), frozen sinusoidal
    Tensor mixer;        // (dim, dim), frozen; each output row is (base+pos) x mixer
    std::vector<std::string> concept_names;
    std::unordered_map<std::string, int64_t> concept_index;
    Tensor concept_slots;  // (n_concepts, dim), the only trainable part

    TextEncoder(const Vocabulary& vocab, const std::vector<std::string>& concepts, uint64_t seed = kDefaultSeed);

    // slot row := base embedding of the initializer token
    void init_concept_from(const std::string& concept_token, int64_t initializer_id);

    // prompt -> padded ids/roles; concept tokens resolve against the slot table
    TokenizedPrompt tokenize(const Vocabulary& vocab, const std::string& prompt) const;

    PromptEmbedding encode(const TokenizedPrompt& prompt) const;
    PromptEmbedding encode_empty() const;  // the classifier-free unconditional branch

    void set_trainable(bool trainable) { concept_slots.set_requires_grad(trainable); }
};

}  // namespace miniweave

#endif
