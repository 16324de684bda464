#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"

namespace fedtok {

using TokenId = int32_t;

enum class TokenizerKind { WordLevel, Bpe };

// Token sequence fed to the language model: starts with BOS, ends with EOS.
struct TokenSeq {
    std::vector<TokenId> ids;

    size_t size() const { return ids.size(); }
};

// A text run produced by pre-tokenization: maximal whitespace or
// non-whitespace span. Runs cover the input exactly, so byte-level BPE
// round-trips any string.
struct TextRun {
    std::string_view text;
    bool is_word;
};

std::vector<TextRun> split_runs(std::string_view text);
std::vector<std::string_view> split_words(std::string_view text);

// Word-level or byte-level-BPE tokenizer. Immutable after training;
// concurrent encode/decode is safe.
class TokenizerModel {
public:
    // Builds a vocab of the (vocab_size - 3) most frequent words plus
    // BOS/EOS/OOV. Frequency ties break lexicographically.
    static TokenizerModel train_word_level(const std::vector<std::string>& corpus,
                                           size_t vocab_size);

    // Byte-level BPE: base alphabet of all 256 bytes, then greedy merges of
    // the most frequent adjacent pair (within runs) until vocab_size is
    // reached or no pair occurs at least twice.
    static TokenizerModel train_bpe(const std::vector<std::string>& corpus,
                                    size_t vocab_size);

    TokenizerKind kind() const { return kind_; }
    size_t vocab_size() const { return surfaces_.size(); }
    TokenId bos_id() const { return bos_id_; }
    TokenId eos_id() const { return eos_id_; }
    TokenId oov_id() const;  // WordLevel only
    bool is_special(TokenId id) const;

    TokenSeq encode(std::string_view sentence) const;
    std::string decode(const TokenSeq& seq) const;

    // encode() plus, for every position, the 0-based ordinal of the word the
    // token belongs to (-1 for specials and whitespace tokens).
    struct EncodedSentence {
        std::vector<TokenId> ids;
        std::vector<int32_t> word_index;
        size_t num_words = 0;
    };
    EncodedSentence encode_with_words(std::string_view sentence) const;

    // Tokenize a raw byte string without adding BOS/EOS. For WordLevel this
    // is a per-word lookup; whitespace-only input yields no tokens.
    std::vector<TokenId> encode_surface(std::string_view surface) const;

    const std::string& token_surface(TokenId id) const;
    std::optional<TokenId> find_token(std::string_view surface) const;
    const std::vector<std::pair<std::string, std::string>>& merges() const {
        return merges_;
    }

    // Fraction of word occurrences mapping to OOV. WordLevel only.
    double oov_rate(const std::vector<std::string>& corpus) const;

    // Mean non-special tokens emitted per word occurrence.
    double tokens_per_word(const std::vector<std::string>& corpus) const;

    nlohmann::json to_json() const;
    static TokenizerModel from_json(const nlohmann::json& j);
    void save(const std::string& path) const;
    static TokenizerModel load(const std::string& path);

    // Stable fingerprint over the canonical serialized form.
    uint64_t hash() const;

private:
    TokenizerModel() = default;

    TokenId add_token(std::string surface);
    void rebuild_merge_ranks();
    std::vector<TokenId> apply_merges(std::string_view run) const;

    TokenizerKind kind_ = TokenizerKind::Bpe;
    std::vector<std::string> surfaces_;
    std::unordered_map<std::string, TokenId> surface_to_id_;
    std::vector<std::pair<std::string, std::string>> merges_;
    // (left_id, right_id) -> (rank, merged_id)
    std::unordered_map<uint64_t, std::pair<int32_t, TokenId>> merge_ranks_;
    TokenId bos_id_ = 0;
    TokenId eos_id_ = 1;
    TokenId oov_id_ = -1;
};

// Escape scheme for token bytes in the JSON vocab: printable ASCII stays
// literal, backslash doubles, anything else becomes \xNN.
std::string escape_token_bytes(std::string_view raw);
std::string unescape_token_bytes(std::string_view escaped);

}  // namespace fedtok
