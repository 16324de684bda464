#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "fedtok/lm.hpp"
#include "fedtok/tokenizer.hpp"

namespace fedtok {

// Controls how a synthetic corpus is sampled from a trained model.
struct SamplingConfig {
    size_t corpus_size = 1;  // number of sentences to draw
    size_t l_max = 64;       // token budget per sampled sentence
    uint64_t seed = 0;

    void validate() const;
};

// Sparse row-stochastic matrix that rewrites an old vocabulary's embedding
// rows into a new vocabulary's rows. Row i lists the old-token constituents
// of new token i as (old id, weight) pairs; all weights within a row are
// equal to 1/(constituent count), so every row is a convex combination.
// BOS and EOS map to their old counterparts with weight 1.
struct RemapMatrix {
    size_t new_vocab = 0;
    size_t old_vocab = 0;
    std::vector<std::vector<std::pair<TokenId, double>>> rows;

    // {"<new id>": [[old id, weight], ...], ...} for inspection dumps.
    nlohmann::json to_json() const;
};

// Draws exactly cfg.corpus_size sentences from the model, each generated with
// its own seed derived from (cfg.seed, sentence index), so the corpus is
// deterministic and sentences could be drawn in any order. Newlines inside a
// sampled sentence are replaced with spaces so the corpus stays one sentence
// per line when persisted.
std::vector<std::string> generate_corpus(const LmParams& params,
                                         const TokenizerModel& tok,
                                         const SamplingConfig& cfg);

// For every token of new_tok, encodes its surface with old_tok (no BOS/EOS)
// and assigns each constituent the weight 1/(constituent count). new_tok must
// be a byte-pair tokenizer; a surface that encodes to nothing is an error.
RemapMatrix build_remap(const TokenizerModel& old_tok,
                        const TokenizerModel& new_tok);

// Rewrites the embedding matrix and output bias through the remap matrix:
// new row i = sum_j w_ij * old row j. Every other parameter is copied
// bit-identically; only the vocabulary dimension changes.
LmParams apply_remap(const LmParams& params, const RemapMatrix& map);

struct UpdateResult {
    LmParams params;
    TokenizerModel tokenizer;
    std::vector<std::string> sampled_corpus;
    uint64_t corpus_hash = 0;
    uint64_t tokenizer_hash = 0;
};

// Tokenizer refresh without touching user data: sample a corpus from the
// model, train a fresh byte-pair tokenizer on it (same vocabulary budget as
// old_tok), and rewrite the model's embedding and output bias through the
// remap matrix. A pure function of (params, old_tok, cfg) — it has no access
// to user text, so it is postprocessing of the trained model and spends no
// privacy budget.
UpdateResult update(const LmParams& params, const TokenizerModel& old_tok,
                    const SamplingConfig& cfg);

// FNV-1a hash of the corpus serialized one sentence per line.
uint64_t corpus_hash(const std::vector<std::string>& corpus);

// Writes the corpus as plain text, one sentence per line.
void save_corpus(const std::vector<std::string>& corpus,
                 const std::string& path);

}  // namespace fedtok
