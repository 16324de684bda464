#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "fedtok/corpus.hpp"

namespace fedtok {

// Recipe for a paired "public" / "private" corpus drawn from two overlapping
// Zipfian unigram distributions. `shift` in [0, 1] controls how far the
// private distribution drifts away from the public one:
//   - a fraction `shift` of the shared-word probability mass follows a
//     rank-permuted Zipf law instead of the public ranking (frequency churn);
//   - a fraction `0.5 * shift` of all private tokens are novel words that
//     never occur in the public corpus (emerging-vocabulary effect).
// shift = 0 makes both corpora draws from the identical distribution.
struct SynthConfig {
    size_t shared_words = 400;       // vocabulary both corpora draw from
    size_t novel_words = 80;         // private-only vocabulary
    double shift = 0.0;              // drift strength in [0, 1]
    size_t public_users = 50;
    size_t private_users = 200;
    size_t sentences_per_user = 20;
    size_t min_sentence_words = 4;
    size_t max_sentence_words = 12;
    double zipf_exponent = 1.1;      // word k gets weight (k+1)^-exponent
    uint64_t seed = 0;

    void validate() const;  // throws std::invalid_argument
};

struct SynthCorpora {
    std::vector<UserDataset> public_users;
    std::vector<UserDataset> private_users;
};

// Generates both corpora. Deterministic given cfg (including the seed):
// word surfaces, the rank permutation, and every sentence derive from
// independent child streams of cfg.seed. Persist the result with
// save_corpus_jsonl.
SynthCorpora make_synth(const SynthConfig& cfg);

}  // namespace fedtok
