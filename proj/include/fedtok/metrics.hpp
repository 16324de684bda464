#pragma once

#include <optional>
#include <string>
#include <vector>

#include "fedtok/lm.hpp"
#include "fedtok/tokenizer.hpp"

namespace fedtok {

// Cross-tokenizer evaluation bundle. Perplexity and accuracy are word-based
// so that models under different tokenizers stay comparable: the denominator
// counts whitespace-delimited words, which every tokenizer sees identically.
struct MetricsReport {
    double perplexity_per_word = 0.0;
    double word_accuracy = 0.0;
    double tokens_per_word = 0.0;
    std::optional<double> oov_rate;  // word-level tokenizers only
    std::optional<double> kld;       // set when a reference corpus is given
};

// Accumulates (total negative log likelihood, total words) so that sentence
// scores can be folded in any grouping — the final ratio only sees the two
// sums. value() = exp(total nll / total words).
class PerplexityAccumulator {
public:
    void add(double nll, double words);
    void merge(const PerplexityAccumulator& other);
    double total_nll() const { return nll_; }
    double total_words() const { return words_; }
    double value() const;

private:
    double nll_ = 0.0;
    double words_ = 0.0;
};

// exp(sum of sentence NLLs / sum of word counts) over the corpus. Sentences
// are scored in full — evaluation applies no training-time truncation — so
// the word denominator always matches the scored positions. EOS is predicted
// (numerator) but is not a word (denominator).
double perplexity_per_word(const LmParams& params, const TokenizerModel& tok,
                           const std::vector<std::string>& corpus);

// Teacher-forced per-word top-1 accuracy: a word occurrence counts as
// correct iff, with the reference tokens as context, the argmax at every
// position the word spans equals the reference token. For word-level
// tokenizers an out-of-vocabulary reference word is always incorrect.
// Returns 0 when the corpus has no words.
double word_accuracy(const LmParams& params, const TokenizerModel& tok,
                     const std::vector<std::string>& corpus);

// KL divergence D(reference || candidate) in nats between add-1-smoothed
// unigram distributions over the top_k most frequent reference words (ties
// lexicographic). Candidate words outside that support are ignored.
double unigram_kld(const std::vector<std::string>& reference,
                   const std::vector<std::string>& candidate, size_t top_k);

// Convenience: perplexity, accuracy, tokens per word, and (for word-level
// tokenizers) the OOV rate in one report. kld is left unset.
MetricsReport evaluate_model(const LmParams& params, const TokenizerModel& tok,
                             const std::vector<std::string>& corpus);

}  // namespace fedtok
