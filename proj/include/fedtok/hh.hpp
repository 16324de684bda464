#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fedtok/corpus.hpp"
#include "fedtok/rng.hpp"

namespace fedtok {

// One user's privatized word contribution under local differential privacy.
struct HhReport {
    std::string user_id;
    std::vector<std::string> words;  // exactly k randomized-response outputs
};

// Server-side debiased word frequencies. Estimates are real-valued and may
// be negative for rarely reported words (a debiasing artifact); they are
// truncated to zero only when a corpus is built from them.
struct FrequencyEstimate {
    std::map<std::string, double> counts;  // one entry per candidate word
    size_t total_reports = 0;              // privatized words aggregated
};

// Probability that k-ary randomized response transmits the true word, given
// the per-word budget and the candidate-domain size.
double rr_truth_prob(double epsilon_word, size_t domain_size);

// Picks the user's k most frequent candidate-domain words (ties broken
// lexicographically, the list cycled when the user has fewer than k distinct
// matches) and privatizes each independently with randomized response at
// budget epsilon_local / k. A user with no in-domain words contributes k
// uniform draws. The per-word budgets sum to exactly epsilon_local.
HhReport client_report(const UserDataset& user, size_t k,
                       const std::vector<std::string>& candidate_domain,
                       double epsilon_local, Rng& rng);

// Debiases observed report frequencies: with truth probability p and
// off-target probability q = (1-p)/(|domain|-1), the unbiased count of word
// w is (observed(w) - n*q) / (p - q) over n total privatized words.
FrequencyEstimate aggregate(const std::vector<HhReport>& reports,
                            const std::vector<std::string>& candidate_domain,
                            double epsilon_local);

// Draws `size` words i.i.d. from the truncated (negatives clamped to zero),
// normalized estimate and packs them into sentences of 16 words for
// tokenizer training.
std::vector<std::string> build_hh_corpus(const FrequencyEstimate& est,
                                         size_t size, Rng& rng);

// JSONL persistence: one {"user_id": ..., "words": [...]} object per line.
void save_reports(const std::vector<HhReport>& reports,
                  const std::string& path);
std::vector<HhReport> load_reports(const std::string& path);

}  // namespace fedtok
