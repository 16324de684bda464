#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedtok/tokenizer.hpp"

namespace fedtok {

// One user's private sentences. A "sentence" is one newline-delimited post.
struct UserDataset {
    std::string user_id;
    std::vector<std::string> sentences;
};

// Disjoint user-level partition: no user contributes to both sides.
struct CorpusSplit {
    std::vector<UserDataset> train_users;
    std::vector<UserDataset> test_users;
};

enum class CorpusFormat { Jsonl, PlainDir };

// Jsonl: one {"user_id": ..., "text": ...} object per line; records sharing a
// user_id merge in file order. PlainDir: one file per user (user_id = file
// name), files visited in name order. Text splits into sentences on newlines;
// empty lines are skipped, and users left with no sentences are dropped.
std::vector<UserDataset> load_corpus(const std::string& path, CorpusFormat format);

// Keeps leading sentences while the cumulative token count (BOS/EOS excluded)
// stays within cap; the first sentence that would overflow ends the scan.
UserDataset cap_user_tokens(const UserDataset& ds, const TokenizerModel& tok,
                            size_t cap);

// Applies cap_user_tokens to every user and drops users left empty.
std::vector<UserDataset> cap_all_users(const std::vector<UserDataset>& users,
                                       const TokenizerModel& tok, size_t cap);

// Deterministic user-level split: round(test_fraction * n) users go to test.
CorpusSplit split_users(const std::vector<UserDataset>& datasets,
                        double test_fraction, uint64_t seed);

// Writes users as JSONL, one {"user_id": ..., "text": ...} object per line
// with the user's sentences joined by newlines — the inverse of load_corpus
// with CorpusFormat::Jsonl. Throws std::runtime_error on I/O failure.
void save_corpus_jsonl(const std::vector<UserDataset>& users,
                       const std::string& path);

// Number of maximal whitespace-delimited non-empty segments.
size_t word_count(std::string_view sentence);

// All sentences of all users, in user order.
std::vector<std::string> flatten_sentences(const std::vector<UserDataset>& users);

}  // namespace fedtok
