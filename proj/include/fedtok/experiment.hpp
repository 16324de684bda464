#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "fedtok/corpus.hpp"
#include "fedtok/dp.hpp"
#include "fedtok/fed.hpp"
#include "fedtok/lm.hpp"
#include "fedtok/metrics.hpp"
#include "fedtok/tokenizer.hpp"
#include "fedtok/update.hpp"

namespace fedtok {

// How the tokenizer for the federated run is obtained.
//   Baseline        - tokenizer trained on the public corpus.
//   Oracle          - tokenizer trained directly on the private train split
//                     (privacy-violating reference).
//   SampledTwoPhase - phase 1 trains on the first half of the private users
//                     with the public tokenizer; a corpus sampled from that
//                     model retrains the tokenizer; phase 2 trains a fresh
//                     model on the second half with the new tokenizer.
//   SwitchAtRound   - one continuous run that applies the sample-retrain-remap
//                     update at a chosen round and keeps training.
//   HeavyHitters    - tokenizer trained on a corpus reconstructed from
//                     locally-randomized word reports (separate local budget).
enum class Protocol {
    Baseline,
    Oracle,
    SampledTwoPhase,
    SwitchAtRound,
    HeavyHitters,
};

std::string protocol_name(Protocol p);
Protocol protocol_from_name(const std::string& name);

// Heavy-hitters stage knobs (Protocol::HeavyHitters only).
struct HhProtocolConfig {
    double epsilon_local = 8.0;   // per-user local budget, split across words
    size_t words_per_user = 3;    // reports per user
    size_t domain_size = 300;     // candidate domain: top-N public-corpus words
    size_t corpus_words = 20000;  // size of the reconstructed corpus

    void validate() const;  // throws std::invalid_argument
};

// Full description of one experiment. JSON layout (all sections optional
// except the corpus paths; defaults below):
//   {
//     "public_corpus": "path", "private_corpus": "path",
//     "corpus_format": "jsonl" | "plain_dir",
//     "tokenizer": {"kind": "bpe" | "word_level", "vocab_size": 10000},
//     "lm": {"embed_dim": 32, "hidden_dim": 64, "num_layers": 1,
//            "max_seq_len": 64},               // vocab comes from the tokenizer
//     "dp": {"clip_bound": 0.5, "noise_sigma": 0.0 | "auto",
//            "target_epsilon": 2.0, "target_delta": 1e-6,
//            "population": 0,                  // 0 = number of train users
//            "cohort_size": 20000, "rounds": 5000},
//     "local": {"epochs": 1, "batch_size": 16, "lr": 0.1},
//     "server": {"optimizer": "adam" | "sgd", "lr": 0.5},
//     "sampling": {"corpus_size": 2000, "l_max": 64},
//     "hh": {"epsilon_local": 8.0, "words_per_user": 3,
//            "domain_size": 300, "corpus_words": 20000},
//     "protocol": "baseline" | "oracle" | "sampled_two_phase"
//               | "switch_at_round" | "heavy_hitters",
//     "switch_round": 0,
//     "test_fraction": 0.2, "cap_tokens": 1600,
//     "eval_every": 0, "checkpoint_every": 0,   // 0 = final only
//     "seed": 0, "out_dir": "run"
//   }
// "noise_sigma": "auto" calibrates the noise multiplier from target_epsilon /
// target_delta / rounds at launch.
struct ExperimentConfig {
    std::string public_corpus;
    std::string private_corpus;
    CorpusFormat corpus_format = CorpusFormat::Jsonl;
    TokenizerKind tokenizer_kind = TokenizerKind::Bpe;
    size_t vocab_size = 10000;
    LmConfig lm;  // lm.vocab_size is overwritten from the trained tokenizer
    DpConfig dp;
    bool auto_sigma = false;
    LocalTrainConfig local;
    ServerOptConfig server;
    SamplingConfig sampling;  // sampling.seed is derived from `seed` at run time
    HhProtocolConfig hh;
    Protocol protocol = Protocol::Baseline;
    size_t switch_round = 0;  // Protocol::SwitchAtRound only
    double test_fraction = 0.2;
    size_t cap_tokens = 1600;  // per-user token cap, 0 = unlimited
    size_t eval_every = 0;
    size_t checkpoint_every = 0;
    uint64_t seed = 0;
    std::string out_dir = "run";

    void validate() const;  // throws std::invalid_argument
    nlohmann::json to_json() const;
    static ExperimentConfig from_json(const nlohmann::json& j);
    static ExperimentConfig load(const std::string& path);
    void save(const std::string& path) const;
};

// Everything a finished run leaves behind. All artifacts live under out_dir:
// config.json (snapshot), test_split.jsonl, tokenizer_initial.json,
// tokenizer_updated.json (update protocols), sampled_corpus.txt,
// hh_corpus.txt + hh_reports.jsonl (heavy hitters), periodic + final
// checkpoints, metrics.jsonl, privacy_ledger.jsonl, manifest.json.
struct RunResult {
    std::string run_id;
    std::string out_dir;
    MetricsReport final_eval;      // on the held-out private test users
    size_t total_rounds = 0;
    std::string tokenizer_hash;    // hex; tokenizer in effect at final eval
    std::string tokenizer_path;
    std::string checkpoint_path;   // final checkpoint
    std::string metrics_path;
    std::string ledger_path;
    std::vector<RoundReport> rounds;  // all phases in execution order
};

// Executes cfg end-to-end and writes all artifacts. Configuration problems
// (including missing corpus paths) throw std::invalid_argument; execution
// failures throw std::runtime_error with partial artifacts left in place.
RunResult run_experiment(const ExperimentConfig& cfg);

// Model checkpoint: {"version", "round", "tokenizer_hash", "lm", "values"}.
// Parameter values round-trip exactly through the JSON encoding.
void save_checkpoint(const LmParams& params, uint64_t tokenizer_hash,
                     size_t round, const std::string& path);

struct LoadedCheckpoint {
    LmParams params;
    uint64_t tokenizer_hash = 0;
    size_t round = 0;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

struct EvalOutcome {
    MetricsReport report;
    size_t round = 0;            // round recorded in the checkpoint
    std::string tokenizer_hash;  // hex
    TokenizerKind tokenizer_kind = TokenizerKind::Bpe;
};

// Loads checkpoint + tokenizer + corpus and runs the evaluation suite over
// all sentences of the corpus. Refuses (std::runtime_error) when the
// tokenizer's hash differs from the one recorded in the checkpoint, so a
// model is never scored under a vocabulary it was not trained with.
EvalOutcome evaluate_checkpoint(const std::string& checkpoint_path,
                                const std::string& tokenizer_path,
                                const std::string& corpus_path,
                                CorpusFormat format = CorpusFormat::Jsonl);

// 16-digit lowercase hex rendering used for all artifact fingerprints.
std::string hash_hex(uint64_t hash);

// FNV-1a fingerprint of a file's bytes. Throws std::runtime_error if the
// file cannot be read.
uint64_t file_hash(const std::string& path);

}  // namespace fedtok
