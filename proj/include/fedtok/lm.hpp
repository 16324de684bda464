#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

#include "fedtok/corpus.hpp"
#include "fedtok/rng.hpp"
#include "fedtok/tokenizer.hpp"

namespace fedtok {

struct LmConfig {
    size_t vocab_size = 0;
    size_t embed_dim = 32;
    size_t hidden_dim = 64;
    size_t num_layers = 1;
    size_t max_seq_len = 64;

    void validate() const;
    bool operator==(const LmConfig&) const = default;
};

using MatrixRM =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// LSTM language model parameters in one flat buffer. Views (Eigen maps) are
// named slices of that buffer:
//   embedding   vocab × embed
//   per layer   w_input 4·hidden × in_dim, w_recur 4·hidden × hidden,
//               bias 4·hidden                  (gate row order: i, f, g, o)
//   proj        embed × hidden   (maps hidden state into embedding space)
//   output_bias vocab
// Output logits are tied to the embedding: logits = embedding · proj · h + bias.
class LmParams {
public:
    explicit LmParams(const LmConfig& cfg);

    const LmConfig& config() const { return cfg_; }
    size_t size() const { return values_.size(); }
    std::vector<double>& values() { return values_; }
    const std::vector<double>& values() const { return values_; }

    Eigen::Map<MatrixRM> embedding();
    Eigen::Map<const MatrixRM> embedding() const;
    Eigen::Map<MatrixRM> w_input(size_t layer);
    Eigen::Map<const MatrixRM> w_input(size_t layer) const;
    Eigen::Map<MatrixRM> w_recur(size_t layer);
    Eigen::Map<const MatrixRM> w_recur(size_t layer) const;
    Eigen::Map<Eigen::VectorXd> bias(size_t layer);
    Eigen::Map<const Eigen::VectorXd> bias(size_t layer) const;
    Eigen::Map<MatrixRM> proj();
    Eigen::Map<const MatrixRM> proj() const;
    Eigen::Map<Eigen::VectorXd> output_bias();
    Eigen::Map<const Eigen::VectorXd> output_bias() const;

    // in_dim of a layer: embed_dim for layer 0, hidden_dim above.
    size_t layer_in_dim(size_t layer) const;

    static size_t param_count(const LmConfig& cfg);

private:
    LmConfig cfg_;
    std::vector<double> values_;
    // offsets into values_: [embedding, {wx,wh,b} per layer..., proj, out_bias]
    std::vector<size_t> offsets_;
};

// Flat gradient (or model delta) aligned with the LmParams layout.
struct GradientVector {
    std::vector<double> values;
    double norm = 0.0;

    void recompute_norm();
};

// All entries uniform in [-1/sqrt(hidden), +1/sqrt(hidden)]; output_bias zero.
LmParams init_params(const LmConfig& cfg, uint64_t seed);

struct ForwardResult {
    double nll = 0.0;                  // total over predicted positions, nats
    std::vector<double> position_nll;  // one entry per target t_2..t_n
    std::vector<TokenId> argmax;       // most likely token at each position
};

// Teacher-forced pass over one BOS...EOS sequence; targets are t_2..t_n.
ForwardResult forward_nll(const LmParams& params, const std::vector<TokenId>& ids);

// Exact gradient of the mean per-sequence NLL over the batch.
GradientVector backward(const LmParams& params,
                        const std::vector<std::vector<TokenId>>& batch);

struct LocalTrainConfig {
    size_t epochs = 1;
    size_t batch_size = 16;
    double lr = 0.1;
};

// Runs local SGD from params over the user's sentences and returns the model
// delta (trained minus initial), the per-user contribution the server sums.
GradientVector local_train(const LmParams& params, const UserDataset& user,
                           const TokenizerModel& tok, const LocalTrainConfig& cfg,
                           uint64_t seed);

// Recurrent state for incremental decoding.
struct LstmState {
    std::vector<Eigen::VectorXd> h;
    std::vector<Eigen::VectorXd> c;
};
LstmState initial_state(const LmConfig& cfg);

// Feeds one token, advances the state, returns the next-token distribution.
Eigen::VectorXd step_probs(const LmParams& params, LstmState& state, TokenId input);

// Ancestral sampling at temperature 1 from the prefix (BOS first, no EOS)
// until EOS is drawn or l_max tokens have been generated; a truncated draw
// gets EOS appended so the result is a complete sequence.
TokenSeq sample_tokens(const LmParams& params, const std::vector<TokenId>& prefix,
                       size_t l_max, TokenId eos_id, Rng& rng);

// decode(sample_tokens(params, [BOS], l_max)) under the given tokenizer.
std::string sample_sentence(const LmParams& params, const TokenizerModel& tok,
                            size_t l_max, Rng& rng);

// Encode + hard-truncate to max_seq_len (final token forced to EOS).
std::vector<TokenId> encode_for_lm(const TokenizerModel& tok, const LmConfig& cfg,
                                   std::string_view sentence);

}  // namespace fedtok
