#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fedtok/corpus.hpp"
#include "fedtok/dp.hpp"
#include "fedtok/lm.hpp"
#include "fedtok/rng.hpp"
#include "fedtok/tokenizer.hpp"

namespace fedtok {

struct ServerOptConfig {
    enum class Kind { Sgd, Adam };
    Kind kind = Kind::Adam;
    double lr = 0.5;
    // Adam moments; ignored for SGD.
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

// Server-side optimizer ascending along the averaged client delta, so a plain
// SGD step with lr eta is exactly M' = M + (eta/m) * sum of contributions.
class ServerOptimizer {
public:
    ServerOptimizer(const ServerOptConfig& cfg, size_t param_count);
    void apply(LmParams& params, const std::vector<double>& direction);
    const ServerOptConfig& config() const { return cfg_; }

    // Adam's moment vectors are parameter-shaped, so when a vocabulary change
    // rewrites the model's row-indexed weights mid-run, the same rewrite can
    // be applied to the optimizer state and training continues warm instead
    // of restarting from zeroed moments. steps() is the number of apply()
    // calls so far; restore() installs transformed state without resetting
    // the bias-correction clock.
    size_t steps() const { return steps_; }
    const std::vector<double>& first_moment() const { return m1_; }
    const std::vector<double>& second_moment() const { return m2_; }
    void restore(std::vector<double> m1, std::vector<double> m2, size_t steps);

private:
    ServerOptConfig cfg_;
    size_t steps_ = 0;
    std::vector<double> m1_, m2_;
};

struct RoundReport {
    size_t round = 0;
    std::vector<std::string> cohort_user_ids;
    double sum_norm = 0.0;          // clipped pre-noise sum
    double max_clipped_norm = 0.0;  // largest per-user contribution
    double cumulative_epsilon = 0.0;  // NaN when sigma is 0 (no guarantee)
    double mean_client_nll = 0.0;   // per sentence, at round start
};

// Uniform sample of m distinct user indices (all of them if m >= n),
// returned sorted ascending.
std::vector<size_t> select_cohort(size_t num_users, size_t m, Rng& rng);

struct AggregateResult {
    std::vector<double> average;    // (clipped sum + noise) / m
    double sum_norm = 0.0;
    double max_clipped_norm = 0.0;
};

// Clips every delta to S, sums them in the given order, adds N(0,(sigma*S)^2)
// noise to the sum, and divides by m.
AggregateResult aggregate_deltas(const std::vector<GradientVector>& deltas,
                                 double S, double sigma, size_t m, Rng& rng);

// One federated round over the given cohort (indices into users). Client
// seeds derive from (round_seed, user_id), so results are independent of
// scheduling; contributions are reduced in user_id order. cumulative_epsilon
// is left to the caller.
RoundReport run_round(LmParams& params, ServerOptimizer& opt,
                      const std::vector<UserDataset>& users,
                      const std::vector<size_t>& cohort,
                      const TokenizerModel& tok, const DpConfig& dp,
                      const LocalTrainConfig& local_cfg, uint64_t round_seed);

struct TrainSchedule {
    size_t rounds = 1;
    uint64_t master_seed = 0;
    // Global index of the first round. A continuation run (e.g. resuming after
    // a tokenizer swap) passes the number of rounds already taken so that
    // round seeds never repeat and privacy accounting composes over the whole
    // history rather than restarting.
    size_t start_round = 0;
};

// Called after every round with the fresh report and the updated parameters.
using RoundCallback = std::function<void(const RoundReport&, const LmParams&)>;

// T sequential federated rounds with per-round privacy accounting.
std::vector<RoundReport> train(LmParams& params, const TokenizerModel& tok,
                               const std::vector<UserDataset>& train_users,
                               const DpConfig& dp,
                               const LocalTrainConfig& local_cfg,
                               const ServerOptConfig& opt_cfg,
                               const TrainSchedule& schedule,
                               const RoundCallback& on_round = {});

// Same loop, but the caller owns the server optimizer. This lets one logical
// training run span several train() calls — e.g. around a mid-run vocabulary
// change — without resetting the optimizer's accumulated state each time.
std::vector<RoundReport> train(LmParams& params, const TokenizerModel& tok,
                               const std::vector<UserDataset>& train_users,
                               const DpConfig& dp,
                               const LocalTrainConfig& local_cfg,
                               ServerOptimizer& opt,
                               const TrainSchedule& schedule,
                               const RoundCallback& on_round = {});

}  // namespace fedtok
