#include "fedtok/fed.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <stdexcept>

namespace fedtok {

namespace {

// Fixed sub-stream tags so every consumer of a round seed is independent.
constexpr uint64_t kCohortStream = 0xc0;
constexpr uint64_t kNoiseStream = 0x7e;

}  // namespace

ServerOptimizer::ServerOptimizer(const ServerOptConfig& cfg, size_t param_count)
    : cfg_(cfg) {
    if (cfg_.lr <= 0.0) throw std::invalid_argument("server lr must be positive");
    if (cfg_.kind == ServerOptConfig::Kind::Adam) {
        m1_.assign(param_count, 0.0);
        m2_.assign(param_count, 0.0);
    }
}

void ServerOptimizer::apply(LmParams& params, const std::vector<double>& direction) {
    if (direction.size() != params.size()) {
        throw std::invalid_argument("optimizer: direction size mismatch");
    }
    std::vector<double>& v = params.values();
    if (cfg_.kind == ServerOptConfig::Kind::Sgd) {
        for (size_t i = 0; i < v.size(); ++i) {
            v[i] += cfg_.lr * direction[i];
        }
        return;
    }
    if (m1_.size() != v.size() || m2_.size() != v.size()) {
        throw std::invalid_argument(
            "optimizer: moment state does not match the parameter count");
    }
    ++steps_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
    for (size_t i = 0; i < v.size(); ++i) {
        m1_[i] = cfg_.beta1 * m1_[i] + (1.0 - cfg_.beta1) * direction[i];
        m2_[i] = cfg_.beta2 * m2_[i] + (1.0 - cfg_.beta2) * direction[i] * direction[i];
        const double mhat = m1_[i] / bc1;
        const double vhat = m2_[i] / bc2;
        v[i] += cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.epsilon);
    }
}

void ServerOptimizer::restore(std::vector<double> m1, std::vector<double> m2,
                              size_t steps) {
    if (m1.size() != m2.size()) {
        throw std::invalid_argument(
            "optimizer: restored moment vectors must have equal sizes");
    }
    m1_ = std::move(m1);
    m2_ = std::move(m2);
    steps_ = steps;
}

std::vector<size_t> select_cohort(size_t num_users, size_t m, Rng& rng) {
    if (m == 0) throw std::invalid_argument("select_cohort: m must be >= 1");
    std::vector<size_t> indices(num_users);
    std::iota(indices.begin(), indices.end(), size_t{0});
    if (m >= num_users) return indices;

    // Partial Fisher-Yates: the first m slots become the sample.
    for (size_t i = 0; i < m; ++i) {
        const size_t j = i + rng.uniform_below(num_users - i);
        std::swap(indices[i], indices[j]);
    }
    indices.resize(m);
    std::sort(indices.begin(), indices.end());
    return indices;
}

AggregateResult aggregate_deltas(const std::vector<GradientVector>& deltas,
                                 double S, double sigma, size_t m, Rng& rng) {
    if (deltas.empty()) throw std::invalid_argument("aggregate_deltas: no deltas");
    if (m == 0) throw std::invalid_argument("aggregate_deltas: m must be >= 1");

    GradientVector sum;
    sum.values.assign(deltas.front().values.size(), 0.0);
    AggregateResult out;
    for (const GradientVector& delta : deltas) {
        const GradientVector clipped = clip(delta, S);
        if (clipped.values.size() != sum.values.size()) {
            throw std::invalid_argument("aggregate_deltas: size mismatch");
        }
        out.max_clipped_norm = std::max(out.max_clipped_norm, clipped.norm);
        for (size_t i = 0; i < sum.values.size(); ++i) {
            sum.values[i] += clipped.values[i];
        }
    }
    sum.recompute_norm();
    out.sum_norm = sum.norm;

    const GradientVector noisy = add_noise(sum, sigma, S, rng);
    out.average = noisy.values;
    const double inv_m = 1.0 / static_cast<double>(m);
    for (double& x : out.average) x *= inv_m;
    return out;
}

RoundReport run_round(LmParams& params, ServerOptimizer& opt,
                      const std::vector<UserDataset>& users,
                      const std::vector<size_t>& cohort,
                      const TokenizerModel& tok, const DpConfig& dp,
                      const LocalTrainConfig& local_cfg, uint64_t round_seed) {
    if (cohort.empty()) throw std::invalid_argument("run_round: empty cohort");

    // Deterministic reduction order: user_id ascending, whatever the caller's
    // cohort order or scheduling would have been.
    std::vector<size_t> ordered = cohort;
    std::sort(ordered.begin(), ordered.end(), [&](size_t a, size_t b) {
        return users[a].user_id < users[b].user_id;
    });

    RoundReport report;
    report.cumulative_epsilon = std::numeric_limits<double>::quiet_NaN();

    double nll_sum = 0.0;
    size_t nll_sentences = 0;
    std::vector<GradientVector> deltas;
    deltas.reserve(ordered.size());
    for (size_t idx : ordered) {
        const UserDataset& user = users[idx];
        report.cohort_user_ids.push_back(user.user_id);
        for (const std::string& sentence : user.sentences) {
            nll_sum += forward_nll(params,
                                   encode_for_lm(tok, params.config(), sentence))
                           .nll;
            ++nll_sentences;
        }
        if (user.sentences.empty()) {
            GradientVector zero;  // still occupies its slot in the average
            zero.values.assign(params.size(), 0.0);
            deltas.push_back(std::move(zero));
            continue;
        }
        const uint64_t client_seed = derive_seed(round_seed, fnv1a64(user.user_id));
        deltas.push_back(local_train(params, user, tok, local_cfg, client_seed));
    }
    report.mean_client_nll =
        nll_sentences ? nll_sum / static_cast<double>(nll_sentences) : 0.0;

    Rng noise_rng(derive_seed(round_seed, kNoiseStream));
    AggregateResult agg = aggregate_deltas(deltas, dp.clip_bound, dp.noise_sigma,
                                           ordered.size(), noise_rng);
    report.sum_norm = agg.sum_norm;
    report.max_clipped_norm = agg.max_clipped_norm;

    opt.apply(params, agg.average);
    return report;
}

std::vector<RoundReport> train(LmParams& params, const TokenizerModel& tok,
                               const std::vector<UserDataset>& train_users,
                               const DpConfig& dp,
                               const LocalTrainConfig& local_cfg,
                               const ServerOptConfig& opt_cfg,
                               const TrainSchedule& schedule,
                               const RoundCallback& on_round) {
    ServerOptimizer opt(opt_cfg, params.size());
    return train(params, tok, train_users, dp, local_cfg, opt, schedule,
                 on_round);
}

std::vector<RoundReport> train(LmParams& params, const TokenizerModel& tok,
                               const std::vector<UserDataset>& train_users,
                               const DpConfig& dp,
                               const LocalTrainConfig& local_cfg,
                               ServerOptimizer& opt,
                               const TrainSchedule& schedule,
                               const RoundCallback& on_round) {
    if (schedule.rounds == 0) {
        throw std::invalid_argument("train: schedule needs at least one round");
    }
    if (train_users.empty()) {
        throw std::invalid_argument("train: no training users");
    }

    std::vector<RoundReport> reports;
    reports.reserve(schedule.rounds);
    std::optional<PrivacyAccountant> accountant;
    if (dp.noise_sigma > 0.0) {
        accountant.emplace(dp.noise_sigma, dp.sampling_rate(), dp.target_delta);
    }

    for (size_t k = 0; k < schedule.rounds; ++k) {
        const size_t t = schedule.start_round + k;
        const uint64_t round_seed = derive_seed(schedule.master_seed, t);
        Rng cohort_rng(derive_seed(round_seed, kCohortStream));
        const std::vector<size_t> cohort =
            select_cohort(train_users.size(), dp.cohort_size, cohort_rng);

        RoundReport report = run_round(params, opt, train_users, cohort, tok, dp,
                                       local_cfg, round_seed);
        report.round = t;
        if (accountant) {
            report.cumulative_epsilon = accountant->epsilon(t + 1);
        }
        reports.push_back(std::move(report));
        if (on_round) on_round(reports.back(), params);
    }
    return reports;
}

}  // namespace fedtok
