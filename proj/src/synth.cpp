#include "fedtok/synth.hpp"

#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>
#include <unordered_set>

#include "fedtok/rng.hpp"

namespace fedtok {

namespace {

// Independent child streams of cfg.seed.
constexpr uint64_t kSurfaceStream = 0x51;
constexpr uint64_t kPermuteStream = 0x52;
constexpr uint64_t kPublicStream = 0x53;
constexpr uint64_t kPrivateStream = 0x54;

// Pronounceable pseudo-word: 2-3 consonant-vowel syllables. The pool is
// large enough (95^2 two-syllable forms alone) that rejection sampling for
// uniqueness always terminates quickly at the vocabulary sizes in use.
std::string draw_word(Rng& rng) {
    static constexpr char kConsonants[] = "bcdfghjklmnprstvwyz";
    static constexpr char kVowels[] = "aeiou";
    const size_t syllables = 2 + rng.uniform_below(2);
    std::string word;
    word.reserve(2 * syllables);
    for (size_t s = 0; s < syllables; ++s) {
        word.push_back(kConsonants[rng.uniform_below(sizeof(kConsonants) - 1)]);
        word.push_back(kVowels[rng.uniform_below(sizeof(kVowels) - 1)]);
    }
    return word;
}

std::vector<std::string> draw_distinct_words(size_t count, Rng& rng) {
    std::vector<std::string> words;
    words.reserve(count);
    std::unordered_set<std::string> seen;
    while (words.size() < count) {
        std::string word = draw_word(rng);
        if (seen.insert(word).second) words.push_back(std::move(word));
    }
    return words;
}

// Zipf weights w_k = (k+1)^-exponent for ranks 0..count-1, normalized.
std::vector<double> zipf_distribution(size_t count, double exponent) {
    std::vector<double> w(count);
    for (size_t k = 0; k < count; ++k) {
        w[k] = std::pow(static_cast<double>(k + 1), -exponent);
    }
    const double total = std::accumulate(w.begin(), w.end(), 0.0);
    for (double& x : w) x /= total;
    return w;
}

std::vector<UserDataset> draw_users(const std::vector<std::string>& words,
                                    const std::vector<double>& weights,
                                    const char* id_prefix, size_t num_users,
                                    const SynthConfig& cfg, uint64_t stream) {
    std::vector<UserDataset> users;
    users.reserve(num_users);
    const uint64_t base = derive_seed(cfg.seed, stream);
    const size_t span = cfg.max_sentence_words - cfg.min_sentence_words + 1;
    for (size_t u = 0; u < num_users; ++u) {
        Rng rng(derive_seed(base, u));
        UserDataset ds;
        char id[32];
        std::snprintf(id, sizeof(id), "%s%04zu", id_prefix, u);
        ds.user_id = id;
        ds.sentences.reserve(cfg.sentences_per_user);
        for (size_t s = 0; s < cfg.sentences_per_user; ++s) {
            const size_t len = cfg.min_sentence_words + rng.uniform_below(span);
            std::string sentence;
            for (size_t i = 0; i < len; ++i) {
                if (i) sentence.push_back(' ');
                sentence += words[rng.pick_weighted(weights)];
            }
            ds.sentences.push_back(std::move(sentence));
        }
        users.push_back(std::move(ds));
    }
    return users;
}

}  // namespace

void SynthConfig::validate() const {
    if (shared_words < 2) {
        throw std::invalid_argument("synth: shared_words must be >= 2");
    }
    if (shift < 0.0 || shift > 1.0 || !std::isfinite(shift)) {
        throw std::invalid_argument("synth: shift must lie in [0, 1]");
    }
    if (shift > 0.0 && novel_words == 0) {
        throw std::invalid_argument(
            "synth: shift > 0 needs at least one novel word");
    }
    if (public_users == 0 || private_users == 0) {
        throw std::invalid_argument("synth: both corpora need users");
    }
    if (sentences_per_user == 0) {
        throw std::invalid_argument("synth: sentences_per_user must be >= 1");
    }
    if (min_sentence_words == 0 || min_sentence_words > max_sentence_words) {
        throw std::invalid_argument(
            "synth: need 1 <= min_sentence_words <= max_sentence_words");
    }
    if (!(zipf_exponent > 0.0) || !std::isfinite(zipf_exponent)) {
        throw std::invalid_argument("synth: zipf_exponent must be positive");
    }
}

SynthCorpora make_synth(const SynthConfig& cfg) {
    cfg.validate();

    Rng surface_rng(derive_seed(cfg.seed, kSurfaceStream));
    const std::vector<std::string> all_words =
        draw_distinct_words(cfg.shared_words + cfg.novel_words, surface_rng);
    const std::vector<std::string> shared(all_words.begin(),
                                          all_words.begin() + cfg.shared_words);

    const std::vector<double> pub = zipf_distribution(cfg.shared_words,
                                                      cfg.zipf_exponent);

    // Private shared-word component: blend of the public ranking and a
    // rank-permuted copy of it. Both inputs are normalized, so the blend is
    // too, and shift = 0 reproduces the public distribution exactly.
    std::vector<size_t> perm(cfg.shared_words);
    std::iota(perm.begin(), perm.end(), size_t{0});
    Rng perm_rng(derive_seed(cfg.seed, kPermuteStream));
    perm_rng.shuffle(perm);
    std::vector<double> priv_shared(cfg.shared_words);
    for (size_t i = 0; i < cfg.shared_words; ++i) {
        priv_shared[i] = (1.0 - cfg.shift) * pub[i] + cfg.shift * pub[perm[i]];
    }

    // Full private distribution over shared + novel words: novel words carry
    // total mass 0.5 * shift, Zipf-shaped among themselves.
    const double novel_mass = 0.5 * cfg.shift;
    std::vector<double> priv(all_words.size(), 0.0);
    for (size_t i = 0; i < cfg.shared_words; ++i) {
        priv[i] = (1.0 - novel_mass) * priv_shared[i];
    }
    if (novel_mass > 0.0) {
        const std::vector<double> novel =
            zipf_distribution(cfg.novel_words, cfg.zipf_exponent);
        for (size_t i = 0; i < cfg.novel_words; ++i) {
            priv[cfg.shared_words + i] = novel_mass * novel[i];
        }
    }

    SynthCorpora out;
    out.public_users = draw_users(shared, pub, "pub", cfg.public_users, cfg,
                                  kPublicStream);
    out.private_users = draw_users(all_words, priv, "user", cfg.private_users,
                                   cfg, kPrivateStream);
    return out;
}

}  // namespace fedtok
