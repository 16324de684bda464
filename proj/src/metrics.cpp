#include "fedtok/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

#include "fedtok/corpus.hpp"

namespace fedtok {

void PerplexityAccumulator::add(double nll, double words) {
    if (words < 0.0 || nll < 0.0) {
        throw std::invalid_argument("perplexity: negative contribution");
    }
    nll_ += nll;
    words_ += words;
}

void PerplexityAccumulator::merge(const PerplexityAccumulator& other) {
    nll_ += other.nll_;
    words_ += other.words_;
}

double PerplexityAccumulator::value() const {
    if (words_ <= 0.0) {
        throw std::invalid_argument("perplexity: corpus has no words");
    }
    return std::exp(nll_ / words_);
}

double perplexity_per_word(const LmParams& params, const TokenizerModel& tok,
                           const std::vector<std::string>& corpus) {
    PerplexityAccumulator acc;
    for (const auto& sentence : corpus) {
        const TokenSeq seq = tok.encode(sentence);
        const ForwardResult fwd = forward_nll(params, seq.ids);
        acc.add(fwd.nll, static_cast<double>(word_count(sentence)));
    }
    return acc.value();
}

double word_accuracy(const LmParams& params, const TokenizerModel& tok,
                     const std::vector<std::string>& corpus) {
    size_t correct = 0, total = 0;
    for (const auto& sentence : corpus) {
        const auto enc = tok.encode_with_words(sentence);
        if (enc.num_words == 0) continue;
        const ForwardResult fwd = forward_nll(params, enc.ids);
        // fwd.argmax[t-1] is the model's top token for position t.
        std::vector<char> word_ok(enc.num_words, 1);
        for (size_t t = 1; t < enc.ids.size(); ++t) {
            const int32_t w = enc.word_index[t];
            if (w < 0) continue;  // specials and whitespace tokens
            const bool hit = fwd.argmax[t - 1] == enc.ids[t];
            const bool oov = tok.kind() == TokenizerKind::WordLevel &&
                             enc.ids[t] == tok.oov_id();
            if (!hit || oov) word_ok[static_cast<size_t>(w)] = 0;
        }
        for (char ok : word_ok) correct += ok;
        total += enc.num_words;
    }
    if (total == 0) return 0.0;
    return static_cast<double>(correct) / static_cast<double>(total);
}

double unigram_kld(const std::vector<std::string>& reference,
                   const std::vector<std::string>& candidate, size_t top_k) {
    if (top_k < 1) {
        throw std::invalid_argument("unigram_kld: top_k must be >= 1");
    }
    const auto count_words = [](const std::vector<std::string>& corpus) {
        std::map<std::string, double> counts;
        for (const auto& sentence : corpus) {
            for (std::string_view w : split_words(sentence)) {
                counts[std::string(w)] += 1.0;
            }
        }
        return counts;
    };

    const auto ref_counts = count_words(reference);
    if (ref_counts.empty()) {
        throw std::invalid_argument("unigram_kld: reference corpus is empty");
    }

    // Support: top_k most frequent reference words, ties lexicographic.
    std::vector<std::pair<std::string, double>> ranked(ref_counts.begin(),
                                                       ref_counts.end());
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) {
                         return a.second > b.second;
                     });  // map order is lexicographic, stable_sort keeps ties
    if (ranked.size() > top_k) ranked.resize(top_k);

    const auto cand_counts = count_words(candidate);
    const double support = static_cast<double>(ranked.size());
    double ref_total = 0.0, cand_total = 0.0;
    for (const auto& [word, c] : ranked) {
        ref_total += c;
        const auto it = cand_counts.find(word);
        cand_total += it == cand_counts.end() ? 0.0 : it->second;
    }

    double kld = 0.0;
    for (const auto& [word, c] : ranked) {
        const auto it = cand_counts.find(word);
        const double cand_c = it == cand_counts.end() ? 0.0 : it->second;
        const double p = (c + 1.0) / (ref_total + support);
        const double q = (cand_c + 1.0) / (cand_total + support);
        kld += p * std::log(p / q);
    }
    return kld;
}

MetricsReport evaluate_model(const LmParams& params, const TokenizerModel& tok,
                             const std::vector<std::string>& corpus) {
    MetricsReport report;
    report.perplexity_per_word = perplexity_per_word(params, tok, corpus);
    report.word_accuracy = word_accuracy(params, tok, corpus);
    report.tokens_per_word = tok.tokens_per_word(corpus);
    if (tok.kind() == TokenizerKind::WordLevel) {
        report.oov_rate = tok.oov_rate(corpus);
    }
    return report;
}

}  // namespace fedtok
