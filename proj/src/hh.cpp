#include "fedtok/hh.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>
#include <unordered_map>

#include "json.hpp"

#include "fedtok/tokenizer.hpp"

namespace fedtok {

namespace {

// Maps each candidate word to its index, rejecting duplicates.
std::unordered_map<std::string, size_t> domain_index(
    const std::vector<std::string>& domain) {
    if (domain.empty()) {
        throw std::invalid_argument("heavy hitters: candidate domain is empty");
    }
    std::unordered_map<std::string, size_t> index;
    index.reserve(domain.size());
    for (size_t i = 0; i < domain.size(); ++i) {
        if (!index.emplace(domain[i], i).second) {
            throw std::invalid_argument(
                "heavy hitters: duplicate candidate word: " + domain[i]);
        }
    }
    return index;
}

}  // namespace

double rr_truth_prob(double epsilon_word, size_t domain_size) {
    if (epsilon_word <= 0.0) {
        throw std::invalid_argument("randomized response: budget must be > 0");
    }
    if (domain_size == 0) {
        throw std::invalid_argument("randomized response: empty domain");
    }
    const double e = std::exp(epsilon_word);
    if (!std::isfinite(e)) return 1.0;
    return e / (e + static_cast<double>(domain_size) - 1.0);
}

HhReport client_report(const UserDataset& user, size_t k,
                       const std::vector<std::string>& candidate_domain,
                       double epsilon_local, Rng& rng) {
    if (k < 1) {
        throw std::invalid_argument("client_report: k must be >= 1");
    }
    const auto index = domain_index(candidate_domain);
    const size_t domain_size = candidate_domain.size();
    const double p =
        rr_truth_prob(epsilon_local / static_cast<double>(k), domain_size);

    // The user's in-domain word counts, ranked by (count desc, word asc).
    std::map<std::string, size_t> counts;
    for (const auto& sentence : user.sentences) {
        for (std::string_view w : split_words(sentence)) {
            std::string word(w);
            if (index.count(word)) ++counts[word];
        }
    }
    std::vector<std::pair<std::string, size_t>> ranked(counts.begin(),
                                                       counts.end());
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });

    HhReport report{user.user_id, {}};
    report.words.reserve(k);
    for (size_t i = 0; i < k; ++i) {
        if (ranked.empty()) {
            // Nothing to protect: contribute a uniform draw.
            report.words.push_back(
                candidate_domain[rng.uniform_below(domain_size)]);
            continue;
        }
        const std::string& truth = ranked[i % ranked.size()].first;
        if (rng.uniform01() < p) {
            report.words.push_back(truth);
        } else {
            // Uniform over the other domain_size - 1 candidates.
            size_t j = static_cast<size_t>(rng.uniform_below(domain_size - 1));
            if (j >= index.at(truth)) ++j;
            report.words.push_back(candidate_domain[j]);
        }
    }
    return report;
}

FrequencyEstimate aggregate(const std::vector<HhReport>& reports,
                            const std::vector<std::string>& candidate_domain,
                            double epsilon_local) {
    if (reports.empty()) {
        throw std::invalid_argument("aggregate: no reports");
    }
    const auto index = domain_index(candidate_domain);
    const size_t k = reports.front().words.size();
    if (k == 0) {
        throw std::invalid_argument("aggregate: report carries no words");
    }
    const size_t domain_size = candidate_domain.size();
    const double p =
        rr_truth_prob(epsilon_local / static_cast<double>(k), domain_size);
    const double q = domain_size > 1
                         ? (1.0 - p) / (static_cast<double>(domain_size) - 1.0)
                         : 0.0;

    std::unordered_map<std::string, double> observed;
    size_t n = 0;
    for (const auto& report : reports) {
        if (report.words.size() != k) {
            throw std::invalid_argument(
                "aggregate: reports disagree on words per user");
        }
        for (const auto& word : report.words) {
            if (!index.count(word)) {
                throw std::invalid_argument(
                    "aggregate: report word outside the candidate domain: " +
                    word);
            }
            observed[word] += 1.0;
            ++n;
        }
    }

    FrequencyEstimate est;
    est.total_reports = n;
    for (const auto& word : candidate_domain) {
        const auto it = observed.find(word);
        const double obs = it == observed.end() ? 0.0 : it->second;
        est.counts[word] = (obs - static_cast<double>(n) * q) / (p - q);
    }
    return est;
}

std::vector<std::string> build_hh_corpus(const FrequencyEstimate& est,
                                         size_t size, Rng& rng) {
    if (size < 1) {
        throw std::invalid_argument("build_hh_corpus: size must be >= 1");
    }
    std::vector<std::string> words;
    std::vector<double> weights;
    for (const auto& [word, count] : est.counts) {
        if (count > 0.0) {
            words.push_back(word);
            weights.push_back(count);
        }
    }
    if (words.empty()) {
        throw std::runtime_error(
            "build_hh_corpus: no positive frequency estimates");
    }

    constexpr size_t kWordsPerSentence = 16;
    std::vector<std::string> corpus;
    corpus.reserve(size / kWordsPerSentence + 1);
    std::string sentence;
    size_t in_sentence = 0;
    for (size_t i = 0; i < size; ++i) {
        const std::string& word = words[rng.pick_weighted(weights)];
        if (in_sentence > 0) sentence += ' ';
        sentence += word;
        if (++in_sentence == kWordsPerSentence) {
            corpus.push_back(std::move(sentence));
            sentence.clear();
            in_sentence = 0;
        }
    }
    if (in_sentence > 0) corpus.push_back(std::move(sentence));
    return corpus;
}

void save_reports(const std::vector<HhReport>& reports,
                  const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("save_reports: cannot open " + path);
    }
    for (const auto& report : reports) {
        nlohmann::json j{{"user_id", report.user_id},
                         {"words", report.words}};
        out << j.dump() << '\n';
    }
    if (!out) {
        throw std::runtime_error("save_reports: write failed for " + path);
    }
}

std::vector<HhReport> load_reports(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("load_reports: cannot open " + path);
    }
    std::vector<HhReport> reports;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw std::runtime_error(path + ": line " + std::to_string(line_no) +
                                     ": " + e.what());
        }
        if (!j.is_object() || !j.contains("user_id") || !j.contains("words") ||
            !j["user_id"].is_string() || !j["words"].is_array()) {
            throw std::runtime_error(path + ": line " + std::to_string(line_no) +
                                     ": expected {\"user_id\", \"words\"}");
        }
        HhReport report;
        report.user_id = j["user_id"].get<std::string>();
        for (const auto& w : j["words"]) {
            if (!w.is_string()) {
                throw std::runtime_error(path + ": line " +
                                         std::to_string(line_no) +
                                         ": words must be strings");
            }
            report.words.push_back(w.get<std::string>());
        }
        reports.push_back(std::move(report));
    }
    return reports;
}

}  // namespace fedtok
