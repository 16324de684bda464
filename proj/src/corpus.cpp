#include "fedtok/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

#include "json.hpp"

#include "fedtok/rng.hpp"

namespace fedtok {

namespace {

void append_sentences(UserDataset& ds, const std::string& text) {
    size_t start = 0;
    while (start <= text.size()) {
        size_t end = text.find('\n', start);
        if (end == std::string::npos) end = text.size();
        if (end > start) ds.sentences.emplace_back(text.substr(start, end - start));
        start = end + 1;
    }
}

std::vector<UserDataset> load_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_corpus: cannot open " + path);

    std::vector<UserDataset> users;
    std::unordered_map<std::string, size_t> index;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json record;
        try {
            record = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw std::runtime_error(path + ": line " + std::to_string(line_no) +
                                     ": invalid JSON (" + e.what() + ")");
        }
        if (!record.is_object() || !record.contains("user_id") ||
            !record["user_id"].is_string() || !record.contains("text") ||
            !record["text"].is_string()) {
            throw std::runtime_error(path + ": line " + std::to_string(line_no) +
                                     ": record needs string fields user_id and text");
        }
        const std::string user_id = record["user_id"].get<std::string>();
        auto [it, inserted] = index.emplace(user_id, users.size());
        if (inserted) users.push_back({user_id, {}});
        append_sentences(users[it->second], record["text"].get<std::string>());
    }
    return users;
}

std::vector<UserDataset> load_plain_dir(const std::string& path) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(path)) {
        throw std::runtime_error("load_corpus: not a directory: " + path);
    }
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(path)) {
        if (entry.is_regular_file()) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());

    std::vector<UserDataset> users;
    for (const fs::path& file : files) {
        std::ifstream in(file);
        if (!in) throw std::runtime_error("load_corpus: cannot open " + file.string());
        UserDataset ds;
        ds.user_id = file.filename().string();
        std::string line;
        while (std::getline(in, line)) {
            if (!line.empty()) ds.sentences.push_back(line);
        }
        users.push_back(std::move(ds));
    }
    return users;
}

}  // namespace

std::vector<UserDataset> load_corpus(const std::string& path, CorpusFormat format) {
    std::vector<UserDataset> users = format == CorpusFormat::Jsonl
                                         ? load_jsonl(path)
                                         : load_plain_dir(path);
    std::erase_if(users, [](const UserDataset& ds) { return ds.sentences.empty(); });
    return users;
}

UserDataset cap_user_tokens(const UserDataset& ds, const TokenizerModel& tok,
                            size_t cap) {
    if (cap == 0) throw std::invalid_argument("cap_user_tokens: cap must be positive");
    UserDataset out;
    out.user_id = ds.user_id;
    size_t total = 0;
    for (const std::string& sentence : ds.sentences) {
        const size_t tokens = tok.encode(sentence).size() - 2;  // minus BOS/EOS
        if (total + tokens > cap) break;
        total += tokens;
        out.sentences.push_back(sentence);
    }
    return out;
}

std::vector<UserDataset> cap_all_users(const std::vector<UserDataset>& users,
                                       const TokenizerModel& tok, size_t cap) {
    std::vector<UserDataset> out;
    out.reserve(users.size());
    for (const UserDataset& ds : users) {
        UserDataset capped = cap_user_tokens(ds, tok, cap);
        if (!capped.sentences.empty()) out.push_back(std::move(capped));
    }
    return out;
}

CorpusSplit split_users(const std::vector<UserDataset>& datasets,
                        double test_fraction, uint64_t seed) {
    if (datasets.size() < 2) {
        throw std::invalid_argument("split_users: need at least 2 users");
    }
    if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
        throw std::invalid_argument("split_users: test_fraction must be in (0,1)");
    }

    std::vector<size_t> order(datasets.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    // Shuffle a user_id-sorted index so the outcome is independent of input order.
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        return datasets[a].user_id < datasets[b].user_id;
    });
    Rng rng(seed);
    rng.shuffle(order);

    const size_t n_test = static_cast<size_t>(
        std::llround(test_fraction * static_cast<double>(datasets.size())));
    CorpusSplit split;
    for (size_t i = 0; i < order.size(); ++i) {
        (i < n_test ? split.test_users : split.train_users).push_back(datasets[order[i]]);
    }
    auto by_id = [](const UserDataset& a, const UserDataset& b) {
        return a.user_id < b.user_id;
    };
    std::sort(split.train_users.begin(), split.train_users.end(), by_id);
    std::sort(split.test_users.begin(), split.test_users.end(), by_id);
    return split;
}

void save_corpus_jsonl(const std::vector<UserDataset>& users,
                       const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("cannot open for writing: " + path);
    }
    for (const UserDataset& user : users) {
        std::string text;
        for (size_t i = 0; i < user.sentences.size(); ++i) {
            if (i) text.push_back('\n');
            text += user.sentences[i];
        }
        nlohmann::json row{{"user_id", user.user_id}, {"text", text}};
        out << row.dump() << '\n';
    }
    if (!out) {
        throw std::runtime_error("write failed: " + path);
    }
}

size_t word_count(std::string_view sentence) {
    return split_words(sentence).size();
}

std::vector<std::string> flatten_sentences(const std::vector<UserDataset>& users) {
    std::vector<std::string> out;
    for (const UserDataset& ds : users) {
        out.insert(out.end(), ds.sentences.begin(), ds.sentences.end());
    }
    return out;
}

}  // namespace fedtok
