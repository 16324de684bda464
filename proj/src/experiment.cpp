#include "fedtok/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <utility>

#include "fedtok/hh.hpp"
#include "fedtok/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace fedtok {

namespace {

// Independent child streams of ExperimentConfig::seed.
constexpr uint64_t kSplitStream = 0x21;
constexpr uint64_t kInitStream = 0x22;
constexpr uint64_t kTrainStream = 0x23;
constexpr uint64_t kInitPhase2Stream = 0x24;
constexpr uint64_t kTrainPhase2Stream = 0x25;
constexpr uint64_t kSampleStream = 0x26;
constexpr uint64_t kHhReportStream = 0x27;
constexpr uint64_t kHhCorpusStream = 0x28;

json num_or_null(double v) {
    return std::isfinite(v) ? json(v) : json(nullptr);
}

// Rejects misspelled configuration keys instead of silently ignoring them.
void check_keys(const json& j, std::initializer_list<const char*> allowed,
                const std::string& where) {
    if (!j.is_object()) {
        throw std::invalid_argument("config: " + where + " must be an object");
    }
    for (const auto& item : j.items()) {
        bool known = false;
        for (const char* key : allowed) {
            if (item.key() == key) {
                known = true;
                break;
            }
        }
        if (!known) {
            throw std::invalid_argument("config: unknown key \"" + item.key() +
                                        "\" in " + where);
        }
    }
}

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        throw std::invalid_argument(std::string("config: bad value for \"") +
                                    key + "\"");
    }
}

TokenizerKind kind_from_name(const std::string& name) {
    if (name == "bpe") return TokenizerKind::Bpe;
    if (name == "word_level") return TokenizerKind::WordLevel;
    throw std::invalid_argument("config: tokenizer kind must be \"bpe\" or "
                                "\"word_level\", got \"" + name + "\"");
}

std::string kind_name(TokenizerKind kind) {
    return kind == TokenizerKind::Bpe ? "bpe" : "word_level";
}

CorpusFormat format_from_name(const std::string& name) {
    if (name == "jsonl") return CorpusFormat::Jsonl;
    if (name == "plain_dir") return CorpusFormat::PlainDir;
    throw std::invalid_argument("config: corpus_format must be \"jsonl\" or "
                                "\"plain_dir\", got \"" + name + "\"");
}

std::string format_name(CorpusFormat format) {
    return format == CorpusFormat::Jsonl ? "jsonl" : "plain_dir";
}

TokenizerModel fit_tokenizer(TokenizerKind kind,
                             const std::vector<std::string>& corpus,
                             size_t vocab_size) {
    return kind == TokenizerKind::Bpe
               ? TokenizerModel::train_bpe(corpus, vocab_size)
               : TokenizerModel::train_word_level(corpus, vocab_size);
}

uint64_t parse_hash_hex(const std::string& text) {
    if (text.empty() || text.size() > 16 ||
        text.find_first_not_of("0123456789abcdef") != std::string::npos) {
        throw std::runtime_error("malformed artifact hash: \"" + text + "\"");
    }
    return std::stoull(text, nullptr, 16);
}

class JsonlWriter {
public:
    explicit JsonlWriter(std::string path)
        : path_(std::move(path)), out_(path_, std::ios::binary) {
        if (!out_) {
            throw std::runtime_error("cannot open for writing: " + path_);
        }
    }

    void row(const json& j) {
        out_ << j.dump() << '\n';
        if (!out_) throw std::runtime_error("write failed: " + path_);
    }

    void close() {
        out_.close();
        if (out_.fail()) throw std::runtime_error("write failed: " + path_);
    }

private:
    std::string path_;
    std::ofstream out_;
};

json eval_row(const MetricsReport& m, size_t rounds_done, int phase,
              const std::string& run_id, uint64_t tokenizer_hash, bool final) {
    json j{{"type", "eval"},
           {"run_id", run_id},
           {"tokenizer_hash", hash_hex(tokenizer_hash)},
           {"phase", phase},
           {"round", rounds_done},
           {"perplexity", m.perplexity_per_word},
           {"word_accuracy", m.word_accuracy},
           {"tokens_per_word", m.tokens_per_word},
           {"oov_rate", m.oov_rate ? json(*m.oov_rate) : json(nullptr)}};
    if (final) j["final"] = true;
    return j;
}

std::string checkpoint_name(size_t rounds_done) {
    char name[48];
    std::snprintf(name, sizeof(name), "checkpoint_round_%06zu.json",
                  rounds_done);
    return name;
}

// Top `limit` corpus words by (count desc, word asc) — the public candidate
// list handed to the local-DP frequency estimator.
std::vector<std::string> top_words(const std::vector<std::string>& sentences,
                                   size_t limit) {
    std::map<std::string, size_t> counts;
    for (const std::string& sentence : sentences) {
        for (std::string_view w : split_words(sentence)) {
            ++counts[std::string(w)];
        }
    }
    std::vector<std::pair<std::string, size_t>> ranked(counts.begin(),
                                                       counts.end());
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) {
                         return a.second > b.second;
                     });
    if (ranked.size() > limit) ranked.resize(limit);
    std::vector<std::string> words;
    words.reserve(ranked.size());
    for (auto& [word, count] : ranked) words.push_back(std::move(word));
    return words;
}

}  // namespace

std::string protocol_name(Protocol p) {
    switch (p) {
        case Protocol::Baseline: return "baseline";
        case Protocol::Oracle: return "oracle";
        case Protocol::SampledTwoPhase: return "sampled_two_phase";
        case Protocol::SwitchAtRound: return "switch_at_round";
        case Protocol::HeavyHitters: return "heavy_hitters";
    }
    throw std::invalid_argument("unknown protocol enum value");
}

Protocol protocol_from_name(const std::string& name) {
    if (name == "baseline") return Protocol::Baseline;
    if (name == "oracle") return Protocol::Oracle;
    if (name == "sampled_two_phase") return Protocol::SampledTwoPhase;
    if (name == "switch_at_round") return Protocol::SwitchAtRound;
    if (name == "heavy_hitters") return Protocol::HeavyHitters;
    throw std::invalid_argument("config: unknown protocol \"" + name + "\"");
}

void HhProtocolConfig::validate() const {
    if (!(epsilon_local > 0.0) || !std::isfinite(epsilon_local)) {
        throw std::invalid_argument("config: hh.epsilon_local must be positive");
    }
    if (words_per_user == 0) {
        throw std::invalid_argument("config: hh.words_per_user must be >= 1");
    }
    if (domain_size == 0) {
        throw std::invalid_argument("config: hh.domain_size must be >= 1");
    }
    if (corpus_words == 0) {
        throw std::invalid_argument("config: hh.corpus_words must be >= 1");
    }
}

void ExperimentConfig::validate() const {
    if (public_corpus.empty() || private_corpus.empty()) {
        throw std::invalid_argument("config: both corpus paths are required");
    }
    if (vocab_size == 0) {
        throw std::invalid_argument("config: tokenizer.vocab_size must be >= 1");
    }
    if (lm.embed_dim == 0 || lm.hidden_dim == 0 || lm.num_layers == 0) {
        throw std::invalid_argument("config: lm dimensions must be >= 1");
    }
    if (lm.max_seq_len < 2) {
        throw std::invalid_argument("config: lm.max_seq_len must be >= 2");
    }
    if (!(dp.clip_bound > 0.0) || !std::isfinite(dp.clip_bound)) {
        throw std::invalid_argument("config: dp.clip_bound must be positive");
    }
    if (dp.noise_sigma < 0.0 || !std::isfinite(dp.noise_sigma)) {
        throw std::invalid_argument("config: dp.noise_sigma must be >= 0");
    }
    if (auto_sigma &&
        (!(dp.target_epsilon > 0.0) || !std::isfinite(dp.target_epsilon))) {
        throw std::invalid_argument(
            "config: dp.noise_sigma \"auto\" needs a positive target_epsilon");
    }
    if (dp.target_delta <= 0.0 || dp.target_delta >= 1.0) {
        throw std::invalid_argument("config: dp.target_delta must be in (0, 1)");
    }
    if (dp.cohort_size == 0) {
        throw std::invalid_argument("config: dp.cohort_size must be >= 1");
    }
    if (dp.rounds == 0) {
        throw std::invalid_argument("config: dp.rounds must be >= 1");
    }
    if (local.epochs == 0 || local.batch_size == 0) {
        throw std::invalid_argument(
            "config: local.epochs and local.batch_size must be >= 1");
    }
    if (!(local.lr > 0.0) || !std::isfinite(local.lr)) {
        throw std::invalid_argument("config: local.lr must be positive");
    }
    if (!(server.lr > 0.0) || !std::isfinite(server.lr)) {
        throw std::invalid_argument("config: server.lr must be positive");
    }
    sampling.validate();
    if (protocol == Protocol::HeavyHitters) hh.validate();
    if (protocol == Protocol::SwitchAtRound) {
        if (switch_round == 0 || switch_round >= dp.rounds) {
            throw std::invalid_argument(
                "config: switch_round must satisfy 1 <= switch_round < "
                "dp.rounds");
        }
    }
    if ((protocol == Protocol::SampledTwoPhase ||
         protocol == Protocol::SwitchAtRound) &&
        tokenizer_kind != TokenizerKind::Bpe) {
        throw std::invalid_argument(
            "config: the sample-retrain-remap protocols need a bpe tokenizer");
    }
    if (test_fraction < 0.0 || test_fraction >= 1.0 ||
        !std::isfinite(test_fraction)) {
        throw std::invalid_argument("config: test_fraction must be in [0, 1)");
    }
    if (out_dir.empty()) {
        throw std::invalid_argument("config: out_dir must not be empty");
    }
}

json ExperimentConfig::to_json() const {
    json dp_j{{"clip_bound", dp.clip_bound},
              {"target_epsilon", dp.target_epsilon},
              {"target_delta", dp.target_delta},
              {"population", dp.population},
              {"cohort_size", dp.cohort_size},
              {"rounds", dp.rounds}};
    dp_j["noise_sigma"] = auto_sigma ? json("auto") : json(dp.noise_sigma);
    json j{{"public_corpus", public_corpus},
           {"private_corpus", private_corpus},
           {"corpus_format", format_name(corpus_format)},
           {"tokenizer",
            {{"kind", kind_name(tokenizer_kind)}, {"vocab_size", vocab_size}}},
           {"lm",
            {{"embed_dim", lm.embed_dim},
             {"hidden_dim", lm.hidden_dim},
             {"num_layers", lm.num_layers},
             {"max_seq_len", lm.max_seq_len}}},
           {"dp", dp_j},
           {"local",
            {{"epochs", local.epochs},
             {"batch_size", local.batch_size},
             {"lr", local.lr}}},
           {"server",
            {{"optimizer",
              server.kind == ServerOptConfig::Kind::Adam ? "adam" : "sgd"},
             {"lr", server.lr},
             {"beta1", server.beta1},
             {"beta2", server.beta2},
             {"epsilon", server.epsilon}}},
           {"sampling",
            {{"corpus_size", sampling.corpus_size}, {"l_max", sampling.l_max}}},
           {"hh",
            {{"epsilon_local", hh.epsilon_local},
             {"words_per_user", hh.words_per_user},
             {"domain_size", hh.domain_size},
             {"corpus_words", hh.corpus_words}}},
           {"protocol", protocol_name(protocol)},
           {"switch_round", switch_round},
           {"test_fraction", test_fraction},
           {"cap_tokens", cap_tokens},
           {"eval_every", eval_every},
           {"checkpoint_every", checkpoint_every},
           {"seed", seed},
           {"out_dir", out_dir}};
    return j;
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
    check_keys(j,
               {"public_corpus", "private_corpus", "corpus_format", "tokenizer",
                "lm", "dp", "local", "server", "sampling", "hh", "protocol",
                "switch_round", "test_fraction", "cap_tokens", "eval_every",
                "checkpoint_every", "seed", "out_dir"},
               "experiment config");
    ExperimentConfig cfg;
    cfg.public_corpus = get_or<std::string>(j, "public_corpus", "");
    cfg.private_corpus = get_or<std::string>(j, "private_corpus", "");
    cfg.corpus_format =
        format_from_name(get_or<std::string>(j, "corpus_format", "jsonl"));

    if (j.contains("tokenizer")) {
        const json& t = j.at("tokenizer");
        check_keys(t, {"kind", "vocab_size"}, "tokenizer");
        cfg.tokenizer_kind = kind_from_name(get_or<std::string>(t, "kind", "bpe"));
        cfg.vocab_size = get_or<size_t>(t, "vocab_size", cfg.vocab_size);
    }
    if (j.contains("lm")) {
        const json& l = j.at("lm");
        check_keys(l, {"embed_dim", "hidden_dim", "num_layers", "max_seq_len"},
                   "lm");
        cfg.lm.embed_dim = get_or<size_t>(l, "embed_dim", cfg.lm.embed_dim);
        cfg.lm.hidden_dim = get_or<size_t>(l, "hidden_dim", cfg.lm.hidden_dim);
        cfg.lm.num_layers = get_or<size_t>(l, "num_layers", cfg.lm.num_layers);
        cfg.lm.max_seq_len = get_or<size_t>(l, "max_seq_len", cfg.lm.max_seq_len);
    }
    if (j.contains("dp")) {
        const json& d = j.at("dp");
        check_keys(d,
                   {"clip_bound", "noise_sigma", "target_epsilon",
                    "target_delta", "population", "cohort_size", "rounds"},
                   "dp");
        cfg.dp.clip_bound = get_or<double>(d, "clip_bound", cfg.dp.clip_bound);
        cfg.dp.target_epsilon =
            get_or<double>(d, "target_epsilon", cfg.dp.target_epsilon);
        cfg.dp.target_delta =
            get_or<double>(d, "target_delta", cfg.dp.target_delta);
        cfg.dp.population = get_or<size_t>(d, "population", 0);
        cfg.dp.cohort_size = get_or<size_t>(d, "cohort_size", cfg.dp.cohort_size);
        cfg.dp.rounds = get_or<size_t>(d, "rounds", cfg.dp.rounds);
        if (d.contains("noise_sigma")) {
            const json& s = d.at("noise_sigma");
            if (s.is_string()) {
                if (s.get<std::string>() != "auto") {
                    throw std::invalid_argument(
                        "config: dp.noise_sigma must be a number or \"auto\"");
                }
                cfg.auto_sigma = true;
                cfg.dp.noise_sigma = 0.0;
            } else if (s.is_number()) {
                cfg.dp.noise_sigma = s.get<double>();
            } else {
                throw std::invalid_argument(
                    "config: dp.noise_sigma must be a number or \"auto\"");
            }
        }
    } else {
        cfg.dp.population = 0;
    }
    if (j.contains("local")) {
        const json& l = j.at("local");
        check_keys(l, {"epochs", "batch_size", "lr"}, "local");
        cfg.local.epochs = get_or<size_t>(l, "epochs", cfg.local.epochs);
        cfg.local.batch_size =
            get_or<size_t>(l, "batch_size", cfg.local.batch_size);
        cfg.local.lr = get_or<double>(l, "lr", cfg.local.lr);
    }
    if (j.contains("server")) {
        const json& s = j.at("server");
        check_keys(s, {"optimizer", "lr", "beta1", "beta2", "epsilon"},
                   "server");
        const std::string opt = get_or<std::string>(s, "optimizer", "adam");
        if (opt == "adam") {
            cfg.server.kind = ServerOptConfig::Kind::Adam;
        } else if (opt == "sgd") {
            cfg.server.kind = ServerOptConfig::Kind::Sgd;
        } else {
            throw std::invalid_argument(
                "config: server.optimizer must be \"adam\" or \"sgd\"");
        }
        cfg.server.lr = get_or<double>(s, "lr", cfg.server.lr);
        cfg.server.beta1 = get_or<double>(s, "beta1", cfg.server.beta1);
        cfg.server.beta2 = get_or<double>(s, "beta2", cfg.server.beta2);
        cfg.server.epsilon = get_or<double>(s, "epsilon", cfg.server.epsilon);
    }
    if (j.contains("sampling")) {
        const json& s = j.at("sampling");
        check_keys(s, {"corpus_size", "l_max"}, "sampling");
        cfg.sampling.corpus_size =
            get_or<size_t>(s, "corpus_size", cfg.sampling.corpus_size);
        cfg.sampling.l_max = get_or<size_t>(s, "l_max", cfg.sampling.l_max);
    }
    if (j.contains("hh")) {
        const json& h = j.at("hh");
        check_keys(h, {"epsilon_local", "words_per_user", "domain_size",
                       "corpus_words"},
                   "hh");
        cfg.hh.epsilon_local =
            get_or<double>(h, "epsilon_local", cfg.hh.epsilon_local);
        cfg.hh.words_per_user =
            get_or<size_t>(h, "words_per_user", cfg.hh.words_per_user);
        cfg.hh.domain_size = get_or<size_t>(h, "domain_size", cfg.hh.domain_size);
        cfg.hh.corpus_words =
            get_or<size_t>(h, "corpus_words", cfg.hh.corpus_words);
    }
    cfg.protocol =
        protocol_from_name(get_or<std::string>(j, "protocol", "baseline"));
    cfg.switch_round = get_or<size_t>(j, "switch_round", 0);
    cfg.test_fraction = get_or<double>(j, "test_fraction", cfg.test_fraction);
    cfg.cap_tokens = get_or<size_t>(j, "cap_tokens", cfg.cap_tokens);
    cfg.eval_every = get_or<size_t>(j, "eval_every", 0);
    cfg.checkpoint_every = get_or<size_t>(j, "checkpoint_every", 0);
    cfg.seed = get_or<uint64_t>(j, "seed", 0);
    cfg.out_dir = get_or<std::string>(j, "out_dir", cfg.out_dir);
    cfg.validate();
    return cfg;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::invalid_argument("config: cannot open " + path);
    }
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw std::invalid_argument("config: " + path + " is not valid JSON: " +
                                    e.what());
    }
    return from_json(j);
}

void ExperimentConfig::save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("cannot open for writing: " + path);
    }
    out << to_json().dump(2) << '\n';
    if (!out) {
        throw std::runtime_error("write failed: " + path);
    }
}

std::string hash_hex(uint64_t hash) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(hash));
    return buf;
}

uint64_t file_hash(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot read " + path);
    }
    std::ostringstream bytes;
    bytes << in.rdbuf();
    return fnv1a64(bytes.str());
}

void save_checkpoint(const LmParams& params, uint64_t tokenizer_hash,
                     size_t round, const std::string& path) {
    const LmConfig& c = params.config();
    json j{{"version", 1},
           {"round", round},
           {"tokenizer_hash", hash_hex(tokenizer_hash)},
           {"lm",
            {{"vocab_size", c.vocab_size},
             {"embed_dim", c.embed_dim},
             {"hidden_dim", c.hidden_dim},
             {"num_layers", c.num_layers},
             {"max_seq_len", c.max_seq_len}}},
           {"values", params.values()}};
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("cannot open for writing: " + path);
    }
    out << j.dump() << '\n';
    if (!out) {
        throw std::runtime_error("write failed: " + path);
    }
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::invalid_argument("cannot open checkpoint " + path);
    }
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw std::runtime_error("checkpoint " + path + " is not valid JSON: " +
                                 e.what());
    }
    try {
        if (j.at("version").get<int>() != 1) {
            throw std::runtime_error("unsupported checkpoint version in " +
                                     path);
        }
        const json& l = j.at("lm");
        LmConfig cfg;
        cfg.vocab_size = l.at("vocab_size").get<size_t>();
        cfg.embed_dim = l.at("embed_dim").get<size_t>();
        cfg.hidden_dim = l.at("hidden_dim").get<size_t>();
        cfg.num_layers = l.at("num_layers").get<size_t>();
        cfg.max_seq_len = l.at("max_seq_len").get<size_t>();
        cfg.validate();
        LmParams params(cfg);
        auto values = j.at("values").get<std::vector<double>>();
        if (values.size() != params.size()) {
            throw std::runtime_error("checkpoint " + path +
                                     " has a parameter count that does not "
                                     "match its architecture");
        }
        params.values() = std::move(values);
        return LoadedCheckpoint{
            std::move(params),
            parse_hash_hex(j.at("tokenizer_hash").get<std::string>()),
            j.at("round").get<size_t>()};
    } catch (const json::exception& e) {
        throw std::runtime_error("checkpoint " + path + " is malformed: " +
                                 e.what());
    }
}

EvalOutcome evaluate_checkpoint(const std::string& checkpoint_path,
                                const std::string& tokenizer_path,
                                const std::string& corpus_path,
                                CorpusFormat format) {
    LoadedCheckpoint ck = load_checkpoint(checkpoint_path);
    if (!fs::exists(tokenizer_path)) {
        throw std::invalid_argument("cannot open tokenizer " + tokenizer_path);
    }
    TokenizerModel tok = TokenizerModel::load(tokenizer_path);
    if (tok.hash() != ck.tokenizer_hash) {
        throw std::runtime_error(
            "tokenizer hash mismatch: checkpoint was trained under " +
            hash_hex(ck.tokenizer_hash) + " but " + tokenizer_path +
            " hashes to " + hash_hex(tok.hash()) +
            " - refusing to evaluate a model under the wrong vocabulary");
    }
    if (!fs::exists(corpus_path)) {
        throw std::invalid_argument("cannot open corpus " + corpus_path);
    }
    const std::vector<std::string> sentences =
        flatten_sentences(load_corpus(corpus_path, format));
    EvalOutcome out{evaluate_model(ck.params, tok, sentences), ck.round,
                    hash_hex(ck.tokenizer_hash), tok.kind()};
    return out;
}

RunResult run_experiment(const ExperimentConfig& cfg) {
    cfg.validate();
    if (!fs::exists(cfg.public_corpus)) {
        throw std::invalid_argument("config: public_corpus path does not "
                                    "exist: " + cfg.public_corpus);
    }
    if (!fs::exists(cfg.private_corpus)) {
        throw std::invalid_argument("config: private_corpus path does not "
                                    "exist: " + cfg.private_corpus);
    }
    const fs::path out_dir(cfg.out_dir);
    fs::create_directories(out_dir);
    cfg.save((out_dir / "config.json").string());

    // Run identity: a fingerprint of every semantic knob. The output
    // directory is excluded so the same experiment re-executed elsewhere
    // produces byte-identical metrics files.
    json id_json = cfg.to_json();
    id_json.erase("out_dir");
    const std::string run_id = hash_hex(fnv1a64(id_json.dump()));

    const std::vector<UserDataset> public_users =
        load_corpus(cfg.public_corpus, cfg.corpus_format);
    const std::vector<UserDataset> private_users =
        load_corpus(cfg.private_corpus, cfg.corpus_format);
    const CorpusSplit split = split_users(private_users, cfg.test_fraction,
                                          derive_seed(cfg.seed, kSplitStream));
    if (split.train_users.empty()) {
        throw std::invalid_argument("config: no training users after the "
                                    "test split");
    }
    if (split.test_users.empty()) {
        throw std::invalid_argument(
            "config: the test split is empty; raise test_fraction or add "
            "users");
    }
    save_corpus_jsonl(split.test_users, (out_dir / "test_split.jsonl").string());
    const std::vector<std::string> test_sentences =
        flatten_sentences(split.test_users);

    JsonlWriter metrics((out_dir / "metrics.jsonl").string());
    JsonlWriter ledger((out_dir / "privacy_ledger.jsonl").string());

    // ---- initial tokenizer --------------------------------------------
    const std::vector<std::string> public_text =
        flatten_sentences(public_users);
    TokenizerModel tok = [&]() -> TokenizerModel {
        switch (cfg.protocol) {
            case Protocol::Oracle:
                return fit_tokenizer(cfg.tokenizer_kind,
                                     flatten_sentences(split.train_users),
                                     cfg.vocab_size);
            case Protocol::HeavyHitters: {
                const std::vector<std::string> domain =
                    top_words(public_text, cfg.hh.domain_size);
                if (domain.empty()) {
                    throw std::runtime_error(
                        "heavy hitters: the public corpus has no words to "
                        "form a candidate domain");
                }
                std::vector<HhReport> reports;
                reports.reserve(split.train_users.size());
                const uint64_t base = derive_seed(cfg.seed, kHhReportStream);
                for (const UserDataset& user : split.train_users) {
                    Rng rng(derive_seed(base, fnv1a64(user.user_id)));
                    reports.push_back(client_report(user, cfg.hh.words_per_user,
                                                    domain,
                                                    cfg.hh.epsilon_local, rng));
                }
                save_reports(reports, (out_dir / "hh_reports.jsonl").string());
                const FrequencyEstimate est =
                    aggregate(reports, domain, cfg.hh.epsilon_local);
                Rng corpus_rng(derive_seed(cfg.seed, kHhCorpusStream));
                const std::vector<std::string> hh_corpus =
                    build_hh_corpus(est, cfg.hh.corpus_words, corpus_rng);
                save_corpus(hh_corpus, (out_dir / "hh_corpus.txt").string());
                // The word reports cost a LOCAL budget, separate from the
                // central accountant and never merged into it.
                ledger.row({{"type", "local_dp"},
                            {"mechanism", "randomized_response"},
                            {"epsilon_local", cfg.hh.epsilon_local},
                            {"words_per_user", cfg.hh.words_per_user},
                            {"separate_budget", true}});
                return fit_tokenizer(cfg.tokenizer_kind, hh_corpus,
                                     cfg.vocab_size);
            }
            case Protocol::Baseline:
            case Protocol::SampledTwoPhase:
            case Protocol::SwitchAtRound:
                break;
        }
        return fit_tokenizer(cfg.tokenizer_kind, public_text, cfg.vocab_size);
    }();
    tok.save((out_dir / "tokenizer_initial.json").string());

    // ---- shared phase runner ------------------------------------------
    std::vector<RoundReport> all_reports;
    // population_override pins the accounting population across phases that
    // share one privacy budget (a tokenizer switch mid-run); 0 means "the
    // users available to this phase".
    // `server_opt` lets one protocol thread a single server optimizer through
    // several phases (null means each phase builds its own).
    auto run_phase = [&](LmParams& params, const TokenizerModel& phase_tok,
                         const std::vector<UserDataset>& users, size_t rounds,
                         size_t start_round, uint64_t master_seed, int phase,
                         size_t population_override,
                         ServerOptimizer* server_opt) {
        DpConfig dp = cfg.dp;
        const std::vector<UserDataset> capped =
            cfg.cap_tokens ? cap_all_users(users, phase_tok, cfg.cap_tokens)
                           : users;
        if (capped.empty()) {
            throw std::runtime_error(
                "every user lost all sentences to the token cap");
        }
        if (population_override != 0) {
            dp.population = population_override;
        } else if (dp.population == 0) {
            dp.population = capped.size();
        }
        if (cfg.auto_sigma) {
            dp.noise_sigma = calibrate_sigma(dp.target_epsilon,
                                             dp.target_delta,
                                             dp.sampling_rate(), dp.rounds);
        }
        const double q = dp.sampling_rate();
        auto on_round = [&](const RoundReport& r, const LmParams& p) {
            json round_row{{"type", "round"},
                           {"phase", phase},
                           {"t", r.round},
                           {"loss", r.mean_client_nll},
                           {"epsilon_cum", num_or_null(r.cumulative_epsilon)},
                           {"sum_norm", r.sum_norm}};
            ledger.row({{"type", "round"},
                        {"phase", phase},
                        {"round", r.round},
                        {"sigma", dp.noise_sigma},
                        {"q", q},
                        {"cumulative_epsilon",
                         num_or_null(r.cumulative_epsilon)},
                        {"delta", dp.target_delta}});
            const size_t done = r.round + 1;
            if (cfg.eval_every && done % cfg.eval_every == 0) {
                const MetricsReport m =
                    evaluate_model(p, phase_tok, test_sentences);
                round_row["perplexity"] = m.perplexity_per_word;
                round_row["word_accuracy"] = m.word_accuracy;
                metrics.row(eval_row(m, done, phase, run_id, phase_tok.hash(),
                                     false));
            }
            metrics.row(round_row);
            if (cfg.checkpoint_every && done % cfg.checkpoint_every == 0) {
                save_checkpoint(p, phase_tok.hash(), done,
                                (out_dir / checkpoint_name(done)).string());
            }
        };
        std::vector<RoundReport> reports =
            server_opt
                ? train(params, phase_tok, capped, dp, cfg.local, *server_opt,
                        TrainSchedule{rounds, master_seed, start_round},
                        on_round)
                : train(params, phase_tok, capped, dp, cfg.local, cfg.server,
                        TrainSchedule{rounds, master_seed, start_round},
                        on_round);
        all_reports.insert(all_reports.end(),
                           std::make_move_iterator(reports.begin()),
                           std::make_move_iterator(reports.end()));
    };

    auto log_update = [&](const UpdateResult& upd, size_t at_round) {
        save_corpus(upd.sampled_corpus,
                    (out_dir / "sampled_corpus.txt").string());
        upd.tokenizer.save((out_dir / "tokenizer_updated.json").string());
        // Sampling from the DP-trained model is postprocessing: the step
        // consumes no additional central budget.
        ledger.row({{"type", "update"},
                    {"round", at_round},
                    {"epsilon_cost", 0.0},
                    {"mechanism", "postprocessing"}});
        metrics.row({{"type", "update"},
                     {"round", at_round},
                     {"epsilon_cost", 0.0},
                     {"corpus_hash", hash_hex(upd.corpus_hash)},
                     {"tokenizer_hash", hash_hex(upd.tokenizer_hash)}});
    };

    // ---- protocol bodies ----------------------------------------------
    LmConfig lm_cfg = cfg.lm;
    lm_cfg.vocab_size = tok.vocab_size();
    lm_cfg.validate();
    LmParams params = init_params(lm_cfg, derive_seed(cfg.seed, kInitStream));
    size_t rounds_done = 0;
    int last_phase = 1;
    bool updated = false;

    SamplingConfig sampling = cfg.sampling;
    sampling.seed = derive_seed(cfg.seed, kSampleStream);

    switch (cfg.protocol) {
        case Protocol::Baseline:
        case Protocol::Oracle:
        case Protocol::HeavyHitters: {
            run_phase(params, tok, split.train_users, cfg.dp.rounds, 0,
                      derive_seed(cfg.seed, kTrainStream), 1, 0, nullptr);
            rounds_done = cfg.dp.rounds;
            break;
        }
        case Protocol::SwitchAtRound: {
            // Both phases compose into ONE privacy budget, so the accounting
            // population is fixed up front even though the token cap is
            // re-applied under the new vocabulary after the switch.
            size_t population = cfg.dp.population;
            if (population == 0) {
                population =
                    (cfg.cap_tokens
                         ? cap_all_users(split.train_users, tok, cfg.cap_tokens)
                         : split.train_users)
                        .size();
            }
            const uint64_t master = derive_seed(cfg.seed, kTrainStream);
            // One optimizer spans both phases: the switch rewrites the model's
            // vocabulary-indexed rows, and the same remap carries the
            // parameter-shaped optimizer state across so training continues
            // warm instead of restarting from zeroed moments.
            ServerOptimizer server_opt(cfg.server, params.size());
            run_phase(params, tok, split.train_users, cfg.switch_round, 0,
                      master, 1, population, &server_opt);
            const LmConfig pre_switch_cfg = params.config();
            UpdateResult upd = update(params, tok, sampling);
            log_update(upd, cfg.switch_round);
            if (cfg.server.kind == ServerOptConfig::Kind::Adam) {
                const RemapMatrix map = build_remap(tok, upd.tokenizer);
                LmParams m1(pre_switch_cfg);
                LmParams m2(pre_switch_cfg);
                m1.values() = server_opt.first_moment();
                m2.values() = server_opt.second_moment();
                server_opt.restore(apply_remap(m1, map).values(),
                                   apply_remap(m2, map).values(),
                                   server_opt.steps());
            }
            params = std::move(upd.params);
            tok = std::move(upd.tokenizer);
            updated = true;
            run_phase(params, tok, split.train_users,
                      cfg.dp.rounds - cfg.switch_round, cfg.switch_round,
                      master, 1, population, &server_opt);
            rounds_done = cfg.dp.rounds;
            break;
        }
        case Protocol::SampledTwoPhase: {
            if (split.train_users.size() < 2) {
                throw std::invalid_argument(
                    "config: sampled_two_phase needs at least two training "
                    "users to split into halves");
            }
            const size_t mid = (split.train_users.size() + 1) / 2;
            const std::vector<UserDataset> first_half(
                split.train_users.begin(), split.train_users.begin() + mid);
            const std::vector<UserDataset> second_half(
                split.train_users.begin() + mid, split.train_users.end());
            run_phase(params, tok, first_half, cfg.dp.rounds, 0,
                      derive_seed(cfg.seed, kTrainStream), 1, 0, nullptr);
            UpdateResult upd = update(params, tok, sampling);
            log_update(upd, cfg.dp.rounds);
            tok = std::move(upd.tokenizer);
            updated = true;
            // A fresh model under the new vocabulary, trained on users the
            // first phase never saw.
            lm_cfg.vocab_size = tok.vocab_size();
            lm_cfg.validate();
            params = init_params(lm_cfg,
                                 derive_seed(cfg.seed, kInitPhase2Stream));
            run_phase(params, tok, second_half, cfg.dp.rounds, 0,
                      derive_seed(cfg.seed, kTrainPhase2Stream), 2, 0, nullptr);
            rounds_done = 2 * cfg.dp.rounds;
            last_phase = 2;
            break;
        }
    }

    // ---- final artifacts ----------------------------------------------
    const MetricsReport final_eval =
        evaluate_model(params, tok, test_sentences);
    metrics.row(
        eval_row(final_eval, rounds_done, last_phase, run_id, tok.hash(), true));
    const std::string checkpoint_path =
        (out_dir / "checkpoint_final.json").string();
    save_checkpoint(params, tok.hash(), rounds_done, checkpoint_path);
    metrics.close();
    ledger.close();

    json manifest{{"run_id", run_id},
                  {"protocol", protocol_name(cfg.protocol)},
                  {"artifacts", json::object()}};
    std::vector<std::string> names;
    for (const auto& entry : fs::directory_iterator(out_dir)) {
        if (entry.is_regular_file() &&
            entry.path().filename() != "manifest.json") {
            names.push_back(entry.path().filename().string());
        }
    }
    std::sort(names.begin(), names.end());
    for (const std::string& name : names) {
        manifest["artifacts"][name] =
            hash_hex(file_hash((out_dir / name).string()));
    }
    {
        std::ofstream out(out_dir / "manifest.json", std::ios::binary);
        if (!out) {
            throw std::runtime_error("cannot open for writing: " +
                                     (out_dir / "manifest.json").string());
        }
        out << manifest.dump(2) << '\n';
        if (!out) {
            throw std::runtime_error("write failed: " +
                                     (out_dir / "manifest.json").string());
        }
    }

    RunResult result;
    result.run_id = run_id;
    result.out_dir = out_dir.string();
    result.final_eval = final_eval;
    result.total_rounds = rounds_done;
    result.tokenizer_hash = hash_hex(tok.hash());
    result.tokenizer_path =
        (out_dir / (updated ? "tokenizer_updated.json" : "tokenizer_initial.json"))
            .string();
    result.checkpoint_path = checkpoint_path;
    result.metrics_path = (out_dir / "metrics.jsonl").string();
    result.ledger_path = (out_dir / "privacy_ledger.jsonl").string();
    result.rounds = std::move(all_reports);
    return result;
}

}  // namespace fedtok
