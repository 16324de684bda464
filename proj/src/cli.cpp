#include "fedtok/cli.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <stdexcept>

#include "CLI11.hpp"
#include "json.hpp"

#include "fedtok/corpus.hpp"
#include "fedtok/experiment.hpp"
#include "fedtok/synth.hpp"
#include "fedtok/tokenizer.hpp"
#include "fedtok/update.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace fedtok {

namespace {

struct Overrides {
    std::optional<uint64_t> seed;
    std::optional<std::string> out;
};

json load_json_file(const std::string& path) {
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
    if (!j.is_object()) {
        throw std::invalid_argument("config: " + path +
                                    " must hold a JSON object");
    }
    return j;
}

void check_keys(const json& j, std::initializer_list<const char*> allowed,
                const std::string& where) {
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

std::string require_path(const json& j, const char* key,
                         const std::string& where) {
    const std::string path = get_or<std::string>(j, key, "");
    if (path.empty()) {
        throw std::invalid_argument("config: " + where + " needs \"" + key +
                                    "\"");
    }
    if (!fs::exists(path)) {
        throw std::invalid_argument(std::string("config: ") + key +
                                    " path does not exist: " + path);
    }
    return path;
}

CorpusFormat parse_format(const json& j) {
    const std::string name = get_or<std::string>(j, "format", "jsonl");
    if (name == "jsonl") return CorpusFormat::Jsonl;
    if (name == "plain_dir") return CorpusFormat::PlainDir;
    throw std::invalid_argument(
        "config: format must be \"jsonl\" or \"plain_dir\"");
}

void print_report(const MetricsReport& m, TokenizerKind kind) {
    std::cout << "perplexity_per_word: " << m.perplexity_per_word << "\n"
              << "word_accuracy: " << m.word_accuracy << "\n"
              << "tokens_per_word: " << m.tokens_per_word << "\n";
    if (m.oov_rate) {
        std::cout << "oov_rate: " << *m.oov_rate << "\n";
    }
    if (kind == TokenizerKind::WordLevel) {
        std::cout << "note: word-level perplexity scores every OOV word as "
                     "the single unknown-word class, so it is not comparable "
                     "with sub-word (byte-fallback) perplexity\n";
    }
}

int cmd_make_synth(const json& j, const Overrides& ov) {
    check_keys(j,
               {"shared_words", "novel_words", "shift", "public_users",
                "private_users", "sentences_per_user", "min_sentence_words",
                "max_sentence_words", "zipf_exponent", "seed", "out_dir"},
               "make-synth config");
    SynthConfig cfg;
    cfg.shared_words = get_or<size_t>(j, "shared_words", cfg.shared_words);
    cfg.novel_words = get_or<size_t>(j, "novel_words", cfg.novel_words);
    cfg.shift = get_or<double>(j, "shift", cfg.shift);
    cfg.public_users = get_or<size_t>(j, "public_users", cfg.public_users);
    cfg.private_users = get_or<size_t>(j, "private_users", cfg.private_users);
    cfg.sentences_per_user =
        get_or<size_t>(j, "sentences_per_user", cfg.sentences_per_user);
    cfg.min_sentence_words =
        get_or<size_t>(j, "min_sentence_words", cfg.min_sentence_words);
    cfg.max_sentence_words =
        get_or<size_t>(j, "max_sentence_words", cfg.max_sentence_words);
    cfg.zipf_exponent = get_or<double>(j, "zipf_exponent", cfg.zipf_exponent);
    cfg.seed = ov.seed.value_or(get_or<uint64_t>(j, "seed", cfg.seed));
    cfg.validate();
    const std::string out_dir =
        ov.out.value_or(get_or<std::string>(j, "out_dir", "synth"));
    if (out_dir.empty()) {
        throw std::invalid_argument("config: out_dir must not be empty");
    }

    const SynthCorpora corpora = make_synth(cfg);
    fs::create_directories(out_dir);
    const std::string public_path = (fs::path(out_dir) / "public.jsonl").string();
    const std::string private_path =
        (fs::path(out_dir) / "private.jsonl").string();
    save_corpus_jsonl(corpora.public_users, public_path);
    save_corpus_jsonl(corpora.private_users, private_path);
    std::cout << "wrote " << corpora.public_users.size() << " public users -> "
              << public_path << "\n"
              << "wrote " << corpora.private_users.size()
              << " private users -> " << private_path << "\n";
    return 0;
}

int cmd_train_tokenizer(const json& j, const Overrides& ov) {
    check_keys(j, {"corpus", "format", "kind", "vocab_size", "out_dir"},
               "train-tokenizer config");
    const std::string corpus_path =
        require_path(j, "corpus", "train-tokenizer");
    const CorpusFormat format = parse_format(j);
    const std::string kind = get_or<std::string>(j, "kind", "bpe");
    if (kind != "bpe" && kind != "word_level") {
        throw std::invalid_argument(
            "config: kind must be \"bpe\" or \"word_level\"");
    }
    const size_t vocab_size = get_or<size_t>(j, "vocab_size", 10000);
    const std::string out_dir =
        ov.out.value_or(get_or<std::string>(j, "out_dir", "."));

    const std::vector<std::string> sentences =
        flatten_sentences(load_corpus(corpus_path, format));
    const TokenizerModel tok =
        kind == "bpe" ? TokenizerModel::train_bpe(sentences, vocab_size)
                      : TokenizerModel::train_word_level(sentences, vocab_size);
    fs::create_directories(out_dir);
    const std::string out_path =
        (fs::path(out_dir) / "tokenizer.json").string();
    tok.save(out_path);
    std::cout << "trained " << kind << " tokenizer: vocab " << tok.vocab_size()
              << ", hash " << hash_hex(tok.hash()) << " -> " << out_path
              << "\n";
    return 0;
}

int cmd_run(json j, const Overrides& ov) {
    if (ov.seed) j["seed"] = *ov.seed;
    if (ov.out) j["out_dir"] = *ov.out;
    const ExperimentConfig cfg = ExperimentConfig::from_json(j);
    const RunResult result = run_experiment(cfg);
    std::cout << "run " << result.run_id << " ("
              << protocol_name(cfg.protocol) << ") finished after "
              << result.total_rounds << " rounds\n"
              << "final tokenizer: " << result.tokenizer_hash << "\n";
    print_report(result.final_eval, cfg.tokenizer_kind);
    std::cout << "artifacts: " << result.out_dir << "\n";
    return 0;
}

int cmd_eval(const json& j, const Overrides& ov) {
    check_keys(j, {"checkpoint", "tokenizer", "corpus", "format", "out_dir"},
               "eval config");
    const std::string checkpoint = require_path(j, "checkpoint", "eval");
    const std::string tokenizer = require_path(j, "tokenizer", "eval");
    const std::string corpus = require_path(j, "corpus", "eval");
    const CorpusFormat format = parse_format(j);
    const std::string out_dir =
        ov.out.value_or(get_or<std::string>(j, "out_dir", "."));

    const EvalOutcome outcome =
        evaluate_checkpoint(checkpoint, tokenizer, corpus, format);
    std::cout << "round: " << outcome.round << "\n"
              << "tokenizer_hash: " << outcome.tokenizer_hash << "\n";
    print_report(outcome.report, outcome.tokenizer_kind);

    fs::create_directories(out_dir);
    const std::string out_path =
        (fs::path(out_dir) / "eval_report.jsonl").string();
    std::ofstream out(out_path, std::ios::binary | std::ios::app);
    if (!out) {
        throw std::runtime_error("cannot open for writing: " + out_path);
    }
    json row{{"type", "eval"},
             {"checkpoint", checkpoint},
             {"tokenizer_hash", outcome.tokenizer_hash},
             {"round", outcome.round},
             {"perplexity", outcome.report.perplexity_per_word},
             {"word_accuracy", outcome.report.word_accuracy},
             {"tokens_per_word", outcome.report.tokens_per_word},
             {"oov_rate", outcome.report.oov_rate
                              ? json(*outcome.report.oov_rate)
                              : json(nullptr)}};
    out << row.dump() << '\n';
    if (!out) {
        throw std::runtime_error("write failed: " + out_path);
    }
    std::cout << "appended -> " << out_path << "\n";
    return 0;
}

int cmd_sample(const json& j, const Overrides& ov) {
    check_keys(j,
               {"checkpoint", "tokenizer", "corpus_size", "l_max", "seed",
                "out_dir"},
               "sample config");
    const std::string checkpoint = require_path(j, "checkpoint", "sample");
    const std::string tokenizer = require_path(j, "tokenizer", "sample");
    SamplingConfig cfg;
    cfg.corpus_size = get_or<size_t>(j, "corpus_size", cfg.corpus_size);
    cfg.l_max = get_or<size_t>(j, "l_max", cfg.l_max);
    cfg.seed = ov.seed.value_or(get_or<uint64_t>(j, "seed", cfg.seed));
    cfg.validate();
    const std::string out_dir =
        ov.out.value_or(get_or<std::string>(j, "out_dir", "."));

    const LoadedCheckpoint ck = load_checkpoint(checkpoint);
    const TokenizerModel tok = TokenizerModel::load(tokenizer);
    if (tok.hash() != ck.tokenizer_hash) {
        throw std::runtime_error(
            "tokenizer hash mismatch: checkpoint was trained under " +
            hash_hex(ck.tokenizer_hash) + " but " + tokenizer + " hashes to " +
            hash_hex(tok.hash()));
    }
    const std::vector<std::string> corpus =
        generate_corpus(ck.params, tok, cfg);
    fs::create_directories(out_dir);
    const std::string out_path =
        (fs::path(out_dir) / "sampled_corpus.txt").string();
    save_corpus(corpus, out_path);
    std::cout << "sampled " << corpus.size() << " sentences (hash "
              << hash_hex(corpus_hash(corpus)) << ") -> " << out_path << "\n";
    return 0;
}

int cmd_remap(const json& j, const Overrides& ov) {
    check_keys(j, {"checkpoint", "old_tokenizer", "new_tokenizer", "out_dir"},
               "remap config");
    const std::string checkpoint = require_path(j, "checkpoint", "remap");
    const std::string old_path = require_path(j, "old_tokenizer", "remap");
    const std::string new_path = require_path(j, "new_tokenizer", "remap");
    const std::string out_dir =
        ov.out.value_or(get_or<std::string>(j, "out_dir", "."));

    const LoadedCheckpoint ck = load_checkpoint(checkpoint);
    const TokenizerModel old_tok = TokenizerModel::load(old_path);
    if (old_tok.hash() != ck.tokenizer_hash) {
        throw std::runtime_error(
            "tokenizer hash mismatch: checkpoint was trained under " +
            hash_hex(ck.tokenizer_hash) + " but " + old_path + " hashes to " +
            hash_hex(old_tok.hash()));
    }
    const TokenizerModel new_tok = TokenizerModel::load(new_path);
    const RemapMatrix map = build_remap(old_tok, new_tok);
    const LmParams remapped = apply_remap(ck.params, map);

    fs::create_directories(out_dir);
    const std::string ck_path =
        (fs::path(out_dir) / "checkpoint_remapped.json").string();
    save_checkpoint(remapped, new_tok.hash(), ck.round, ck_path);
    const std::string map_path =
        (fs::path(out_dir) / "remap_matrix.json").string();
    std::ofstream out(map_path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("cannot open for writing: " + map_path);
    }
    out << map.to_json().dump() << '\n';
    if (!out) {
        throw std::runtime_error("write failed: " + map_path);
    }
    std::cout << "remapped vocab " << map.old_vocab << " -> " << map.new_vocab
              << "\ncheckpoint -> " << ck_path << "\nremap matrix -> "
              << map_path << "\n";
    return 0;
}

}  // namespace

int cli_main(const std::vector<std::string>& args) {
    CLI::App app{"private federated LM pipeline: synthetic corpora, "
                 "tokenizers, DP training, tokenizer updates, evaluation"};
    app.require_subcommand(1);

    std::string config_path;
    uint64_t seed_value = 0;
    std::string out_value;

    static constexpr std::pair<const char*, const char*> kCommands[] = {
        {"make-synth", "generate paired public/private synthetic corpora"},
        {"train-tokenizer", "train a tokenizer on a corpus"},
        {"run", "execute a federated training protocol end-to-end"},
        {"eval", "evaluate a checkpoint under its tokenizer on a corpus"},
        {"sample", "draw a synthetic corpus from a trained checkpoint"},
        {"remap", "rewrite a checkpoint's embeddings onto a new vocabulary"},
    };
    for (const auto& [name, description] : kCommands) {
        CLI::App* sub = app.add_subcommand(name, description);
        sub->add_option("--config", config_path, "JSON config file")
            ->required();
        sub->add_option("--seed", seed_value, "override the config seed");
        sub->add_option("--out", out_value, "override the output directory");
    }

    std::vector<const char*> argv;
    argv.reserve(args.size() + 1);
    argv.push_back("fedtok");
    for (const std::string& a : args) argv.push_back(a.c_str());

    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    CLI::App* sub = app.get_subcommands().front();
    Overrides ov;
    if (sub->count("--seed") > 0) ov.seed = seed_value;
    if (sub->count("--out") > 0) ov.out = out_value;

    try {
        const json cfg = load_json_file(config_path);
        const std::string name = sub->get_name();
        if (name == "make-synth") return cmd_make_synth(cfg, ov);
        if (name == "train-tokenizer") return cmd_train_tokenizer(cfg, ov);
        if (name == "run") return cmd_run(cfg, ov);
        if (name == "eval") return cmd_eval(cfg, ov);
        if (name == "sample") return cmd_sample(cfg, ov);
        if (name == "remap") return cmd_remap(cfg, ov);
        std::cerr << "error: unknown subcommand " << name << "\n";
        return 1;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}

}  // namespace fedtok
