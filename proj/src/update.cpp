#include "fedtok/update.hpp"

#include <algorithm>
#include <fstream>
#include <stdexcept>

#include "fedtok/rng.hpp"

namespace fedtok {

void SamplingConfig::validate() const {
    if (corpus_size < 1) {
        throw std::invalid_argument("sampling: corpus_size must be >= 1");
    }
    if (l_max < 1) {
        throw std::invalid_argument("sampling: l_max must be >= 1");
    }
}

nlohmann::json RemapMatrix::to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (size_t i = 0; i < rows.size(); ++i) {
        nlohmann::json entries = nlohmann::json::array();
        for (const auto& [old_id, weight] : rows[i]) {
            entries.push_back({old_id, weight});
        }
        j[std::to_string(i)] = std::move(entries);
    }
    return j;
}

std::vector<std::string> generate_corpus(const LmParams& params,
                                         const TokenizerModel& tok,
                                         const SamplingConfig& cfg) {
    cfg.validate();
    if (params.config().vocab_size != tok.vocab_size()) {
        throw std::invalid_argument(
            "generate_corpus: model and tokenizer vocabulary sizes differ");
    }
    std::vector<std::string> corpus;
    corpus.reserve(cfg.corpus_size);
    for (size_t k = 0; k < cfg.corpus_size; ++k) {
        Rng rng(derive_seed(cfg.seed, k));
        std::string sentence = sample_sentence(params, tok, cfg.l_max, rng);
        std::replace(sentence.begin(), sentence.end(), '\n', ' ');
        corpus.push_back(std::move(sentence));
    }
    return corpus;
}

RemapMatrix build_remap(const TokenizerModel& old_tok,
                        const TokenizerModel& new_tok) {
    if (new_tok.kind() != TokenizerKind::Bpe) {
        throw std::invalid_argument(
            "build_remap: target tokenizer must be byte-pair");
    }
    RemapMatrix map;
    map.new_vocab = new_tok.vocab_size();
    map.old_vocab = old_tok.vocab_size();
    map.rows.resize(map.new_vocab);
    for (size_t i = 0; i < map.new_vocab; ++i) {
        const TokenId id = static_cast<TokenId>(i);
        auto& row = map.rows[i];
        if (id == new_tok.bos_id()) {
            row.emplace_back(old_tok.bos_id(), 1.0);
            continue;
        }
        if (id == new_tok.eos_id()) {
            row.emplace_back(old_tok.eos_id(), 1.0);
            continue;
        }
        const std::string& surface = new_tok.token_surface(id);
        const std::vector<TokenId> parts = old_tok.encode_surface(surface);
        if (parts.empty()) {
            throw std::runtime_error(
                "build_remap: token surface has no encoding in the old "
                "vocabulary: " +
                escape_token_bytes(surface));
        }
        const double weight = 1.0 / static_cast<double>(parts.size());
        row.reserve(parts.size());
        for (TokenId part : parts) row.emplace_back(part, weight);
    }
    return map;
}

LmParams apply_remap(const LmParams& params, const RemapMatrix& map) {
    const LmConfig& old_cfg = params.config();
    if (map.old_vocab != old_cfg.vocab_size) {
        throw std::invalid_argument(
            "apply_remap: matrix old-vocabulary size does not match the model");
    }
    if (map.rows.size() != map.new_vocab || map.new_vocab == 0) {
        throw std::invalid_argument("apply_remap: malformed remap matrix");
    }

    LmConfig new_cfg = old_cfg;
    new_cfg.vocab_size = map.new_vocab;
    new_cfg.validate();
    LmParams out(new_cfg);

    for (size_t l = 0; l < old_cfg.num_layers; ++l) {
        out.w_input(l) = params.w_input(l);
        out.w_recur(l) = params.w_recur(l);
        out.bias(l) = params.bias(l);
    }
    out.proj() = params.proj();

    const auto old_emb = params.embedding();
    const auto old_bias = params.output_bias();
    auto new_emb = out.embedding();
    auto new_bias = out.output_bias();
    for (size_t i = 0; i < map.new_vocab; ++i) {
        const auto& row = map.rows[i];
        if (row.empty()) {
            throw std::invalid_argument(
                "apply_remap: remap row has no constituents");
        }
        for (const auto& [old_id, weight] : row) {
            if (old_id < 0 || static_cast<size_t>(old_id) >= map.old_vocab) {
                throw std::invalid_argument(
                    "apply_remap: constituent id out of range");
            }
            (void)weight;
        }
        new_emb.row(i) = row[0].second * old_emb.row(row[0].first);
        new_bias(i) = row[0].second * old_bias(row[0].first);
        for (size_t k = 1; k < row.size(); ++k) {
            new_emb.row(i) += row[k].second * old_emb.row(row[k].first);
            new_bias(i) += row[k].second * old_bias(row[k].first);
        }
    }
    return out;
}

UpdateResult update(const LmParams& params, const TokenizerModel& old_tok,
                    const SamplingConfig& cfg) {
    std::vector<std::string> corpus = generate_corpus(params, old_tok, cfg);
    TokenizerModel new_tok =
        TokenizerModel::train_bpe(corpus, old_tok.vocab_size());
    const RemapMatrix map = build_remap(old_tok, new_tok);
    LmParams new_params = apply_remap(params, map);
    const uint64_t chash = corpus_hash(corpus);
    const uint64_t thash = new_tok.hash();
    return UpdateResult{std::move(new_params), std::move(new_tok),
                        std::move(corpus), chash, thash};
}

uint64_t corpus_hash(const std::vector<std::string>& corpus) {
    std::string joined;
    size_t total = 0;
    for (const auto& s : corpus) total += s.size() + 1;
    joined.reserve(total);
    for (const auto& s : corpus) {
        joined += s;
        joined += '\n';
    }
    return fnv1a64(joined);
}

void save_corpus(const std::vector<std::string>& corpus,
                 const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("save_corpus: cannot open " + path);
    }
    for (const auto& s : corpus) out << s << '\n';
    if (!out) {
        throw std::runtime_error("save_corpus: write failed for " + path);
    }
}

}  // namespace fedtok
