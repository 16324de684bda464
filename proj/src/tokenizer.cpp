#include "fedtok/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "fedtok/rng.hpp"

namespace fedtok {

namespace {

constexpr const char* kBosSurface = "\xE2\x9F\xA8" "bos" "\xE2\x9F\xA9";
constexpr const char* kEosSurface = "\xE2\x9F\xA8" "eos" "\xE2\x9F\xA9";
constexpr const char* kOovSurface = "\xE2\x9F\xA8" "unk" "\xE2\x9F\xA9";

inline bool is_space_byte(char c) {
    return std::isspace(static_cast<unsigned char>(c)) != 0;
}

inline uint64_t pair_key(TokenId left, TokenId right) {
    return (static_cast<uint64_t>(static_cast<uint32_t>(left)) << 32) |
           static_cast<uint32_t>(right);
}

}  // namespace

std::vector<TextRun> split_runs(std::string_view text) {
    std::vector<TextRun> runs;
    size_t i = 0;
    while (i < text.size()) {
        const bool ws = is_space_byte(text[i]);
        size_t j = i + 1;
        while (j < text.size() && is_space_byte(text[j]) == ws) ++j;
        runs.push_back({text.substr(i, j - i), !ws});
        i = j;
    }
    return runs;
}

std::vector<std::string_view> split_words(std::string_view text) {
    std::vector<std::string_view> words;
    for (const TextRun& run : split_runs(text)) {
        if (run.is_word) words.push_back(run.text);
    }
    return words;
}

std::string escape_token_bytes(std::string_view raw) {
    std::string out;
    out.reserve(raw.size());
    static const char* hex = "0123456789abcdef";
    for (unsigned char c : raw) {
        if (c == '\\') {
            out += "\\\\";
        } else if (c >= 0x20 && c <= 0x7e) {
            out += static_cast<char>(c);
        } else {
            out += "\\x";
            out += hex[c >> 4];
            out += hex[c & 0xf];
        }
    }
    return out;
}

std::string unescape_token_bytes(std::string_view escaped) {
    std::string out;
    out.reserve(escaped.size());
    for (size_t i = 0; i < escaped.size(); ++i) {
        if (escaped[i] != '\\') {
            out += escaped[i];
            continue;
        }
        if (i + 1 < escaped.size() && escaped[i + 1] == '\\') {
            out += '\\';
            ++i;
            continue;
        }
        if (i + 3 < escaped.size() && escaped[i + 1] == 'x') {
            auto nibble = [](char c) -> int {
                if (c >= '0' && c <= '9') return c - '0';
                if (c >= 'a' && c <= 'f') return c - 'a' + 10;
                if (c >= 'A' && c <= 'F') return c - 'A' + 10;
                return -1;
            };
            const int hi = nibble(escaped[i + 2]);
            const int lo = nibble(escaped[i + 3]);
            if (hi < 0 || lo < 0) {
                throw std::runtime_error("unescape_token_bytes: bad hex escape");
            }
            out += static_cast<char>((hi << 4) | lo);
            i += 3;
            continue;
        }
        throw std::runtime_error("unescape_token_bytes: dangling backslash");
    }
    return out;
}

TokenId TokenizerModel::add_token(std::string surface) {
    const TokenId id = static_cast<TokenId>(surfaces_.size());
    auto [it, inserted] = surface_to_id_.emplace(surface, id);
    if (!inserted) {
        throw std::runtime_error("tokenizer: duplicate token surface '" +
                                 escape_token_bytes(surface) + "'");
    }
    surfaces_.push_back(std::move(surface));
    return id;
}

void TokenizerModel::rebuild_merge_ranks() {
    merge_ranks_.clear();
    for (size_t rank = 0; rank < merges_.size(); ++rank) {
        const auto& [left, right] = merges_[rank];
        const auto l = find_token(left);
        const auto r = find_token(right);
        const auto merged = find_token(left + right);
        if (!l || !r || !merged) {
            throw std::runtime_error("tokenizer: merge references unknown token");
        }
        merge_ranks_[pair_key(*l, *r)] = {static_cast<int32_t>(rank), *merged};
    }
}

TokenId TokenizerModel::oov_id() const {
    if (kind_ != TokenizerKind::WordLevel) {
        throw std::logic_error("oov_id: BPE tokenizers have no OOV token");
    }
    return oov_id_;
}

bool TokenizerModel::is_special(TokenId id) const {
    return id == bos_id_ || id == eos_id_ ||
           (kind_ == TokenizerKind::WordLevel && id == oov_id_);
}

const std::string& TokenizerModel::token_surface(TokenId id) const {
    if (id < 0 || static_cast<size_t>(id) >= surfaces_.size()) {
        throw std::out_of_range("token_surface: id out of range");
    }
    return surfaces_[static_cast<size_t>(id)];
}

std::optional<TokenId> TokenizerModel::find_token(std::string_view surface) const {
    auto it = surface_to_id_.find(std::string(surface));
    if (it == surface_to_id_.end()) return std::nullopt;
    return it->second;
}

TokenizerModel TokenizerModel::train_word_level(
    const std::vector<std::string>& corpus, size_t vocab_size) {
    if (corpus.empty()) throw std::invalid_argument("train_word_level: empty corpus");
    if (vocab_size <= 3) {
        throw std::invalid_argument("train_word_level: vocab_size must exceed 3");
    }

    std::map<std::string, uint64_t> counts;
    for (const std::string& sentence : corpus) {
        for (std::string_view w : split_words(sentence)) {
            ++counts[std::string(w)];
        }
    }
    if (counts.empty()) throw std::invalid_argument("train_word_level: empty corpus");

    // Sort by frequency descending, then lexicographic.
    std::vector<std::pair<std::string, uint64_t>> ranked(counts.begin(), counts.end());
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });

    TokenizerModel tok;
    tok.kind_ = TokenizerKind::WordLevel;
    tok.bos_id_ = tok.add_token(kBosSurface);
    tok.eos_id_ = tok.add_token(kEosSurface);
    tok.oov_id_ = tok.add_token(kOovSurface);
    for (const auto& [word, count] : ranked) {
        if (tok.surfaces_.size() >= vocab_size) break;
        if (tok.surface_to_id_.count(word)) continue;  // collides with a special
        tok.add_token(word);
    }
    return tok;
}

TokenizerModel TokenizerModel::train_bpe(const std::vector<std::string>& corpus,
                                         size_t vocab_size) {
    if (corpus.empty()) throw std::invalid_argument("train_bpe: empty corpus");
    if (vocab_size < 258) {
        throw std::invalid_argument(
            "train_bpe: vocab_size must cover 256 bytes plus BOS/EOS");
    }

    TokenizerModel tok;
    tok.kind_ = TokenizerKind::Bpe;
    tok.bos_id_ = tok.add_token(kBosSurface);
    tok.eos_id_ = tok.add_token(kEosSurface);
    for (int b = 0; b < 256; ++b) {
        tok.add_token(std::string(1, static_cast<char>(b)));
    }

    // Segment frequency table; merges never cross run boundaries.
    std::map<std::string, uint64_t> seg_counts;
    for (const std::string& sentence : corpus) {
        for (const TextRun& run : split_runs(sentence)) {
            ++seg_counts[std::string(run.text)];
        }
    }
    if (seg_counts.empty()) throw std::invalid_argument("train_bpe: empty corpus");

    struct Segment {
        std::vector<TokenId> state;
        uint64_t count;
    };
    std::vector<Segment> segments;
    segments.reserve(seg_counts.size());
    for (const auto& [text, count] : seg_counts) {
        Segment seg;
        seg.count = count;
        seg.state.reserve(text.size());
        for (unsigned char c : text) {
            seg.state.push_back(static_cast<TokenId>(2 + c));
        }
        segments.push_back(std::move(seg));
    }

    while (tok.surfaces_.size() < vocab_size) {
        // Count adjacent pairs across all segments.
        std::unordered_map<uint64_t, uint64_t> pair_counts;
        for (const Segment& seg : segments) {
            for (size_t i = 0; i + 1 < seg.state.size(); ++i) {
                pair_counts[pair_key(seg.state[i], seg.state[i + 1])] += seg.count;
            }
        }

        // Best pair: highest count, ties broken lexicographically on the
        // (left, right) surfaces. Pairs below frequency 2 never merge, and a
        // pair whose merged surface already names a token is skipped to keep
        // the vocab bijective.
        bool found = false;
        uint64_t best_count = 0;
        TokenId best_l = 0, best_r = 0;
        for (const auto& [key, count] : pair_counts) {
            if (count < 2) continue;
            const TokenId l = static_cast<TokenId>(key >> 32);
            const TokenId r = static_cast<TokenId>(key & 0xffffffff);
            if (tok.surface_to_id_.count(tok.surfaces_[l] + tok.surfaces_[r])) continue;
            if (!found || count > best_count) {
                found = true;
                best_count = count;
                best_l = l;
                best_r = r;
            } else if (count == best_count) {
                const auto& bl = tok.surfaces_[best_l];
                const auto& br = tok.surfaces_[best_r];
                const auto& cl = tok.surfaces_[l];
                const auto& cr = tok.surfaces_[r];
                if (std::tie(cl, cr) < std::tie(bl, br)) {
                    best_l = l;
                    best_r = r;
                }
            }
        }
        if (!found) break;

        const std::string left = tok.surfaces_[best_l];
        const std::string right = tok.surfaces_[best_r];
        const TokenId merged = tok.add_token(left + right);
        tok.merges_.emplace_back(left, right);

        // Replace occurrences left to right in every segment.
        for (Segment& seg : segments) {
            std::vector<TokenId>& s = seg.state;
            size_t w = 0;
            for (size_t i = 0; i < s.size(); ++i) {
                if (i + 1 < s.size() && s[i] == best_l && s[i + 1] == best_r) {
                    s[w++] = merged;
                    ++i;
                } else {
                    s[w++] = s[i];
                }
            }
            s.resize(w);
        }
    }

    tok.rebuild_merge_ranks();
    return tok;
}

std::vector<TokenId> TokenizerModel::apply_merges(std::string_view run) const {
    std::vector<TokenId> state;
    state.reserve(run.size());
    for (unsigned char c : run) {
        state.push_back(static_cast<TokenId>(2 + c));
    }
    while (state.size() > 1) {
        // Lowest-rank merge present in the current state.
        int32_t best_rank = -1;
        TokenId best_l = 0, best_r = 0, best_m = 0;
        for (size_t i = 0; i + 1 < state.size(); ++i) {
            auto it = merge_ranks_.find(pair_key(state[i], state[i + 1]));
            if (it == merge_ranks_.end()) continue;
            if (best_rank < 0 || it->second.first < best_rank) {
                best_rank = it->second.first;
                best_l = state[i];
                best_r = state[i + 1];
                best_m = it->second.second;
            }
        }
        if (best_rank < 0) break;
        size_t w = 0;
        for (size_t i = 0; i < state.size(); ++i) {
            if (i + 1 < state.size() && state[i] == best_l && state[i + 1] == best_r) {
                state[w++] = best_m;
                ++i;
            } else {
                state[w++] = state[i];
            }
        }
        state.resize(w);
    }
    return state;
}

TokenSeq TokenizerModel::encode(std::string_view sentence) const {
    EncodedSentence enc = encode_with_words(sentence);
    return TokenSeq{std::move(enc.ids)};
}

TokenizerModel::EncodedSentence TokenizerModel::encode_with_words(
    std::string_view sentence) const {
    EncodedSentence out;
    out.ids.push_back(bos_id_);
    out.word_index.push_back(-1);
    int32_t word = 0;
    for (const TextRun& run : split_runs(sentence)) {
        if (kind_ == TokenizerKind::WordLevel) {
            if (!run.is_word) continue;
            const auto id = find_token(run.text);
            out.ids.push_back(id && !is_special(*id) ? *id : oov_id_);
            out.word_index.push_back(word++);
        } else {
            const int32_t index = run.is_word ? word : -1;
            for (TokenId id : apply_merges(run.text)) {
                out.ids.push_back(id);
                out.word_index.push_back(index);
            }
            if (run.is_word) ++word;
        }
    }
    out.ids.push_back(eos_id_);
    out.word_index.push_back(-1);
    out.num_words = static_cast<size_t>(word);
    return out;
}

std::vector<TokenId> TokenizerModel::encode_surface(std::string_view surface) const {
    std::vector<TokenId> ids;
    for (const TextRun& run : split_runs(surface)) {
        if (kind_ == TokenizerKind::WordLevel) {
            if (!run.is_word) continue;
            const auto id = find_token(run.text);
            ids.push_back(id && !is_special(*id) ? *id : oov_id_);
        } else {
            for (TokenId id : apply_merges(run.text)) ids.push_back(id);
        }
    }
    return ids;
}

std::string TokenizerModel::decode(const TokenSeq& seq) const {
    std::string out;
    bool first_word = true;
    for (TokenId id : seq.ids) {
        if (id < 0 || static_cast<size_t>(id) >= surfaces_.size()) {
            throw std::out_of_range("decode: token id out of range");
        }
        if (id == bos_id_ || id == eos_id_) continue;
        if (kind_ == TokenizerKind::WordLevel) {
            if (!first_word) out += ' ';
            out += surfaces_[static_cast<size_t>(id)];
            first_word = false;
        } else {
            out += surfaces_[static_cast<size_t>(id)];
        }
    }
    return out;
}

double TokenizerModel::oov_rate(const std::vector<std::string>& corpus) const {
    if (kind_ != TokenizerKind::WordLevel) {
        throw std::logic_error("oov_rate: defined for WordLevel tokenizers only");
    }
    uint64_t total = 0, oov = 0;
    for (const std::string& sentence : corpus) {
        for (std::string_view w : split_words(sentence)) {
            ++total;
            const auto id = find_token(w);
            if (!id || is_special(*id)) ++oov;
        }
    }
    if (total == 0) throw std::invalid_argument("oov_rate: corpus has no words");
    return static_cast<double>(oov) / static_cast<double>(total);
}

double TokenizerModel::tokens_per_word(const std::vector<std::string>& corpus) const {
    uint64_t tokens = 0, words = 0;
    for (const std::string& sentence : corpus) {
        if (kind_ == TokenizerKind::WordLevel) {
            // One token per word, OOV included.
            const size_t n = split_words(sentence).size();
            tokens += n;
            words += n;
        } else {
            const EncodedSentence enc = encode_with_words(sentence);
            tokens += enc.ids.size() - 2;  // everything between BOS and EOS
            words += enc.num_words;
        }
    }
    if (words == 0) throw std::invalid_argument("tokens_per_word: corpus has no words");
    return static_cast<double>(tokens) / static_cast<double>(words);
}

nlohmann::json TokenizerModel::to_json() const {
    nlohmann::json vocab = nlohmann::json::object();
    for (size_t id = 0; id < surfaces_.size(); ++id) {
        vocab[escape_token_bytes(surfaces_[id])] = id;
    }
    nlohmann::json merges = nlohmann::json::array();
    for (const auto& [l, r] : merges_) {
        merges.push_back({escape_token_bytes(l), escape_token_bytes(r)});
    }
    nlohmann::json specials = {{"bos", bos_id_}, {"eos", eos_id_}};
    if (kind_ == TokenizerKind::WordLevel) specials["oov"] = oov_id_;
    return {{"kind", kind_ == TokenizerKind::Bpe ? "bpe" : "word"},
            {"vocab", vocab},
            {"merges", merges},
            {"specials", specials}};
}

TokenizerModel TokenizerModel::from_json(const nlohmann::json& j) {
    TokenizerModel tok;
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "bpe") {
        tok.kind_ = TokenizerKind::Bpe;
    } else if (kind == "word") {
        tok.kind_ = TokenizerKind::WordLevel;
    } else {
        throw std::runtime_error("tokenizer: unknown kind '" + kind + "'");
    }

    const auto& vocab = j.at("vocab");
    tok.surfaces_.assign(vocab.size(), std::string());
    std::vector<bool> seen(vocab.size(), false);
    for (auto it = vocab.begin(); it != vocab.end(); ++it) {
        const int64_t id = it.value().get<int64_t>();
        if (id < 0 || static_cast<size_t>(id) >= vocab.size() || seen[id]) {
            throw std::runtime_error("tokenizer: vocab ids must be dense and unique");
        }
        seen[id] = true;
        tok.surfaces_[static_cast<size_t>(id)] = unescape_token_bytes(it.key());
    }
    for (size_t id = 0; id < tok.surfaces_.size(); ++id) {
        auto [_, inserted] = tok.surface_to_id_.emplace(tok.surfaces_[id],
                                                        static_cast<TokenId>(id));
        if (!inserted) {
            throw std::runtime_error("tokenizer: duplicate surface in vocab");
        }
    }

    const auto& specials = j.at("specials");
    tok.bos_id_ = specials.at("bos").get<TokenId>();
    tok.eos_id_ = specials.at("eos").get<TokenId>();
    if (tok.kind_ == TokenizerKind::WordLevel) {
        tok.oov_id_ = specials.at("oov").get<TokenId>();
    }
    for (TokenId id : {tok.bos_id_, tok.eos_id_}) {
        if (id < 0 || static_cast<size_t>(id) >= tok.surfaces_.size()) {
            throw std::runtime_error("tokenizer: special id out of range");
        }
    }

    if (tok.kind_ == TokenizerKind::Bpe) {
        for (int b = 0; b < 256; ++b) {
            if (!tok.surface_to_id_.count(std::string(1, static_cast<char>(b)))) {
                throw std::runtime_error("tokenizer: BPE vocab missing a base byte");
            }
        }
        for (const auto& m : j.at("merges")) {
            tok.merges_.emplace_back(unescape_token_bytes(m.at(0).get<std::string>()),
                                     unescape_token_bytes(m.at(1).get<std::string>()));
        }
        tok.rebuild_merge_ranks();
    } else if (!j.at("merges").empty()) {
        throw std::runtime_error("tokenizer: word-level model cannot carry merges");
    }
    return tok;
}

void TokenizerModel::save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("tokenizer: cannot open " + path);
    out << to_json().dump(2) << '\n';
}

TokenizerModel TokenizerModel::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("tokenizer: cannot open " + path);
    nlohmann::json j;
    in >> j;
    return from_json(j);
}

uint64_t TokenizerModel::hash() const {
    return fnv1a64(to_json().dump());
}

}  // namespace fedtok
