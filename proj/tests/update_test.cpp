#include "fedtok/update.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"

#include "fedtok/lm.hpp"
#include "fedtok/rng.hpp"
#include "fedtok/tokenizer.hpp"

using namespace fedtok;

namespace {

std::vector<std::string> repeat_text(const std::string& s, size_t n) {
    return std::vector<std::string>(n, s);
}

// Byte-only tokenizer (specials + 256 bytes, zero merges).
TokenizerModel byte_tokenizer() {
    return TokenizerModel::train_bpe(repeat_text("x", 1), 258);
}

double empirical_kld(const std::map<std::string, double>& target,
                     const std::vector<std::string>& corpus) {
    std::map<std::string, double> counts;
    double total = 0.0;
    for (const auto& sentence : corpus) {
        std::istringstream in(sentence);
        std::string word;
        while (in >> word) {
            counts[word] += 1.0;
            total += 1.0;
        }
    }
    REQUIRE(total > 0.0);
    double kld = 0.0;
    for (const auto& [word, p] : target) {
        const auto it = counts.find(word);
        REQUIRE(it != counts.end());  // every target word must be observed
        kld += p * std::log(p / (it->second / total));
    }
    return kld;
}

}  // namespace

TEST_CASE("sampling configuration rejects degenerate values") {
    SamplingConfig ok{10, 16, 1};
    CHECK_NOTHROW(ok.validate());
    SamplingConfig no_corpus{0, 16, 1};
    CHECK_THROWS_AS(no_corpus.validate(), std::invalid_argument);
    SamplingConfig no_budget{10, 0, 1};
    CHECK_THROWS_AS(no_budget.validate(), std::invalid_argument);
}

TEST_CASE("corpus generation draws the requested number of sentences") {
    TokenizerModel tok = byte_tokenizer();
    LmConfig cfg{tok.vocab_size(), 4, 4, 1, 16};
    LmParams params = init_params(cfg, 11);

    const auto corpus = generate_corpus(params, tok, {3, 8, 42});
    CHECK(corpus.size() == 3);

    SUBCASE("identical seeds give identical corpora") {
        const auto again = generate_corpus(params, tok, {3, 8, 42});
        CHECK(again == corpus);
    }
    SUBCASE("a different seed gives a different corpus") {
        const auto other = generate_corpus(params, tok, {3, 8, 43});
        CHECK(other != corpus);
    }
    SUBCASE("sentences never carry embedded newlines") {
        // A uniform model over the byte vocabulary draws the newline byte
        // with probability ~1/258 per step, so a few hundred draws exercise
        // the replacement.
        LmParams uniform{cfg};
        const auto soup = generate_corpus(uniform, tok, {40, 24, 7});
        for (const auto& s : soup) {
            CHECK(s.find('\n') == std::string::npos);
        }
    }
}

TEST_CASE("corpus generation demands matching vocabulary sizes") {
    TokenizerModel tok = byte_tokenizer();
    LmConfig cfg{tok.vocab_size() + 1, 4, 4, 1, 16};
    LmParams params = init_params(cfg, 1);
    CHECK_THROWS_AS(generate_corpus(params, tok, {1, 4, 0}),
                    std::invalid_argument);
}

TEST_CASE("sampled corpus reproduces a bias-only word distribution") {
    // Word tokenizer over four words; the model is all zeros except the
    // output bias, so every step draws i.i.d. from softmax(bias).
    const std::vector<std::string> vocab_text = {
        "apple apple apple apple", "brick brick brick", "cloud cloud", "drum"};
    TokenizerModel tok = TokenizerModel::train_word_level(vocab_text, 7);
    REQUIRE(tok.vocab_size() == 7);

    const std::map<std::string, double> target = {
        {"apple", 0.4}, {"brick", 0.3}, {"cloud", 0.2}, {"drum", 0.1}};
    LmConfig cfg{7, 2, 2, 1, 64};
    LmParams params{cfg};  // zero weights: logits == output_bias everywhere
    auto bias = params.output_bias();
    bias(tok.bos_id()) = -40.0;
    bias(tok.oov_id()) = -40.0;
    const double word_mass = 0.75;  // eos keeps 0.25, sentences average 3 words
    bias(tok.eos_id()) = std::log(0.25);
    for (const auto& [word, p] : target) {
        const auto id = tok.find_token(word);
        REQUIRE(id.has_value());
        bias(*id) = std::log(word_mass * p);
    }

    const auto corpus = generate_corpus(params, tok, {400, 64, 2024});
    CHECK(empirical_kld(target, corpus) < 0.05);
}

TEST_CASE("remapping a tokenizer onto itself is the identity") {
    const auto text = repeat_text("the cat sat on the mat", 50);
    TokenizerModel tok = TokenizerModel::train_bpe(text, 270);
    const size_t vocab = tok.vocab_size();
    REQUIRE(vocab > 258);  // at least one merge learned

    const RemapMatrix map = build_remap(tok, tok);
    CHECK(map.new_vocab == vocab);
    CHECK(map.old_vocab == vocab);
    for (size_t i = 0; i < map.rows.size(); ++i) {
        REQUIRE(map.rows[i].size() == 1);
        CHECK(map.rows[i][0].first == static_cast<TokenId>(i));
        CHECK(map.rows[i][0].second == 1.0);
    }

    LmConfig cfg{vocab, 6, 5, 1, 32};
    const LmParams params = init_params(cfg, 3);
    const LmParams remapped = apply_remap(params, map);
    CHECK(remapped.config() == params.config());
    REQUIRE(remapped.size() == params.size());
    for (size_t i = 0; i < params.size(); ++i) {
        CHECK(remapped.values()[i] == params.values()[i]);
    }

    // Same predictions on arbitrary inputs.
    for (const char* s : {"the cat", "on the mat", "zebra!"}) {
        const auto ids = tok.encode(s).ids;
        CHECK(forward_nll(remapped, ids).nll == forward_nll(params, ids).nll);
    }
}

TEST_CASE("a merged token splits its weight equally over constituents") {
    // Old tokenizer: bytes only. New tokenizer: one merge, "ab".
    TokenizerModel old_tok = byte_tokenizer();
    TokenizerModel new_tok =
        TokenizerModel::train_bpe(repeat_text("ab ab ab", 10), 259);
    REQUIRE(new_tok.vocab_size() == 259);
    const auto ab = new_tok.find_token("ab");
    REQUIRE(ab.has_value());

    const RemapMatrix map = build_remap(old_tok, new_tok);
    const auto& row = map.rows[static_cast<size_t>(*ab)];
    REQUIRE(row.size() == 2);
    const auto a = old_tok.find_token("a"), b = old_tok.find_token("b");
    REQUIRE(a.has_value());
    REQUIRE(b.has_value());
    CHECK(row[0].first == *a);
    CHECK(row[1].first == *b);
    CHECK(row[0].second == 0.5);
    CHECK(row[1].second == 0.5);
}

TEST_CASE("a five-byte token over a two-merge vocabulary gets thirds") {
    // Old tokenizer learns "co" and "id"; the new tokenizer has a single
    // "covid" token, which the old vocabulary encodes as [co, v, id].
    std::vector<std::string> old_text;
    for (int i = 0; i < 20; ++i) {
        old_text.push_back("co co co");
        old_text.push_back("vid vid vid");
    }
    TokenizerModel old_tok = TokenizerModel::train_bpe(old_text, 260);
    REQUIRE(old_tok.find_token("co").has_value());
    REQUIRE(old_tok.find_token("id").has_value());

    TokenizerModel new_tok =
        TokenizerModel::train_bpe(repeat_text("covid covid covid", 20), 263);
    const auto covid = new_tok.find_token("covid");
    REQUIRE(covid.has_value());

    const RemapMatrix map = build_remap(old_tok, new_tok);
    const auto& row = map.rows[static_cast<size_t>(*covid)];
    REQUIRE(row.size() == 3);
    for (const auto& [id, w] : row) {
        CHECK(w == 1.0 / 3.0);
    }
    CHECK(row[0].first == *old_tok.find_token("co"));
    CHECK(row[1].first == *old_tok.find_token("v"));
    CHECK(row[2].first == *old_tok.find_token("id"));
}

TEST_CASE("remap construction rejects unusable tokenizer pairs") {
    const auto words = repeat_text("alpha beta gamma", 10);
    TokenizerModel word_tok = TokenizerModel::train_word_level(words, 8);
    TokenizerModel bpe_tok = TokenizerModel::train_bpe(words, 258);

    // Target must be byte-pair.
    CHECK_THROWS_AS(build_remap(bpe_tok, word_tok), std::invalid_argument);
    // A word-level source cannot encode whitespace byte surfaces.
    CHECK_THROWS_AS(build_remap(word_tok, bpe_tok), std::runtime_error);
}

TEST_CASE("embedding rewrite averages constituent rows exactly") {
    LmConfig cfg{5, 4, 3, 1, 16};
    const LmParams params = init_params(cfg, 9);

    RemapMatrix map;
    map.new_vocab = 3;
    map.old_vocab = 5;
    map.rows = {{{0, 1.0}},
                {{2, 0.5}, {3, 0.5}},
                {{4, 1.0}}};
    const LmParams out = apply_remap(params, map);

    CHECK(out.config().vocab_size == 3);
    CHECK(out.config().embed_dim == cfg.embed_dim);
    const auto old_emb = params.embedding();
    const auto new_emb = out.embedding();
    for (size_t d = 0; d < cfg.embed_dim; ++d) {
        CHECK(new_emb(0, d) == old_emb(0, d));
        CHECK(new_emb(1, d) == 0.5 * old_emb(2, d) + 0.5 * old_emb(3, d));
        CHECK(new_emb(2, d) == old_emb(4, d));
    }
    CHECK(out.output_bias()(1) ==
          0.5 * params.output_bias()(2) + 0.5 * params.output_bias()(3));

    // Non-embedding parameters are copied bit for bit.
    CHECK(out.w_input(0) == params.w_input(0));
    CHECK(out.w_recur(0) == params.w_recur(0));
    CHECK(out.bias(0) == params.bias(0));
    CHECK(out.proj() == params.proj());
}

TEST_CASE("embedding rewrite validates its inputs") {
    LmConfig cfg{5, 4, 3, 1, 16};
    const LmParams params = init_params(cfg, 9);

    RemapMatrix wrong_old;
    wrong_old.new_vocab = 3;
    wrong_old.old_vocab = 6;
    wrong_old.rows = {{{0, 1.0}}, {{1, 1.0}}, {{2, 1.0}}};
    CHECK_THROWS_AS(apply_remap(params, wrong_old), std::invalid_argument);

    RemapMatrix ragged;
    ragged.new_vocab = 3;
    ragged.old_vocab = 5;
    ragged.rows = {{{0, 1.0}}, {{1, 1.0}}};
    CHECK_THROWS_AS(apply_remap(params, ragged), std::invalid_argument);

    RemapMatrix empty_row;
    empty_row.new_vocab = 2;
    empty_row.old_vocab = 5;
    empty_row.rows = {{{0, 1.0}}, {}};
    CHECK_THROWS_AS(apply_remap(params, empty_row), std::invalid_argument);

    RemapMatrix out_of_range;
    out_of_range.new_vocab = 2;
    out_of_range.old_vocab = 5;
    out_of_range.rows = {{{0, 1.0}}, {{5, 1.0}}};
    CHECK_THROWS_AS(apply_remap(params, out_of_range), std::invalid_argument);
}

TEST_CASE("tokenizer refresh composes sampling, training and remapping") {
    TokenizerModel tok =
        TokenizerModel::train_bpe(repeat_text("sun moon sun moon star", 20), 264);
    LmConfig cfg{tok.vocab_size(), 6, 8, 1, 24};
    LmParams params = init_params(cfg, 21);
    const SamplingConfig scfg{60, 20, 99};

    const UpdateResult result = update(params, tok, scfg);

    // Mirrors the documented composition step by step.
    const auto corpus = generate_corpus(params, tok, scfg);
    CHECK(result.sampled_corpus == corpus);
    CHECK(result.corpus_hash == corpus_hash(corpus));
    TokenizerModel manual_tok = TokenizerModel::train_bpe(corpus, tok.vocab_size());
    CHECK(result.tokenizer_hash == manual_tok.hash());
    CHECK(result.tokenizer.to_json() == manual_tok.to_json());
    const LmParams manual =
        apply_remap(params, build_remap(tok, manual_tok));
    REQUIRE(result.params.size() == manual.size());
    CHECK(result.params.values() == manual.values());

    // The remapped model scores new-tokenizer encodings with a finite loss.
    const auto ids = result.tokenizer.encode("sun moon star").ids;
    CHECK(std::isfinite(forward_nll(result.params, ids).nll));

    SUBCASE("refresh is deterministic given the seed") {
        const UpdateResult again = update(params, tok, scfg);
        CHECK(again.corpus_hash == result.corpus_hash);
        CHECK(again.tokenizer_hash == result.tokenizer_hash);
        CHECK(again.params.values() == result.params.values());
    }
}

TEST_CASE("refresh from an untrained model still yields a working tokenizer") {
    TokenizerModel tok = byte_tokenizer();
    LmConfig cfg{tok.vocab_size(), 4, 4, 1, 16};
    LmParams uniform{cfg};

    const UpdateResult result = update(uniform, tok, {50, 16, 5});
    CHECK(result.tokenizer.vocab_size() >= 258);
    CHECK(result.params.config().vocab_size == result.tokenizer.vocab_size());
    const TokenSeq seq = result.tokenizer.encode("hello world");
    CHECK(result.tokenizer.decode(seq) == "hello world");
}

TEST_CASE("refreshed tokenizer compresses in-distribution text at least as well") {
    // Stale tokenizer trained on fruit names that share no byte pair with the
    // private text; on private sentences it falls back to plain bytes.
    TokenizerModel stale =
        TokenizerModel::train_bpe(repeat_text("cherry melon cherry melon", 30), 266);
    REQUIRE(stale.vocab_size() == 266);

    // Private data: one strongly repetitive pattern the model can memorize.
    UserDataset user;
    user.user_id = "writer";
    user.sentences = repeat_text("banana banana banana banana", 8);

    LmConfig cfg{stale.vocab_size(), 12, 24, 1, 40};
    LmParams params = init_params(cfg, 17);
    LocalTrainConfig train_cfg{200, 4, 0.1};
    const GradientVector delta = local_train(params, user, stale, train_cfg, 55);
    for (size_t i = 0; i < params.size(); ++i) {
        params.values()[i] += delta.values[i];
    }

    const UpdateResult result = update(params, stale, {150, 40, 77});

    const std::vector<std::string> held_out = {"banana banana"};
    const double stale_tpw = stale.tokens_per_word(held_out);
    const double fresh_tpw = result.tokenizer.tokens_per_word(held_out);
    CHECK(fresh_tpw <= stale_tpw);
    // The stale vocabulary has nothing to merge here, so it costs one token
    // per byte; the refreshed one must do strictly better.
    CHECK(stale_tpw == doctest::Approx(13.0 / 2.0));
    CHECK(fresh_tpw < stale_tpw);
}

TEST_CASE("remap matrices serialize as id-to-constituent tables") {
    RemapMatrix map;
    map.new_vocab = 2;
    map.old_vocab = 4;
    map.rows = {{{0, 1.0}}, {{2, 0.5}, {3, 0.5}}};
    const nlohmann::json j = map.to_json();
    CHECK(j.size() == 2);
    CHECK(j["0"] == nlohmann::json::array({{0, 1.0}}));
    CHECK(j["1"] == nlohmann::json::array({{2, 0.5}, {3, 0.5}}));
}

TEST_CASE("sampled corpora persist one sentence per line") {
    const std::vector<std::string> corpus = {"first line", "second line",
                                             "third"};
    const std::string path = "update_corpus_test.txt";
    save_corpus(corpus, path);
    std::ifstream in(path);
    REQUIRE(in.good());
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) lines.push_back(line);
    in.close();
    std::remove(path.c_str());
    CHECK(lines == corpus);

    CHECK(corpus_hash(corpus) != corpus_hash({"first line", "second line"}));
    CHECK(corpus_hash(corpus) == corpus_hash(corpus));
}
