#include "fedtok/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "doctest.h"

#include "fedtok/lm.hpp"
#include "fedtok/rng.hpp"
#include "fedtok/tokenizer.hpp"

using namespace fedtok;

namespace {

// A memoryless LSTM that maps each input token to a huge logit on one target
// token: saturated input/output gates, a closed forget gate, and a scaled-up
// projection. transitions[i] = (input id, target id); every other input
// leaves the logits flat. Embedding rows for the mentioned ids are assigned
// distinct 2-d codes by the caller.
LmParams lookup_model(const LmConfig& cfg,
                      const std::vector<std::pair<TokenId, TokenId>>&) {
    LmParams m{cfg};
    auto bias = m.bias(0);  // gate rows: [i, f, g, o], hidden = 2
    bias(0) = bias(1) = 50.0;    // input gate open
    bias(2) = bias(3) = -50.0;   // forget gate closed
    bias(6) = bias(7) = 50.0;    // output gate open
    auto proj = m.proj();
    proj(0, 0) = 1e4;
    proj(1, 1) = 1e4;
    return m;
}

}  // namespace

TEST_CASE("a uniform model scores eight to the five-quarters") {
    // Vocabulary 8 = three specials + five words; an all-zero model spreads
    // probability 1/8 over it. One sentence, four words of one token each,
    // plus the EOS prediction: five targets at ln 8 nats over four words.
    TokenizerModel tok = TokenizerModel::train_word_level(
        {"ant bee cat dog elk"}, 8);
    REQUIRE(tok.vocab_size() == 8);
    LmConfig cfg{8, 3, 3, 1, 16};
    LmParams uniform{cfg};
    const double ppl =
        perplexity_per_word(uniform, tok, {"ant bee cat dog"});
    CHECK(ppl == doctest::Approx(std::pow(8.0, 1.25)).epsilon(1e-12));
    CHECK(ppl == doctest::Approx(13.4543).epsilon(1e-4));
}

TEST_CASE("a certain model has perplexity one and full accuracy") {
    // Word-level vocabulary {bos, eos, unk, alpha}. The model maps
    // BOS -> alpha and alpha -> EOS with overwhelming logit margins, so both
    // predictions have probability 1 up to double rounding.
    TokenizerModel tok = TokenizerModel::train_word_level({"alpha"}, 4);
    const TokenId alpha = *tok.find_token("alpha");
    LmConfig cfg{4, 2, 2, 1, 16};
    LmParams m = lookup_model(cfg, {});
    auto emb = m.embedding();
    emb(tok.bos_id(), 0) = 1.0;   // bos = (1, 0)
    emb(alpha, 1) = 1.0;          // alpha = (0, 1)
    emb(tok.eos_id(), 0) = -1.0;  // eos = (-1, -1)
    emb(tok.eos_id(), 1) = -1.0;
    auto wx = m.w_input(0);  // cell-candidate rows are 4 and 5
    wx(4, 0) = -3.0;
    wx(4, 1) = -3.0;
    wx(5, 0) = 3.0;
    wx(5, 1) = -3.0;

    const std::vector<std::string> corpus = {"alpha"};
    CHECK(perplexity_per_word(m, tok, corpus) == 1.0);
    CHECK(word_accuracy(m, tok, corpus) == 1.0);
}

TEST_CASE("sub-word accuracy demands every token of the word") {
    // Byte-level tokenizer; the model maps BOS->'a', 'a'->'b', 'b'->EOS.
    // "ab" is reproduced token by token; "ba" fails at its first byte.
    TokenizerModel tok = TokenizerModel::train_bpe({"x"}, 258);
    const TokenId a = *tok.find_token("a"), b = *tok.find_token("b");
    LmConfig cfg{258, 2, 2, 1, 32};
    LmParams m = lookup_model(cfg, {});
    auto emb = m.embedding();
    emb(tok.bos_id(), 0) = 1.0;  // bos = (1, 0)
    emb(a, 1) = 1.0;             // a = (0, 1)
    emb(b, 0) = -1.0;            // b = (-1, 0)
    emb(tok.eos_id(), 1) = -1.0;  // eos = (0, -1)
    auto wx = m.w_input(0);
    wx(4, 1) = -3.0;  // g0 = -3 * x1
    wx(5, 0) = 3.0;   // g1 =  3 * x0

    CHECK(word_accuracy(m, tok, {"ab"}) == 1.0);
    CHECK(perplexity_per_word(m, tok, {"ab"}) == 1.0);
    // One perfect word, one word wrong at its first token.
    CHECK(word_accuracy(m, tok, {"ab", "ba"}) == 0.5);
    CHECK(perplexity_per_word(m, tok, {"ab", "ba"}) > 1.0);
}

TEST_CASE("a constant predictor is right one time in V") {
    // Bias-only model whose argmax is always the word "cat"; reference words
    // are drawn uniformly from five candidates, so the expected accuracy is
    // exactly 1/5. Binomial three-sigma band over 2400 word draws.
    TokenizerModel tok = TokenizerModel::train_word_level(
        {"ant bee cat dog elk"}, 8);
    const std::vector<std::string> words = {"ant", "bee", "cat", "dog", "elk"};
    LmConfig cfg{8, 2, 2, 1, 16};
    LmParams m{cfg};
    m.output_bias()(*tok.find_token("cat")) = 5.0;

    Rng rng(314);
    std::vector<std::string> corpus;
    const size_t sentences = 300, per_sentence = 8;
    for (size_t s = 0; s < sentences; ++s) {
        std::string text;
        for (size_t w = 0; w < per_sentence; ++w) {
            if (!text.empty()) text += ' ';
            text += words[rng.uniform_below(words.size())];
        }
        corpus.push_back(std::move(text));
    }
    const double n = static_cast<double>(sentences * per_sentence);
    const double sigma = std::sqrt(0.2 * 0.8 / n);
    CHECK(std::abs(word_accuracy(m, tok, corpus) - 0.2) < 3.0 * sigma);
}

TEST_CASE("out-of-vocabulary reference words never count as correct") {
    TokenizerModel tok = TokenizerModel::train_word_level({"known words"}, 5);
    LmConfig cfg{5, 2, 2, 1, 16};
    LmParams m{cfg};
    // The model's constant argmax IS the OOV token — without the rule these
    // would all be "correct".
    m.output_bias()(tok.oov_id()) = 10.0;
    CHECK(word_accuracy(m, tok, {"zebra quokka emu"}) == 0.0);
}

TEST_CASE("perplexity ignores sentence grouping and ordering") {
    TokenizerModel tok = TokenizerModel::train_word_level(
        {"one two three four five six"}, 9);
    LmConfig cfg{9, 4, 4, 1, 16};
    const LmParams m = init_params(cfg, 5);
    const std::vector<std::string> corpus = {
        "one two", "three four five", "six one", "two two two", "five"};

    const double base = perplexity_per_word(m, tok, corpus);

    std::vector<std::string> shuffled = corpus;
    std::reverse(shuffled.begin(), shuffled.end());
    CHECK(perplexity_per_word(m, tok, shuffled) ==
          doctest::Approx(base).epsilon(1e-12));

    // Folding partial accumulators gives the same ratio.
    PerplexityAccumulator whole, left, right;
    for (size_t i = 0; i < corpus.size(); ++i) {
        const auto seq = tok.encode(corpus[i]);
        const double nll = forward_nll(m, seq.ids).nll;
        const double words = static_cast<double>(word_count(corpus[i]));
        whole.add(nll, words);
        (i < 2 ? left : right).add(nll, words);
    }
    left.merge(right);
    CHECK(left.value() == doctest::Approx(whole.value()).epsilon(1e-14));
    CHECK(whole.value() == doctest::Approx(base).epsilon(1e-14));
}

TEST_CASE("perplexity requires at least one word") {
    TokenizerModel tok = TokenizerModel::train_word_level({"a"}, 4);
    LmConfig cfg{4, 2, 2, 1, 16};
    LmParams m{cfg};
    CHECK_THROWS_AS(perplexity_per_word(m, tok, {}), std::invalid_argument);
    CHECK_THROWS_AS(perplexity_per_word(m, tok, {"   "}),
                    std::invalid_argument);
}

TEST_CASE("unigram divergence matches the add-one hand computation") {
    // Support {a, b}; reference counts (3, 1), candidate counts (1, 3):
    // p = (4/6, 2/6), q = (2/6, 4/6), D = (2/3) ln 2 - (1/3) ln 2.
    const std::vector<std::string> ref = {"a a a b"};
    const std::vector<std::string> cand = {"a b b b"};
    const double want = std::log(2.0) / 3.0;
    CHECK(unigram_kld(ref, cand, 2) == doctest::Approx(want).epsilon(1e-15));
    CHECK(unigram_kld(ref, cand, 2) ==
          doctest::Approx(0.2310490601866484).epsilon(1e-12));
}

TEST_CASE("unigram divergence is zero exactly on identical corpora") {
    const std::vector<std::string> corpus = {"the quick brown fox", "the fox"};
    CHECK(unigram_kld(corpus, corpus, 10) == 0.0);
}

TEST_CASE("unigram divergence support keeps the top words, ties lexicographic") {
    // Counts: a=2, b=2, c=1 — top two are {a, b}. Candidate words outside
    // the support are ignored entirely.
    const std::vector<std::string> ref = {"b b a a c"};
    const std::vector<std::string> cand = {"a zebra zebra b b"};
    // p = (3/6, 3/6); candidate in-support counts (1, 2): q = (2/5, 3/5).
    const double want =
        0.5 * std::log(0.5 / 0.4) + 0.5 * std::log(0.5 / 0.6);
    CHECK(unigram_kld(ref, cand, 2) == doctest::Approx(want).epsilon(1e-15));
    CHECK(unigram_kld(ref, cand, 2) > 0.0);
}

TEST_CASE("unigram divergence validates its inputs") {
    CHECK_THROWS_AS(unigram_kld({}, {"a"}, 5), std::invalid_argument);
    CHECK_THROWS_AS(unigram_kld({"  "}, {"a"}, 5), std::invalid_argument);
    CHECK_THROWS_AS(unigram_kld({"a"}, {"a"}, 0), std::invalid_argument);
}

TEST_CASE("the metrics report bundles the per-family fields") {
    const std::vector<std::string> train = {"red green blue red green red"};
    const std::vector<std::string> eval = {"red green", "blue violet"};

    TokenizerModel words = TokenizerModel::train_word_level(train, 6);
    LmConfig wcfg{6, 3, 3, 1, 16};
    const MetricsReport wr =
        evaluate_model(init_params(wcfg, 1), words, eval);
    CHECK(std::isfinite(wr.perplexity_per_word));
    CHECK(wr.perplexity_per_word > 0.0);
    CHECK(wr.word_accuracy >= 0.0);
    CHECK(wr.word_accuracy <= 1.0);
    CHECK(wr.tokens_per_word == 1.0);
    REQUIRE(wr.oov_rate.has_value());
    CHECK(*wr.oov_rate == doctest::Approx(0.25));  // "violet" of four words
    CHECK(!wr.kld.has_value());

    TokenizerModel bytes = TokenizerModel::train_bpe(train, 260);
    LmConfig bcfg{bytes.vocab_size(), 3, 3, 1, 16};
    const MetricsReport br =
        evaluate_model(init_params(bcfg, 2), bytes, eval);
    CHECK(std::isfinite(br.perplexity_per_word));
    CHECK(br.tokens_per_word > 1.0);
    CHECK(!br.oov_rate.has_value());
}
