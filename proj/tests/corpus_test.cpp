#include "fedtok/corpus.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <string>

#include "doctest.h"

using namespace fedtok;

namespace {

struct TempFile {
    std::string path;
    explicit TempFile(const std::string& name, const std::string& content)
        : path(name) {
        std::ofstream out(path);
        out << content;
    }
    ~TempFile() { std::remove(path.c_str()); }
};

}  // namespace

TEST_CASE("jsonl records with the same user merge in order") {
    TempFile f("corpus_merge_test.jsonl",
               R"({"user_id": "u1", "text": "first post"})"
               "\n"
               R"({"user_id": "u1", "text": "second post"})"
               "\n");
    const auto users = load_corpus(f.path, CorpusFormat::Jsonl);
    REQUIRE(users.size() == 1);
    CHECK(users[0].user_id == "u1");
    REQUIRE(users[0].sentences.size() == 2);
    CHECK(users[0].sentences[0] == "first post");
    CHECK(users[0].sentences[1] == "second post");
}

TEST_CASE("empty jsonl file loads as an empty corpus") {
    TempFile f("corpus_empty_test.jsonl", "");
    CHECK(load_corpus(f.path, CorpusFormat::Jsonl).empty());
}

TEST_CASE("missing text field reports the line number") {
    TempFile f("corpus_badline_test.jsonl",
               R"({"user_id": "u1", "text": "ok"})"
               "\n"
               R"({"user_id": "u2"})"
               "\n");
    try {
        load_corpus(f.path, CorpusFormat::Jsonl);
        FAIL("expected an error");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    }
}

TEST_CASE("embedded newlines split into sentences") {
    TempFile f("corpus_newline_test.jsonl",
               R"({"user_id": "u1", "text": "one\ntwo\n\nthree"})"
               "\n");
    const auto users = load_corpus(f.path, CorpusFormat::Jsonl);
    REQUIRE(users.size() == 1);
    REQUIRE(users[0].sentences.size() == 3);
    CHECK(users[0].sentences[2] == "three");
}

TEST_CASE("token cap keeps leading sentences only") {
    // Three sentences of 600 single-byte tokens each under a merge-free BPE
    // tokenizer; cap 1600 admits exactly the first two (1200 tokens, the
    // third would reach 1800).
    const auto tok = TokenizerModel::train_bpe({"filler text"}, 258);
    UserDataset ds;
    ds.user_id = "u";
    const std::string sentence(600, 'a');  // 600 byte tokens, no merges
    ds.sentences = {sentence, sentence, sentence};
    REQUIRE(tok.encode(sentence).size() - 2 == 600);

    const UserDataset capped = cap_user_tokens(ds, tok, 1600);
    CHECK(capped.sentences.size() == 2);

    SUBCASE("cap larger than total keeps everything") {
        CHECK(cap_user_tokens(ds, tok, 5000).sentences.size() == 3);
    }
    SUBCASE("first sentence alone over the cap empties the dataset") {
        CHECK(cap_user_tokens(ds, tok, 100).sentences.empty());
    }
    SUBCASE("capping is idempotent") {
        const UserDataset twice = cap_user_tokens(capped, tok, 1600);
        CHECK(twice.sentences == capped.sentences);
    }
    SUBCASE("cap of zero is rejected") {
        CHECK_THROWS(cap_user_tokens(ds, tok, 0));
    }
}

TEST_CASE("user split is disjoint, covering, and deterministic") {
    std::vector<UserDataset> users;
    for (int i = 0; i < 10; ++i) {
        users.push_back({"user" + std::to_string(i), {"text"}});
    }
    const CorpusSplit split = split_users(users, 0.2, 7);
    CHECK(split.train_users.size() == 8);
    CHECK(split.test_users.size() == 2);

    std::set<std::string> seen;
    for (const auto& u : split.train_users) seen.insert(u.user_id);
    for (const auto& u : split.test_users) {
        CHECK(!seen.count(u.user_id));
        seen.insert(u.user_id);
    }
    CHECK(seen.size() == 10);

    const CorpusSplit again = split_users(users, 0.2, 7);
    REQUIRE(again.test_users.size() == split.test_users.size());
    for (size_t i = 0; i < again.test_users.size(); ++i) {
        CHECK(again.test_users[i].user_id == split.test_users[i].user_id);
    }

    SUBCASE("half of four users") {
        std::vector<UserDataset> four(users.begin(), users.begin() + 4);
        const CorpusSplit s = split_users(four, 0.5, 3);
        CHECK(s.train_users.size() == 2);
        CHECK(s.test_users.size() == 2);
    }
    SUBCASE("fewer than two users is an error") {
        std::vector<UserDataset> one(users.begin(), users.begin() + 1);
        CHECK_THROWS(split_users(one, 0.5, 3));
    }
}

TEST_CASE("word count follows whitespace runs") {
    CHECK(word_count("i would love") == 3);
    CHECK(word_count("") == 0);
    CHECK(word_count("  a  b ") == 2);
    // Concatenation property.
    const std::string s1 = "alpha beta", s2 = "gamma";
    CHECK(word_count(s1 + " " + s2) == word_count(s1) + word_count(s2));
}
