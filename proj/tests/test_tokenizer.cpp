// Copyright (c) 2026 the oppu authors
// SPDX-License-Identifier: Apache-2.0

#include "catch_amalgamated.hpp"

#include "oppu/tokenizer.hpp"
#include "oppu/util.hpp"

using namespace oppu;

TEST_CASE("tokenize maps bytes to ids") {
    CHECK(tokenize("").empty());
    CHECK(tokenize("ab") == TokenSequence{97, 98});
    CHECK(detokenize({104, 105}) == "hi");
}

TEST_CASE("special tokens sit above the byte range") {
    CHECK(kBosId == 256);
    CHECK(kEosId == 257);
    CHECK(kPadId == 258);
    CHECK(kVocabSize == 259);
    CHECK(detokenize({kBosId, 'x', kEosId}) == "x");
}

TEST_CASE("round trip on random utf-8 strings") {
    Rng rng(2024);
    for (int iter = 0; iter < 1000; ++iter) {
        std::string s;
        size_t n = rng.index(64);
        for (size_t i = 0; i < n; ++i) {
            // random codepoint, encoded as UTF-8
            uint32_t cp = static_cast<uint32_t>(rng.index(0x10FFFF + 1));
            if (cp >= 0xD800 && cp <= 0xDFFF) cp = 0x20;  // skip surrogates
            if (cp < 0x80) {
                s.push_back(static_cast<char>(cp));
            } else if (cp < 0x800) {
                s.push_back(static_cast<char>(0xC0 | (cp >> 6)));
                s.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
            } else if (cp < 0x10000) {
                s.push_back(static_cast<char>(0xE0 | (cp >> 12)));
                s.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
                s.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
            } else {
                s.push_back(static_cast<char>(0xF0 | (cp >> 18)));
                s.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
                s.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
                s.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
            }
        }
        REQUIRE(detokenize(tokenize(s)) == s);
    }
}

TEST_CASE("left truncation keeps the tail") {
    TokenSequence ids{1, 2, 3, 4, 5};
    CHECK(truncate_left(ids, 3) == TokenSequence{3, 4, 5});
    CHECK(truncate_left(ids, 5) == ids);
    CHECK(truncate_left(ids, 9) == ids);
}
