// Copyright (c) 2026 the oppu authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "oppu/errors.hpp"

namespace oppu {

// Byte-level vocabulary: ids 0..255 are raw bytes, specials sit above.
inline constexpr int kByteVocab = 256;
inline constexpr int kBosId = 256;
inline constexpr int kEosId = 257;
inline constexpr int kPadId = 258;
inline constexpr int kVocabSize = 259;

using TokenSequence = std::vector<int>;

/// Byte-level encoding: exactly one token per input byte, no specials added.
inline TokenSequence tokenize(std::string_view text) {
    TokenSequence ids;
    ids.reserve(text.size());
    for (char c : text) ids.push_back(static_cast<int>(static_cast<unsigned char>(c)));
    return ids;
}

/// Inverse of tokenize. Special tokens are skipped, byte ids map back 1:1.
inline std::string detokenize(const TokenSequence& ids) {
    std::string out;
    out.reserve(ids.size());
    for (int id : ids) {
        if (id < 0 || id >= kVocabSize) throw ArgumentError("detokenize: token id out of range");
        if (id < kByteVocab) out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
    }
    return out;
}

/// Over-length policy: keep the most recent tokens (the query sits at the end
/// of every prompt, so the tail is the part that must survive).
inline TokenSequence truncate_left(TokenSequence ids, size_t limit) {
    if (ids.size() <= limit) return ids;
    return TokenSequence(ids.end() - static_cast<ptrdiff_t>(limit), ids.end());
}

}  // namespace oppu
