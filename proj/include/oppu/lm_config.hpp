// Copyright (c) 2026 the oppu authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>

#include "oppu/errors.hpp"
#include "oppu/tokenizer.hpp"

namespace oppu {

/// Which augmentation the base model was task-adapted for.
enum class Setting { B, R, P };

inline const char* setting_name(Setting s) {
    switch (s) {
        case Setting::B: return "B";
        case Setting::R: return "R";
        case Setting::P: return "P";
    }
    return "?";
}

struct LMConfig {
    int vocab_size = kVocabSize;
    int context_length = 512;
    int embed_dim = 128;
    int num_layers = 2;
    int num_heads = 4;
    uint64_t seed = 0;

    int head_dim() const { return embed_dim / num_heads; }
    int ffn_dim() const { return 4 * embed_dim; }

    void validate() const {
        if (vocab_size < kVocabSize) throw ArgumentError("LMConfig: vocab_size must cover bytes plus specials");
        if (context_length < 8) throw ArgumentError("LMConfig: context_length must be >= 8");
        if (embed_dim < 1 || num_layers < 1 || num_heads < 1)
            throw ArgumentError("LMConfig: dimensions must be >= 1");
        if (embed_dim % num_heads != 0)
            throw ArgumentError("LMConfig: embed_dim must be divisible by num_heads");
    }
};

}  // namespace oppu
