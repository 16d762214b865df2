// Copyright (c) 2026 the oppu authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "oppu/errors.hpp"
#include "oppu/lm_config.hpp"
#include "oppu/tensor.hpp"
#include "oppu/util.hpp"

namespace oppu {

enum class AdapterMethod { lora, prompt_tuning, ia3 };

inline const char* method_name(AdapterMethod m) {
    switch (m) {
        case AdapterMethod::lora: return "lora";
        case AdapterMethod::prompt_tuning: return "prompt_tuning";
        case AdapterMethod::ia3: return "ia3";
    }
    return "?";
}

inline AdapterMethod method_from_name(std::string_view s) {
    if (s == "lora") return AdapterMethod::lora;
    if (s == "prompt_tuning" || s == "prompt") return AdapterMethod::prompt_tuning;
    if (s == "ia3") return AdapterMethod::ia3;
    throw ArgumentError("unknown adapter method: " + std::string(s));
}

/// Attention projections that can carry low-rank factors.
enum class Projection { Wq, Wv };

inline const char* projection_name(Projection p) { return p == Projection::Wq ? "wq" : "wv"; }

struct LoraConfig {
    int rank = 8;
    double alpha = 16.0;  // defaults to 2 * rank
    std::vector<Projection> targets = {Projection::Wq, Projection::Wv};
    uint64_t init_seed = 0;

    double scaling() const { return alpha / static_cast<double>(rank); }

    void validate() const {
        if (rank < 1) throw ArgumentError("LoraConfig: rank must be >= 1");
        if (targets.empty()) throw ArgumentError("LoraConfig: target set must be non-empty");
    }
};

struct PromptTuningConfig {
    int num_virtual_tokens = 16;

    void validate() const {
        if (num_virtual_tokens < 1)
            throw ArgumentError("PromptTuningConfig: need at least one virtual token");
    }
};

struct Ia3Config {};

// ---------------------------------------------------------------------------
// Adapter: one user's trainable parameter collection. Parameter names encode
// where each array plugs into the forward pass:
//   layers.{i}.attn.{wq|wv}.lora_{a|b}   low-rank factors
//   prompt.embeddings                    soft-prompt rows
//   layers.{i}.ia3.{k|v|ffn}             activation scaling vectors
// ---------------------------------------------------------------------------
struct Adapter {
    AdapterMethod method = AdapterMethod::lora;
    std::string owner;            // user id, or "base-task" for the shared stage
    ParamMap parameters;
    std::string base_digest;      // digest of the compatible base model
    int64_t trained_steps = 0;
    Setting setting = Setting::B; // which base family it was trained against

    // method hyperparameters (serialized alongside the arrays)
    int lora_rank = 0;
    double lora_alpha = 0.0;
    int num_virtual_tokens = 0;

    double lora_scaling() const {
        if (method != AdapterMethod::lora || lora_rank < 1)
            throw StateError("lora_scaling: not a lora adapter");
        return lora_alpha / static_cast<double>(lora_rank);
    }

    size_t num_params() const { return params_numel(parameters); }
};

inline std::string lora_key(int layer, Projection p, bool is_a) {
    return "layers." + std::to_string(layer) + ".attn." + projection_name(p) +
           (is_a ? ".lora_a" : ".lora_b");
}

inline std::string ia3_key(int layer, const char* which) {
    return "layers." + std::to_string(layer) + ".ia3." + which;
}

inline constexpr const char* kPromptKey = "prompt.embeddings";

// ---------------------------------------------------------------------------
// Identity initialization. A freshly attached adapter of any method leaves
// the forward pass exactly unchanged: lora B factors start at zero, ia3
// vectors start at one, and soft-prompt rows start at zero (zero rows carry
// exactly zero attention mass, see Graph::causal_attention).
// ---------------------------------------------------------------------------
inline Adapter init_lora_adapter(const LMConfig& cfg, const LoraConfig& lc,
                                 std::string owner, std::string base_digest) {
    lc.validate();
    Adapter a;
    a.method = AdapterMethod::lora;
    a.owner = std::move(owner);
    a.base_digest = std::move(base_digest);
    a.lora_rank = lc.rank;
    a.lora_alpha = lc.alpha;
    Rng rng(lc.init_seed ^ 0x5eed5eedull);
    int64_t d = cfg.embed_dim, r = lc.rank;
    for (int layer = 0; layer < cfg.num_layers; ++layer) {
        for (Projection p : lc.targets) {
            a.parameters[lora_key(layer, p, true)] = Tensor::gaussian({r, d}, 0.02, rng);
            a.parameters[lora_key(layer, p, false)] = Tensor::zeros({d, r});
        }
    }
    return a;
}

inline Adapter init_prompt_adapter(const LMConfig& cfg, const PromptTuningConfig& pc,
                                   std::string owner, std::string base_digest) {
    pc.validate();
    Adapter a;
    a.method = AdapterMethod::prompt_tuning;
    a.owner = std::move(owner);
    a.base_digest = std::move(base_digest);
    a.num_virtual_tokens = pc.num_virtual_tokens;
    a.parameters[kPromptKey] = Tensor::zeros({pc.num_virtual_tokens, cfg.embed_dim});
    return a;
}

inline Adapter init_ia3_adapter(const LMConfig& cfg, const Ia3Config&,
                                std::string owner, std::string base_digest) {
    Adapter a;
    a.method = AdapterMethod::ia3;
    a.owner = std::move(owner);
    a.base_digest = std::move(base_digest);
    for (int layer = 0; layer < cfg.num_layers; ++layer) {
        a.parameters[ia3_key(layer, "k")] = Tensor::ones({1, cfg.embed_dim});
        a.parameters[ia3_key(layer, "v")] = Tensor::ones({1, cfg.embed_dim});
        a.parameters[ia3_key(layer, "ffn")] = Tensor::ones({1, cfg.ffn_dim()});
    }
    return a;
}

/// Effective weight after folding low-rank factors: W + (alpha/rank) * B * A.
/// W is [d_out x d_in], A is [rank x d_in], B is [d_out x rank].
inline DMat lora_effective_weight(const Tensor& W, const Tensor& A, const Tensor& B,
                                  double alpha, int rank) {
    if (rank < 1) throw ArgumentError("lora_effective_weight: rank must be >= 1");
    if (A.rows() != rank || B.cols() != rank || W.rows() != B.rows() || W.cols() != A.cols())
        throw ArgumentError("lora_effective_weight: shape mismatch");
    int64_t dout = W.rows(), din = W.cols();
    double s = alpha / static_cast<double>(rank);
    DMat out(dout, din);
    for (int64_t i = 0; i < dout; ++i)
        for (int64_t j = 0; j < din; ++j) {
            double acc = 0.0;
            for (int64_t t = 0; t < rank; ++t)
                acc += static_cast<double>(B.at(i, t)) * static_cast<double>(A.at(t, j));
            out.at(i, j) = static_cast<double>(W.at(i, j)) + s * acc;
        }
    return out;
}

// ---------------------------------------------------------------------------
// Cosine similarity between two adapters: flatten each shared named array,
// take the cosine, average over shared keys. Bitwise-identical arrays score
// exactly 1; a zero-norm array contributes 0 for its key.
// ---------------------------------------------------------------------------
inline double adapter_similarity(const Adapter& a, const Adapter& b) {
    if (a.method != b.method) throw ArgumentError("adapter_similarity: method mismatch");
    double sum = 0.0;
    int count = 0;
    for (const auto& [key, ta] : a.parameters) {
        auto it = b.parameters.find(key);
        if (it == b.parameters.end()) continue;
        const Tensor& tb = it->second;
        if (ta.numel() != tb.numel()) throw ArgumentError("adapter_similarity: shape mismatch for " + key);
        ++count;
        if (ta.data == tb.data) {
            bool nonzero = false;
            for (float v : ta.data)
                if (v != 0.0f) { nonzero = true; break; }
            sum += nonzero ? 1.0 : 0.0;
            continue;
        }
        double dot = 0.0, na = 0.0, nb = 0.0;
        for (size_t i = 0; i < ta.numel(); ++i) {
            double x = ta.data[i], y = tb.data[i];
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
        if (na == 0.0 || nb == 0.0) continue;  // contributes 0
        sum += std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
    }
    if (count == 0) throw ArgumentError("adapter_similarity: no shared parameter keys");
    return sum / static_cast<double>(count);
}

/// Fraction of trainable parameters relative to the frozen base.
inline double trainable_fraction(const Adapter& a, size_t base_param_count) {
    if (base_param_count == 0) throw ArgumentError("trainable_fraction: empty base");
    return static_cast<double>(a.num_params()) / static_cast<double>(base_param_count);
}

}  // namespace oppu
