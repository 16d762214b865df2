// Copyright (c) 2026 the oppu authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "oppu/adapters.hpp"
#include "oppu/autodiff.hpp"
#include "oppu/errors.hpp"
#include "oppu/lm_config.hpp"
#include "oppu/optim.hpp"
#include "oppu/tensor.hpp"
#include "oppu/tokenizer.hpp"
#include "oppu/util.hpp"

namespace oppu {

// ---------------------------------------------------------------------------
// BaseModel: the shared frozen decoder-only LM. Pre-norm transformer blocks
// with RMSNorm, GELU feed-forward and untied input/output embeddings.
// ---------------------------------------------------------------------------
struct BaseModel {
    LMConfig config;
    ParamMap params;
    Setting setting_tag = Setting::B;
    std::string weights_digest;

    void refresh_digest() { weights_digest = params_digest(params); }
    std::string compute_digest() const { return params_digest(params); }
    bool digest_valid() const { return weights_digest == compute_digest(); }
    size_t num_params() const { return params_numel(params); }
};

inline BaseModel init_base_model(const LMConfig& cfg) {
    cfg.validate();
    BaseModel m;
    m.config = cfg;
    Rng rng(cfg.seed);
    int64_t d = cfg.embed_dim, f = cfg.ffn_dim(), v = cfg.vocab_size;
    m.params["tok_embed"] = Tensor::gaussian({v, d}, 0.02, rng);
    m.params["pos_embed"] = Tensor::gaussian({cfg.context_length, d}, 0.02, rng);
    for (int i = 0; i < cfg.num_layers; ++i) {
        std::string p = "layers." + std::to_string(i) + ".";
        m.params[p + "attn_norm.g"] = Tensor::ones({1, d});
        m.params[p + "attn.wq"] = Tensor::gaussian({d, d}, 0.02, rng);
        m.params[p + "attn.wk"] = Tensor::gaussian({d, d}, 0.02, rng);
        m.params[p + "attn.wv"] = Tensor::gaussian({d, d}, 0.02, rng);
        m.params[p + "attn.wo"] = Tensor::gaussian({d, d}, 0.02, rng);
        m.params[p + "ffn_norm.g"] = Tensor::ones({1, d});
        m.params[p + "ffn.w1"] = Tensor::gaussian({f, d}, 0.02, rng);
        m.params[p + "ffn.w2"] = Tensor::gaussian({d, f}, 0.02, rng);
    }
    m.params["final_norm.g"] = Tensor::ones({1, d});
    m.params["lm_head"] = Tensor::gaussian({v, d}, 0.02, rng);
    m.refresh_digest();
    return m;
}

/// Looks up gradient sinks by parameter name; returns nullptr for frozen ones.
using SinkFn = std::function<std::vector<double>*(const std::string&)>;

struct ForwardResult {
    ad::NodeId logits = -1;  // [n_virtual + n_real, vocab]
    int n_virtual = 0;
    int n_real = 0;
};

/// Records one forward pass on the tape. `adapter` may be null (plain base).
/// Over-length inputs are truncated from the left, reserving room for any
/// soft-prompt rows.
inline ForwardResult forward_graph(const LMConfig& cfg, const ParamMap& params,
                                   const Adapter* adapter, const TokenSequence& tokens,
                                   ad::Graph& g, const SinkFn& sink_for = {}) {
    int n_virtual = 0;
    if (adapter && adapter->method == AdapterMethod::prompt_tuning) {
        auto it = adapter->parameters.find(kPromptKey);
        if (it == adapter->parameters.end())
            throw StateError("forward: prompt adapter has no embedding array");
        n_virtual = static_cast<int>(it->second.rows());
    }
    size_t budget = static_cast<size_t>(cfg.context_length - n_virtual);
    TokenSequence ids = truncate_left(tokens, budget);
    if (ids.empty()) throw ArgumentError("forward: empty token sequence");
    for (int id : ids)
        if (id < 0 || id >= cfg.vocab_size) throw ArgumentError("forward: token id out of range");

    auto base_leaf = [&](const std::string& name) {
        auto it = params.find(name);
        if (it == params.end()) throw StateError("forward: missing parameter " + name);
        return g.input(it->second, sink_for ? sink_for(name) : nullptr);
    };
    auto adapter_leaf = [&](const std::string& name) {
        auto it = adapter->parameters.find(name);
        if (it == adapter->parameters.end())
            throw StateError("forward: missing adapter parameter " + name);
        return g.input(it->second, sink_for ? sink_for(name) : nullptr);
    };
    auto has_adapter_key = [&](const std::string& name) {
        return adapter && adapter->parameters.count(name) > 0;
    };

    int T = static_cast<int>(ids.size());
    std::vector<int> positions(static_cast<size_t>(T));
    for (int i = 0; i < T; ++i) positions[static_cast<size_t>(i)] = i;

    ad::NodeId x = g.add(g.gather_rows(base_leaf("tok_embed"), ids),
                         g.gather_rows(base_leaf("pos_embed"), positions));
    if (n_virtual > 0) x = g.concat_rows(adapter_leaf(kPromptKey), x);

    // Projection with optional low-rank delta on top of the frozen weight.
    auto project = [&](ad::NodeId h, const std::string& wname, const std::string& lora_prefix) {
        ad::NodeId y = g.matmul_nt(h, base_leaf(wname));
        std::string a_key = lora_prefix + ".lora_a";
        if (!lora_prefix.empty() && has_adapter_key(a_key)) {
            ad::NodeId lo = g.matmul_nt(g.matmul_nt(h, adapter_leaf(a_key)),
                                        adapter_leaf(lora_prefix + ".lora_b"));
            y = g.add(y, g.scale(lo, adapter->lora_scaling()));
        }
        return y;
    };

    for (int layer = 0; layer < cfg.num_layers; ++layer) {
        std::string p = "layers." + std::to_string(layer) + ".";
        ad::NodeId h = g.rmsnorm(x, base_leaf(p + "attn_norm.g"));
        ad::NodeId q = project(h, p + "attn.wq", p + "attn.wq");
        ad::NodeId k = project(h, p + "attn.wk", "");
        ad::NodeId v = project(h, p + "attn.wv", p + "attn.wv");
        if (has_adapter_key(ia3_key(layer, "k"))) k = g.mul_row(k, adapter_leaf(ia3_key(layer, "k")));
        if (has_adapter_key(ia3_key(layer, "v"))) v = g.mul_row(v, adapter_leaf(ia3_key(layer, "v")));
        ad::NodeId att = g.causal_attention(q, k, v, cfg.num_heads, n_virtual);
        x = g.add(x, g.matmul_nt(att, base_leaf(p + "attn.wo")));

        ad::NodeId h2 = g.rmsnorm(x, base_leaf(p + "ffn_norm.g"));
        ad::NodeId f = g.gelu(g.matmul_nt(h2, base_leaf(p + "ffn.w1")));
        if (has_adapter_key(ia3_key(layer, "ffn"))) f = g.mul_row(f, adapter_leaf(ia3_key(layer, "ffn")));
        x = g.add(x, g.matmul_nt(f, base_leaf(p + "ffn.w2")));
    }

    ad::NodeId logits = g.matmul_nt(g.rmsnorm(x, base_leaf("final_norm.g")), base_leaf("lm_head"));
    return ForwardResult{logits, n_virtual, T};
}

/// Plain inference: logits for the real token positions, [T x vocab].
inline DMat forward_logits(const BaseModel& base, const Adapter* adapter,
                           const TokenSequence& tokens) {
    ad::Graph g;
    ForwardResult r = forward_graph(base.config, base.params, adapter, tokens, g);
    const auto& all = g.val(r.logits);
    DMat out(r.n_real, base.config.vocab_size);
    size_t offset = static_cast<size_t>(r.n_virtual) * static_cast<size_t>(base.config.vocab_size);
    std::copy(all.begin() + static_cast<ptrdiff_t>(offset), all.end(), out.v.begin());
    return out;
}

inline std::vector<double> softmax_row(const DMat& logits, int64_t row) {
    std::vector<double> p(static_cast<size_t>(logits.cols));
    double mx = logits.at(row, 0);
    for (int64_t j = 1; j < logits.cols; ++j) mx = std::max(mx, logits.at(row, j));
    double z = 0.0;
    for (int64_t j = 0; j < logits.cols; ++j) {
        p[static_cast<size_t>(j)] = std::exp(logits.at(row, j) - mx);
        z += p[static_cast<size_t>(j)];
    }
    for (auto& v : p) v /= z;
    return p;
}

/// Mean negative log-likelihood over masked positions (standalone version of
/// the tape op, for evaluation and tests).
inline double cross_entropy(const DMat& logits, const TokenSequence& targets,
                            const std::vector<uint8_t>& mask) {
    if (static_cast<int64_t>(targets.size()) != logits.rows ||
        static_cast<int64_t>(mask.size()) != logits.rows)
        throw ArgumentError("cross_entropy: target/mask length mismatch");
    int64_t count = 0;
    double total = 0.0;
    for (int64_t i = 0; i < logits.rows; ++i) {
        if (!mask[static_cast<size_t>(i)]) continue;
        int tgt = targets[static_cast<size_t>(i)];
        if (tgt < 0 || tgt >= logits.cols) throw ArgumentError("cross_entropy: target id out of range");
        double mx = logits.at(i, 0);
        for (int64_t j = 1; j < logits.cols; ++j) mx = std::max(mx, logits.at(i, j));
        double z = 0.0;
        for (int64_t j = 0; j < logits.cols; ++j) z += std::exp(logits.at(i, j) - mx);
        total += mx + std::log(z) - logits.at(i, tgt);
        ++count;
    }
    if (count == 0) throw ArgumentError("cross_entropy: mask selects no positions");
    return total / static_cast<double>(count);
}

/// Greedy decoding: argmax next token (ties to the smallest id), stop at EOS
/// or after max_new_tokens. Deterministic by construction.
inline std::string generate(const BaseModel& base, const Adapter* adapter,
                            const std::string& prompt, int max_new_tokens) {
    if (max_new_tokens < 1) throw ArgumentError("generate: max_new_tokens must be >= 1");
    TokenSequence ids;
    ids.push_back(kBosId);
    TokenSequence prompt_ids = tokenize(prompt);
    ids.insert(ids.end(), prompt_ids.begin(), prompt_ids.end());
    TokenSequence emitted;
    for (int step = 0; step < max_new_tokens; ++step) {
        DMat logits = forward_logits(base, adapter, ids);
        int64_t last = logits.rows - 1;
        int best = 0;
        double best_v = logits.at(last, 0);
        for (int j = 1; j < base.config.vocab_size; ++j) {
            if (logits.at(last, j) > best_v) {
                best_v = logits.at(last, j);
                best = j;
            }
        }
        if (best == kEosId) break;
        emitted.push_back(best);
        ids.push_back(best);
    }
    return detokenize(emitted);
}

// ---------------------------------------------------------------------------
// Pretraining: the only stage where base weights move. Next-token prediction
// over random windows of the corpus byte stream.
// ---------------------------------------------------------------------------
struct PretrainOptions {
    int steps = 500;
    int batch_size = 8;
    int window = 128;
    double lr = 1e-2;
    double weight_decay = 0.0;
};

struct PretrainResult {
    BaseModel model;
    std::vector<double> step_losses;
};

inline PretrainResult pretrain_base(const LMConfig& cfg, const std::string& corpus,
                                    const PretrainOptions& opt = {}) {
    if (corpus.empty()) throw ArgumentError("pretrain_base: corpus is empty");
    if (opt.steps < 0 || opt.batch_size < 1 || opt.window < 2)
        throw ArgumentError("pretrain_base: bad options");

    PretrainResult out;
    out.model = init_base_model(cfg);
    if (opt.steps == 0) return out;

    TokenSequence stream = tokenize(corpus);
    if (stream.size() < 2) throw ArgumentError("pretrain_base: corpus too small");
    size_t window = std::min<size_t>(static_cast<size_t>(opt.window),
                                     std::min<size_t>(stream.size() - 1,
                                                      static_cast<size_t>(cfg.context_length)));

    Optimizer optim({opt.lr, 0.9, 0.999, 1e-8, opt.weight_decay, 1.0});
    for (const auto& [name, t] : out.model.params) optim.declare(name, t.numel());
    SinkFn sinks = [&](const std::string& name) { return optim.sink(name); };

    Rng rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
    for (int step = 0; step < opt.steps; ++step) {
        optim.zero_grad();
        double batch_loss = 0.0;
        for (int b = 0; b < opt.batch_size; ++b) {
            size_t start = rng.index(stream.size() - window);
            TokenSequence ids(stream.begin() + static_cast<ptrdiff_t>(start),
                              stream.begin() + static_cast<ptrdiff_t>(start + window));
            std::vector<int> next(window);
            std::vector<uint8_t> mask(window, 1);
            for (size_t i = 0; i < window; ++i) next[i] = stream[start + i + 1];
            ad::Graph g;
            ForwardResult r = forward_graph(cfg, out.model.params, nullptr, ids, g, sinks);
            ad::NodeId loss = g.cross_entropy(r.logits, next, mask);
            g.backward(loss);
            batch_loss += g.val(loss)[0];
        }
        optim.scale_grads(1.0 / static_cast<double>(opt.batch_size));
        optim.step(out.model.params);
        out.step_losses.push_back(batch_loss / static_cast<double>(opt.batch_size));
    }
    out.model.refresh_digest();
    return out;
}

}  // namespace oppu
