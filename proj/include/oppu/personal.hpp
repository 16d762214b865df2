// Copyright (c) 2026 the oppu authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>

#include "oppu/adapters.hpp"
#include "oppu/errors.hpp"
#include "oppu/model.hpp"

namespace oppu {

// ---------------------------------------------------------------------------
// PersonalModel: frozen base plus one user's adapter. The base is referenced,
// never copied and never mutated; many personal models can share it.
// ---------------------------------------------------------------------------
struct PersonalModel {
    const BaseModel* base = nullptr;
    Adapter adapter;
    bool merged = false;  // set once merge() consumed the adapter
};

inline PersonalModel attach(const BaseModel& base, const LoraConfig& cfg,
                            std::string owner = "") {
    PersonalModel pm;
    pm.base = &base;
    pm.adapter = init_lora_adapter(base.config, cfg, std::move(owner), base.weights_digest);
    return pm;
}

inline PersonalModel attach(const BaseModel& base, const PromptTuningConfig& cfg,
                            std::string owner = "") {
    PersonalModel pm;
    pm.base = &base;
    pm.adapter = init_prompt_adapter(base.config, cfg, std::move(owner), base.weights_digest);
    return pm;
}

inline PersonalModel attach(const BaseModel& base, const Ia3Config& cfg,
                            std::string owner = "") {
    PersonalModel pm;
    pm.base = &base;
    pm.adapter = init_ia3_adapter(base.config, cfg, std::move(owner), base.weights_digest);
    return pm;
}

/// Re-attach a previously trained adapter. The adapter remembers which base
/// it belongs to; attaching it anywhere else is an error.
inline PersonalModel attach(const BaseModel& base, Adapter adapter) {
    if (adapter.base_digest != base.weights_digest)
        throw CompatibilityError("attach: adapter was trained against base " + adapter.base_digest +
                                 ", got " + base.weights_digest);
    PersonalModel pm;
    pm.base = &base;
    pm.adapter = std::move(adapter);
    return pm;
}

/// The base is frozen, so detaching simply hands it back.
inline const BaseModel& detach(const PersonalModel& pm) {
    if (!pm.base) throw StateError("detach: no base attached");
    return *pm.base;
}

inline DMat forward_logits(const PersonalModel& pm, const TokenSequence& tokens) {
    if (!pm.base) throw StateError("forward: no base attached");
    return forward_logits(*pm.base, &pm.adapter, tokens);
}

inline std::string generate(const PersonalModel& pm, const std::string& prompt,
                            int max_new_tokens) {
    if (!pm.base) throw StateError("generate: no base attached");
    return generate(*pm.base, &pm.adapter, prompt, max_new_tokens);
}

/// Fold low-rank factors into the base weights. Only lora merges; the result
/// is a standalone BaseModel whose forward pass matches the adapter forward
/// to within float rounding.
inline BaseModel merge(PersonalModel& pm) {
    if (!pm.base) throw StateError("merge: no base attached");
    if (pm.merged) throw StateError("merge: adapter already merged");
    if (pm.adapter.method != AdapterMethod::lora)
        throw UnsupportedError(std::string("merge: only lora adapters merge, got ") +
                               method_name(pm.adapter.method));

    BaseModel out = *pm.base;
    double alpha = pm.adapter.lora_alpha;
    int rank = pm.adapter.lora_rank;
    for (int layer = 0; layer < out.config.num_layers; ++layer) {
        for (Projection p : {Projection::Wq, Projection::Wv}) {
            std::string ka = lora_key(layer, p, true);
            auto it_a = pm.adapter.parameters.find(ka);
            if (it_a == pm.adapter.parameters.end()) continue;
            const Tensor& A = it_a->second;
            const Tensor& B = pm.adapter.parameters.at(lora_key(layer, p, false));
            std::string wname = "layers." + std::to_string(layer) + ".attn." + projection_name(p);
            Tensor& W = out.params.at(wname);
            DMat eff = lora_effective_weight(W, A, B, alpha, rank);
            for (size_t i = 0; i < W.data.size(); ++i) W.data[i] = static_cast<float>(eff.v[i]);
        }
    }
    out.refresh_digest();
    pm.merged = true;
    return out;
}

}  // namespace oppu
