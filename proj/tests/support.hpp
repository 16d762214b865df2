// Copyright (c) 2026 the oppu authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <unistd.h>

#include "oppu/oppu.hpp"

namespace testsupport {

/// Tiny config for gradient checks: under 5000 parameters total.
inline oppu::LMConfig tiny_config(uint64_t seed = 3) {
    oppu::LMConfig cfg;
    cfg.context_length = 32;
    cfg.embed_dim = 8;
    cfg.num_layers = 1;
    cfg.num_heads = 2;
    cfg.seed = seed;
    return cfg;
}

/// Small-but-capable config for behavioral tests.
inline oppu::LMConfig small_config(uint64_t seed = 5) {
    oppu::LMConfig cfg;
    cfg.context_length = 160;
    cfg.embed_dim = 32;
    cfg.num_layers = 2;
    cfg.num_heads = 4;
    cfg.seed = seed;
    return cfg;
}

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst_param;
    size_t checked = 0;
};

/// Central finite differences against the analytic gradients, element by
/// element. `loss_fn` must re-evaluate the loss from the current (mutated)
/// parameter values; `grads` maps parameter name to the analytic gradient.
inline GradCheckReport finite_difference_check(
    oppu::ParamMap& params, const std::map<std::string, std::vector<double>>& grads,
    const std::function<double()>& loss_fn, double h = 1e-3) {
    GradCheckReport report;
    for (auto& [name, tensor] : params) {
        auto git = grads.find(name);
        if (git == grads.end()) continue;
        const auto& g = git->second;
        for (size_t i = 0; i < tensor.numel(); ++i) {
            float original = tensor.data[i];
            float plus = static_cast<float>(static_cast<double>(original) + h);
            float minus = static_cast<float>(static_cast<double>(original) - h);
            tensor.data[i] = plus;
            double f_plus = loss_fn();
            tensor.data[i] = minus;
            double f_minus = loss_fn();
            tensor.data[i] = original;
            double step = static_cast<double>(plus) - static_cast<double>(minus);
            double numeric = (f_plus - f_minus) / step;
            double analytic = g[i];
            double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-6});
            double rel = std::abs(numeric - analytic) / denom;
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst_param = name + "[" + std::to_string(i) + "]";
            }
            ++report.checked;
        }
    }
    return report;
}

/// Analytic adapter gradients for one encoded example.
inline std::map<std::string, std::vector<double>> adapter_gradients(
    const oppu::BaseModel& base, oppu::Adapter& adapter, const oppu::EncodedExample& e) {
    std::map<std::string, std::vector<double>> grads;
    for (const auto& [name, t] : adapter.parameters) grads[name] = {};
    oppu::SinkFn sinks = [&](const std::string& name) -> std::vector<double>* {
        auto it = grads.find(name);
        return it == grads.end() ? nullptr : &it->second;
    };
    int n_virtual = adapter.method == oppu::AdapterMethod::prompt_tuning
                        ? adapter.num_virtual_tokens
                        : 0;
    oppu::ad::Graph g;
    auto r = oppu::forward_graph(base.config, base.params, &adapter, e.ids, g, sinks);
    std::vector<int> next(static_cast<size_t>(n_virtual), oppu::kPadId);
    next.insert(next.end(), e.next.begin(), e.next.end());
    std::vector<uint8_t> mask(static_cast<size_t>(n_virtual), 0);
    mask.insert(mask.end(), e.mask.begin(), e.mask.end());
    auto loss = g.cross_entropy(r.logits, next, mask);
    g.backward(loss);
    return grads;
}

/// Loss of one encoded example under (base, adapter) without gradients.
inline double example_loss(const oppu::BaseModel& base, const oppu::Adapter* adapter,
                           const oppu::EncodedExample& e) {
    int n_virtual = adapter && adapter->method == oppu::AdapterMethod::prompt_tuning
                        ? adapter->num_virtual_tokens
                        : 0;
    oppu::ad::Graph g;
    auto r = oppu::forward_graph(base.config, base.params, adapter, e.ids, g);
    oppu::DMat logits(r.n_virtual + r.n_real, base.config.vocab_size);
    logits.v = g.val(r.logits);
    std::vector<int> next(static_cast<size_t>(n_virtual), oppu::kPadId);
    next.insert(next.end(), e.next.begin(), e.next.end());
    std::vector<uint8_t> mask(static_cast<size_t>(n_virtual), 0);
    mask.insert(mask.end(), e.mask.begin(), e.mask.end());
    return oppu::cross_entropy(logits, next, mask);
}

inline double max_abs_logit_diff(const oppu::DMat& a, const oppu::DMat& b) {
    double worst = 0.0;
    for (size_t i = 0; i < a.v.size(); ++i) worst = std::max(worst, std::abs(a.v[i] - b.v[i]));
    return worst;
}

/// Scratch directory unique to one test, cleaned up on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static int counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                ("oppu-test-" + tag + "-" + std::to_string(::getpid()) + "-" +
                 std::to_string(counter++));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    std::string str() const { return path_.string(); }
    std::filesystem::path path() const { return path_; }

private:
    std::filesystem::path path_;
};

}  // namespace testsupport
