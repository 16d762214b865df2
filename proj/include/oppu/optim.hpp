// Copyright (c) 2026 the oppu authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "oppu/errors.hpp"
#include "oppu/tensor.hpp"

namespace oppu {

// ---------------------------------------------------------------------------
// AdamW over a named parameter subset. Gradients accumulate in double; the
// parameters themselves stay float32 so checkpoints and digests are exact.
// Only names registered here ever get gradient storage; everything else is
// frozen by construction.
// ---------------------------------------------------------------------------
class Optimizer {
public:
    struct Options {
        double lr = 1e-2;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
        double weight_decay = 0.0;  // decoupled
        double clip_norm = 1.0;     // global; <= 0 disables
    };

    struct Slot {
        std::vector<double> grad, m, v;
    };

    explicit Optimizer(Options opt) : opt_(opt) {}

    /// Declare a trainable parameter; returns its gradient sink.
    std::vector<double>* declare(const std::string& name, size_t numel) {
        auto& s = slots_[name];
        s.grad.assign(numel, 0.0);
        s.m.assign(numel, 0.0);
        s.v.assign(numel, 0.0);
        return &s.grad;
    }

    std::vector<double>* sink(const std::string& name) {
        auto it = slots_.find(name);
        return it == slots_.end() ? nullptr : &it->second.grad;
    }

    void zero_grad() {
        for (auto& [name, s] : slots_) std::fill(s.grad.begin(), s.grad.end(), 0.0);
    }

    void scale_grads(double factor) {
        for (auto& [name, s] : slots_)
            for (auto& g : s.grad) g *= factor;
    }

    double grad_norm() const {
        double sq = 0.0;
        for (const auto& [name, s] : slots_)
            for (double g : s.grad) sq += g * g;
        return std::sqrt(sq);
    }

    /// One AdamW step over `params` (must contain every declared name).
    void step(ParamMap& params) {
        ++t_;
        double clip_scale = 1.0;
        if (opt_.clip_norm > 0.0) {
            double n = grad_norm();
            if (n > opt_.clip_norm) clip_scale = opt_.clip_norm / n;
        }
        double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
        double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
        for (auto& [name, s] : slots_) {
            auto it = params.find(name);
            if (it == params.end()) throw StateError("Optimizer::step: unknown parameter " + name);
            Tensor& p = it->second;
            if (p.numel() != s.grad.size()) throw StateError("Optimizer::step: size mismatch for " + name);
            for (size_t i = 0; i < s.grad.size(); ++i) {
                double g = s.grad[i] * clip_scale;
                s.m[i] = opt_.beta1 * s.m[i] + (1.0 - opt_.beta1) * g;
                s.v[i] = opt_.beta2 * s.v[i] + (1.0 - opt_.beta2) * g * g;
                double mhat = s.m[i] / bc1;
                double vhat = s.v[i] / bc2;
                double x = static_cast<double>(p.data[i]);
                x -= opt_.lr * (mhat / (std::sqrt(vhat) + opt_.eps) + opt_.weight_decay * x);
                p.data[i] = static_cast<float>(x);
            }
        }
    }

    int64_t steps_taken() const { return t_; }

private:
    Options opt_;
    int64_t t_ = 0;
    std::map<std::string, Slot> slots_;
};

}  // namespace oppu
