// Copyright (c) 2026 the oppu authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "oppu/errors.hpp"
#include "oppu/util.hpp"

namespace oppu {

// ---------------------------------------------------------------------------
// Tensor: a named-array value as stored in models, adapters and checkpoints.
// Storage is 32-bit IEEE-754 row-major, which makes serialization bit-exact
// and digests well-defined. All arithmetic widens to double at the point of
// use (see autodiff.hpp).
// ---------------------------------------------------------------------------
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<float> data;

    Tensor() = default;
    Tensor(std::vector<int64_t> s) : shape(std::move(s)) { data.assign(numel_of(shape), 0.0f); }

    static size_t numel_of(const std::vector<int64_t>& s) {
        size_t n = 1;
        for (auto d : s) {
            if (d < 0) throw ArgumentError("Tensor: negative dimension");
            n *= static_cast<size_t>(d);
        }
        return s.empty() ? 0 : n;
    }

    size_t numel() const { return data.size(); }
    int64_t rows() const { return shape.empty() ? 0 : shape[0]; }
    int64_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

    float& at(int64_t r, int64_t c) { return data[static_cast<size_t>(r * cols() + c)]; }
    float at(int64_t r, int64_t c) const { return data[static_cast<size_t>(r * cols() + c)]; }

    static Tensor zeros(std::vector<int64_t> s) { return Tensor(std::move(s)); }

    static Tensor ones(std::vector<int64_t> s) {
        Tensor t(std::move(s));
        for (auto& v : t.data) v = 1.0f;
        return t;
    }

    static Tensor gaussian(std::vector<int64_t> s, double sigma, Rng& rng) {
        Tensor t(std::move(s));
        for (auto& v : t.data) v = static_cast<float>(rng.normal() * sigma);
        return t;
    }

    bool all_finite() const {
        for (float v : data) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }
};

/// Named parameter collection. std::map keeps iteration order deterministic,
/// which the digest and serialization rely on.
using ParamMap = std::map<std::string, Tensor>;

/// FNV-1a over names, shapes and raw float bytes, in map order.
inline std::string params_digest(const ParamMap& params) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& [name, t] : params) {
        h = fnv1a64_str(name, h);
        h = fnv1a64(t.shape.data(), t.shape.size() * sizeof(int64_t), h);
        h = fnv1a64(t.data.data(), t.data.size() * sizeof(float), h);
    }
    return hex64(h);
}

inline size_t params_numel(const ParamMap& params) {
    size_t n = 0;
    for (const auto& [name, t] : params) n += t.numel();
    return n;
}

inline bool params_all_finite(const ParamMap& params) {
    for (const auto& [name, t] : params) {
        if (!t.all_finite()) return false;
    }
    return true;
}

// ---------------------------------------------------------------------------
// DMat: a plain double matrix for results that must not lose precision
// (logits, effective weights, metric intermediates).
// ---------------------------------------------------------------------------
struct DMat {
    int64_t rows = 0, cols = 0;
    std::vector<double> v;

    DMat() = default;
    DMat(int64_t r, int64_t c) : rows(r), cols(c), v(static_cast<size_t>(r * c), 0.0) {}

    double& at(int64_t r, int64_t c) { return v[static_cast<size_t>(r * cols + c)]; }
    double at(int64_t r, int64_t c) const { return v[static_cast<size_t>(r * cols + c)]; }
};

}  // namespace oppu
