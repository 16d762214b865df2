// Copyright (c) 2026 the oppu authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "oppu/errors.hpp"
#include "oppu/tensor.hpp"

namespace oppu::ad {

using NodeId = int32_t;

// ---------------------------------------------------------------------------
// Reverse-mode tape over double matrices.
//
// A Graph records one forward pass; backward() walks the tape in reverse
// construction order (which is a valid topological order) and accumulates
// gradients. Parameter leaves widen float storage to double on entry and can
// be bound to an external gradient sink; leaves without a sink are frozen and
// never receive gradient storage, and ops skip the corresponding work.
// ---------------------------------------------------------------------------
class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;
    Graph(Graph&&) = delete;
    Graph& operator=(Graph&&) = delete;

    struct Node {
        int64_t rows = 0, cols = 0;
        std::vector<double> val;
        std::vector<double> grad;  // sized only when needs_grad
        bool needs_grad = false;
        std::function<void()> back;  // empty for constant leaves
    };

    bool empty() const { return nodes_.empty(); }
    const Node& node(NodeId id) const { return nodes_[static_cast<size_t>(id)]; }
    const std::vector<double>& val(NodeId id) const { return nodes_[static_cast<size_t>(id)].val; }
    const std::vector<double>& grad(NodeId id) const {
        const auto& n = nodes_[static_cast<size_t>(id)];
        if (!n.needs_grad) throw StateError("Graph::grad: node does not track gradients");
        return n.grad;
    }

    /// Parameter leaf (widened from float). A non-null sink marks the leaf as
    /// trainable; node gradients are added into *sink by backward().
    NodeId input(const Tensor& t, std::vector<double>* sink = nullptr) {
        NodeId id = make(t.rows(), t.cols(), sink != nullptr);
        auto& n = nodes_[static_cast<size_t>(id)];
        n.val.resize(t.numel());
        for (size_t i = 0; i < t.numel(); ++i) n.val[i] = static_cast<double>(t.data[i]);
        if (sink) {
            n.back = [this, id, sink] {
                auto& self = nodes_[static_cast<size_t>(id)];
                if (sink->size() != self.grad.size()) sink->assign(self.grad.size(), 0.0);
                for (size_t i = 0; i < self.grad.size(); ++i) (*sink)[i] += self.grad[i];
            };
        }
        return id;
    }

    /// Double-precision leaf (used by tests and loss plumbing).
    NodeId input(const DMat& m, std::vector<double>* sink = nullptr) {
        NodeId id = make(m.rows, m.cols, sink != nullptr);
        auto& n = nodes_[static_cast<size_t>(id)];
        n.val = m.v;
        if (sink) {
            n.back = [this, id, sink] {
                auto& self = nodes_[static_cast<size_t>(id)];
                if (sink->size() != self.grad.size()) sink->assign(self.grad.size(), 0.0);
                for (size_t i = 0; i < self.grad.size(); ++i) (*sink)[i] += self.grad[i];
            };
        }
        return id;
    }

    /// C[m x n] = A[m x k] * B[n x k]^T  (both operands row-major; every dot
    /// product runs over contiguous memory).
    NodeId matmul_nt(NodeId a, NodeId b) {
        const auto& na = node_ref(a);
        const auto& nb = node_ref(b);
        if (na.cols != nb.cols) throw ArgumentError("matmul_nt: inner dimensions differ");
        int64_t m = na.rows, k = na.cols, n = nb.rows;
        NodeId id = make(m, n, na.needs_grad || nb.needs_grad);
        auto& out = nodes_[static_cast<size_t>(id)];
        out.val.assign(static_cast<size_t>(m * n), 0.0);
        {
            const double* av = node_ref(a).val.data();
            const double* bv = node_ref(b).val.data();
            double* ov = out.val.data();
            for (int64_t i = 0; i < m; ++i) {
                const double* ar = av + i * k;
                for (int64_t j = 0; j < n; ++j) {
                    const double* br = bv + j * k;
                    double acc = 0.0;
                    for (int64_t t = 0; t < k; ++t) acc += ar[t] * br[t];
                    ov[i * n + j] = acc;
                }
            }
        }
        if (out.needs_grad) {
            out.back = [this, id, a, b, m, n, k] {
                auto& self = nodes_[static_cast<size_t>(id)];
                auto& an = nodes_[static_cast<size_t>(a)];
                auto& bn = nodes_[static_cast<size_t>(b)];
                const double* dC = self.grad.data();
                if (an.needs_grad) {
                    // dA += dC * B
                    double* dA = an.grad.data();
                    const double* bv = bn.val.data();
                    for (int64_t i = 0; i < m; ++i) {
                        for (int64_t j = 0; j < n; ++j) {
                            double g = dC[i * n + j];
                            if (g == 0.0) continue;
                            const double* br = bv + j * k;
                            double* dr = dA + i * k;
                            for (int64_t t = 0; t < k; ++t) dr[t] += g * br[t];
                        }
                    }
                }
                if (bn.needs_grad) {
                    // dB += dC^T * A
                    double* dB = bn.grad.data();
                    const double* av = an.val.data();
                    for (int64_t i = 0; i < m; ++i) {
                        const double* ar = av + i * k;
                        for (int64_t j = 0; j < n; ++j) {
                            double g = dC[i * n + j];
                            if (g == 0.0) continue;
                            double* dr = dB + j * k;
                            for (int64_t t = 0; t < k; ++t) dr[t] += g * ar[t];
                        }
                    }
                }
            };
        }
        return id;
    }

    NodeId add(NodeId a, NodeId b) {
        const auto& na = node_ref(a);
        const auto& nb = node_ref(b);
        if (na.rows != nb.rows || na.cols != nb.cols) throw ArgumentError("add: shape mismatch");
        NodeId id = make(na.rows, na.cols, na.needs_grad || nb.needs_grad);
        auto& out = nodes_[static_cast<size_t>(id)];
        out.val.resize(na.val.size());
        for (size_t i = 0; i < out.val.size(); ++i) out.val[i] = node_ref(a).val[i] + node_ref(b).val[i];
        if (out.needs_grad) {
            out.back = [this, id, a, b] {
                auto& self = nodes_[static_cast<size_t>(id)];
                auto& an = nodes_[static_cast<size_t>(a)];
                auto& bn = nodes_[static_cast<size_t>(b)];
                if (an.needs_grad)
                    for (size_t i = 0; i < self.grad.size(); ++i) an.grad[i] += self.grad[i];
                if (bn.needs_grad)
                    for (size_t i = 0; i < self.grad.size(); ++i) bn.grad[i] += self.grad[i];
            };
        }
        return id;
    }

    NodeId scale(NodeId a, double s) {
        const auto& na = node_ref(a);
        NodeId id = make(na.rows, na.cols, na.needs_grad);
        auto& out = nodes_[static_cast<size_t>(id)];
        out.val.resize(na.val.size());
        for (size_t i = 0; i < out.val.size(); ++i) out.val[i] = node_ref(a).val[i] * s;
        if (out.needs_grad) {
            out.back = [this, id, a, s] {
                auto& self = nodes_[static_cast<size_t>(id)];
                auto& an = nodes_[static_cast<size_t>(a)];
                for (size_t i = 0; i < self.grad.size(); ++i) an.grad[i] += self.grad[i] * s;
            };
        }
        return id;
    }

    /// Row-broadcast elementwise product: C[i,j] = A[i,j] * v[0,j].
    NodeId mul_row(NodeId a, NodeId v) {
        const auto& na = node_ref(a);
        const auto& nv = node_ref(v);
        if (nv.rows != 1 || nv.cols != na.cols) throw ArgumentError("mul_row: vector shape mismatch");
        NodeId id = make(na.rows, na.cols, na.needs_grad || nv.needs_grad);
        auto& out = nodes_[static_cast<size_t>(id)];
        out.val.resize(na.val.size());
        {
            const auto& av = node_ref(a).val;
            const auto& vv = node_ref(v).val;
            int64_t n = na.cols;
            for (int64_t i = 0; i < na.rows; ++i)
                for (int64_t j = 0; j < n; ++j)
                    out.val[static_cast<size_t>(i * n + j)] =
                        av[static_cast<size_t>(i * n + j)] * vv[static_cast<size_t>(j)];
        }
        if (out.needs_grad) {
            out.back = [this, id, a, v] {
                auto& self = nodes_[static_cast<size_t>(id)];
                auto& an = nodes_[static_cast<size_t>(a)];
                auto& vn = nodes_[static_cast<size_t>(v)];
                int64_t n = an.cols;
                for (int64_t i = 0; i < an.rows; ++i) {
                    for (int64_t j = 0; j < n; ++j) {
                        double g = self.grad[static_cast<size_t>(i * n + j)];
                        if (an.needs_grad) an.grad[static_cast<size_t>(i * n + j)] += g * vn.val[static_cast<size_t>(j)];
                        if (vn.needs_grad) vn.grad[static_cast<size_t>(j)] += g * an.val[static_cast<size_t>(i * n + j)];
                    }
                }
            };
        }
        return id;
    }

    /// Vertical concatenation [A; B].
    NodeId concat_rows(NodeId a, NodeId b) {
        const auto& na = node_ref(a);
        const auto& nb = node_ref(b);
        if (na.cols != nb.cols) throw ArgumentError("concat_rows: column mismatch");
        NodeId id = make(na.rows + nb.rows, na.cols, na.needs_grad || nb.needs_grad);
        auto& out = nodes_[static_cast<size_t>(id)];
        out.val.reserve(na.val.size() + nb.val.size());
        out.val = node_ref(a).val;
        out.val.insert(out.val.end(), node_ref(b).val.begin(), node_ref(b).val.end());
        if (out.needs_grad) {
            out.back = [this, id, a, b] {
                auto& self = nodes_[static_cast<size_t>(id)];
                auto& an = nodes_[static_cast<size_t>(a)];
                auto& bn = nodes_[static_cast<size_t>(b)];
                size_t split = an.val.size();
                if (an.needs_grad)
                    for (size_t i = 0; i < split; ++i) an.grad[i] += self.grad[i];
                if (bn.needs_grad)
                    for (size_t i = 0; i < bn.val.size(); ++i) bn.grad[i] += self.grad[split + i];
            };
        }
        return id;
    }

    /// Embedding-style row gather; duplicate ids accumulate on backward.
    NodeId gather_rows(NodeId table, std::vector<int> ids) {
        const auto& nt = node_ref(table);
        for (int r : ids)
            if (r < 0 || r >= nt.rows) throw ArgumentError("gather_rows: row id out of range");
        NodeId id = make(static_cast<int64_t>(ids.size()), nt.cols, nt.needs_grad);
        auto& out = nodes_[static_cast<size_t>(id)];
        out.val.resize(ids.size() * static_cast<size_t>(nt.cols));
        {
            const auto& tv = node_ref(table).val;
            int64_t c = nt.cols;
            for (size_t i = 0; i < ids.size(); ++i)
                for (int64_t j = 0; j < c; ++j)
                    out.val[i * static_cast<size_t>(c) + static_cast<size_t>(j)] =
                        tv[static_cast<size_t>(ids[i]) * static_cast<size_t>(c) + static_cast<size_t>(j)];
        }
        if (out.needs_grad) {
            auto idx = std::make_shared<std::vector<int>>(std::move(ids));
            out.back = [this, id, table, idx] {
                auto& self = nodes_[static_cast<size_t>(id)];
                auto& tn = nodes_[static_cast<size_t>(table)];
                int64_t c = tn.cols;
                for (size_t i = 0; i < idx->size(); ++i)
                    for (int64_t j = 0; j < c; ++j)
                        tn.grad[static_cast<size_t>((*idx)[i]) * static_cast<size_t>(c) + static_cast<size_t>(j)] +=
                            self.grad[i * static_cast<size_t>(c) + static_cast<size_t>(j)];
            };
        }
        return id;
    }

    /// RMS normalization with learned gain: y[i,j] = x[i,j] * g[j] / rms(x_i).
    NodeId rmsnorm(NodeId x, NodeId gain, double eps = 1e-5) {
        const auto& nx = node_ref(x);
        const auto& ng = node_ref(gain);
        if (ng.rows != 1 || ng.cols != nx.cols) throw ArgumentError("rmsnorm: gain shape mismatch");
        int64_t m = nx.rows, n = nx.cols;
        NodeId id = make(m, n, nx.needs_grad || ng.needs_grad);
        auto& out = nodes_[static_cast<size_t>(id)];
        out.val.resize(nx.val.size());
        auto inv = std::make_shared<std::vector<double>>(static_cast<size_t>(m), 0.0);
        {
            const auto& xv = node_ref(x).val;
            const auto& gv = node_ref(gain).val;
            for (int64_t i = 0; i < m; ++i) {
                double ms = 0.0;
                for (int64_t j = 0; j < n; ++j) {
                    double v = xv[static_cast<size_t>(i * n + j)];
                    ms += v * v;
                }
                double r = 1.0 / std::sqrt(ms / static_cast<double>(n) + eps);
                (*inv)[static_cast<size_t>(i)] = r;
                for (int64_t j = 0; j < n; ++j)
                    out.val[static_cast<size_t>(i * n + j)] =
                        xv[static_cast<size_t>(i * n + j)] * r * gv[static_cast<size_t>(j)];
            }
        }
        if (out.needs_grad) {
            out.back = [this, id, x, gain, inv, m, n] {
                auto& self = nodes_[static_cast<size_t>(id)];
                auto& xn = nodes_[static_cast<size_t>(x)];
                auto& gn = nodes_[static_cast<size_t>(gain)];
                for (int64_t i = 0; i < m; ++i) {
                    double r = (*inv)[static_cast<size_t>(i)];
                    double s = 0.0;
                    for (int64_t j = 0; j < n; ++j) {
                        size_t o = static_cast<size_t>(i * n + j);
                        s += self.grad[o] * gn.val[static_cast<size_t>(j)] * xn.val[o];
                    }
                    for (int64_t j = 0; j < n; ++j) {
                        size_t o = static_cast<size_t>(i * n + j);
                        if (xn.needs_grad)
                            xn.grad[o] += self.grad[o] * gn.val[static_cast<size_t>(j)] * r -
                                          xn.val[o] * r * r * r * s / static_cast<double>(n);
                        if (gn.needs_grad)
                            gn.grad[static_cast<size_t>(j)] += self.grad[o] * xn.val[o] * r;
                    }
                }
            };
        }
        return id;
    }

    /// Exact GELU: y = x * Phi(x).
    NodeId gelu(NodeId x) {
        const auto& nx = node_ref(x);
        NodeId id = make(nx.rows, nx.cols, nx.needs_grad);
        auto& out = nodes_[static_cast<size_t>(id)];
        out.val.resize(nx.val.size());
        for (size_t i = 0; i < out.val.size(); ++i) {
            double v = node_ref(x).val[i];
            out.val[i] = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
        }
        if (out.needs_grad) {
            out.back = [this, id, x] {
                auto& self = nodes_[static_cast<size_t>(id)];
                auto& xn = nodes_[static_cast<size_t>(x)];
                for (size_t i = 0; i < self.grad.size(); ++i) {
                    double v = xn.val[i];
                    double phi_cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
                    double phi_pdf = std::exp(-0.5 * v * v) * kInvSqrt2Pi;
                    xn.grad[i] += self.grad[i] * (phi_cdf + v * phi_pdf);
                }
            };
        }
        return id;
    }

    /// Multi-head causal self-attention over a sequence whose first n_virtual
    /// rows are soft-prompt positions.
    ///
    /// Real query rows use standard exp masses over real keys; virtual keys
    /// contribute expm1(score) mass instead, so an all-zero soft prompt adds
    /// exactly zero mass and the op reduces bit-for-bit to plain causal
    /// attention. Virtual query rows attend among themselves with a standard
    /// softmax. Scores are clamped at +/-60 for overflow safety; gradients
    /// treat the clamp as identity (the saturation region is far outside
    /// normal operation). The denominator for real rows is floored at
    /// 0.1 * (real mass) so negative virtual mass cannot flip its sign; the
    /// floor's piecewise gradient is exact.
    NodeId causal_attention(NodeId q, NodeId k, NodeId v, int heads, int n_virtual) {
        const auto& nq = node_ref(q);
        const auto& nk = node_ref(k);
        const auto& nv = node_ref(v);
        if (nq.rows != nk.rows || nq.rows != nv.rows || nq.cols != nk.cols || nq.cols != nv.cols)
            throw ArgumentError("causal_attention: q/k/v shape mismatch");
        if (heads < 1 || nq.cols % heads != 0) throw ArgumentError("causal_attention: bad head count");
        if (n_virtual < 0 || n_virtual > nq.rows) throw ArgumentError("causal_attention: bad virtual count");

        int64_t T = nq.rows, d = nq.cols;
        int64_t dh = d / heads;
        double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
        int64_t V = n_virtual;

        NodeId id = make(T, d, nq.needs_grad || nk.needs_grad || nv.needs_grad);
        auto& out = nodes_[static_cast<size_t>(id)];
        out.val.assign(static_cast<size_t>(T * d), 0.0);

        struct Aux {
            std::vector<double> w;        // heads * T * T normalized masses
            std::vector<double> zc;       // heads * T effective denominators
            std::vector<double> zreal;    // heads * T real-key mass sums
            std::vector<uint8_t> floored; // heads * T denominator-floor flags
        };
        auto aux = std::make_shared<Aux>();
        aux->w.assign(static_cast<size_t>(heads) * static_cast<size_t>(T * T), 0.0);
        aux->zc.assign(static_cast<size_t>(heads * T), 0.0);
        aux->zreal.assign(static_cast<size_t>(heads * T), 0.0);
        aux->floored.assign(static_cast<size_t>(heads * T), 0);

        const double* qv = node_ref(q).val.data();
        const double* kv = node_ref(k).val.data();
        const double* vv = node_ref(v).val.data();
        double* ov = out.val.data();

        std::vector<double> srow(static_cast<size_t>(T));
        for (int h = 0; h < heads; ++h) {
            int64_t off = static_cast<int64_t>(h) * dh;
            double* wh = aux->w.data() + static_cast<size_t>(h) * static_cast<size_t>(T * T);
            for (int64_t i = 0; i < T; ++i) {
                int64_t hi = i;  // causal bound: keys 0..i
                for (int64_t j = 0; j <= hi; ++j) {
                    double s = 0.0;
                    const double* qr = qv + i * d + off;
                    const double* kr = kv + j * d + off;
                    for (int64_t t = 0; t < dh; ++t) s += qr[t] * kr[t];
                    s *= inv_sqrt_dh;
                    srow[static_cast<size_t>(j)] = std::clamp(s, -kScoreClamp, kScoreClamp);
                }
                double zc = 0.0;
                if (i < V) {
                    // virtual query: standard softmax over virtual keys <= i
                    double mx = srow[0];
                    for (int64_t j = 1; j <= hi; ++j) mx = std::max(mx, srow[static_cast<size_t>(j)]);
                    double z = 0.0;
                    for (int64_t j = 0; j <= hi; ++j) {
                        double u = std::exp(srow[static_cast<size_t>(j)] - mx);
                        wh[i * T + j] = u;
                        z += u;
                    }
                    for (int64_t j = 0; j <= hi; ++j) wh[i * T + j] /= z;
                    zc = 1.0;  // weights already normalized
                    aux->zreal[static_cast<size_t>(h * T + i)] = z;
                } else {
                    double zreal = 0.0, zvirt = 0.0;
                    for (int64_t j = 0; j < V; ++j) {
                        double u = std::expm1(srow[static_cast<size_t>(j)]);
                        wh[i * T + j] = u;
                        zvirt += u;
                    }
                    for (int64_t j = V; j <= hi; ++j) {
                        double u = std::exp(srow[static_cast<size_t>(j)]);
                        wh[i * T + j] = u;
                        zreal += u;
                    }
                    double z = zreal + zvirt;
                    double floor = 0.1 * zreal;
                    bool floored = z < floor;
                    zc = floored ? floor : z;
                    aux->floored[static_cast<size_t>(h * T + i)] = floored ? 1 : 0;
                    aux->zreal[static_cast<size_t>(h * T + i)] = zreal;
                    for (int64_t j = 0; j <= hi; ++j) wh[i * T + j] /= zc;
                }
                aux->zc[static_cast<size_t>(h * T + i)] = zc;
                for (int64_t j = 0; j <= hi; ++j) {
                    double w = wh[i * T + j];
                    if (w == 0.0) continue;
                    const double* vr = vv + j * d + off;
                    double* orow = ov + i * d + off;
                    for (int64_t t = 0; t < dh; ++t) orow[t] += w * vr[t];
                }
            }
        }

        if (out.needs_grad) {
            out.back = [this, id, q, k, v, heads, V, T, d, dh, inv_sqrt_dh, aux] {
                auto& self = nodes_[static_cast<size_t>(id)];
                auto& qn = nodes_[static_cast<size_t>(q)];
                auto& kn = nodes_[static_cast<size_t>(k)];
                auto& vn = nodes_[static_cast<size_t>(v)];
                const double* dout = self.grad.data();
                std::vector<double> ds(static_cast<size_t>(T));
                for (int h = 0; h < heads; ++h) {
                    int64_t off = static_cast<int64_t>(h) * dh;
                    const double* wh = aux->w.data() + static_cast<size_t>(h) * static_cast<size_t>(T * T);
                    for (int64_t i = 0; i < T; ++i) {
                        int64_t hi = i;
                        double zc = aux->zc[static_cast<size_t>(h * T + i)];
                        bool floored = aux->floored[static_cast<size_t>(h * T + i)] != 0;
                        const double* gr = dout + i * d + off;
                        // g = <dout_i, out_i> over this head's slice
                        double g = 0.0;
                        {
                            const double* orow = self.val.data() + i * d + off;
                            for (int64_t t = 0; t < dh; ++t) g += gr[t] * orow[t];
                        }
                        for (int64_t j = 0; j <= hi; ++j) {
                            double w = wh[i * T + j];
                            // dv
                            if (vn.needs_grad && w != 0.0) {
                                double* dvr = vn.grad.data() + j * d + off;
                                for (int64_t t = 0; t < dh; ++t) dvr[t] += w * gr[t];
                            }
                            // <v_j, dout_i>
                            double vd = 0.0;
                            {
                                const double* vr = vn.val.data() + j * d + off;
                                for (int64_t t = 0; t < dh; ++t) vd += vr[t] * gr[t];
                            }
                            double dsj;
                            if (i < V) {
                                // plain softmax row
                                dsj = w * (vd - g);
                            } else {
                                // u' = exp(score); recover exp from stored mass.
                                double u = w * zc;
                                double uexp = (j < V) ? u + 1.0 : u;
                                double dzc_du;
                                if (!floored) dzc_du = 1.0;
                                else dzc_du = (j < V) ? 0.0 : 0.1;
                                dsj = uexp * (vd - dzc_du * g) / zc;
                            }
                            ds[static_cast<size_t>(j)] = dsj;
                        }
                        if (qn.needs_grad || kn.needs_grad) {
                            for (int64_t j = 0; j <= hi; ++j) {
                                double dsj = ds[static_cast<size_t>(j)] * inv_sqrt_dh;
                                if (dsj == 0.0) continue;
                                if (qn.needs_grad) {
                                    double* dqr = qn.grad.data() + i * d + off;
                                    const double* kr = kn.val.data() + j * d + off;
                                    for (int64_t t = 0; t < dh; ++t) dqr[t] += dsj * kr[t];
                                }
                                if (kn.needs_grad) {
                                    double* dkr = kn.grad.data() + j * d + off;
                                    const double* qr = qn.val.data() + i * d + off;
                                    for (int64_t t = 0; t < dh; ++t) dkr[t] += dsj * qr[t];
                                }
                            }
                        }
                    }
                }
            };
        }
        return id;
    }

    /// Mean negative log-likelihood over masked positions. next_ids[i] is the
    /// token that row i should predict; rows with mask[i] == 0 are ignored.
    NodeId cross_entropy(NodeId logits, const std::vector<int>& next_ids,
                         const std::vector<uint8_t>& mask) {
        const auto& nl = node_ref(logits);
        if (static_cast<int64_t>(next_ids.size()) != nl.rows ||
            static_cast<int64_t>(mask.size()) != nl.rows)
            throw ArgumentError("cross_entropy: target/mask length mismatch");
        int64_t rows = nl.rows, cols = nl.cols;
        int64_t count = 0;
        for (auto m : mask)
            if (m) ++count;
        if (count == 0) throw ArgumentError("cross_entropy: mask selects no positions");
        for (int64_t i = 0; i < rows; ++i)
            if (mask[static_cast<size_t>(i)] && (next_ids[static_cast<size_t>(i)] < 0 ||
                                                 next_ids[static_cast<size_t>(i)] >= cols))
                throw ArgumentError("cross_entropy: target id out of range");

        NodeId id = make(1, 1, nl.needs_grad);
        auto& out = nodes_[static_cast<size_t>(id)];
        out.val.assign(1, 0.0);

        auto probs = std::make_shared<std::vector<double>>();
        if (nl.needs_grad) probs->assign(static_cast<size_t>(rows * cols), 0.0);

        double total = 0.0;
        const double* lv = node_ref(logits).val.data();
        for (int64_t i = 0; i < rows; ++i) {
            if (!mask[static_cast<size_t>(i)]) continue;
            const double* row = lv + i * cols;
            double mx = row[0];
            for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, row[j]);
            double z = 0.0;
            for (int64_t j = 0; j < cols; ++j) z += std::exp(row[j] - mx);
            double lse = mx + std::log(z);
            total += lse - row[next_ids[static_cast<size_t>(i)]];
            if (nl.needs_grad) {
                double* pr = probs->data() + i * cols;
                for (int64_t j = 0; j < cols; ++j) pr[j] = std::exp(row[j] - mx) / z;
            }
        }
        out.val[0] = total / static_cast<double>(count);

        if (out.needs_grad) {
            auto ids = std::make_shared<std::vector<int>>(next_ids);
            auto msk = std::make_shared<std::vector<uint8_t>>(mask);
            out.back = [this, id, logits, probs, ids, msk, rows, cols, count] {
                auto& self = nodes_[static_cast<size_t>(id)];
                auto& ln = nodes_[static_cast<size_t>(logits)];
                double g = self.grad[0] / static_cast<double>(count);
                for (int64_t i = 0; i < rows; ++i) {
                    if (!(*msk)[static_cast<size_t>(i)]) continue;
                    const double* pr = probs->data() + i * cols;
                    double* dl = ln.grad.data() + i * cols;
                    int tgt = (*ids)[static_cast<size_t>(i)];
                    for (int64_t j = 0; j < cols; ++j) dl[j] += g * (pr[j] - ((j == tgt) ? 1.0 : 0.0));
                }
            };
        }
        return id;
    }

    /// Reverse pass from a scalar loss node. Each recorded graph supports a
    /// single backward call.
    void backward(NodeId loss) {
        if (nodes_.empty()) throw StateError("backward called before any forward was recorded");
        if (ran_backward_) throw StateError("backward already ran on this graph");
        if (loss < 0 || static_cast<size_t>(loss) >= nodes_.size())
            throw ArgumentError("backward: unknown node");
        auto& ln = nodes_[static_cast<size_t>(loss)];
        if (ln.rows != 1 || ln.cols != 1) throw ArgumentError("backward: loss node must be scalar");
        if (!ln.needs_grad) throw StateError("backward: loss does not depend on any trainable leaf");
        ran_backward_ = true;
        ln.grad[0] = 1.0;
        for (NodeId i = loss; i >= 0; --i) {
            auto& n = nodes_[static_cast<size_t>(i)];
            if (n.needs_grad && n.back) n.back();
        }
    }

private:
    static constexpr double kInvSqrt2 = 0.70710678118654752440;
    static constexpr double kInvSqrt2Pi = 0.39894228040143267794;
    static constexpr double kScoreClamp = 60.0;

    NodeId make(int64_t r, int64_t c, bool needs_grad) {
        Node n;
        n.rows = r;
        n.cols = c;
        n.needs_grad = needs_grad;
        if (needs_grad) n.grad.assign(static_cast<size_t>(r * c), 0.0);
        nodes_.push_back(std::move(n));
        return static_cast<NodeId>(nodes_.size() - 1);
    }

    Node& node_ref(NodeId id) {
        if (id < 0 || static_cast<size_t>(id) >= nodes_.size())
            throw ArgumentError("Graph: unknown node id");
        return nodes_[static_cast<size_t>(id)];
    }

    std::vector<Node> nodes_;
    bool ran_backward_ = false;
};

}  // namespace oppu::ad
