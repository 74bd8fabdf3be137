// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "specopd/tensor.hpp"

namespace specopd {

/// Reverse-mode tape over dense tensors.
///
/// Nodes are appended in execution order, so reverse creation order is a
/// valid reverse topological order for backward. Gradients are accumulated
/// (shared subexpressions sum their contributions) and are only materialized
/// for nodes on a path to a parameter leaf.
template <ScalarType T>
class Tape {
public:
    using Var = uint32_t;

    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        bool needs_grad{false};
        bool grad_alloc{false};
        std::string param_path; // nonempty for parameter leaves
        std::function<void(Tape&, const Tensor<T>&)> backward;
    };

    const Tensor<T>& value(Var v) const { return nodes_[v].value; }
    size_t size() const { return nodes_.size(); }

    Var leaf(Tensor<T> t) { return push_(std::move(t), false); }

    Var constant(Tensor<T> t) { return push_(std::move(t), false); }

    /// Parameter leaf: copies the tensor and records the path for the grad map.
    Var param(const std::string& path, const Tensor<T>& t) {
        Var v = push_(t, true);
        nodes_[v].param_path = path;
        param_vars_.emplace_back(path, v);
        return v;
    }

    // -- elementwise ---------------------------------------------------------

    Var add(Var a, Var b) {
        const auto& ta = nodes_[a].value;
        const auto& tb = nodes_[b].value;
        require(ta.same_shape(tb), "add: shape mismatch");
        Tensor<T> out = ta;
        for (int64_t i = 0; i < out.numel(); ++i) {
            out.data[i] += tb.data[i];
        }
        Var v = push_(std::move(out), needs_(a) || needs_(b));
        if (nodes_[v].needs_grad) {
            nodes_[v].backward = [a, b](Tape& tp, const Tensor<T>& g) {
                tp.accumulate_(a, g.data.data(), 1);
                tp.accumulate_(b, g.data.data(), 1);
            };
        }
        return v;
    }

    Var mul(Var a, Var b) {
        const auto& ta = nodes_[a].value;
        const auto& tb = nodes_[b].value;
        require(ta.same_shape(tb), "mul: shape mismatch");
        Tensor<T> out = ta;
        for (int64_t i = 0; i < out.numel(); ++i) {
            out.data[i] *= tb.data[i];
        }
        Var v = push_(std::move(out), needs_(a) || needs_(b));
        if (nodes_[v].needs_grad) {
            nodes_[v].backward = [a, b](Tape& tp, const Tensor<T>& g) {
                if (tp.needs_(a)) {
                    Tensor<T> da = g;
                    for (int64_t i = 0; i < da.numel(); ++i) {
                        da.data[i] *= tp.nodes_[b].value.data[i];
                    }
                    tp.accumulate_(a, da.data.data(), 1);
                }
                if (tp.needs_(b)) {
                    Tensor<T> db = g;
                    for (int64_t i = 0; i < db.numel(); ++i) {
                        db.data[i] *= tp.nodes_[a].value.data[i];
                    }
                    tp.accumulate_(b, db.data.data(), 1);
                }
            };
        }
        return v;
    }

    Var scale(Var a, double c) {
        Tensor<T> out = nodes_[a].value;
        for (auto& x : out.data) {
            x = static_cast<T>(x * c);
        }
        Var v = push_(std::move(out), needs_(a));
        if (nodes_[v].needs_grad) {
            nodes_[v].backward = [a, c](Tape& tp, const Tensor<T>& g) {
                Tensor<T> da = g;
                for (auto& x : da.data) {
                    x = static_cast<T>(x * c);
                }
                tp.accumulate_(a, da.data.data(), 1);
            };
        }
        return v;
    }

    Var silu(Var a) {
        Tensor<T> out = nodes_[a].value;
        for (auto& x : out.data) {
            x = kern::silu(x);
        }
        Var v = push_(std::move(out), needs_(a));
        if (nodes_[v].needs_grad) {
            nodes_[v].backward = [a](Tape& tp, const Tensor<T>& g) {
                Tensor<T> da = g;
                const auto& x = tp.nodes_[a].value;
                for (int64_t i = 0; i < da.numel(); ++i) {
                    da.data[i] *= kern::silu_grad(x.data[i]);
                }
                tp.accumulate_(a, da.data.data(), 1);
            };
        }
        return v;
    }

    // -- matrix ops ----------------------------------------------------------

    /// [m×k]·[k×n]
    Var matmul(Var a, Var b) {
        const auto& ta = nodes_[a].value;
        const auto& tb = nodes_[b].value;
        require(ta.shape.size() == 2 && tb.shape.size() == 2 && ta.cols() == tb.rows(),
                "matmul: shape mismatch");
        const int m = ta.rows(), k = ta.cols(), n = tb.cols();
        Tensor<T> out({m, n});
        kern::gemm_nn(out.data.data(), ta.data.data(), tb.data.data(), m, k, n, false);
        Var v = push_(std::move(out), needs_(a) || needs_(b));
        if (nodes_[v].needs_grad) {
            nodes_[v].backward = [a, b, m, k, n](Tape& tp, const Tensor<T>& g) {
                if (tp.needs_(a)) {
                    Tensor<T> da({m, k});
                    kern::gemm_nt(da.data.data(), g.data.data(), tp.nodes_[b].value.data.data(),
                                  m, n, k, false);
                    tp.accumulate_(a, da.data.data(), 1);
                }
                if (tp.needs_(b)) {
                    Tensor<T> db({k, n});
                    kern::gemm_tn(db.data.data(), tp.nodes_[a].value.data.data(), g.data.data(),
                                  k, m, n, false);
                    tp.accumulate_(b, db.data.data(), 1);
                }
            };
        }
        return v;
    }

    /// [m×k]·[n×k]ᵀ — used for the tied LM head.
    Var matmul_nt(Var a, Var b) {
        const auto& ta = nodes_[a].value;
        const auto& tb = nodes_[b].value;
        require(ta.shape.size() == 2 && tb.shape.size() == 2 && ta.cols() == tb.cols(),
                "matmul_nt: shape mismatch");
        const int m = ta.rows(), k = ta.cols(), n = tb.rows();
        Tensor<T> out({m, n});
        kern::gemm_nt(out.data.data(), ta.data.data(), tb.data.data(), m, k, n, false);
        Var v = push_(std::move(out), needs_(a) || needs_(b));
        if (nodes_[v].needs_grad) {
            nodes_[v].backward = [a, b, m, k, n](Tape& tp, const Tensor<T>& g) {
                if (tp.needs_(a)) {
                    Tensor<T> da({m, k});
                    kern::gemm_nn(da.data.data(), g.data.data(), tp.nodes_[b].value.data.data(),
                                  m, n, k, false);
                    tp.accumulate_(a, da.data.data(), 1);
                }
                if (tp.needs_(b)) {
                    Tensor<T> db({n, k});
                    kern::gemm_tn(db.data.data(), g.data.data(), tp.nodes_[a].value.data.data(),
                                  n, m, k, false);
                    tp.accumulate_(b, db.data.data(), 1);
                }
            };
        }
        return v;
    }

    /// Row gather: out[i] = src[ids[i]]. Embedding lookup and row selection.
    Var gather_rows(Var src, std::vector<int> ids) {
        const auto& ts = nodes_[src].value;
        require(ts.shape.size() == 2, "gather_rows: source must be a matrix");
        const int c = ts.cols();
        Tensor<T> out({static_cast<int>(ids.size()), c});
        for (size_t i = 0; i < ids.size(); ++i) {
            require(ids[i] >= 0 && ids[i] < ts.rows(), "gather_rows: index out of range");
            std::copy_n(ts.row(ids[i]).data(), c, out.row(static_cast<int>(i)).data());
        }
        Var v = push_(std::move(out), needs_(src));
        if (nodes_[v].needs_grad) {
            nodes_[v].backward = [src, ids = std::move(ids), c](Tape& tp, const Tensor<T>& g) {
                Tensor<T>& gs = tp.grad_(src);
                for (size_t i = 0; i < ids.size(); ++i) {
                    T* dst = gs.row(ids[i]).data();
                    const T* s = g.row(static_cast<int>(i)).data();
                    for (int j = 0; j < c; ++j) {
                        dst[j] += s[j];
                    }
                }
            };
        }
        return v;
    }

    /// Contiguous row slice [r0, r1) of a matrix.
    Var slice_rows(Var src, int r0, int r1) {
        const auto& ts = nodes_[src].value;
        require(ts.shape.size() == 2 && r0 >= 0 && r0 <= r1 && r1 <= ts.rows(),
                "slice_rows: bad range");
        const int c = ts.cols();
        Tensor<T> out({r1 - r0, c});
        std::copy_n(ts.data.data() + static_cast<size_t>(r0) * c,
                    static_cast<size_t>(r1 - r0) * c, out.data.data());
        Var v = push_(std::move(out), needs_(src));
        if (nodes_[v].needs_grad) {
            nodes_[v].backward = [src, r0, c](Tape& tp, const Tensor<T>& g) {
                Tensor<T>& gs = tp.grad_(src);
                T* dst = gs.data.data() + static_cast<size_t>(r0) * c;
                for (int64_t i = 0; i < g.numel(); ++i) {
                    dst[i] += g.data[i];
                }
            };
        }
        return v;
    }

    Var concat_rows(Var a, Var b) {
        const auto& ta = nodes_[a].value;
        const auto& tb = nodes_[b].value;
        require(ta.shape.size() == 2 && tb.shape.size() == 2 && ta.cols() == tb.cols(),
                "concat_rows: column mismatch");
        const int c = ta.cols(), ra = ta.rows(), rb = tb.rows();
        Tensor<T> out({ra + rb, c});
        std::copy(ta.data.begin(), ta.data.end(), out.data.begin());
        std::copy(tb.data.begin(), tb.data.end(), out.data.begin() + ta.numel());
        Var v = push_(std::move(out), needs_(a) || needs_(b));
        if (nodes_[v].needs_grad) {
            nodes_[v].backward = [a, b, ra, rb, c](Tape& tp, const Tensor<T>& g) {
                if (tp.needs_(a)) {
                    tp.accumulate_(a, g.data.data(), 1);
                }
                if (tp.needs_(b)) {
                    tp.accumulate_(b, g.data.data() + static_cast<size_t>(ra) * c, 1);
                }
            };
        }
        return v;
    }

    // -- normalization / softmax ---------------------------------------------

    /// RMS normalization over the last axis with elementwise gain.
    Var rms_norm(Var x, Var gain) {
        const auto& tx = nodes_[x].value;
        const auto& tg = nodes_[gain].value;
        require(tx.shape.size() == 2, "rms_norm: input must be a matrix");
        require(tg.numel() == tx.cols(), "rms_norm: gain extent mismatch");
        const int n = tx.rows(), c = tx.cols();
        Tensor<T> out({n, c});
        Tensor<T> inv({n});
        for (int i = 0; i < n; ++i) {
            inv.data[i] = kern::rms_norm_row<T>(tx.row(i), {tg.data.data(), static_cast<size_t>(c)},
                                                out.row(i));
        }
        Var v = push_(std::move(out), needs_(x) || needs_(gain));
        if (nodes_[v].needs_grad) {
            nodes_[v].backward = [x, gain, inv = std::move(inv), n, c](Tape& tp,
                                                                       const Tensor<T>& g) {
                const auto& tx2 = tp.nodes_[x].value;
                const auto& tg2 = tp.nodes_[gain].value;
                for (int i = 0; i < n; ++i) {
                    const T* xi = tx2.row(i).data();
                    const T* gi = g.row(i).data();
                    const T r = inv.data[i];
                    if (tp.needs_(x)) {
                        // d/dx_j = r·gain_j·g_j − (r³/c)·x_j·Σ_i g_i·gain_i·x_i
                        double dot = 0.0;
                        for (int j = 0; j < c; ++j) {
                            dot += static_cast<double>(gi[j]) * tg2.data[j] * xi[j];
                        }
                        const double k3 = static_cast<double>(r) * r * r / c * dot;
                        Tensor<T>& gx = tp.grad_(x);
                        T* dst = gx.row(i).data();
                        for (int j = 0; j < c; ++j) {
                            dst[j] += static_cast<T>(r * tg2.data[j] * gi[j] - k3 * xi[j]);
                        }
                    }
                    if (tp.needs_(gain)) {
                        Tensor<T>& gg = tp.grad_(gain);
                        for (int j = 0; j < c; ++j) {
                            gg.data[j] += gi[j] * xi[j] * r;
                        }
                    }
                }
            };
        }
        return v;
    }

    /// Max-subtracted softmax over rows.
    Var softmax_rows(Var z) {
        const auto& tz = nodes_[z].value;
        require(tz.shape.size() == 2, "softmax_rows: input must be a matrix");
        tz.check_finite("softmax input");
        const int n = tz.rows(), c = tz.cols();
        Tensor<T> out({n, c});
        for (int i = 0; i < n; ++i) {
            kern::softmax_row<T>(tz.row(i), out.row(i));
        }
        Var v = push_(std::move(out), needs_(z));
        if (nodes_[v].needs_grad) {
            nodes_[v].backward = [z, v, n, c](Tape& tp, const Tensor<T>& g) {
                const auto& p = tp.nodes_[v].value;
                Tensor<T>& gz = tp.grad_(z);
                for (int i = 0; i < n; ++i) {
                    const T* pi = p.row(i).data();
                    const T* gi = g.row(i).data();
                    double dot = 0.0;
                    for (int j = 0; j < c; ++j) {
                        dot += static_cast<double>(gi[j]) * pi[j];
                    }
                    T* dst = gz.row(i).data();
                    for (int j = 0; j < c; ++j) {
                        dst[j] += static_cast<T>(pi[j] * (gi[j] - dot));
                    }
                }
            };
        }
        return v;
    }

    Var log_softmax_rows(Var z) {
        const auto& tz = nodes_[z].value;
        require(tz.shape.size() == 2, "log_softmax_rows: input must be a matrix");
        const int n = tz.rows(), c = tz.cols();
        Tensor<T> out({n, c});
        for (int i = 0; i < n; ++i) {
            kern::log_softmax_row<T>(tz.row(i), out.row(i));
        }
        Var v = push_(std::move(out), needs_(z));
        if (nodes_[v].needs_grad) {
            nodes_[v].backward = [z, v, n, c](Tape& tp, const Tensor<T>& g) {
                const auto& lq = tp.nodes_[v].value;
                Tensor<T>& gz = tp.grad_(z);
                for (int i = 0; i < n; ++i) {
                    const T* li = lq.row(i).data();
                    const T* gi = g.row(i).data();
                    double gsum = 0.0;
                    for (int j = 0; j < c; ++j) {
                        gsum += static_cast<double>(gi[j]);
                    }
                    T* dst = gz.row(i).data();
                    for (int j = 0; j < c; ++j) {
                        dst[j] += static_cast<T>(gi[j] - std::exp(static_cast<double>(li[j])) * gsum);
                    }
                }
            };
        }
        return v;
    }

    /// Rotary embedding on [rows × (n_heads·head_dim)]; positions[i] is the
    /// absolute sequence position of row i.
    Var rotary(Var x, int n_heads, std::vector<int> positions) {
        const auto& tx = nodes_[x].value;
        require(tx.shape.size() == 2 && tx.rows() == static_cast<int>(positions.size()),
                "rotary: positions/rows mismatch");
        const int n = tx.rows(), c = tx.cols();
        const int head_dim = c / n_heads;
        Tensor<T> out = tx;
        for (int i = 0; i < n; ++i) {
            kern::rotary_row<T>(out.row(i), n_heads, head_dim, positions[i]);
        }
        Var v = push_(std::move(out), needs_(x));
        if (nodes_[v].needs_grad) {
            nodes_[v].backward = [x, n_heads, head_dim, positions = std::move(positions), n](
                                     Tape& tp, const Tensor<T>& g) {
                Tensor<T> dx = g;
                for (int i = 0; i < n; ++i) {
                    kern::rotary_row_inverse<T>(dx.row(i), n_heads, head_dim, positions[i]);
                }
                tp.accumulate_(x, dx.data.data(), 1);
            };
        }
        return v;
    }

    /// Multi-head scaled-dot attention with per-query visibility bound:
    /// query row i may attend to key rows j ≤ allow[i].
    Var attention(Var q, Var k, Var vv, int n_heads, std::vector<int> allow) {
        const auto& tq = nodes_[q].value;
        const auto& tk = nodes_[k].value;
        const auto& tv = nodes_[vv].value;
        require(tq.cols() == tk.cols() && tk.shape == tv.shape, "attention: shape mismatch");
        const int n = tq.rows(), m = tk.rows(), d = tq.cols();
        const int hd = d / n_heads;
        require(static_cast<int>(allow.size()) == n, "attention: allow/rows mismatch");
        const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));

        Tensor<T> out({n, d});
        Tensor<T> probs({n_heads * n, m}); // zero beyond allow[i]
        for (int h = 0; h < n_heads; ++h) {
            for (int i = 0; i < n; ++i) {
                require(allow[i] >= 0 && allow[i] < m, "attention: allow out of range");
                const int lim = allow[i] + 1;
                const T* qi = tq.row(i).data() + static_cast<size_t>(h) * hd;
                T* pr = probs.row(h * n + i).data();
                T mx = std::numeric_limits<T>::lowest();
                for (int j = 0; j < lim; ++j) {
                    const T* kj = tk.row(j).data() + static_cast<size_t>(h) * hd;
                    T s = 0;
                    for (int e = 0; e < hd; ++e) {
                        s += qi[e] * kj[e];
                    }
                    pr[j] = s * inv_sqrt;
                    mx = std::max(mx, pr[j]);
                }
                double sum = 0.0;
                for (int j = 0; j < lim; ++j) {
                    const double ev = std::exp(static_cast<double>(pr[j] - mx));
                    pr[j] = static_cast<T>(ev);
                    sum += ev;
                }
                const T invs = static_cast<T>(1.0 / sum);
                T* oi = out.row(i).data() + static_cast<size_t>(h) * hd;
                std::fill_n(oi, hd, T(0));
                for (int j = 0; j < lim; ++j) {
                    pr[j] *= invs;
                    const T* vj = tv.row(j).data() + static_cast<size_t>(h) * hd;
                    for (int e = 0; e < hd; ++e) {
                        oi[e] += pr[j] * vj[e];
                    }
                }
            }
        }
        Var v = push_(std::move(out), needs_(q) || needs_(k) || needs_(vv));
        if (nodes_[v].needs_grad) {
            nodes_[v].backward = [q, k, vv, n_heads, hd, n, m, inv_sqrt,
                                  probs = std::move(probs),
                                  allow = std::move(allow)](Tape& tp, const Tensor<T>& g) {
                const auto& tq2 = tp.nodes_[q].value;
                const auto& tk2 = tp.nodes_[k].value;
                const auto& tv2 = tp.nodes_[vv].value;
                Tensor<T>& gq = tp.grad_(q);
                Tensor<T>& gk = tp.grad_(k);
                Tensor<T>& gv = tp.grad_(vv);
                std::vector<T> dA(static_cast<size_t>(m));
                for (int h = 0; h < n_heads; ++h) {
                    for (int i = 0; i < n; ++i) {
                        const int lim = allow[i] + 1;
                        const T* pr = probs.row(h * n + i).data();
                        const T* go = g.row(i).data() + static_cast<size_t>(h) * hd;
                        // dV += Aᵀ dO ; dA = dO Vᵀ
                        double dot = 0.0;
                        for (int j = 0; j < lim; ++j) {
                            const T* vj = tv2.row(j).data() + static_cast<size_t>(h) * hd;
                            T* gvj = gv.row(j).data() + static_cast<size_t>(h) * hd;
                            T s = 0;
                            for (int e = 0; e < hd; ++e) {
                                gvj[e] += pr[j] * go[e];
                                s += go[e] * vj[e];
                            }
                            dA[static_cast<size_t>(j)] = s;
                            dot += static_cast<double>(s) * pr[j];
                        }
                        // dS = A ⊙ (dA − Σ dA⊙A); dQ += dS·K·scale; dK += dSᵀ·Q·scale
                        const T* qi = tq2.row(i).data() + static_cast<size_t>(h) * hd;
                        T* gqi = gq.row(i).data() + static_cast<size_t>(h) * hd;
                        for (int j = 0; j < lim; ++j) {
                            const T ds = static_cast<T>(pr[j] * (dA[static_cast<size_t>(j)] - dot)) *
                                         inv_sqrt;
                            if (ds == T(0)) {
                                continue;
                            }
                            const T* kj = tk2.row(j).data() + static_cast<size_t>(h) * hd;
                            T* gkj = gk.row(j).data() + static_cast<size_t>(h) * hd;
                            for (int e = 0; e < hd; ++e) {
                                gqi[e] += ds * kj[e];
                                gkj[e] += ds * qi[e];
                            }
                        }
                    }
                }
            };
        }
        return v;
    }

    // -- losses ---------------------------------------------------------------

    /// Per-row cross entropy −log softmax(z)[target].
    Var cross_entropy_rows(Var z, std::vector<int> targets) {
        const auto& tz = nodes_[z].value;
        const int n = tz.rows(), c = tz.cols();
        require(static_cast<int>(targets.size()) == n, "cross_entropy_rows: target count");
        Tensor<T> out({n});
        std::vector<T> lses(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) {
            require(targets[i] >= 0 && targets[i] < c, "cross_entropy_rows: target out of range");
            const T lse = kern::logsumexp_row<T>(tz.row(i));
            lses[static_cast<size_t>(i)] = lse;
            out.data[i] = lse - tz.at(i, targets[i]);
        }
        Var v = push_(std::move(out), needs_(z));
        if (nodes_[v].needs_grad) {
            nodes_[v].backward = [z, targets = std::move(targets), lses = std::move(lses), n,
                                  c](Tape& tp, const Tensor<T>& g) {
                const auto& tz2 = tp.nodes_[z].value;
                Tensor<T>& gz = tp.grad_(z);
                for (int i = 0; i < n; ++i) {
                    const T gi = g.data[i];
                    if (gi == T(0)) {
                        continue;
                    }
                    const T* zi = tz2.row(i).data();
                    T* dst = gz.row(i).data();
                    const T lse = lses[static_cast<size_t>(i)];
                    for (int j = 0; j < c; ++j) {
                        dst[j] += gi * static_cast<T>(std::exp(static_cast<double>(zi[j] - lse)));
                    }
                    dst[targets[i]] -= gi;
                }
            };
        }
        return v;
    }

    static constexpr double kProbFloor = 1e-12;

    /// Per-row forward KL D(p‖softmax(z)) against constant teacher rows p.
    Var forward_kl_rows(Var z, const Tensor<T>& p_rows) {
        const auto& tz = nodes_[z].value;
        require(tz.same_shape(p_rows), "forward_kl_rows: shape mismatch");
        const int n = tz.rows(), c = tz.cols();
        Tensor<T> out({n});
        for (int i = 0; i < n; ++i) {
            const T lse = kern::logsumexp_row<T>(tz.row(i));
            double acc = 0.0;
            for (int j = 0; j < c; ++j) {
                const double p = p_rows.at(i, j);
                if (p > 0.0) {
                    const double logp = std::log(std::max(p, kProbFloor));
                    acc += p * (logp - static_cast<double>(tz.at(i, j) - lse));
                }
            }
            out.data[i] = static_cast<T>(acc);
        }
        Var v = push_(std::move(out), needs_(z));
        if (nodes_[v].needs_grad) {
            // d/dz_j = q_j − p_j
            nodes_[v].backward = [z, p_rows, n, c](Tape& tp, const Tensor<T>& g) {
                const auto& tz2 = tp.nodes_[z].value;
                Tensor<T>& gz = tp.grad_(z);
                std::vector<T> q(static_cast<size_t>(c));
                for (int i = 0; i < n; ++i) {
                    const T gi = g.data[i];
                    if (gi == T(0)) {
                        continue;
                    }
                    kern::softmax_row<T>(tz2.row(i), q);
                    T* dst = gz.row(i).data();
                    for (int j = 0; j < c; ++j) {
                        dst[j] += gi * (q[static_cast<size_t>(j)] - p_rows.at(i, j));
                    }
                }
            };
        }
        return v;
    }

    /// Per-row reverse KL D(softmax(z)‖p) against constant teacher rows p.
    /// log p is floored at 1e-12; the gradient flows through both the q
    /// weighting and the log q term.
    Var reverse_kl_rows(Var z, const Tensor<T>& p_rows) {
        const auto& tz = nodes_[z].value;
        require(tz.same_shape(p_rows), "reverse_kl_rows: shape mismatch");
        const int n = tz.rows(), c = tz.cols();
        Tensor<T> out({n});
        for (int i = 0; i < n; ++i) {
            const T lse = kern::logsumexp_row<T>(tz.row(i));
            double acc = 0.0;
            for (int j = 0; j < c; ++j) {
                const double logq = static_cast<double>(tz.at(i, j) - lse);
                const double q = std::exp(logq);
                const double logp = std::log(std::max(static_cast<double>(p_rows.at(i, j)),
                                                      kProbFloor));
                acc += q * (logq - logp);
            }
            out.data[i] = static_cast<T>(acc);
        }
        Var v = push_(std::move(out), needs_(z));
        if (nodes_[v].needs_grad) {
            // d/dz_j = q_j·(a_j − L), a_j = log q_j − log p_j
            nodes_[v].backward = [z, p_rows, v, n, c](Tape& tp, const Tensor<T>& g) {
                const auto& tz2 = tp.nodes_[z].value;
                const auto& L = tp.nodes_[v].value;
                Tensor<T>& gz = tp.grad_(z);
                for (int i = 0; i < n; ++i) {
                    const T gi = g.data[i];
                    if (gi == T(0)) {
                        continue;
                    }
                    const T lse = kern::logsumexp_row<T>(tz2.row(i));
                    T* dst = gz.row(i).data();
                    for (int j = 0; j < c; ++j) {
                        const double logq = static_cast<double>(tz2.at(i, j) - lse);
                        const double q = std::exp(logq);
                        const double logp = std::log(
                            std::max(static_cast<double>(p_rows.at(i, j)), kProbFloor));
                        dst[j] += gi * static_cast<T>(q * (logq - logp -
                                                           static_cast<double>(L.data[i])));
                    }
                }
            };
        }
        return v;
    }

    // -- reductions -----------------------------------------------------------

    Var sum(Var a) {
        const auto& ta = nodes_[a].value;
        double s = 0.0;
        for (T x : ta.data) {
            s += static_cast<double>(x);
        }
        Tensor<T> out({1});
        out.data[0] = static_cast<T>(s);
        Var v = push_(std::move(out), needs_(a));
        if (nodes_[v].needs_grad) {
            nodes_[v].backward = [a](Tape& tp, const Tensor<T>& g) {
                Tensor<T>& ga = tp.grad_(a);
                for (auto& x : ga.data) {
                    x += g.data[0];
                }
            };
        }
        return v;
    }

    Var mean_all(Var a) {
        const int64_t n = nodes_[a].value.numel();
        require(n > 0, "mean_all: empty tensor");
        return scale(sum(a), 1.0 / static_cast<double>(n));
    }

    /// Σᵢ wᵢ·xᵢ with constant weights.
    Var weighted_sum(Var a, std::vector<double> w) {
        const auto& ta = nodes_[a].value;
        require(static_cast<int64_t>(w.size()) == ta.numel(), "weighted_sum: length mismatch");
        double s = 0.0;
        for (int64_t i = 0; i < ta.numel(); ++i) {
            s += w[static_cast<size_t>(i)] * static_cast<double>(ta.data[i]);
        }
        Tensor<T> out({1});
        out.data[0] = static_cast<T>(s);
        Var v = push_(std::move(out), needs_(a));
        if (nodes_[v].needs_grad) {
            nodes_[v].backward = [a, w = std::move(w)](Tape& tp, const Tensor<T>& g) {
                Tensor<T>& ga = tp.grad_(a);
                for (int64_t i = 0; i < ga.numel(); ++i) {
                    ga.data[i] += g.data[0] * static_cast<T>(w[static_cast<size_t>(i)]);
                }
            };
        }
        return v;
    }

    // -- backward -------------------------------------------------------------

    /// Reverse sweep from a scalar loss; fills gradients of all parameter
    /// leaves reachable from it.
    void backward(Var loss) {
        require(nodes_[loss].value.numel() == 1, "backward: loss must be scalar");
        require(nodes_[loss].needs_grad,
                "backward: loss is detached from every trainable parameter");
        grad_(loss).data[0] = T(1);
        for (size_t i = nodes_.size(); i-- > 0;) {
            Node& nd = nodes_[i];
            if (!nd.needs_grad || !nd.grad_alloc || !nd.backward) {
                continue;
            }
            nd.backward(*this, nd.grad);
        }
    }

    /// Gradient of a parameter leaf after backward; zeros if untouched.
    Tensor<T> param_grad(const std::string& path) const {
        for (const auto& [p, v] : param_vars_) {
            if (p == path) {
                const Node& nd = nodes_[v];
                if (nd.grad_alloc) {
                    return nd.grad;
                }
                return Tensor<T>::zeros(nd.value.shape);
            }
        }
        fail("param_grad: unknown parameter path " + path);
    }

    /// All parameter gradients keyed by path, in registration order.
    std::map<std::string, Tensor<T>> grad_map() const {
        std::map<std::string, Tensor<T>> out;
        for (const auto& [p, v] : param_vars_) {
            const Node& nd = nodes_[v];
            out[p] = nd.grad_alloc ? nd.grad : Tensor<T>::zeros(nd.value.shape);
        }
        return out;
    }

    const std::vector<std::pair<std::string, Var>>& param_vars() const { return param_vars_; }

private:
    bool needs_(Var v) const { return nodes_[v].needs_grad; }

    Tensor<T>& grad_(Var v) {
        Node& nd = nodes_[v];
        if (!nd.grad_alloc) {
            nd.grad = Tensor<T>::zeros(nd.value.shape);
            nd.grad_alloc = true;
        }
        return nd.grad;
    }

    void accumulate_(Var v, const T* g, int) {
        if (!needs_(v)) {
            return;
        }
        Tensor<T>& dst = grad_(v);
        for (int64_t i = 0; i < dst.numel(); ++i) {
            dst.data[i] += g[i];
        }
    }

    Var push_(Tensor<T> t, bool needs_grad) {
        nodes_.push_back(Node{std::move(t), {}, needs_grad, false, {}, {}});
        return static_cast<Var>(nodes_.size() - 1);
    }

    std::vector<Node> nodes_;
    std::vector<std::pair<std::string, Var>> param_vars_;
};

// ---------------------------------------------------------------------------
// gradient checking
// ---------------------------------------------------------------------------

template <ScalarType T>
using ParamMap = std::map<std::string, Tensor<T>>;

struct GradCheckEntry {
    std::string path;
    int64_t index;
    double analytic;
    double numeric;
    double rel_err;
};

struct GradCheckReport {
    size_t coords_checked{0};
    double max_rel_err{0.0};
    bool pass{false};
    GradCheckEntry worst;
};

/// Central finite differences against the tape gradient.
///
/// `build` must construct the full loss on the tape from the given parameters
/// and return the scalar var; it must be deterministic for fixed params.
/// Checks up to `max_coords_per_tensor` coordinates per tensor (evenly
/// strided), since FD cost is two full evaluations per coordinate.
template <ScalarType T, typename BuildFn>
GradCheckReport grad_check(const ParamMap<T>& params, BuildFn&& build, double step, double tol,
                           int64_t max_coords_per_tensor = 24) {
    auto eval = [&](const ParamMap<T>& p) -> double {
        Tape<T> tape;
        auto loss = build(tape, p);
        return static_cast<double>(tape.value(loss).data[0]);
    };

    Tape<T> tape;
    auto loss = build(tape, params);
    {
        const double v0 = static_cast<double>(tape.value(loss).data[0]);
        const double v1 = eval(params);
        require(v0 == v1, "grad_check: build function is not deterministic");
    }
    tape.backward(loss);
    auto grads = tape.grad_map();

    GradCheckReport rep;
    rep.pass = true;
    ParamMap<T> scratch = params;
    for (const auto& [path, g] : grads) {
        const int64_t n = g.numel();
        const int64_t stride = std::max<int64_t>(1, n / max_coords_per_tensor);
        for (int64_t i = 0; i < n; i += stride) {
            Tensor<T>& pt = scratch.at(path);
            const T orig = pt.data[i];
            pt.data[i] = orig + static_cast<T>(step);
            const double fp = eval(scratch);
            pt.data[i] = orig - static_cast<T>(step);
            const double fm = eval(scratch);
            pt.data[i] = orig;

            const double numeric = (fp - fm) / (2.0 * step);
            const double analytic = static_cast<double>(g.data[i]);
            const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-4});
            const double rel = std::abs(analytic - numeric) / denom;
            ++rep.coords_checked;
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst = {path, i, analytic, numeric, rel};
            }
        }
    }
    rep.pass = rep.max_rel_err < tol;
    return rep;
}

} // namespace specopd
