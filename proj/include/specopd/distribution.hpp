// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "specopd/common.hpp"
#include "specopd/rng.hpp"

namespace specopd {

/// Probability vector over the vocabulary. All verification and KL math runs
/// through this type in 64-bit regardless of model precision.
using Dist = std::vector<double>;

constexpr double kProbFloor = 1e-12;

inline double flog(double p) { return std::log(std::max(p, kProbFloor)); }

inline bool is_distribution(const Dist& p, double tol = 1e-6) {
    double s = 0.0;
    for (double v : p) {
        if (!(v >= 0.0) || !std::isfinite(v)) {
            return false;
        }
        s += v;
    }
    return std::abs(s - 1.0) <= tol;
}

inline void normalize(Dist& p) {
    const double s = std::accumulate(p.begin(), p.end(), 0.0);
    require(s > 0.0, "normalize: zero-mass distribution");
    for (double& v : p) {
        v /= s;
    }
}

/// Argmax with lowest-token-id tie break.
inline int argmax_lowest(std::span<const double> v) {
    int best = 0;
    for (int i = 1; i < static_cast<int>(v.size()); ++i) {
        if (v[static_cast<size_t>(i)] > v[static_cast<size_t>(best)]) {
            best = i;
        }
    }
    return best;
}

template <typename T>
inline int argmax_lowest_t(std::span<const T> v) {
    int best = 0;
    for (int i = 1; i < static_cast<int>(v.size()); ++i) {
        if (v[static_cast<size_t>(i)] > v[static_cast<size_t>(best)]) {
            best = i;
        }
    }
    return best;
}

inline double entropy(const Dist& p) {
    double h = 0.0;
    for (double v : p) {
        if (v > 0.0) {
            h -= v * std::log(v);
        }
    }
    return h;
}

/// D_KL(p ‖ q), log-floored at 1e-12 on q (and on p inside the log only).
inline double kl_forward(const Dist& p, const Dist& q) {
    require(p.size() == q.size(), "kl: size mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
        if (p[i] > 0.0) {
            acc += p[i] * (flog(p[i]) - flog(q[i]));
        }
    }
    return acc;
}

inline double kl_reverse(const Dist& q, const Dist& p) { return kl_forward(q, p); }

inline double cross_entropy(const Dist& p, const Dist& q) {
    require(p.size() == q.size(), "cross_entropy: size mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
        if (p[i] > 0.0) {
            acc -= p[i] * flog(q[i]);
        }
    }
    return acc;
}

inline double total_variation(const Dist& a, const Dist& b) {
    require(a.size() == b.size(), "total_variation: size mismatch");
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        s += std::abs(a[i] - b[i]);
    }
    return 0.5 * s;
}

inline double linf(const Dist& a, const Dist& b) {
    require(a.size() == b.size(), "linf: size mismatch");
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        s = std::max(s, std::abs(a[i] - b[i]));
    }
    return s;
}

/// Softmax of a logits row in 64-bit with max subtraction.
template <typename T>
Dist softmax_dist(std::span<const T> logits) {
    require(!logits.empty(), "softmax_dist: empty logits");
    double m = static_cast<double>(logits[0]);
    for (T v : logits) {
        require(std::isfinite(static_cast<double>(v)), "softmax_dist: non-finite logit");
        m = std::max(m, static_cast<double>(v));
    }
    Dist p(logits.size());
    double s = 0.0;
    for (size_t i = 0; i < logits.size(); ++i) {
        p[i] = std::exp(static_cast<double>(logits[i]) - m);
        s += p[i];
    }
    for (double& v : p) {
        v /= s;
    }
    return p;
}

/// Sample a token index from a distribution using one uniform draw.
inline int sample_index(const Dist& p, double u) {
    double c = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
        c += p[i];
        if (u < c) {
            return static_cast<int>(i);
        }
    }
    // numerical slack: return the last token with positive mass
    for (size_t i = p.size(); i-- > 0;) {
        if (p[i] > 0.0) {
            return static_cast<int>(i);
        }
    }
    fail("sample_index: zero-mass distribution");
}

// ---------------------------------------------------------------------------
// decode-time sampling transform
// ---------------------------------------------------------------------------

/// Decoding transform shared by target and draft distributions. temperature 0
/// selects the deterministic argmax path (top_p/top_k are ignored there).
struct SamplingSpec {
    double temperature{0.0};
    double top_p{1.0};
    int top_k{0}; // 0 = unlimited
    uint64_t seed{0};

    bool greedy() const { return temperature <= 0.0; }
};

/// Transformed distribution over logits: temperature softmax, then top-k,
/// then top-p (nucleus), renormalized. For temperature 0 this is a point mass
/// on the argmax (lowest id wins ties).
template <typename T>
Dist transform_logits(std::span<const T> logits, const SamplingSpec& s) {
    if (s.greedy()) {
        Dist p(logits.size(), 0.0);
        p[static_cast<size_t>(argmax_lowest_t<T>(logits))] = 1.0;
        return p;
    }
    double m = static_cast<double>(logits[0]);
    for (T v : logits) {
        m = std::max(m, static_cast<double>(v));
    }
    Dist p(logits.size());
    double sum = 0.0;
    for (size_t i = 0; i < logits.size(); ++i) {
        p[i] = std::exp((static_cast<double>(logits[i]) - m) / s.temperature);
        sum += p[i];
    }
    for (double& v : p) {
        v /= sum;
    }

    // rank once, highest first; ties by lower id (stable order of indices)
    std::vector<int> order(p.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return p[static_cast<size_t>(a)] > p[static_cast<size_t>(b)]; });

    size_t keep = p.size();
    if (s.top_k > 0 && static_cast<size_t>(s.top_k) < keep) {
        keep = static_cast<size_t>(s.top_k);
    }
    if (s.top_p < 1.0) {
        double c = 0.0;
        size_t k = 0;
        while (k < keep) {
            c += p[static_cast<size_t>(order[k])];
            ++k;
            if (c >= s.top_p) {
                break;
            }
        }
        keep = std::max<size_t>(1, k);
    }
    Dist out(p.size(), 0.0);
    double mass = 0.0;
    for (size_t k = 0; k < keep; ++k) {
        out[static_cast<size_t>(order[k])] = p[static_cast<size_t>(order[k])];
        mass += p[static_cast<size_t>(order[k])];
    }
    for (double& v : out) {
        v /= mass;
    }
    return out;
}

/// Sample a token under the spec: argmax when greedy, otherwise one uniform
/// draw from the transformed distribution.
inline TokenId sample_from(const Dist& transformed, const SamplingSpec& s, RngStream& rng) {
    if (s.greedy()) {
        return argmax_lowest(transformed);
    }
    return sample_index(transformed, rng.next_double());
}

} // namespace specopd
