// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "specopd/model.hpp"
#include "specopd/tensor.hpp"

namespace specopd {

/// Linear warmup to the peak, cosine decay to zero afterwards. Step indices
/// beyond the schedule clamp to the final learning rate.
struct CosineWarmupSchedule {
    double peak_lr{3e-4};
    double warmup_ratio{0.05};
    int64_t total_steps{1};

    int64_t warmup_steps() const {
        return static_cast<int64_t>(std::ceil(warmup_ratio * static_cast<double>(total_steps)));
    }

    double lr(int64_t step) const {
        require(step >= 0, "schedule: negative step");
        if (step > total_steps) {
            step = total_steps;
        }
        const int64_t w = warmup_steps();
        if (w > 0 && step < w) {
            return peak_lr * static_cast<double>(step) / static_cast<double>(w);
        }
        if (total_steps <= w) {
            return peak_lr;
        }
        const double progress =
            static_cast<double>(step - w) / static_cast<double>(total_steps - w);
        return peak_lr * 0.5 * (1.0 + std::cos(3.141592653589793 * progress));
    }
};

struct AdamWConfig {
    double beta1{0.9};
    double beta2{0.999};
    double eps{1e-8};
    double weight_decay{0.0};
};

template <ScalarType T>
struct AdamWState {
    std::map<std::string, Tensor<T>> m;
    std::map<std::string, Tensor<T>> v;
    int64_t step{0}; // completed steps; bias correction uses step + 1
};

/// One decoupled-weight-decay AdamW step over the given parameter paths.
/// The update math runs in 64-bit regardless of the parameter dtype.
template <ScalarType T>
void adamw_step(Parameters<T>& params, const std::vector<std::string>& paths,
                const std::map<std::string, Tensor<T>>& grads, AdamWState<T>& state,
                const AdamWConfig& cfg, const CosineWarmupSchedule& schedule,
                int64_t step_index) {
    const double lr = schedule.lr(step_index);
    const int64_t t = state.step + 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    for (const auto& path : paths) {
        auto git = grads.find(path);
        require(git != grads.end(), "adamw_step: missing gradient for " + path);
        Tensor<T>& theta = params.at(path);
        require(git->second.shape == theta.shape, "adamw_step: grad shape mismatch for " + path);
        auto& m = state.m[path];
        auto& v = state.v[path];
        if (m.shape != theta.shape) {
            m = Tensor<T>::zeros(theta.shape);
            v = Tensor<T>::zeros(theta.shape);
        }
        for (int64_t i = 0; i < theta.numel(); ++i) {
            const double g = static_cast<double>(git->second.data[i]);
            const double mi = cfg.beta1 * static_cast<double>(m.data[i]) + (1.0 - cfg.beta1) * g;
            const double vi =
                cfg.beta2 * static_cast<double>(v.data[i]) + (1.0 - cfg.beta2) * g * g;
            m.data[i] = static_cast<T>(mi);
            v.data[i] = static_cast<T>(vi);
            const double mhat = mi / bc1;
            const double vhat = vi / bc2;
            const double th = static_cast<double>(theta.data[i]);
            theta.data[i] =
                static_cast<T>(th - lr * (mhat / (std::sqrt(vhat) + cfg.eps) +
                                          cfg.weight_decay * th));
        }
    }
    state.step = t;
}

} // namespace specopd
