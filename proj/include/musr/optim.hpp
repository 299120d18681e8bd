#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "musr/common.hpp"
#include "musr/tensor.hpp"

namespace musr {

// Warmup-then-decay schedule: lr(t) = base * min(t^-1/2, t * warmup^-3/2).
// The two branches cross exactly at t = warmup.
inline double inverse_sqrt_lr(double base_lr, std::size_t warmup_steps, std::size_t step) {
    if (step == 0) throw ContractError("learning rate schedule starts at step 1");
    const double t = static_cast<double>(step);
    const double w = static_cast<double>(warmup_steps == 0 ? 1 : warmup_steps);
    return base_lr * std::min(1.0 / std::sqrt(t), t / (w * std::sqrt(w)));
}

// Bias-corrected Adam with per-parameter moment accumulators.
template <typename T>
class AdamState {
public:
    double beta1 = 0.9;
    double beta2 = 0.98;
    double epsilon = 1e-8;
    double base_lr = 7e-4;
    std::size_t warmup_steps = 10000;

    AdamState() = default;
    AdamState(double b1, double b2, double eps, double lr, std::size_t warmup)
        : beta1(b1), beta2(b2), epsilon(eps), base_lr(lr), warmup_steps(warmup) {}

    void attach(const std::vector<Tensor<T>>& params) {
        first_.clear();
        second_.clear();
        for (const auto& p : params) {
            first_.emplace_back(p.numel(), T(0));
            second_.emplace_back(p.numel(), T(0));
        }
        step_ = 0;
    }

    std::size_t step() const { return step_; }
    double current_lr() const { return inverse_sqrt_lr(base_lr, warmup_steps, step_); }

    // One update over all attached parameters; reads .grad, writes values.
    void step_update(std::vector<Tensor<T>>& params) {
        if (first_.size() != params.size())
            throw ContractError("optimizer state not attached to this parameter set");
        ++step_;
        const double lr = inverse_sqrt_lr(base_lr, warmup_steps, step_);
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_));
        const T b1 = static_cast<T>(beta1);
        const T b2 = static_cast<T>(beta2);
        const T one_m_b1 = static_cast<T>(1.0 - beta1);
        const T one_m_b2 = static_cast<T>(1.0 - beta2);
        const T eps = static_cast<T>(epsilon);
        const T alpha1 = static_cast<T>(lr / bc1);
        const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
        for (std::size_t p = 0; p < params.size(); ++p) {
            auto& values = params[p].values();
            const auto& grads = params[p].grad();
            if (first_[p].size() != values.size())
                throw ContractError("optimizer moment shape does not match parameter");
            T* m = first_[p].data();
            T* v = second_[p].data();
            for (std::size_t i = 0; i < values.size(); ++i) {
                const T g = grads[i];
                m[i] = b1 * m[i] + one_m_b1 * g;
                v[i] = b2 * v[i] + one_m_b2 * g * g;
                values[i] -= alpha1 * m[i] / (std::sqrt(v[i]) * inv_sqrt_bc2 + eps);
            }
        }
    }

private:
    std::vector<std::vector<T>> first_;
    std::vector<std::vector<T>> second_;
    std::size_t step_ = 0;
};

}  // namespace musr
