#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "musr/common.hpp"
#include "musr/tensor.hpp"

namespace musr {

// Label-smoothed cross-entropy over probability rows [B,T,V], averaged over
// non-pad target positions. The smoothed target puts 1-eps on the gold class
// and spreads eps uniformly over the full vocabulary.
template <typename T>
Tensor<T> ce_loss(const Tensor<T>& probs, const std::vector<std::int32_t>& targets,
                  const Mask& mask, double smoothing) {
    if (probs.rank() != 3) throw DimensionError("ce_loss expects probabilities [B,T,V]");
    const std::size_t bsz = probs.extent(0);
    const std::size_t time = probs.extent(1);
    const std::size_t v = probs.extent(2);
    if (mask.batch != bsz || mask.time != time || targets.size() != bsz * time)
        throw DimensionError("ce_loss: targets/mask do not match probability grid");
    if (smoothing < 0.0 || smoothing >= 1.0)
        throw ContractError("ce_loss: smoothing must be in [0,1)");

    std::size_t ntok = 0;
    for (auto b : mask.valid) ntok += b ? 1 : 0;
    if (ntok == 0) throw InputError("ce_loss: mask selects no positions");

    const double eps_per_class = smoothing / static_cast<double>(v);
    const double gold_weight = 1.0 - smoothing;
    const auto& pv = probs.values();
    double acc = 0;
    for (std::size_t i = 0; i < bsz * time; ++i) {
        if (!mask.valid[i]) continue;
        const std::int32_t y = targets[i];
        if (y < 0 || static_cast<std::size_t>(y) >= v)
            throw InputError("ce_loss: target id outside vocabulary");
        const T* row = pv.data() + i * v;
        double row_loss = -gold_weight * std::log(static_cast<double>(row[y]));
        if (smoothing > 0.0) {
            double sum_log = 0;
            for (std::size_t j = 0; j < v; ++j) sum_log += std::log(static_cast<double>(row[j]));
            row_loss -= eps_per_class * sum_log;
        }
        acc += row_loss;
    }
    const T value = static_cast<T>(acc / static_cast<double>(ntok));

    auto pn = probs.node();
    auto tgt = std::make_shared<std::vector<std::int32_t>>(targets);
    auto msk = std::make_shared<std::vector<std::uint8_t>>(mask.valid);
    return Tensor<T>::make(
        Shape{}, {value}, {pn},
        [pn, tgt, msk, bsz, time, v, smoothing, ntok](typename Tensor<T>::Node& o) {
            if (!pn->requires_grad) return;
            const T g = o.grad[0];
            const T inv_n = static_cast<T>(1.0 / static_cast<double>(ntok));
            const T eps_pc = static_cast<T>(smoothing / static_cast<double>(v));
            const T gold_w = static_cast<T>(1.0 - smoothing);
            for (std::size_t i = 0; i < bsz * time; ++i) {
                if (!(*msk)[i]) continue;
                const T* row = pn->values.data() + i * v;
                T* grow = pn->grad.data() + i * v;
                const std::size_t y = static_cast<std::size_t>((*tgt)[i]);
                if (eps_pc != T(0))
                    for (std::size_t j = 0; j < v; ++j)
                        grow[j] -= g * inv_n * eps_pc / row[j];
                grow[y] -= g * inv_n * gold_w / row[y];
            }
        });
}

// Token-mean KL(p || q) over non-pad positions; p and q are probability
// grids of identical shape over the same targets. Gradients reach both.
template <typename T>
Tensor<T> kl_loss(const Tensor<T>& p, const Tensor<T>& q, const Mask& mask) {
    if (p.shape() != q.shape())
        throw ContractError("kl_loss: distribution shapes differ: " + shape_str(p.shape()) +
                            " vs " + shape_str(q.shape()));
    if (p.rank() != 3) throw DimensionError("kl_loss expects [B,T,V]");
    const std::size_t bsz = p.extent(0);
    const std::size_t time = p.extent(1);
    const std::size_t v = p.extent(2);
    if (mask.batch != bsz || mask.time != time)
        throw DimensionError("kl_loss: mask does not match distribution grid");

    std::size_t ntok = 0;
    for (auto b : mask.valid) ntok += b ? 1 : 0;
    if (ntok == 0) throw InputError("kl_loss: mask selects no positions");

    const auto& pv = p.values();
    const auto& qv = q.values();
    double acc = 0;
    for (std::size_t i = 0; i < bsz * time; ++i) {
        if (!mask.valid[i]) continue;
        const T* prow = pv.data() + i * v;
        const T* qrow = qv.data() + i * v;
        for (std::size_t j = 0; j < v; ++j) {
            const double pj = static_cast<double>(prow[j]);
            if (pj > 0.0) acc += pj * (std::log(pj) - std::log(static_cast<double>(qrow[j])));
        }
    }
    const T value = static_cast<T>(acc / static_cast<double>(ntok));

    auto pn = p.node();
    auto qn = q.node();
    auto msk = std::make_shared<std::vector<std::uint8_t>>(mask.valid);
    return Tensor<T>::make(
        Shape{}, {value}, {pn, qn},
        [pn, qn, msk, bsz, time, v, ntok](typename Tensor<T>::Node& o) {
            const T g = o.grad[0];
            const T inv_n = static_cast<T>(1.0 / static_cast<double>(ntok));
            for (std::size_t i = 0; i < bsz * time; ++i) {
                if (!(*msk)[i]) continue;
                const T* prow = pn->values.data() + i * v;
                const T* qrow = qn->values.data() + i * v;
                for (std::size_t j = 0; j < v; ++j) {
                    const double pj = static_cast<double>(prow[j]);
                    if (pj <= 0.0) continue;
                    const double lp = std::log(pj);
                    const double lq = std::log(static_cast<double>(qrow[j]));
                    if (pn->requires_grad)
                        pn->grad[i * v + j] += g * inv_n * static_cast<T>(lp - lq + 1.0);
                    if (qn->requires_grad)
                        qn->grad[i * v + j] -= g * inv_n * static_cast<T>(pj) / qrow[j];
                }
            }
        });
}

}  // namespace musr
