#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "musr/config.hpp"
#include "musr/corpus.hpp"
#include "musr/io.hpp"
#include "musr/losses.hpp"
#include "musr/model.hpp"
#include "musr/optim.hpp"
#include "musr/tokenizer.hpp"

// Two-phase training loop. Phase 1 minimizes translation cross-entropy over
// many-to-one batches; phase 2 starts from a phase-1 checkpoint and adds the
// consistency term computed on the copied target-target pair.

namespace musr {

struct EncodedPair {
    std::vector<std::int32_t> src;
    std::vector<std::int32_t> tgt;
};

struct EncodeStats {
    std::vector<EncodedPair> pairs;
    std::size_t skipped_overlong = 0;
};

inline EncodeStats encode_pairs(const std::vector<SentencePair>& pairs, const Vocabulary& vocab,
                                std::size_t max_src_positions, std::size_t max_tgt_positions) {
    EncodeStats out;
    out.pairs.reserve(pairs.size());
    for (const auto& p : pairs) {
        EncodedPair e{vocab.encode(p.src), vocab.encode(p.tgt)};
        if (e.src.size() > max_src_positions || e.tgt.size() > max_tgt_positions) {
            ++out.skipped_overlong;
            continue;
        }
        out.pairs.push_back(std::move(e));
    }
    return out;
}

struct TrainBatch {
    TokenBatch src;
    TokenBatch tgt;
    std::size_t target_tokens = 0;  // non-pad target positions
    std::size_t padded_tokens = 0;  // rows * padded width, the budget measure
};

// Length-bucketed batching: sort by (target length, source length) and fill
// greedily while rows * max(padded src, padded tgt) stays within the budget.
inline std::vector<TrainBatch> make_batches(const std::vector<EncodedPair>& pairs,
                                            std::size_t max_tokens_per_batch) {
    std::vector<std::size_t> order(pairs.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const auto ka = std::make_tuple(pairs[a].tgt.size(), pairs[a].src.size(), a);
        const auto kb = std::make_tuple(pairs[b].tgt.size(), pairs[b].src.size(), b);
        return ka < kb;
    });
    std::vector<TrainBatch> batches;
    std::vector<std::vector<std::int32_t>> src_rows, tgt_rows;
    std::size_t max_s = 0, max_t = 0;
    auto flush = [&]() {
        if (src_rows.empty()) return;
        TrainBatch b;
        b.src = TokenBatch::pack(src_rows);
        b.tgt = TokenBatch::pack(tgt_rows);
        for (const auto& row : tgt_rows) b.target_tokens += row.size();
        b.padded_tokens = src_rows.size() * std::max(b.src.time, b.tgt.time);
        batches.push_back(std::move(b));
        src_rows.clear();
        tgt_rows.clear();
        max_s = max_t = 0;
    };
    for (std::size_t idx : order) {
        const auto& p = pairs[idx];
        const std::size_t ns = std::max(max_s, p.src.size());
        const std::size_t nt = std::max(max_t, p.tgt.size());
        const std::size_t would = (src_rows.size() + 1) * std::max(ns, nt);
        if (!src_rows.empty() && would > max_tokens_per_batch) flush();
        src_rows.push_back(p.src);
        tgt_rows.push_back(p.tgt);
        max_s = std::max(max_s, p.src.size());
        max_t = std::max(max_t, p.tgt.size());
    }
    flush();
    return batches;
}

template <typename T>
struct LossParts {
    Tensor<T> total;
    double ce = 0;
    double kl = 0;
};

// Translation loss plus, when alpha > 0, the consistency term: the KL
// divergence between the prediction for (src, tgt) and the prediction for
// the copied pair (tgt, tgt). Gradients flow through both branches.
template <typename T>
LossParts<T> phase_loss(SeqModel<T>& model, const TrainBatch& batch, double alpha,
                        double label_smoothing, bool training, Rng* dropout_rng) {
    LossParts<T> parts;
    Tensor<T> f_xy = model.forward_probs(batch.src, batch.tgt, training, dropout_rng);
    const Mask tgt_mask = batch.tgt.valid_mask();
    Tensor<T> ce = ce_loss(f_xy, batch.tgt.ids, tgt_mask, label_smoothing);
    parts.ce = static_cast<double>(ce.item());
    if (alpha > 0.0) {
        Tensor<T> f_yy = model.forward_probs(batch.tgt, batch.tgt, training, dropout_rng);
        Tensor<T> kl = kl_loss(f_xy, f_yy, tgt_mask);
        parts.kl = static_cast<double>(kl.item());
        parts.total = add(ce, scale(kl, static_cast<T>(alpha)));
    } else {
        parts.total = ce;
    }
    return parts;
}

struct TrainResult {
    std::string metrics_log;  // one line per step: step ce kl total lr tokens
    std::size_t steps = 0;
    double first_ce = 0;
    double last_ce = 0;
    bool stopped_early = false;
    std::size_t skipped_overlong = 0;
};

template <typename T>
TrainResult train(SeqModel<T>& model, const std::vector<SentencePair>& corpus,
                  const Vocabulary& vocab, const TrainConfig& cfg) {
    cfg.validate();
    if (cfg.phase == TrainPhase::CrossConst) {
        if (cfg.init_checkpoint.empty())
            throw ContractError(
                "crossconst phase requires a pretrain checkpoint (init_checkpoint)");
        model.load_checkpoint(cfg.init_checkpoint);
    }
    const double alpha = cfg.phase == TrainPhase::CrossConst ? cfg.consistency_alpha : 0.0;

    // In the consistency phase the target side also runs through the encoder,
    // so it must respect the source position limit as well.
    const std::size_t src_limit = model.config().max_src_positions;
    std::size_t tgt_limit = model.config().max_tgt_positions;
    if (alpha > 0.0) tgt_limit = std::min(tgt_limit, src_limit);
    EncodeStats encoded = encode_pairs(corpus, vocab, src_limit, tgt_limit);
    {
        // A single pair must fit the batch budget on its own.
        std::vector<EncodedPair> fitting;
        fitting.reserve(encoded.pairs.size());
        for (auto& p : encoded.pairs) {
            if (std::max(p.src.size(), p.tgt.size()) > cfg.max_tokens_per_batch)
                ++encoded.skipped_overlong;
            else
                fitting.push_back(std::move(p));
        }
        encoded.pairs = std::move(fitting);
    }
    if (encoded.pairs.empty()) throw InputError("training corpus is empty after encoding");

    Rng root(cfg.seed);
    Rng shuffle_rng = root.fork(1);
    Rng dropout_rng = root.fork(2);
    Rng split_rng = root.fork(3);

    // Deterministic validation split.
    std::vector<EncodedPair> train_pairs;
    std::vector<EncodedPair> val_pairs;
    if (cfg.val_fraction > 0.0) {
        std::vector<std::size_t> idx(encoded.pairs.size());
        std::iota(idx.begin(), idx.end(), 0);
        split_rng.shuffle(idx);
        const std::size_t n_val = std::max<std::size_t>(
            1, static_cast<std::size_t>(cfg.val_fraction * static_cast<double>(idx.size())));
        for (std::size_t i = 0; i < idx.size(); ++i)
            (i < n_val ? val_pairs : train_pairs).push_back(encoded.pairs[idx[i]]);
    } else {
        train_pairs = std::move(encoded.pairs);
    }
    if (train_pairs.empty()) throw InputError("no training pairs left after the split");

    auto batches = make_batches(train_pairs, cfg.max_tokens_per_batch);
    auto val_batches = make_batches(val_pairs, cfg.max_tokens_per_batch);

    auto params = model.parameters();
    AdamState<T> adam(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.base_lr, cfg.warmup_steps);
    adam.attach(params);

    TrainResult result;
    result.skipped_overlong = encoded.skipped_overlong;
    model.zero_grads();

    auto validate = [&]() -> double {
        NoGradGuard guard;
        double total = 0;
        std::size_t tokens = 0;
        for (const auto& b : val_batches) {
            LossParts<T> parts = phase_loss(model, b, alpha, cfg.label_smoothing, false, nullptr);
            total += static_cast<double>(parts.total.item()) *
                     static_cast<double>(b.target_tokens);
            tokens += b.target_tokens;
        }
        return tokens == 0 ? 0.0 : total / static_cast<double>(tokens);
    };

    double best_val = 0;
    std::size_t bad_evals = 0;
    bool have_best = false;

    std::vector<std::size_t> order(batches.size());
    std::iota(order.begin(), order.end(), 0);
    std::size_t cursor = order.size();  // forces a shuffle on first use

    char line[160];
    for (std::size_t step = 1; step <= cfg.max_steps; ++step) {
        if (cursor >= order.size()) {
            shuffle_rng.shuffle(order);
            cursor = 0;
        }
        const TrainBatch& batch = batches[order[cursor++]];

        LossParts<T> parts =
            phase_loss(model, batch, alpha, cfg.label_smoothing, true, &dropout_rng);
        const double total_value = static_cast<double>(parts.total.item());
        if (!std::isfinite(total_value))
            throw NumericError("training aborted: non-finite loss at step " +
                               std::to_string(step) + " (ce=" + std::to_string(parts.ce) +
                               ", kl=" + std::to_string(parts.kl) + ")");

        backward(parts.total);
        adam.step_update(params);
        model.zero_grads();
        result.steps = step;
        result.last_ce = parts.ce;
        if (step == 1) result.first_ce = parts.ce;

        if (cfg.log_every != 0 && (step % cfg.log_every == 0 || step == 1)) {
            std::snprintf(line, sizeof(line), "%zu\t%.6f\t%.6f\t%.6f\t%.8f\t%zu\n", step,
                          parts.ce, parts.kl, total_value, adam.current_lr(),
                          batch.target_tokens);
            result.metrics_log += line;
        }

        if (cfg.checkpoint_every != 0 && !cfg.out_checkpoint.empty() &&
            step % cfg.checkpoint_every == 0)
            model.save_checkpoint(cfg.out_checkpoint);

        if (cfg.eval_every != 0 && !val_batches.empty() && step % cfg.eval_every == 0) {
            const double v = validate();
            if (!have_best || v < best_val) {
                best_val = v;
                have_best = true;
                bad_evals = 0;
            } else if (++bad_evals >= cfg.patience) {
                result.stopped_early = true;
                break;
            }
        }
    }

    if (!cfg.out_checkpoint.empty()) model.save_checkpoint(cfg.out_checkpoint);
    if (!cfg.metrics_path.empty())
        atomic_write(cfg.metrics_path,
                     [&](std::ostream& os) { os << result.metrics_log; }, false);
    return result;
}

}  // namespace musr
