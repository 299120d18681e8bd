#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "musr/embeddings.hpp"
#include "musr/thread_pool.hpp"

// Similarity search and margin-criterion bitext mining over embedding
// stores. All nearest-neighbor search is exact brute force; rows are unit
// norm so cosine is a dot product (f32 inputs, f64 accumulation).

namespace musr {

inline double cosine(const float* a, const float* b, std::size_t dim) {
    double acc = 0;
    for (std::size_t i = 0; i < dim; ++i)
        acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    return acc;
}

namespace detail {

// All cosines from one query row into a store.
inline void cosines_to_store(const float* query, const EmbeddingStore& store,
                             std::vector<double>& out) {
    out.resize(store.size());
    for (std::size_t j = 0; j < store.size(); ++j)
        out[j] = cosine(query, store.row(j), store.dim());
}

// Indices of the k largest cosines, ties broken toward the lower index.
inline std::vector<std::size_t> top_k_indices(const std::vector<double>& cos, std::size_t k) {
    std::vector<std::size_t> idx(cos.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                      [&](std::size_t a, std::size_t b) {
                          if (cos[a] != cos[b]) return cos[a] > cos[b];
                          return a < b;
                      });
    idx.resize(k);
    return idx;
}

}  // namespace detail

struct SearchAccuracy {
    double forward = 0;   // a -> b
    double backward = 0;  // b -> a
    double mean = 0;
};

// Fraction of rows whose cross-lingual nearest neighbor is the gold
// translation, in both directions plus the arithmetic mean. `gold` maps ids
// of `a` to ids of `b` and must be a bijection over both stores.
inline SearchAccuracy similarity_search_accuracy(const EmbeddingStore& a,
                                                 const EmbeddingStore& b,
                                                 const std::map<std::string, std::string>& gold) {
    if (a.size() != b.size())
        throw InputError("similarity search: stores differ in size (" +
                         std::to_string(a.size()) + " vs " + std::to_string(b.size()) + ")");
    if (a.size() == 0) throw InputError("similarity search: empty stores");
    if (gold.size() != a.size())
        throw InputError("similarity search: gold mapping size does not match stores");
    std::map<std::string, std::string> reverse;
    for (const auto& [sa, sb] : gold) {
        if (!a.contains(sa) || !b.contains(sb))
            throw InputError("similarity search: gold pair (" + sa + ", " + sb +
                             ") not present in stores");
        if (!reverse.emplace(sb, sa).second)
            throw InputError("similarity search: gold mapping is not a bijection");
    }

    const auto run_direction = [](const EmbeddingStore& from, const EmbeddingStore& to,
                                  const std::map<std::string, std::string>& map) {
        std::vector<std::uint8_t> hit(from.size(), 0);
        parallel_for(from.size(), [&](std::size_t i0, std::size_t i1) {
            std::vector<double> cos;
            for (std::size_t i = i0; i < i1; ++i) {
                detail::cosines_to_store(from.row(i), to, cos);
                std::size_t best = 0;
                for (std::size_t j = 1; j < cos.size(); ++j)
                    if (cos[j] > cos[best]) best = j;
                hit[i] = to.id(best) == map.at(from.id(i)) ? 1 : 0;
            }
        });
        std::size_t correct = 0;
        for (auto h : hit) correct += h;
        return static_cast<double>(correct) / static_cast<double>(from.size());
    };

    SearchAccuracy acc;
    acc.forward = run_direction(a, b, gold);
    acc.backward = run_direction(b, a, reverse);
    acc.mean = 0.5 * (acc.forward + acc.backward);
    return acc;
}

struct ScoredPair {
    std::string src_id;
    std::string tgt_id;
    double margin_score = 0;
    bool accepted = false;
};

// The margin ratio itself: cos(x,y) over the two averaged k-NN cosine sums.
inline double margin_ratio(double cos_xy, double nn_cos_sum_x, double nn_cos_sum_y,
                           std::size_t k) {
    const double two_k = 2.0 * static_cast<double>(k);
    return cos_xy / (nn_cos_sum_x / two_k + nn_cos_sum_y / two_k);
}

// Ratio margin: cos(x,y) over the mean cosine of each side's k nearest
// neighbors in the other store. Neighborhoods may include the pair itself.
inline double margin_score(const std::string& x_id, const std::string& y_id,
                           const EmbeddingStore& a, const EmbeddingStore& b, std::size_t k) {
    if (k < 1 || k > a.size() || k > b.size())
        throw InputError("margin_score: k=" + std::to_string(k) +
                         " out of range for stores of size " + std::to_string(a.size()) + "/" +
                         std::to_string(b.size()));
    const std::size_t xi = a.row_of(x_id);
    const std::size_t yi = b.row_of(y_id);
    const double cos_xy = cosine(a.row(xi), b.row(yi), a.dim());
    std::vector<double> cos;
    detail::cosines_to_store(a.row(xi), b, cos);
    double sum_x = 0;
    for (std::size_t j : detail::top_k_indices(cos, k)) sum_x += cos[j];
    detail::cosines_to_store(b.row(yi), a, cos);
    double sum_y = 0;
    for (std::size_t i : detail::top_k_indices(cos, k)) sum_y += cos[i];
    return margin_ratio(cos_xy, sum_x, sum_y, k);
}

// Candidate generation (union of forward and backward nearest neighbors),
// margin scoring, thresholding, and a deterministic ordering: score
// descending, ties by (src_id, tgt_id).
inline std::vector<ScoredPair> mine(const EmbeddingStore& a, const EmbeddingStore& b,
                                    std::size_t k, double threshold) {
    if (a.size() == 0 || b.size() == 0) throw InputError("mine: empty embedding store");
    if (k < 1 || k > a.size() || k > b.size())
        throw InputError("mine: k out of range");

    // Per-row k-NN cosine sums for the denominator, then top-1 candidates.
    std::vector<double> nn_sum_a(a.size()), nn_sum_b(b.size());
    std::vector<std::size_t> fwd(a.size()), bwd(b.size());
    parallel_for(a.size(), [&](std::size_t i0, std::size_t i1) {
        std::vector<double> cos;
        for (std::size_t i = i0; i < i1; ++i) {
            detail::cosines_to_store(a.row(i), b, cos);
            nn_sum_a[i] = 0;
            for (std::size_t j : detail::top_k_indices(cos, k)) nn_sum_a[i] += cos[j];
            std::size_t best = 0;
            for (std::size_t j = 1; j < cos.size(); ++j)
                if (cos[j] > cos[best]) best = j;
            fwd[i] = best;
        }
    });
    parallel_for(b.size(), [&](std::size_t j0, std::size_t j1) {
        std::vector<double> cos;
        for (std::size_t j = j0; j < j1; ++j) {
            detail::cosines_to_store(b.row(j), a, cos);
            nn_sum_b[j] = 0;
            for (std::size_t i : detail::top_k_indices(cos, k)) nn_sum_b[j] += cos[i];
            std::size_t best = 0;
            for (std::size_t i = 1; i < cos.size(); ++i)
                if (cos[i] > cos[best]) best = i;
            bwd[j] = best;
        }
    });

    std::set<std::pair<std::size_t, std::size_t>> candidates;
    for (std::size_t i = 0; i < a.size(); ++i) candidates.insert({i, fwd[i]});
    for (std::size_t j = 0; j < b.size(); ++j) candidates.insert({bwd[j], j});

    std::vector<ScoredPair> out;
    for (const auto& [i, j] : candidates) {
        const double score =
            margin_ratio(cosine(a.row(i), b.row(j), a.dim()), nn_sum_a[i], nn_sum_b[j], k);
        if (score >= threshold) out.push_back({a.id(i), b.id(j), score, true});
    }
    std::sort(out.begin(), out.end(), [](const ScoredPair& x, const ScoredPair& y) {
        if (x.margin_score != y.margin_score) return x.margin_score > y.margin_score;
        if (x.src_id != y.src_id) return x.src_id < y.src_id;
        return x.tgt_id < y.tgt_id;
    });
    return out;
}

struct F1Result {
    double precision = 0;
    double recall = 0;
    double f1 = 0;
};

// Standard precision/recall/F1 of mined pairs against a gold pair set.
// Empty mined output scores zero by convention.
inline F1Result f1_against_gold(const std::vector<ScoredPair>& mined,
                                const std::set<std::pair<std::string, std::string>>& gold) {
    if (gold.empty()) throw InputError("f1_against_gold: empty gold set");
    std::set<std::pair<std::string, std::string>> mined_set;
    for (const auto& p : mined) mined_set.insert({p.src_id, p.tgt_id});
    std::size_t correct = 0;
    for (const auto& p : mined_set) correct += gold.count(p);
    F1Result r;
    r.precision = mined_set.empty()
                      ? 0.0
                      : static_cast<double>(correct) / static_cast<double>(mined_set.size());
    r.recall = static_cast<double>(correct) / static_cast<double>(gold.size());
    r.f1 = (r.precision + r.recall) == 0.0
               ? 0.0
               : 2.0 * r.precision * r.recall / (r.precision + r.recall);
    return r;
}

}  // namespace musr
