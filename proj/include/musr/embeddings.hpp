#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "musr/io.hpp"
#include "musr/model.hpp"
#include "musr/tokenizer.hpp"

// Unit-norm sentence embeddings keyed by sentence id, with the MEMB binary
// file format. Rows are float32; similarity math accumulates in double.

namespace musr {

class EmbeddingStore {
public:
    EmbeddingStore() = default;
    EmbeddingStore(std::uint32_t dim, std::string lang) : dim_(dim), lang_(std::move(lang)) {}

    std::uint32_t dim() const { return dim_; }
    const std::string& lang() const { return lang_; }
    std::size_t size() const { return ids_.size(); }
    const std::vector<std::string>& ids() const { return ids_; }
    const std::string& id(std::size_t row) const { return ids_[row]; }

    const float* row(std::size_t r) const { return rows_.data() + r * dim_; }

    std::size_t row_of(const std::string& id) const {
        auto it = index_.find(id);
        if (it == index_.end()) throw InputError("unknown sentence id: " + id);
        return it->second;
    }

    bool contains(const std::string& id) const { return index_.count(id) != 0; }

    // Appends an L2-normalized copy of `values`. Zero vectors cannot be
    // normalized and are rejected.
    void add(const std::string& id, const std::vector<float>& values) {
        if (values.size() != dim_) throw DimensionError("embedding width does not match store");
        if (!index_.emplace(id, ids_.size()).second)
            throw InputError("duplicate sentence id: " + id);
        double norm_sq = 0;
        for (float v : values) norm_sq += static_cast<double>(v) * static_cast<double>(v);
        if (norm_sq <= 0.0 || !std::isfinite(norm_sq)) {
            index_.erase(id);
            throw NumericError("embedding for id " + id + " cannot be normalized");
        }
        const double inv = 1.0 / std::sqrt(norm_sq);
        ids_.push_back(id);
        for (float v : values) rows_.push_back(static_cast<float>(static_cast<double>(v) * inv));
    }

    void save(const std::string& path) const {
        atomic_write(path, [this](std::ostream& os) {
            os.write("MEMB", 4);
            bin::write_le<std::uint32_t>(os, 1);
            bin::write_le<std::uint32_t>(os, dim_);
            bin::write_le<std::uint64_t>(os, static_cast<std::uint64_t>(ids_.size()));
            bin::write_string(os, lang_);
            for (const auto& id : ids_) bin::write_string(os, id);
            for (float v : rows_) bin::write_f32(os, v);
        });
    }

    static EmbeddingStore load(const std::string& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw InputError("cannot read embedding file: " + path);
        char magic[4];
        is.read(magic, 4);
        if (!is || std::string(magic, 4) != "MEMB")
            throw InputError("bad embedding file magic in " + path);
        const std::uint32_t version = bin::read_le<std::uint32_t>(is);
        if (version != 1)
            throw InputError("unsupported embedding file version " + std::to_string(version));
        const std::uint32_t dim = bin::read_le<std::uint32_t>(is);
        const std::uint64_t count = bin::read_le<std::uint64_t>(is);
        EmbeddingStore store(dim, bin::read_string(is));
        store.ids_.reserve(count);
        for (std::uint64_t i = 0; i < count; ++i) {
            std::string id = bin::read_string(is);
            store.index_.emplace(id, store.ids_.size());
            store.ids_.push_back(std::move(id));
        }
        store.rows_.resize(count * dim);
        for (auto& v : store.rows_) v = bin::read_f32(is);
        return store;
    }

private:
    std::uint32_t dim_ = 0;
    std::string lang_;
    std::vector<std::string> ids_;
    std::vector<float> rows_;
    std::unordered_map<std::string, std::size_t> index_;
};

struct EmbedFailure {
    std::string id;
    std::string reason;
};

struct EmbedResult {
    EmbeddingStore store;
    std::vector<EmbedFailure> failures;
};

// Runs the encoder on each sentence (dropout off) and max-pools. Sentences
// that cannot be embedded (overlong for the model) are recorded and skipped.
// Padding is masked out of attention and pooling, so values do not depend on
// how sentences are grouped into batches.
template <typename T>
EmbedResult embed_corpus(const std::vector<std::string>& sentences,
                         const std::vector<std::string>& ids, SeqModel<T>& model,
                         const Vocabulary& vocab, std::size_t batch_size = 64) {
    if (sentences.size() != ids.size())
        throw InputError("embed_corpus: ids and sentences differ in count");
    NoGradGuard guard;
    EmbedResult result;
    result.store = EmbeddingStore(static_cast<std::uint32_t>(model.config().dim), "");
    std::vector<std::vector<std::int32_t>> rows;
    std::vector<std::size_t> row_origin;
    const std::size_t limit = model.config().max_src_positions;

    auto flush = [&]() {
        if (rows.empty()) return;
        TokenBatch batch = TokenBatch::pack(rows);
        auto enc = model.encode(batch, false, nullptr);
        Tensor<T> emb = model.sentence_embedding(enc.hidden, enc.mask);
        const std::size_t d = model.config().dim;
        std::vector<float> row(d);
        for (std::size_t b = 0; b < rows.size(); ++b) {
            for (std::size_t j = 0; j < d; ++j)
                row[j] = static_cast<float>(emb.values()[b * d + j]);
            try {
                result.store.add(ids[row_origin[b]], row);
            } catch (const Error& e) {
                result.failures.push_back({ids[row_origin[b]], e.what()});
            }
        }
        rows.clear();
        row_origin.clear();
    };

    for (std::size_t i = 0; i < sentences.size(); ++i) {
        std::vector<std::int32_t> encoded = vocab.encode(sentences[i]);
        if (encoded.size() > limit) {
            result.failures.push_back({ids[i], "sentence exceeds max positions"});
            continue;
        }
        rows.push_back(std::move(encoded));
        row_origin.push_back(i);
        if (rows.size() >= batch_size) flush();
    }
    flush();
    return result;
}

}  // namespace musr
