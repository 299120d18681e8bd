#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "musr/config.hpp"
#include "musr/io.hpp"
#include "musr/rng.hpp"
#include "musr/tensor.hpp"
#include "musr/tokenizer.hpp"

// Sequence-to-sequence model for multilingual sentence embeddings: a
// Transformer encoder whose output is max-pooled into one vector per
// sentence, and a decoder with self-attention only. Each decoder input
// position is the token embedding concatenated with the sentence embedding,
// so the decoder runs at width 2*dim and the pooled vector is the only
// channel from encoder to decoder.

namespace musr {

// Padded id grid for one batch; pad_id marks unused slots.
struct TokenBatch {
    std::size_t batch = 0;
    std::size_t time = 0;
    std::vector<std::int32_t> ids;

    static TokenBatch pack(const std::vector<std::vector<std::int32_t>>& rows) {
        TokenBatch tb;
        tb.batch = rows.size();
        for (const auto& r : rows) tb.time = std::max(tb.time, r.size());
        tb.ids.assign(tb.batch * tb.time, Vocabulary::pad_id);
        for (std::size_t b = 0; b < rows.size(); ++b)
            for (std::size_t t = 0; t < rows[b].size(); ++t) tb.ids[b * tb.time + t] = rows[b][t];
        return tb;
    }

    Mask valid_mask() const {
        Mask m{batch, time, std::vector<std::uint8_t>(batch * time)};
        for (std::size_t i = 0; i < ids.size(); ++i) m.valid[i] = ids[i] != Vocabulary::pad_id;
        return m;
    }

    std::int32_t at(std::size_t b, std::size_t t) const { return ids[b * time + t]; }
};

// Teacher forcing: prepend bos and drop the trailing eos, keeping padding.
inline TokenBatch teacher_input(const TokenBatch& target) {
    TokenBatch in = target;
    for (std::size_t b = 0; b < target.batch; ++b) {
        in.ids[b * in.time] = Vocabulary::bos_id;
        for (std::size_t t = 1; t < in.time; ++t) {
            const std::int32_t prev = target.at(b, t - 1);
            in.ids[b * in.time + t] = prev == Vocabulary::eos_id ? Vocabulary::pad_id : prev;
        }
    }
    return in;
}

namespace detail {

template <typename T>
std::vector<T> sinusoid_table(std::size_t positions, std::size_t dim) {
    std::vector<T> table(positions * dim);
    for (std::size_t p = 0; p < positions; ++p)
        for (std::size_t j = 0; j < dim; ++j) {
            const double angle =
                static_cast<double>(p) /
                std::pow(10000.0, 2.0 * static_cast<double>(j / 2) / static_cast<double>(dim));
            table[p * dim + j] =
                static_cast<T>((j % 2 == 0) ? std::sin(angle) : std::cos(angle));
        }
    return table;
}

}  // namespace detail

template <typename T>
class SeqModel {
public:
    struct Block {
        Tensor<T> ln1_g, ln1_b;
        Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
        Tensor<T> ln2_g, ln2_b;
        Tensor<T> ffn_w1, ffn_b1, ffn_w2, ffn_b2;
    };

    explicit SeqModel(const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
        cfg.validate();
        const std::size_t d = cfg.dim;
        const std::size_t v = cfg.vocab_size;
        tok_emb_ = Tensor<T>({v, d}, true);
        {
            const double std_dev = 1.0 / std::sqrt(static_cast<double>(d));
            for (auto& x : tok_emb_.values()) x = static_cast<T>(rng.normal() * std_dev);
        }
        reg("tok_emb", tok_emb_);
        enc_.resize(cfg.enc_layers);
        for (std::size_t i = 0; i < cfg.enc_layers; ++i)
            init_block(enc_[i], "enc." + std::to_string(i), d, cfg.enc_ffn_dim, rng);
        enc_ln_g_ = ones({d});
        enc_ln_b_ = Tensor<T>({d}, true);
        reg("enc.ln.g", enc_ln_g_);
        reg("enc.ln.b", enc_ln_b_);

        const std::size_t w = 2 * d;
        dec_.resize(cfg.dec_layers);
        for (std::size_t i = 0; i < cfg.dec_layers; ++i)
            init_block(dec_[i], "dec." + std::to_string(i), w, cfg.dec_ffn_dim, rng);
        dec_ln_g_ = ones({w});
        dec_ln_b_ = Tensor<T>({w}, true);
        reg("dec.ln.g", dec_ln_g_);
        reg("dec.ln.b", dec_ln_b_);

        out_w_ = xavier({w, v}, rng);
        out_b_ = Tensor<T>({v}, true);
        reg("out.w", out_w_);
        reg("out.b", out_b_);

        enc_pos_ = detail::sinusoid_table<T>(cfg.max_src_positions, d);
        dec_pos_ = detail::sinusoid_table<T>(cfg.max_tgt_positions, d);
    }

    const ModelConfig& config() const { return cfg_; }

    std::vector<Tensor<T>> parameters() {
        std::vector<Tensor<T>> out;
        out.reserve(registry_.size());
        for (auto& [name, t] : registry_) out.push_back(t);
        return out;
    }

    const std::vector<std::pair<std::string, Tensor<T>>>& named_parameters() const {
        return registry_;
    }

    void zero_grads() {
        for (auto& [name, t] : registry_) t.zero_grad();
    }

    struct Encoded {
        Tensor<T> hidden;
        Mask mask;
    };

    Encoded encode(const TokenBatch& src, bool training = false, Rng* dropout_rng = nullptr) {
        if (src.time > cfg_.max_src_positions)
            throw InputError("source length " + std::to_string(src.time) +
                             " exceeds max positions " +
                             std::to_string(cfg_.max_src_positions));
        Mask mask = src.valid_mask();
        Tensor<T> x = embed_tokens(src, enc_pos_, cfg_.dim);
        x = apply_dropout(x, training, dropout_rng);
        for (auto& blk : enc_) x = run_block(blk, x, cfg_.heads, &mask, false, training, dropout_rng);
        x = layer_norm(x, enc_ln_g_, enc_ln_b_);
        return {x, std::move(mask)};
    }

    // Per-dimension max over non-pad encoder states.
    Tensor<T> sentence_embedding(const Tensor<T>& hidden, const Mask& mask) {
        return masked_max_time(hidden, mask);
    }

    Tensor<T> decode(const TokenBatch& tgt_in, const Tensor<T>& sent_emb, bool training = false,
                     Rng* dropout_rng = nullptr) {
        if (tgt_in.time > cfg_.max_tgt_positions)
            throw InputError("target length " + std::to_string(tgt_in.time) +
                             " exceeds max positions " +
                             std::to_string(cfg_.max_tgt_positions));
        if (sent_emb.rank() != 2 || sent_emb.extent(0) != tgt_in.batch ||
            sent_emb.extent(1) != cfg_.dim)
            throw ContractError("decode: sentence embedding width does not match model dim");
        for (std::size_t b = 0; b < tgt_in.batch; ++b)
            if (tgt_in.at(b, 0) != Vocabulary::bos_id)
                throw ContractError("decode: target input must begin with bos");
        Tensor<T> e = embed_tokens(tgt_in, dec_pos_, cfg_.dim);
        Tensor<T> x = concat_features(e, broadcast_time(sent_emb, tgt_in.time));
        x = apply_dropout(x, training, dropout_rng);
        for (auto& blk : dec_)
            x = run_block(blk, x, cfg_.heads, nullptr, /*causal=*/true, training, dropout_rng);
        x = layer_norm(x, dec_ln_g_, dec_ln_b_);
        return add_bias(matmul(x, out_w_), out_b_);
    }

    // Full teacher-forced pass: probabilities over the vocabulary, one row
    // per target position.
    Tensor<T> forward_probs(const TokenBatch& src, const TokenBatch& tgt, bool training = false,
                            Rng* dropout_rng = nullptr) {
        Encoded enc = encode(src, training, dropout_rng);
        Tensor<T> emb = sentence_embedding(enc.hidden, enc.mask);
        return softmax(decode(teacher_input(tgt), emb, training, dropout_rng));
    }

    void save_checkpoint(const std::string& path) const {
        atomic_write(path, [this](std::ostream& os) {
            os.write("MUSR", 4);
            bin::write_le<std::uint32_t>(os, 1);
            for (const auto& [name, t] : registry_) {
                bin::write_string(os, name);
                os.put(static_cast<char>(t.rank()));
                for (std::size_t e : t.shape())
                    bin::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(e));
                for (const T v : t.values()) bin::write_f32(os, static_cast<float>(v));
            }
        });
        save_model_config(cfg_, path + ".cfg");
    }

    struct CheckpointRecord {
        std::string name;
        Shape shape;
        std::vector<float> values;
    };

    static std::vector<CheckpointRecord> read_checkpoint(const std::string& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw InputError("cannot read checkpoint: " + path);
        char magic[4];
        is.read(magic, 4);
        if (!is || std::string(magic, 4) != "MUSR")
            throw InputError("bad checkpoint magic in " + path);
        const std::uint32_t version = bin::read_le<std::uint32_t>(is);
        if (version != 1)
            throw InputError("unsupported checkpoint version " + std::to_string(version));
        std::vector<CheckpointRecord> records;
        while (is.peek() != std::char_traits<char>::eof()) {
            CheckpointRecord rec;
            rec.name = bin::read_string(is);
            const int rank = is.get();
            if (rank < 0) throw InputError("unexpected end of checkpoint");
            rec.shape.resize(static_cast<std::size_t>(rank));
            std::size_t numel = 1;
            for (auto& e : rec.shape) {
                e = bin::read_le<std::uint32_t>(is);
                numel *= e;
            }
            rec.values.resize(numel);
            for (auto& v : rec.values) v = bin::read_f32(is);
            records.push_back(std::move(rec));
        }
        return records;
    }

    void load_checkpoint(const std::string& path) {
        auto records = read_checkpoint(path);
        std::map<std::string, CheckpointRecord*> by_name;
        for (auto& r : records) by_name[r.name] = &r;
        for (auto& [name, t] : registry_) {
            auto it = by_name.find(name);
            if (it == by_name.end())
                throw InputError("checkpoint " + path + " is missing parameter " + name);
            if (it->second->shape != t.shape())
                throw InputError("checkpoint parameter " + name + " has shape " +
                                 shape_str(it->second->shape) + ", model expects " +
                                 shape_str(t.shape()));
            auto& dst = t.values();
            for (std::size_t i = 0; i < dst.size(); ++i)
                dst[i] = static_cast<T>(it->second->values[i]);
            by_name.erase(it);
        }
        if (!by_name.empty())
            throw InputError("checkpoint " + path + " has unknown parameter " +
                             by_name.begin()->first);
    }

private:
    void reg(std::string name, Tensor<T>& t) { registry_.emplace_back(std::move(name), t); }

    Tensor<T> ones(Shape shape) {
        Tensor<T> t(std::move(shape), true);
        std::fill(t.values().begin(), t.values().end(), T(1));
        return t;
    }

    Tensor<T> xavier(Shape shape, Rng& rng) {
        Tensor<T> t(shape, true);
        const double fan_in = static_cast<double>(shape[0]);
        const double fan_out = static_cast<double>(shape[1]);
        const double limit = std::sqrt(6.0 / (fan_in + fan_out));
        for (auto& x : t.values()) x = static_cast<T>(rng.uniform(-limit, limit));
        return t;
    }

    void init_block(Block& blk, const std::string& prefix, std::size_t width,
                    std::size_t ffn_dim, Rng& rng) {
        blk.ln1_g = ones({width});
        blk.ln1_b = Tensor<T>({width}, true);
        blk.wq = xavier({width, width}, rng);
        blk.bq = Tensor<T>({width}, true);
        blk.wk = xavier({width, width}, rng);
        blk.bk = Tensor<T>({width}, true);
        blk.wv = xavier({width, width}, rng);
        blk.bv = Tensor<T>({width}, true);
        blk.wo = xavier({width, width}, rng);
        blk.bo = Tensor<T>({width}, true);
        blk.ln2_g = ones({width});
        blk.ln2_b = Tensor<T>({width}, true);
        blk.ffn_w1 = xavier({width, ffn_dim}, rng);
        blk.ffn_b1 = Tensor<T>({ffn_dim}, true);
        blk.ffn_w2 = xavier({ffn_dim, width}, rng);
        blk.ffn_b2 = Tensor<T>({width}, true);
        reg(prefix + ".ln1.g", blk.ln1_g);
        reg(prefix + ".ln1.b", blk.ln1_b);
        reg(prefix + ".attn.wq", blk.wq);
        reg(prefix + ".attn.bq", blk.bq);
        reg(prefix + ".attn.wk", blk.wk);
        reg(prefix + ".attn.bk", blk.bk);
        reg(prefix + ".attn.wv", blk.wv);
        reg(prefix + ".attn.bv", blk.bv);
        reg(prefix + ".attn.wo", blk.wo);
        reg(prefix + ".attn.bo", blk.bo);
        reg(prefix + ".ln2.g", blk.ln2_g);
        reg(prefix + ".ln2.b", blk.ln2_b);
        reg(prefix + ".ffn.w1", blk.ffn_w1);
        reg(prefix + ".ffn.b1", blk.ffn_b1);
        reg(prefix + ".ffn.w2", blk.ffn_w2);
        reg(prefix + ".ffn.b2", blk.ffn_b2);
    }

    Tensor<T> embed_tokens(const TokenBatch& tb, const std::vector<T>& pos_table,
                           std::size_t d) {
        Tensor<T> x = embedding_lookup(tok_emb_, tb.ids, Shape{tb.batch, tb.time});
        x = scale(x, static_cast<T>(std::sqrt(static_cast<double>(d))));
        std::vector<T> pos(pos_table.begin(), pos_table.begin() + tb.time * d);
        return add_time_bias(x, Tensor<T>::from({tb.time, d}, std::move(pos)));
    }

    Tensor<T> apply_dropout(const Tensor<T>& x, bool training, Rng* rng) {
        if (!training || cfg_.dropout == 0.0) return x;
        if (rng == nullptr)
            throw ContractError("training-mode forward pass needs a dropout rng");
        return dropout(x, cfg_.dropout, *rng, true);
    }

    Tensor<T> run_block(Block& blk, const Tensor<T>& input, std::size_t heads,
                        const Mask* key_mask, bool causal, bool training, Rng* rng) {
        Tensor<T> h = layer_norm(input, blk.ln1_g, blk.ln1_b);
        Tensor<T> q = add_bias(matmul(h, blk.wq), blk.bq);
        Tensor<T> k = add_bias(matmul(h, blk.wk), blk.bk);
        Tensor<T> v = add_bias(matmul(h, blk.wv), blk.bv);
        Tensor<T> a = self_attention(q, k, v, heads, key_mask, causal);
        a = add_bias(matmul(a, blk.wo), blk.bo);
        a = apply_dropout(a, training, rng);
        Tensor<T> x = add(input, a);
        Tensor<T> h2 = layer_norm(x, blk.ln2_g, blk.ln2_b);
        Tensor<T> f = add_bias(matmul(relu(add_bias(matmul(h2, blk.ffn_w1), blk.ffn_b1)),
                                      blk.ffn_w2),
                               blk.ffn_b2);
        f = apply_dropout(f, training, rng);
        return add(x, f);
    }

    ModelConfig cfg_;
    Tensor<T> tok_emb_;
    std::vector<Block> enc_;
    Tensor<T> enc_ln_g_, enc_ln_b_;
    std::vector<Block> dec_;
    Tensor<T> dec_ln_g_, dec_ln_b_;
    Tensor<T> out_w_, out_b_;
    std::vector<T> enc_pos_, dec_pos_;
    std::vector<std::pair<std::string, Tensor<T>>> registry_;
};

}  // namespace musr
