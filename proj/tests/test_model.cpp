#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <map>
#include <vector>

#include "musr/model.hpp"
#include "support/gradcheck.hpp"

using namespace musr;

namespace {

ModelConfig micro_config(std::size_t vocab = 12) {
    ModelConfig cfg;
    cfg.dim = 8;
    cfg.heads = 2;
    cfg.enc_layers = 2;
    cfg.dec_layers = 1;
    cfg.enc_ffn_dim = 12;
    cfg.dec_ffn_dim = 20;
    cfg.vocab_size = vocab;
    cfg.max_src_positions = 16;
    cfg.max_tgt_positions = 16;
    cfg.dropout = 0.0;
    return cfg;
}

}  // namespace

TEST_CASE("encoder output shape and pad mask", "[model]") {
    Rng rng(1);
    SeqModel<double> model(micro_config(), rng);
    TokenBatch src = TokenBatch::pack({{4, 5, 6}, {4, 5, 6, 7, 8}});
    auto enc = model.encode(src);
    REQUIRE(enc.hidden.shape() == Shape{2, 5, 8});
    REQUIRE(enc.mask.at(0, 2));
    REQUIRE_FALSE(enc.mask.at(0, 3));
    REQUIRE_FALSE(enc.mask.at(0, 4));
    REQUIRE(enc.mask.at(1, 4));
}

TEST_CASE("encoder is batch equivariant", "[model]") {
    Rng rng(2);
    SeqModel<double> model(micro_config(), rng);
    TokenBatch ab = TokenBatch::pack({{4, 5, 6}, {7, 8, 9, 10, 11}});
    TokenBatch ba = TokenBatch::pack({{7, 8, 9, 10, 11}, {4, 5, 6}});
    auto enc_ab = model.encode(ab);
    auto enc_ba = model.encode(ba);
    const std::size_t row = 5 * 8;
    for (std::size_t i = 0; i < row; ++i) {
        REQUIRE(enc_ab.hidden.values()[i] == enc_ba.hidden.values()[row + i]);
        REQUIRE(enc_ab.hidden.values()[row + i] == enc_ba.hidden.values()[i]);
    }
}

TEST_CASE("identical rows produce identical encoder outputs", "[model]") {
    Rng rng(3);
    SeqModel<double> model(micro_config(), rng);
    TokenBatch src = TokenBatch::pack({{4, 5, 6, 7}, {4, 5, 6, 7}});
    auto enc = model.encode(src);
    const std::size_t row = 4 * 8;
    double worst = 0;
    for (std::size_t i = 0; i < row; ++i)
        worst = std::max(worst,
                         std::abs(enc.hidden.values()[i] - enc.hidden.values()[row + i]));
    REQUIRE(worst <= 1e-6);
}

TEST_CASE("overlong sequences are rejected", "[model]") {
    Rng rng(4);
    SeqModel<double> model(micro_config(), rng);
    std::vector<std::int32_t> long_row(17, 4);
    TokenBatch src = TokenBatch::pack({long_row});
    REQUIRE_THROWS_AS(model.encode(src), InputError);
}

TEST_CASE("sentence embedding of a single position is that hidden vector", "[model]") {
    Rng rng(5);
    SeqModel<double> model(micro_config(), rng);
    TokenBatch src = TokenBatch::pack({{4}});
    auto enc = model.encode(src);
    auto emb = model.sentence_embedding(enc.hidden, enc.mask);
    REQUIRE(emb.shape() == Shape{1, 8});
    for (std::size_t j = 0; j < 8; ++j) REQUIRE(emb.values()[j] == enc.hidden.values()[j]);
}

TEST_CASE("sentence embedding is the per-dimension max", "[model]") {
    auto hidden = Tensor<double>::from({1, 2, 2}, {1, 5, 3, 2});
    Mask mask{1, 2, {1, 1}};
    auto emb = masked_max_time(hidden, mask);
    REQUIRE(emb.values()[0] == 3.0);
    REQUIRE(emb.values()[1] == 5.0);
}

TEST_CASE("decoder needs bos and a matching embedding width", "[model]") {
    Rng rng(6);
    SeqModel<double> model(micro_config(), rng);
    TokenBatch bad = TokenBatch::pack({{4, 5}});
    Tensor<double> emb({1, 8});
    REQUIRE_THROWS_AS(model.decode(bad, emb), ContractError);
    TokenBatch good = TokenBatch::pack({{Vocabulary::bos_id, 5}});
    Tensor<double> wrong({1, 7});
    REQUIRE_THROWS_AS(model.decode(good, wrong), ContractError);
    auto logits = model.decode(good, emb);
    REQUIRE(logits.shape() == Shape{1, 2, 12});
}

TEST_CASE("the sentence embedding is the only encoder-decoder channel", "[model]") {
    Rng rng(7);
    SeqModel<double> model(micro_config(), rng);
    TokenBatch src1 = TokenBatch::pack({{4, 5, 6}});
    TokenBatch src2 = TokenBatch::pack({{7, 8, 9, 10}});
    auto enc1 = model.encode(src1);
    auto emb1 = model.sentence_embedding(enc1.hidden, enc1.mask);
    TokenBatch tgt_in = TokenBatch::pack({{Vocabulary::bos_id, 5, 6}});
    auto logits_a = model.decode(tgt_in, emb1);
    // Run a completely different source through the encoder, then reuse the
    // first embedding: the decoder cannot see any other encoder state.
    auto enc2 = model.encode(src2);
    (void)model.sentence_embedding(enc2.hidden, enc2.mask);
    auto logits_b = model.decode(tgt_in, emb1);
    REQUIRE(logits_a.values() == logits_b.values());
}

TEST_CASE("causal masking: perturbing a later target leaves earlier logits alone",
          "[model]") {
    Rng rng(8);
    SeqModel<double> model(micro_config(), rng);
    TokenBatch src = TokenBatch::pack({{4, 5, 6}});
    auto enc = model.encode(src);
    auto emb = model.sentence_embedding(enc.hidden, enc.mask);
    TokenBatch t1 = TokenBatch::pack({{Vocabulary::bos_id, 5, 6, 7}});
    TokenBatch t2 = TokenBatch::pack({{Vocabulary::bos_id, 5, 6, 9}});  // differs at j=3
    auto l1 = model.decode(t1, emb);
    auto l2 = model.decode(t2, emb);
    const std::size_t v = 12;
    for (std::size_t t = 0; t < 3; ++t)
        for (std::size_t j = 0; j < v; ++j)
            REQUIRE(l1.values()[t * v + j] == l2.values()[t * v + j]);
    bool last_differs = false;
    for (std::size_t j = 0; j < v; ++j)
        last_differs = last_differs || l1.values()[3 * v + j] != l2.values()[3 * v + j];
    REQUIRE(last_differs);
}

TEST_CASE("forward probabilities are normalized", "[model]") {
    Rng rng(9);
    SeqModel<double> model(micro_config(), rng);
    TokenBatch src = TokenBatch::pack({{4, 5, 6, 2}, {7, 8, 2}});
    TokenBatch tgt = TokenBatch::pack({{9, 10, 2}, {11, 2}});
    auto probs = model.forward_probs(src, tgt);
    REQUIRE(probs.shape() == Shape{2, 3, 12});
    for (std::size_t r = 0; r < 6; ++r) {
        double s = 0;
        for (std::size_t j = 0; j < 12; ++j) s += probs.values()[r * 12 + j];
        REQUIRE(s == Catch::Approx(1.0).margin(1e-6));
    }
    // The copied pair runs through the same entry point.
    auto copied = model.forward_probs(tgt, tgt);
    REQUIRE(copied.shape() == Shape{2, 3, 12});
}

TEST_CASE("micro model forward matches an independent hand trace", "[model]") {
    ModelConfig cfg;
    cfg.dim = 2;
    cfg.heads = 1;
    cfg.enc_layers = 1;
    cfg.dec_layers = 1;
    cfg.enc_ffn_dim = 3;
    cfg.dec_ffn_dim = 5;
    cfg.vocab_size = 5;
    cfg.max_src_positions = 4;
    cfg.max_tgt_positions = 4;
    cfg.dropout = 0.0;
    Rng rng(10);
    SeqModel<double> model(cfg, rng);

    std::map<std::string, std::vector<double>> P;
    for (const auto& [name, t] : model.named_parameters()) P[name] = t.values();

    const std::int32_t src_id = 4;
    const std::int32_t tgt_id = 4;
    TokenBatch src = TokenBatch::pack({{src_id}});
    TokenBatch tgt = TokenBatch::pack({{tgt_id}});
    auto probs = model.forward_probs(src, tgt);

    // Plain-double re-derivation, T=1 so attention reduces to its value path.
    const double sqrt_d = std::sqrt(2.0);
    auto layer_norm2 = [](const std::vector<double>& x, const std::vector<double>& g,
                          const std::vector<double>& b) {
        const std::size_t d = x.size();
        double mean = 0;
        for (double v : x) mean += v;
        mean /= static_cast<double>(d);
        double var = 0;
        for (double v : x) var += (v - mean) * (v - mean);
        var /= static_cast<double>(d);
        std::vector<double> y(d);
        for (std::size_t i = 0; i < d; ++i)
            y[i] = (x[i] - mean) / std::sqrt(var + 1e-5) * g[i] + b[i];
        return y;
    };
    auto linear = [](const std::vector<double>& x, const std::vector<double>& w,
                     const std::vector<double>& b, std::size_t in, std::size_t out) {
        std::vector<double> y(out, 0.0);
        for (std::size_t j = 0; j < out; ++j) {
            for (std::size_t i = 0; i < in; ++i) y[j] += x[i] * w[i * out + j];
            y[j] += b[j];
        }
        return y;
    };
    auto run_block = [&](std::vector<double> x, const std::string& pre, std::size_t w,
                         std::size_t ffn) {
        auto h = layer_norm2(x, P[pre + ".ln1.g"], P[pre + ".ln1.b"]);
        // Single position: softmax over one score is 1, so attention output
        // is exactly the value projection.
        auto v = linear(h, P[pre + ".attn.wv"], P[pre + ".attn.bv"], w, w);
        auto a = linear(v, P[pre + ".attn.wo"], P[pre + ".attn.bo"], w, w);
        for (std::size_t i = 0; i < w; ++i) x[i] += a[i];
        auto h2 = layer_norm2(x, P[pre + ".ln2.g"], P[pre + ".ln2.b"]);
        auto f1 = linear(h2, P[pre + ".ffn.w1"], P[pre + ".ffn.b1"], w, ffn);
        for (auto& t : f1) t = t > 0 ? t : 0;
        auto f2 = linear(f1, P[pre + ".ffn.w2"], P[pre + ".ffn.b2"], ffn, w);
        for (std::size_t i = 0; i < w; ++i) x[i] += f2[i];
        return x;
    };

    // Encoder: embed src, position 0 adds (sin 0, cos 0) = (0, 1).
    std::vector<double> x = {P["tok_emb"][src_id * 2 + 0] * sqrt_d + 0.0,
                             P["tok_emb"][src_id * 2 + 1] * sqrt_d + 1.0};
    x = run_block(x, "enc.0", 2, 3);
    x = layer_norm2(x, P["enc.ln.g"], P["enc.ln.b"]);
    const std::vector<double> sent = x;  // max over one position

    // Decoder input: bos embedding concatenated with the sentence embedding.
    std::vector<double> d = {P["tok_emb"][Vocabulary::bos_id * 2 + 0] * sqrt_d + 0.0,
                             P["tok_emb"][Vocabulary::bos_id * 2 + 1] * sqrt_d + 1.0, sent[0],
                             sent[1]};
    d = run_block(d, "dec.0", 4, 5);
    d = layer_norm2(d, P["dec.ln.g"], P["dec.ln.b"]);
    auto logits = linear(d, P["out.w"], P["out.b"], 4, 5);
    double mx = logits[0];
    for (double t : logits) mx = std::max(mx, t);
    double denom = 0;
    for (double t : logits) denom += std::exp(t - mx);
    for (std::size_t j = 0; j < 5; ++j) {
        const double expect = std::exp(logits[j] - mx) / denom;
        REQUIRE(probs.values()[j] == Catch::Approx(expect).margin(1e-10));
    }
}

TEST_CASE("no parameter belongs to a cross-attention module", "[model]") {
    Rng rng(11);
    SeqModel<double> model(micro_config(), rng);
    std::size_t enc_per_layer = 0, dec_per_layer = 0;
    for (const auto& [name, t] : model.named_parameters()) {
        REQUIRE(name.find("cross") == std::string::npos);
        if (name.rfind("enc.0.", 0) == 0) ++enc_per_layer;
        if (name.rfind("dec.0.", 0) == 0) ++dec_per_layer;
    }
    // Identical block structure: self-attention + FFN + 2 layer norms.
    REQUIRE(enc_per_layer == 16);
    REQUIRE(dec_per_layer == 16);
}

TEST_CASE("checkpoint round trip restores every parameter", "[model]") {
    const auto dir = std::filesystem::temp_directory_path() / "musr_model_test";
    std::filesystem::create_directories(dir);
    const std::string path = (dir / "model.ckpt").string();

    Rng rng_a(21), rng_b(22);
    ModelConfig cfg = micro_config();
    SeqModel<float> a(cfg, rng_a);
    SeqModel<float> b(cfg, rng_b);
    a.save_checkpoint(path);

    // Different init, then load: must equal the saved model exactly (f32).
    b.load_checkpoint(path);
    const auto& pa = a.named_parameters();
    const auto& pb = b.named_parameters();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
        REQUIRE(pa[i].first == pb[i].first);
        REQUIRE(pa[i].second.values() == pb[i].second.values());
    }

    // The file itself carries no cross-attention records either.
    for (const auto& rec : SeqModel<float>::read_checkpoint(path))
        REQUIRE(rec.name.find("cross") == std::string::npos);

    std::filesystem::remove_all(dir);
}

TEST_CASE("checkpoint loading validates names and shapes", "[model]") {
    const auto dir = std::filesystem::temp_directory_path() / "musr_model_test2";
    std::filesystem::create_directories(dir);
    const std::string path = (dir / "model.ckpt").string();
    Rng rng(23);
    SeqModel<float> a(micro_config(), rng);
    a.save_checkpoint(path);
    ModelConfig other = micro_config(13);  // different vocabulary size
    Rng rng2(24);
    SeqModel<float> b(other, rng2);
    REQUIRE_THROWS_AS(b.load_checkpoint(path), InputError);
    std::filesystem::remove_all(dir);
}

TEST_CASE("max-pool gradient reaches only argmax positions", "[model]") {
    Rng rng(12);
    SeqModel<double> model(micro_config(), rng);
    TokenBatch src = TokenBatch::pack({{4, 5, 6}});
    auto enc = model.encode(src);
    auto emb = model.sentence_embedding(enc.hidden, enc.mask);
    backward(sum(emb));
    // The hidden tensor is an interior node; count nonzero gradient slots
    // via a fresh leaf run instead.
    auto hidden = enc.hidden.detached();
    hidden.set_requires_grad(true);
    auto emb2 = masked_max_time(hidden, enc.mask);
    backward(sum(emb2));
    std::size_t nonzero = 0;
    for (double g : hidden.grad()) nonzero += g != 0.0 ? 1 : 0;
    REQUIRE(nonzero == 8);  // exactly one recipient per embedding dimension
}
