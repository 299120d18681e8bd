#pragma once

#include <cstddef>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "musr/common.hpp"

namespace musr {

// Architecture hyperparameters (see presets below).
struct ModelConfig {
    std::size_t dim = 768;        // embedding / encoder width; decoder runs at 2*dim
    std::size_t heads = 8;
    std::size_t enc_layers = 12;
    std::size_t dec_layers = 3;
    std::size_t enc_ffn_dim = 768 * 4;
    std::size_t dec_ffn_dim = 768 * 2 * 4;
    std::size_t vocab_size = 0;   // filled in from the learned vocabulary
    std::size_t max_src_positions = 256;
    std::size_t max_tgt_positions = 256;
    double dropout = 0.1;

    void validate() const {
        if (dim == 0 || heads == 0 || dim % heads != 0)
            throw ContractError("model config: dim must be a positive multiple of heads");
        if ((2 * dim) % heads != 0)
            throw ContractError("model config: decoder width 2*dim must divide by heads");
        if (enc_layers == 0 || enc_ffn_dim == 0 || dec_ffn_dim == 0)
            throw ContractError("model config: zero-sized component");
        if (max_src_positions < 1 || max_tgt_positions < 1)
            throw ContractError("model config: positions must be >= 1");
        if (vocab_size < 5) throw ContractError("model config: vocabulary too small");
        if (dropout < 0.0 || dropout >= 1.0)
            throw ContractError("model config: dropout must be in [0,1)");
    }
};

enum class TrainPhase { Pretrain, CrossConst };

inline std::string to_string(TrainPhase p) {
    return p == TrainPhase::Pretrain ? "pretrain" : "crossconst";
}

inline TrainPhase parse_phase(const std::string& s) {
    if (s == "pretrain") return TrainPhase::Pretrain;
    if (s == "crossconst") return TrainPhase::CrossConst;
    throw InputError("unknown training phase: " + s + " (expected pretrain|crossconst)");
}

struct TrainConfig {
    TrainPhase phase = TrainPhase::Pretrain;
    double consistency_alpha = 1.0;  // weight of the consistency term in phase 2
    double label_smoothing = 0.1;
    std::size_t max_tokens_per_batch = 1024;
    double base_lr = 7e-4;
    std::size_t warmup_steps = 10000;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double adam_eps = 1e-8;
    std::uint64_t seed = 1;
    std::size_t max_steps = 2000;
    std::size_t eval_every = 200;    // steps between validation passes (0 = off)
    std::size_t patience = 5;        // non-improving evals before stopping
    double val_fraction = 0.0;       // held out from the training pairs
    std::size_t checkpoint_every = 0;  // 0 = only at the end
    std::size_t log_every = 1;
    std::string init_checkpoint;     // required for the crossconst phase
    std::string out_checkpoint;
    std::string metrics_path;

    void validate() const {
        if (consistency_alpha < 0.0)
            throw ContractError("train config: consistency weight must be >= 0");
        if (label_smoothing < 0.0 || label_smoothing >= 1.0)
            throw ContractError("train config: label smoothing must be in [0,1)");
        if (max_tokens_per_batch == 0)
            throw ContractError("train config: max tokens per batch must be positive");
        if (val_fraction < 0.0 || val_fraction >= 1.0)
            throw ContractError("train config: val fraction must be in [0,1)");
    }
};

struct BpeConfig {
    std::size_t target_size = 256000;
    long long min_freq = 20;
};

struct CorpusConfig {
    std::size_t max_english_chars = 5000;
    std::size_t min_pairs_per_language = 1000;
    double sampling_alpha = 0.5;
    double dual_ce_threshold = 0.0;  // <= 0 disables the score filter
};

struct MiningConfig {
    std::size_t k = 4;
    double threshold = 1.0;
};

// Everything a run can configure, with full-scale defaults.
struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    BpeConfig bpe;
    CorpusConfig corpus;
    MiningConfig mining;
    std::size_t threads = 0;  // 0 = hardware concurrency
};

// Full-scale defaults: the struct initializers above.
inline RunConfig paper_preset() { return RunConfig{}; }

// Small enough to train on a CPU in minutes.
inline RunConfig desk_preset() {
    RunConfig c;
    c.model.dim = 64;
    c.model.heads = 4;
    c.model.enc_layers = 2;
    c.model.dec_layers = 1;
    c.model.enc_ffn_dim = 64 * 4;
    c.model.dec_ffn_dim = 64 * 2 * 4;
    c.model.max_src_positions = 256;
    c.model.max_tgt_positions = 256;
    // The schedule peaks at base_lr / sqrt(warmup); this gives peak 2.5e-3.
    c.train.base_lr = 0.05;
    c.train.warmup_steps = 400;
    c.train.max_steps = 2000;
    c.bpe.target_size = 1024;
    c.bpe.min_freq = 2;
    c.corpus.min_pairs_per_language = 10;
    return c;
}

namespace detail {

inline std::size_t parse_size(const std::string& v, const std::string& key) {
    try {
        return static_cast<std::size_t>(std::stoull(v));
    } catch (...) {
        throw InputError("config key " + key + ": expected a non-negative integer, got '" + v +
                         "'");
    }
}

inline double parse_double(const std::string& v, const std::string& key) {
    try {
        std::size_t used = 0;
        const double d = std::stod(v, &used);
        if (used != v.size()) throw InputError("");
        return d;
    } catch (...) {
        throw InputError("config key " + key + ": expected a number, got '" + v + "'");
    }
}

}  // namespace detail

// Applies one flat key=value setting. Returns false for unknown keys.
inline bool apply_setting(RunConfig& c, const std::string& key, const std::string& value) {
    using detail::parse_double;
    using detail::parse_size;
    if (key == "dim") c.model.dim = parse_size(value, key);
    else if (key == "heads") c.model.heads = parse_size(value, key);
    else if (key == "enc_layers") c.model.enc_layers = parse_size(value, key);
    else if (key == "dec_layers") c.model.dec_layers = parse_size(value, key);
    else if (key == "enc_ffn_dim") c.model.enc_ffn_dim = parse_size(value, key);
    else if (key == "dec_ffn_dim") c.model.dec_ffn_dim = parse_size(value, key);
    else if (key == "vocab_size") c.model.vocab_size = parse_size(value, key);
    else if (key == "max_src_positions") c.model.max_src_positions = parse_size(value, key);
    else if (key == "max_tgt_positions") c.model.max_tgt_positions = parse_size(value, key);
    else if (key == "dropout") c.model.dropout = parse_double(value, key);
    else if (key == "phase") c.train.phase = parse_phase(value);
    else if (key == "consistency_alpha") c.train.consistency_alpha = parse_double(value, key);
    else if (key == "label_smoothing") c.train.label_smoothing = parse_double(value, key);
    else if (key == "max_tokens_per_batch")
        c.train.max_tokens_per_batch = parse_size(value, key);
    else if (key == "base_lr") c.train.base_lr = parse_double(value, key);
    else if (key == "warmup_steps") c.train.warmup_steps = parse_size(value, key);
    else if (key == "beta1") c.train.beta1 = parse_double(value, key);
    else if (key == "beta2") c.train.beta2 = parse_double(value, key);
    else if (key == "adam_eps") c.train.adam_eps = parse_double(value, key);
    else if (key == "seed") c.train.seed = parse_size(value, key);
    else if (key == "max_steps") c.train.max_steps = parse_size(value, key);
    else if (key == "eval_every") c.train.eval_every = parse_size(value, key);
    else if (key == "patience") c.train.patience = parse_size(value, key);
    else if (key == "val_fraction") c.train.val_fraction = parse_double(value, key);
    else if (key == "checkpoint_every") c.train.checkpoint_every = parse_size(value, key);
    else if (key == "log_every") c.train.log_every = parse_size(value, key);
    else if (key == "bpe_target_size") c.bpe.target_size = parse_size(value, key);
    else if (key == "bpe_min_freq")
        c.bpe.min_freq = static_cast<long long>(parse_size(value, key));
    else if (key == "max_english_chars") c.corpus.max_english_chars = parse_size(value, key);
    else if (key == "min_pairs_per_language")
        c.corpus.min_pairs_per_language = parse_size(value, key);
    else if (key == "sampling_alpha") c.corpus.sampling_alpha = parse_double(value, key);
    else if (key == "dual_ce_threshold") c.corpus.dual_ce_threshold = parse_double(value, key);
    else if (key == "knn_k") c.mining.k = parse_size(value, key);
    else if (key == "mine_threshold") c.mining.threshold = parse_double(value, key);
    else if (key == "threads") c.threads = parse_size(value, key);
    else return false;
    return true;
}

// Flat key=value text block: one setting per line, '#' starts a comment.
inline void load_config_stream(RunConfig& c, std::istream& is, const std::string& origin) {
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw InputError(origin + ":" + std::to_string(line_no) +
                             ": expected key=value, got '" + line + "'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (!apply_setting(c, key, value))
            throw InputError(origin + ":" + std::to_string(line_no) + ": unknown key '" + key +
                             "'");
    }
}

inline void load_config_file(RunConfig& c, const std::string& path) {
    std::ifstream is(path);
    if (!is) throw InputError("cannot read config file: " + path);
    load_config_stream(c, is, path);
}

inline std::map<std::string, std::string> model_config_kv(const ModelConfig& m) {
    std::map<std::string, std::string> kv;
    kv["dim"] = std::to_string(m.dim);
    kv["heads"] = std::to_string(m.heads);
    kv["enc_layers"] = std::to_string(m.enc_layers);
    kv["dec_layers"] = std::to_string(m.dec_layers);
    kv["enc_ffn_dim"] = std::to_string(m.enc_ffn_dim);
    kv["dec_ffn_dim"] = std::to_string(m.dec_ffn_dim);
    kv["vocab_size"] = std::to_string(m.vocab_size);
    kv["max_src_positions"] = std::to_string(m.max_src_positions);
    kv["max_tgt_positions"] = std::to_string(m.max_tgt_positions);
    std::ostringstream d;
    d << m.dropout;
    kv["dropout"] = d.str();
    return kv;
}

inline void save_model_config(const ModelConfig& m, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw InputError("cannot write model config: " + path);
    for (const auto& [k, v] : model_config_kv(m)) os << k << "=" << v << "\n";
}

inline ModelConfig load_model_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw InputError("cannot read model config: " + path);
    RunConfig tmp;
    load_config_stream(tmp, is, path);
    return tmp.model;
}

}  // namespace musr
