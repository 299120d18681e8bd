// Command-line front end for the pipeline: corpus preparation, vocabulary
// learning, two-phase training, embedding extraction, similarity-search
// evaluation and margin-based mining.
//
// Exit codes: 0 success, 1 data/contract errors, 2 usage errors.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "musr/musr.hpp"

namespace {

using namespace musr;

constexpr int kExitOk = 0;
constexpr int kExitData = 1;
constexpr int kExitUsage = 2;

struct CommonOpts {
    std::string preset = "paper";
    std::string config_path;
    std::vector<std::string> overrides;  // key=value, applied after the config file
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> threads;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
    cmd->add_option("--preset", opts.preset, "Base configuration preset (paper|desk)")
        ->check(CLI::IsMember({"paper", "desk"}));
    cmd->add_option("--config", opts.config_path, "Flat key=value configuration file");
    cmd->add_option("--set", opts.overrides, "Override one setting, e.g. --set max_steps=500");
    cmd->add_option("--seed", opts.seed, "Random seed");
    cmd->add_option("--threads", opts.threads, "Worker threads (0 = hardware)");
}

// Precedence: explicit CLI flag > config file > preset.
RunConfig resolve_config(const CommonOpts& opts) {
    RunConfig cfg = opts.preset == "desk" ? desk_preset() : paper_preset();
    if (!opts.config_path.empty()) load_config_file(cfg, opts.config_path);
    for (const auto& kv : opts.overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos)
            throw CLI::ValidationError("--set expects key=value, got '" + kv + "'");
        const std::string key = trim(kv.substr(0, eq));
        const std::string value = trim(kv.substr(eq + 1));
        if (!apply_setting(cfg, key, value))
            throw CLI::ValidationError("--set: unknown key '" + key + "'");
    }
    if (opts.seed) cfg.train.seed = *opts.seed;
    if (opts.threads) cfg.threads = *opts.threads;
    return cfg;
}

void apply_threads(const RunConfig& cfg) {
    if (cfg.threads > 0) set_threads(cfg.threads);
}

void emit_config_snapshot(RunManifest& manifest, const RunConfig& cfg) {
    for (const auto& [k, v] : model_config_kv(cfg.model)) manifest.set("config." + k, v);
    manifest.set("config.phase", to_string(cfg.train.phase));
    manifest.set("config.consistency_alpha", cfg.train.consistency_alpha);
    manifest.set("config.label_smoothing", cfg.train.label_smoothing);
    manifest.set("config.max_tokens_per_batch",
                 static_cast<std::uint64_t>(cfg.train.max_tokens_per_batch));
    manifest.set("config.base_lr", cfg.train.base_lr);
    manifest.set("config.warmup_steps", static_cast<std::uint64_t>(cfg.train.warmup_steps));
    manifest.set("config.beta1", cfg.train.beta1);
    manifest.set("config.beta2", cfg.train.beta2);
    manifest.set("config.max_steps", static_cast<std::uint64_t>(cfg.train.max_steps));
    manifest.set("config.bpe_target_size", static_cast<std::uint64_t>(cfg.bpe.target_size));
    manifest.set("config.bpe_min_freq", static_cast<std::uint64_t>(cfg.bpe.min_freq));
    manifest.set("config.max_english_chars",
                 static_cast<std::uint64_t>(cfg.corpus.max_english_chars));
    manifest.set("config.min_pairs_per_language",
                 static_cast<std::uint64_t>(cfg.corpus.min_pairs_per_language));
    manifest.set("config.sampling_alpha", cfg.corpus.sampling_alpha);
    manifest.set("config.knn_k", static_cast<std::uint64_t>(cfg.mining.k));
    manifest.set("config.mine_threshold", cfg.mining.threshold);
    manifest.set("seed", static_cast<std::uint64_t>(cfg.train.seed));
    manifest.set("threads", static_cast<std::uint64_t>(cfg.threads));
}

void report_issues(const std::vector<ParseIssue>& issues) {
    for (std::size_t i = 0; i < issues.size() && i < 20; ++i)
        std::cerr << "warning: line " << issues[i].line << ": " << issues[i].reason << "\n";
    if (issues.size() > 20)
        std::cerr << "warning: " << issues.size() - 20 << " further malformed lines\n";
}

// --- prepare ---------------------------------------------------------------

struct PrepareArgs {
    CommonOpts common;
    std::string in_path, out_path, report_path, manifest_path;
    std::optional<std::size_t> sample_total;
};

int run_prepare(const PrepareArgs& args) {
    RunConfig cfg = resolve_config(args.common);
    apply_threads(cfg);
    RunManifest manifest("prepare");
    manifest.add_input(args.in_path);
    emit_config_snapshot(manifest, cfg);

    ParsedCorpus parsed = read_pairs_file(args.in_path);
    report_issues(parsed.issues);

    CleanRules rules;
    rules.max_english_chars = cfg.corpus.max_english_chars;
    rules.min_pairs_per_language = cfg.corpus.min_pairs_per_language;
    CleanResult cleaned = clean(parsed.pairs, rules);
    cleaned.report.malformed = parsed.issues.size();

    std::vector<SentencePair> out_pairs = std::move(cleaned.pairs);
    if (args.sample_total) {
        Rng rng(cfg.train.seed);
        out_pairs =
            temperature_resample(out_pairs, cfg.corpus.sampling_alpha, *args.sample_total, rng);
        manifest.set("sample_total", static_cast<std::uint64_t>(*args.sample_total));
    }

    atomic_write(args.out_path, [&](std::ostream& os) { write_pairs(os, out_pairs); }, false);
    const std::string report_path =
        args.report_path.empty() ? args.out_path + ".report" : args.report_path;
    atomic_write(
        report_path,
        [&](std::ostream& os) {
            for (const auto& [k, v] : cleaned.report.as_kv()) os << k << "=" << v << "\n";
        },
        false);

    for (const auto& [k, v] : cleaned.report.as_kv()) std::cout << k << "=" << v << "\n";
    manifest.add_output("pairs", args.out_path);
    manifest.add_output("report", report_path);
    manifest.write(args.manifest_path.empty() ? args.out_path + ".manifest"
                                              : args.manifest_path);
    return kExitOk;
}

// --- learn-vocab -----------------------------------------------------------

struct LearnVocabArgs {
    CommonOpts common;
    std::string in_path, out_path, manifest_path;
};

int run_learn_vocab(const LearnVocabArgs& args) {
    RunConfig cfg = resolve_config(args.common);
    apply_threads(cfg);
    RunManifest manifest("learn-vocab");
    manifest.add_input(args.in_path);
    emit_config_snapshot(manifest, cfg);

    ParsedCorpus parsed = read_pairs_file(args.in_path);
    report_issues(parsed.issues);
    std::vector<std::string> lines;
    lines.reserve(parsed.pairs.size() * 2);
    for (const auto& p : parsed.pairs) {
        lines.push_back(p.src);
        lines.push_back(p.tgt);
    }
    Vocabulary vocab = learn_bpe(lines, cfg.bpe.target_size, cfg.bpe.min_freq);
    atomic_write(args.out_path, [&](std::ostream& os) { vocab.save(os); }, false);
    std::cout << "vocab_size=" << vocab.size() << "\nmerges=" << vocab.merges().size() << "\n";
    manifest.set("vocab_size", static_cast<std::uint64_t>(vocab.size()));
    manifest.add_output("vocab", args.out_path);
    manifest.write(args.manifest_path.empty() ? args.out_path + ".manifest"
                                              : args.manifest_path);
    return kExitOk;
}

// --- train -----------------------------------------------------------------

struct TrainArgs {
    CommonOpts common;
    std::string phase;
    std::string data_path, vocab_path, out_path, manifest_path;
    std::string init_checkpoint, metrics_path;
    std::optional<double> alpha;
    std::optional<std::size_t> max_steps;
};

int run_train(const TrainArgs& args) {
    RunConfig cfg = resolve_config(args.common);
    cfg.train.phase = parse_phase(args.phase);
    if (!args.init_checkpoint.empty()) cfg.train.init_checkpoint = args.init_checkpoint;
    if (args.alpha) cfg.train.consistency_alpha = *args.alpha;
    if (args.max_steps) cfg.train.max_steps = *args.max_steps;
    cfg.train.out_checkpoint = args.out_path;
    cfg.train.metrics_path =
        args.metrics_path.empty() ? args.out_path + ".metrics" : args.metrics_path;
    apply_threads(cfg);

    RunManifest manifest("train");
    manifest.add_input(args.data_path);
    manifest.add_input(args.vocab_path);
    if (!cfg.train.init_checkpoint.empty()) manifest.add_input(cfg.train.init_checkpoint);

    ParsedCorpus parsed = read_pairs_file(args.data_path);
    report_issues(parsed.issues);
    Vocabulary vocab = Vocabulary::load_file(args.vocab_path);
    cfg.model.vocab_size = vocab.size();
    emit_config_snapshot(manifest, cfg);

    Rng init_rng(cfg.train.seed);
    SeqModel<float> model(cfg.model, init_rng);
    TrainResult result = train(model, parsed.pairs, vocab, cfg.train);

    std::cout << "steps=" << result.steps << "\nfirst_ce=" << result.first_ce
              << "\nlast_ce=" << result.last_ce << "\n";
    if (result.skipped_overlong > 0)
        std::cerr << "warning: skipped " << result.skipped_overlong << " overlong pairs\n";
    manifest.set("steps", static_cast<std::uint64_t>(result.steps));
    manifest.set("last_ce", result.last_ce);
    manifest.set("stopped_early", result.stopped_early ? "true" : "false");
    manifest.add_output("checkpoint", args.out_path);
    manifest.add_output("metrics", cfg.train.metrics_path);
    manifest.write(args.manifest_path.empty() ? args.out_path + ".manifest"
                                              : args.manifest_path);
    return kExitOk;
}

// --- embed -----------------------------------------------------------------

struct EmbedArgs {
    CommonOpts common;
    std::string model_path, vocab_path, in_path, out_path, manifest_path;
    std::string lang;
    std::string id_prefix = "s";
};

int run_embed(const EmbedArgs& args) {
    RunConfig cfg = resolve_config(args.common);
    apply_threads(cfg);
    RunManifest manifest("embed");
    manifest.add_input(args.model_path);
    manifest.add_input(args.vocab_path);
    manifest.add_input(args.in_path);

    Vocabulary vocab = Vocabulary::load_file(args.vocab_path);
    ModelConfig mc = load_model_config(args.model_path + ".cfg");
    Rng rng(cfg.train.seed);
    SeqModel<float> model(mc, rng);
    model.load_checkpoint(args.model_path);

    std::ifstream is(args.in_path);
    if (!is) throw InputError("cannot read sentence file: " + args.in_path);
    std::vector<std::string> sentences, ids;
    std::string line;
    std::size_t n = 0;
    while (std::getline(is, line)) {
        sentences.push_back(line);
        ids.push_back(args.id_prefix + std::to_string(n++));
    }
    if (sentences.empty()) throw InputError("sentence file is empty: " + args.in_path);

    EmbedResult result = embed_corpus(sentences, ids, model, vocab);
    EmbeddingStore store(static_cast<std::uint32_t>(mc.dim), args.lang);
    // Rebuild with the language tag attached.
    for (std::size_t r = 0; r < result.store.size(); ++r) {
        std::vector<float> row(result.store.row(r), result.store.row(r) + mc.dim);
        store.add(result.store.id(r), row);
    }
    store.save(args.out_path);

    for (const auto& f : result.failures)
        std::cerr << "warning: " << f.id << ": " << f.reason << "\n";
    std::cout << "embedded=" << store.size() << "\nfailed=" << result.failures.size() << "\n";
    manifest.set("embedded", static_cast<std::uint64_t>(store.size()));
    manifest.set("failed", static_cast<std::uint64_t>(result.failures.size()));
    manifest.add_output("embeddings", args.out_path);
    manifest.write(args.manifest_path.empty() ? args.out_path + ".manifest"
                                              : args.manifest_path);
    return kExitOk;
}

// --- search-eval -----------------------------------------------------------

struct SearchEvalArgs {
    CommonOpts common;
    std::string src_path, tgt_path, gold_path, manifest_path = "search-eval.manifest";
};

int run_search_eval(const SearchEvalArgs& args) {
    RunConfig cfg = resolve_config(args.common);
    apply_threads(cfg);
    RunManifest manifest("search-eval");
    manifest.add_input(args.src_path);
    manifest.add_input(args.tgt_path);

    EmbeddingStore a = EmbeddingStore::load(args.src_path);
    EmbeddingStore b = EmbeddingStore::load(args.tgt_path);
    std::map<std::string, std::string> gold;
    if (!args.gold_path.empty()) {
        manifest.add_input(args.gold_path);
        std::ifstream gis(args.gold_path);
        if (!gis) throw InputError("cannot read gold file: " + args.gold_path);
        std::string line;
        std::size_t line_no = 0;
        while (std::getline(gis, line)) {
            ++line_no;
            if (trim(line).empty()) continue;
            const auto fields = split(line, '\t');
            if (fields.size() != 2)
                throw InputError(args.gold_path + ":" + std::to_string(line_no) +
                                 ": expected src_id<TAB>tgt_id");
            gold[trim(fields[0])] = trim(fields[1]);
        }
    } else {
        if (a.size() != b.size())
            throw InputError("stores differ in size and no --gold mapping was given");
        for (std::size_t i = 0; i < a.size(); ++i) gold[a.id(i)] = b.id(i);
    }

    SearchAccuracy acc = similarity_search_accuracy(a, b, gold);
    std::printf("forward %.4f\nbackward %.4f\naccuracy %.4f\n", acc.forward, acc.backward,
                acc.mean);
    manifest.set("forward", acc.forward);
    manifest.set("backward", acc.backward);
    manifest.set("accuracy", acc.mean);
    manifest.write(args.manifest_path);
    return kExitOk;
}

// --- mine ------------------------------------------------------------------

struct MineArgs {
    CommonOpts common;
    std::string src_path, tgt_path, out_path, manifest_path;
    std::optional<std::size_t> k;
    std::optional<double> threshold;
};

int run_mine(const MineArgs& args) {
    RunConfig cfg = resolve_config(args.common);
    if (args.k) cfg.mining.k = *args.k;
    if (args.threshold) cfg.mining.threshold = *args.threshold;
    apply_threads(cfg);
    RunManifest manifest("mine");
    manifest.add_input(args.src_path);
    manifest.add_input(args.tgt_path);
    manifest.set("config.knn_k", static_cast<std::uint64_t>(cfg.mining.k));
    manifest.set("config.mine_threshold", cfg.mining.threshold);

    EmbeddingStore a = EmbeddingStore::load(args.src_path);
    EmbeddingStore b = EmbeddingStore::load(args.tgt_path);
    std::vector<ScoredPair> mined = mine(a, b, cfg.mining.k, cfg.mining.threshold);

    atomic_write(
        args.out_path,
        [&](std::ostream& os) {
            char buf[64];
            for (const auto& p : mined) {
                std::snprintf(buf, sizeof(buf), "%.6f", p.margin_score);
                os << buf << '\t' << p.src_id << '\t' << p.tgt_id << "\n";
            }
        },
        false);
    std::cout << "mined=" << mined.size() << "\n";
    manifest.set("mined", static_cast<std::uint64_t>(mined.size()));
    manifest.add_output("pairs", args.out_path);
    manifest.write(args.manifest_path.empty() ? args.out_path + ".manifest"
                                              : args.manifest_path);
    return kExitOk;
}

// --- score-filter ----------------------------------------------------------

struct ScoreFilterArgs {
    CommonOpts common;
    std::string in_path, out_path, manifest_path;
    double threshold = 0;
};

int run_score_filter(const ScoreFilterArgs& args) {
    RunConfig cfg = resolve_config(args.common);
    apply_threads(cfg);
    RunManifest manifest("score-filter");
    manifest.add_input(args.in_path);
    manifest.set("threshold", args.threshold);

    ParsedCorpus parsed = read_pairs_file(args.in_path);
    report_issues(parsed.issues);
    ScoreFilterResult result = score_filter(parsed.pairs, args.threshold);
    atomic_write(args.out_path, [&](std::ostream& os) { write_pairs(os, result.pairs); },
                 false);
    std::cout << "kept=" << result.pairs.size() << "\ndropped=" << result.dropped
              << "\nmissing_warned=" << result.missing_warned << "\n";
    manifest.set("kept", static_cast<std::uint64_t>(result.pairs.size()));
    manifest.set("dropped", static_cast<std::uint64_t>(result.dropped));
    manifest.set("missing_warned", static_cast<std::uint64_t>(result.missing_warned));
    manifest.add_output("pairs", args.out_path);
    manifest.write(args.manifest_path.empty() ? args.out_path + ".manifest"
                                              : args.manifest_path);
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"MuSR desk-scale pipeline: multilingual sentence embeddings via "
                 "many-to-one translation training with consistency regularization"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(kToolVersion));

    PrepareArgs prepare_args;
    auto* prepare = app.add_subcommand("prepare", "Clean, filter and resample a corpus");
    prepare->add_option("--in", prepare_args.in_path, "Input pairs TSV")->required();
    prepare->add_option("--out", prepare_args.out_path, "Output pairs TSV")->required();
    prepare->add_option("--report", prepare_args.report_path, "Drop-count report path");
    prepare->add_option("--manifest", prepare_args.manifest_path, "Manifest path");
    prepare->add_option("--sample-total", prepare_args.sample_total,
                        "Resample this many pairs with temperature sampling");
    add_common(prepare, prepare_args.common);

    LearnVocabArgs vocab_args;
    auto* learn_vocab = app.add_subcommand("learn-vocab", "Learn a shared BPE vocabulary");
    learn_vocab->add_option("--in", vocab_args.in_path, "Input pairs TSV")->required();
    learn_vocab->add_option("--out", vocab_args.out_path, "Output vocabulary file")->required();
    learn_vocab->add_option("--manifest", vocab_args.manifest_path, "Manifest path");
    add_common(learn_vocab, vocab_args.common);

    TrainArgs train_args;
    auto* train_cmd = app.add_subcommand("train", "Train one phase of the model");
    train_cmd->add_option("--phase", train_args.phase, "pretrain|crossconst")
        ->required()
        ->check(CLI::IsMember({"pretrain", "crossconst"}));
    train_cmd->add_option("--data", train_args.data_path, "Training pairs TSV")->required();
    train_cmd->add_option("--vocab", train_args.vocab_path, "Vocabulary file")->required();
    train_cmd->add_option("--out", train_args.out_path, "Output checkpoint")->required();
    train_cmd->add_option("--init-checkpoint", train_args.init_checkpoint,
                          "Checkpoint to start from (required for crossconst)");
    train_cmd->add_option("--alpha", train_args.alpha, "Consistency term weight");
    train_cmd->add_option("--max-steps", train_args.max_steps, "Training step limit");
    train_cmd->add_option("--metrics", train_args.metrics_path, "Metrics log path");
    train_cmd->add_option("--manifest", train_args.manifest_path, "Manifest path");
    add_common(train_cmd, train_args.common);

    EmbedArgs embed_args;
    auto* embed_cmd = app.add_subcommand("embed", "Embed one sentence per input line");
    embed_cmd->add_option("--model", embed_args.model_path, "Model checkpoint")->required();
    embed_cmd->add_option("--vocab", embed_args.vocab_path, "Vocabulary file")->required();
    embed_cmd->add_option("--in", embed_args.in_path, "Sentence file")->required();
    embed_cmd->add_option("--out", embed_args.out_path, "Output embedding file")->required();
    embed_cmd->add_option("--lang", embed_args.lang, "Language tag for the store");
    embed_cmd->add_option("--id-prefix", embed_args.id_prefix, "Sentence id prefix");
    embed_cmd->add_option("--manifest", embed_args.manifest_path, "Manifest path");
    add_common(embed_cmd, embed_args.common);

    SearchEvalArgs search_args;
    auto* search_cmd =
        app.add_subcommand("search-eval", "Bidirectional similarity-search accuracy");
    search_cmd->add_option("--src", search_args.src_path, "Source embeddings")->required();
    search_cmd->add_option("--tgt", search_args.tgt_path, "Target embeddings")->required();
    search_cmd->add_option("--gold", search_args.gold_path,
                           "Gold id mapping TSV (default: align by row)");
    search_cmd->add_option("--manifest", search_args.manifest_path, "Manifest path");
    add_common(search_cmd, search_args.common);

    MineArgs mine_args;
    auto* mine_cmd = app.add_subcommand("mine", "Margin-criterion bitext mining");
    mine_cmd->add_option("--src", mine_args.src_path, "Source embeddings")->required();
    mine_cmd->add_option("--tgt", mine_args.tgt_path, "Target embeddings")->required();
    mine_cmd->add_option("--out", mine_args.out_path, "Mined pairs TSV")->required();
    mine_cmd->add_option("-k,--k", mine_args.k, "Neighborhood size");
    mine_cmd->add_option("--threshold", mine_args.threshold, "Margin score threshold");
    mine_cmd->add_option("--manifest", mine_args.manifest_path, "Manifest path");
    add_common(mine_cmd, mine_args.common);

    ScoreFilterArgs filter_args;
    auto* filter_cmd =
        app.add_subcommand("score-filter", "Filter pairs by dual cross-entropy score");
    filter_cmd->add_option("--in", filter_args.in_path, "Input pairs TSV")->required();
    filter_cmd->add_option("--out", filter_args.out_path, "Output pairs TSV")->required();
    filter_cmd->add_option("--threshold", filter_args.threshold, "Maximum acceptable score")
        ->required();
    filter_cmd->add_option("--manifest", filter_args.manifest_path, "Manifest path");
    add_common(filter_cmd, filter_args.common);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return kExitUsage;
    }

    try {
        if (prepare->parsed()) return run_prepare(prepare_args);
        if (learn_vocab->parsed()) return run_learn_vocab(vocab_args);
        if (train_cmd->parsed()) {
            if (parse_phase(train_args.phase) == TrainPhase::CrossConst &&
                train_args.init_checkpoint.empty()) {
                std::cerr << "usage error: --phase crossconst requires --init-checkpoint\n";
                return kExitUsage;
            }
            return run_train(train_args);
        }
        if (embed_cmd->parsed()) return run_embed(embed_args);
        if (search_cmd->parsed()) return run_search_eval(search_args);
        if (mine_cmd->parsed()) return run_mine(mine_args);
        if (filter_cmd->parsed()) return run_score_filter(filter_args);
    } catch (const CLI::ValidationError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    }
    return kExitOk;
}
