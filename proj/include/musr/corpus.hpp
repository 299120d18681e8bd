#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "musr/common.hpp"
#include "musr/rng.hpp"

// Parallel corpus handling: the TSV pair format, the cleaning filters,
// dual conditional cross-entropy scoring, and temperature-based resampling.

namespace musr {

struct SentencePair {
    std::string lang;  // source language code (never "en")
    std::string src;
    std::string tgt;  // English side
    std::optional<double> h_fwd;  // word-normalized conditional cross-entropies
    std::optional<double> h_rev;
    bool score_warning = false;  // set when the score filter had no entropies
};

struct ParseIssue {
    std::size_t line = 0;
    std::string reason;
};

struct ParsedCorpus {
    std::vector<SentencePair> pairs;
    std::vector<ParseIssue> issues;
};

// One pair per line: lang<TAB>src<TAB>tgt[<TAB>h_fwd<TAB>h_rev].
// Malformed lines are recorded and skipped, never fatal.
inline ParsedCorpus read_pairs(std::istream& is) {
    ParsedCorpus out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto fields = split(line, '\t');
        if (fields.size() != 3 && fields.size() != 5) {
            out.issues.push_back({line_no, "expected 3 or 5 tab-separated fields, got " +
                                               std::to_string(fields.size())});
            continue;
        }
        SentencePair p;
        p.lang = trim(fields[0]);
        p.src = trim(fields[1]);
        p.tgt = trim(fields[2]);
        if (p.lang.empty() || p.src.empty() || p.tgt.empty()) {
            out.issues.push_back({line_no, "empty language or text field"});
            continue;
        }
        if (fields.size() == 5) {
            try {
                p.h_fwd = std::stod(fields[3]);
                p.h_rev = std::stod(fields[4]);
            } catch (...) {
                out.issues.push_back({line_no, "unparseable entropy columns"});
                continue;
            }
        }
        out.pairs.push_back(std::move(p));
    }
    return out;
}

inline ParsedCorpus read_pairs_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw InputError("cannot read corpus file: " + path);
    return read_pairs(is);
}

inline void write_pairs(std::ostream& os, const std::vector<SentencePair>& pairs) {
    for (const auto& p : pairs) {
        os << p.lang << '\t' << p.src << '\t' << p.tgt;
        if (p.h_fwd && p.h_rev) os << '\t' << *p.h_fwd << '\t' << *p.h_rev;
        os << "\n";
    }
}

// Injectable language-ID predicate: returns a predicted language code, or
// nullopt when the text's language is not identifiable.
using LangIdFn = std::function<std::optional<std::string>(const std::string&)>;

struct CleanRules {
    std::size_t max_english_chars = 5000;
    std::size_t min_pairs_per_language = 1000;
    LangIdFn lang_id;  // empty: fall back to checking the claimed tag is non-English
};

struct CleanReport {
    std::size_t pairs_in = 0;
    std::size_t pairs_out = 0;
    std::size_t drop_duplicate = 0;
    std::size_t drop_length = 0;
    std::size_t drop_lang_id = 0;
    std::size_t drop_language_min = 0;
    std::size_t malformed = 0;

    std::map<std::string, std::string> as_kv() const {
        std::map<std::string, std::string> kv;
        kv["pairs_in"] = std::to_string(pairs_in);
        kv["pairs_out"] = std::to_string(pairs_out);
        kv["drop_duplicate"] = std::to_string(drop_duplicate);
        kv["drop_length"] = std::to_string(drop_length);
        kv["drop_lang_id"] = std::to_string(drop_lang_id);
        kv["drop_language_min"] = std::to_string(drop_language_min);
        kv["malformed"] = std::to_string(malformed);
        return kv;
    }
};

struct CleanResult {
    std::vector<SentencePair> pairs;
    CleanReport report;
};

// Filter order per pair: exact-duplicate removal (first occurrence kept,
// key = trimmed src/tgt bytes), English length cap, then language-ID. After
// the per-pair filters, languages left with too few pairs are dropped whole.
inline CleanResult clean(const std::vector<SentencePair>& input, const CleanRules& rules) {
    CleanResult result;
    result.report.pairs_in = input.size();
    std::unordered_set<std::string> seen;
    std::vector<SentencePair> survivors;
    for (const auto& p : input) {
        const std::string key = p.src + '\x1f' + p.tgt;
        if (!seen.insert(key).second) {
            ++result.report.drop_duplicate;
            continue;
        }
        if (utf8::count_codepoints(p.tgt) > rules.max_english_chars) {
            ++result.report.drop_length;
            continue;
        }
        if (rules.lang_id) {
            const auto predicted = rules.lang_id(p.src);
            if (!predicted) {
                // Unsupported by the identifier: keep unless the tag claims
                // English, which a source side must never be.
                if (p.lang == "en") {
                    ++result.report.drop_lang_id;
                    continue;
                }
            } else if (*predicted != p.lang) {
                ++result.report.drop_lang_id;
                continue;
            }
        } else if (p.lang == "en") {
            ++result.report.drop_lang_id;
            continue;
        }
        survivors.push_back(p);
    }
    std::map<std::string, std::size_t> lang_counts;
    for (const auto& p : survivors) ++lang_counts[p.lang];
    for (auto& p : survivors) {
        if (lang_counts[p.lang] < rules.min_pairs_per_language) {
            ++result.report.drop_language_min;
        } else {
            result.pairs.push_back(std::move(p));
        }
    }
    result.report.pairs_out = result.pairs.size();
    return result;
}

// |H(y|x) - H(x|y)| + (H(y|x) + H(x|y)) / 2 ; lower means more mutually
// translatable.
inline double dual_ce_score(double h_fwd, double h_rev) {
    if (h_fwd < 0.0 || h_rev < 0.0)
        throw ContractError("dual_ce_score: entropies must be non-negative");
    return std::abs(h_fwd - h_rev) + 0.5 * (h_fwd + h_rev);
}

struct ScoreFilterResult {
    std::vector<SentencePair> pairs;
    std::size_t dropped = 0;
    std::size_t missing_warned = 0;
};

// Drops pairs whose dual-CE score exceeds the threshold. Pairs without
// entropies pass with a warning flag (the scoring model is external).
inline ScoreFilterResult score_filter(const std::vector<SentencePair>& input, double threshold) {
    ScoreFilterResult out;
    for (const auto& p : input) {
        if (!p.h_fwd || !p.h_rev) {
            SentencePair kept = p;
            kept.score_warning = true;
            ++out.missing_warned;
            out.pairs.push_back(std::move(kept));
            continue;
        }
        if (dual_ce_score(*p.h_fwd, *p.h_rev) > threshold) {
            ++out.dropped;
        } else {
            out.pairs.push_back(p);
        }
    }
    return out;
}

// Per-language pair counts with the derived sampling distributions.
struct LanguageStats {
    std::vector<std::string> langs;    // lexicographic order
    std::vector<std::size_t> counts;   // n_i > 0

    static LanguageStats from_pairs(const std::vector<SentencePair>& pairs) {
        std::map<std::string, std::size_t> by_lang;
        for (const auto& p : pairs) ++by_lang[p.lang];
        LanguageStats s;
        for (const auto& [lang, n] : by_lang) {
            s.langs.push_back(lang);
            s.counts.push_back(n);
        }
        return s;
    }

    std::size_t total() const {
        std::size_t t = 0;
        for (auto n : counts) t += n;
        return t;
    }

    // p_i = n_i / sum(n).
    std::vector<double> proportions() const {
        if (counts.empty()) throw InputError("language stats are empty");
        const double t = static_cast<double>(total());
        std::vector<double> p(counts.size());
        for (std::size_t i = 0; i < p.size(); ++i) p[i] = static_cast<double>(counts[i]) / t;
        return p;
    }

    // q_i = p_i^a / sum_j p_j^a, computed as n_i^a / sum_j n_j^a (identical
    // algebraically, and exact for integer powers of the counts).
    std::vector<double> temperature_probs(double sampling_alpha) const {
        if (counts.empty()) throw InputError("language stats are empty");
        if (sampling_alpha <= 0.0)
            throw ContractError("temperature sampling: alpha must be positive");
        std::vector<double> w(counts.size());
        double denom = 0;
        for (std::size_t i = 0; i < counts.size(); ++i) {
            if (counts[i] == 0) throw InputError("temperature sampling: zero-count language");
            const double n = static_cast<double>(counts[i]);
            // sqrt is correctly rounded where pow need not be; the common
            // exponents stay exact on exact inputs.
            if (sampling_alpha == 0.5)
                w[i] = std::sqrt(n);
            else if (sampling_alpha == 1.0)
                w[i] = n;
            else
                w[i] = std::pow(n, sampling_alpha);
            denom += w[i];
        }
        for (auto& x : w) x /= denom;
        return w;
    }
};

// Index draw from an explicit distribution via inverse CDF.
inline std::size_t draw_index(const std::vector<double>& probs, Rng& rng) {
    const double u = rng.uniform01();
    double cum = 0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        cum += probs[i];
        if (u < cum) return i;
    }
    return probs.size() - 1;
}

// Draws `total` pairs: language from the temperature distribution, then a
// uniform pair within that language, with replacement.
inline std::vector<SentencePair> temperature_resample(const std::vector<SentencePair>& pairs,
                                                      double sampling_alpha, std::size_t total,
                                                      Rng& rng) {
    const LanguageStats stats = LanguageStats::from_pairs(pairs);
    const auto q = stats.temperature_probs(sampling_alpha);
    std::map<std::string, std::vector<std::size_t>> by_lang;
    for (std::size_t i = 0; i < pairs.size(); ++i) by_lang[pairs[i].lang].push_back(i);
    std::vector<SentencePair> out;
    out.reserve(total);
    for (std::size_t n = 0; n < total; ++n) {
        const std::size_t li = draw_index(q, rng);
        const auto& bucket = by_lang[stats.langs[li]];
        out.push_back(pairs[bucket[rng.below(bucket.size())]]);
    }
    return out;
}

}  // namespace musr
