#pragma once

#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "musr/common.hpp"

// Byte-pair-encoding vocabulary shared across all languages. Words are
// whitespace pre-segmented; each word ends in a marker symbol so decoding can
// restore word boundaries. The marker is a private-use codepoint (U+E000) and
// is stripped from raw input, which keeps encode/decode an exact inverse on
// texts over the learned alphabet.

namespace musr {

class Vocabulary {
public:
    static constexpr std::int32_t pad_id = 0;
    static constexpr std::int32_t bos_id = 1;
    static constexpr std::int32_t eos_id = 2;
    static constexpr std::int32_t unk_id = 3;
    static constexpr std::size_t reserved_count = 4;

    static const std::string& word_end_marker() {
        static const std::string marker = "\xee\x80\x80";  // U+E000
        return marker;
    }

    std::size_t size() const { return id_to_token_.size(); }
    std::size_t alphabet_size() const { return alphabet_count_; }
    const std::vector<std::pair<std::string, std::string>>& merges() const { return merges_; }
    const std::vector<std::string>& tokens() const { return id_to_token_; }

    std::int32_t token_id(const std::string& token) const {
        auto it = token_to_id_.find(token);
        return it == token_to_id_.end() ? unk_id : it->second;
    }

    const std::string& token(std::int32_t id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size())
            throw InputError("token id out of range: " + std::to_string(id));
        return id_to_token_[id];
    }

    // Applies merges in learned priority order, maps symbols to ids (unknown
    // characters become unk) and appends eos. Merge products pruned from the
    // token table split back into their components.
    std::vector<std::int32_t> encode(std::string_view text) const {
        std::vector<std::int32_t> ids;
        for (const auto& word : split_whitespace(text)) {
            std::vector<std::string> symbols = symbolize(word);
            apply_merges(symbols);
            for (const auto& sym : symbols) emit(sym, ids);
        }
        ids.push_back(eos_id);
        return ids;
    }

    // Inverse of encode on texts over the known alphabet. Reserved ids other
    // than unk are dropped; unk renders as a replacement marker.
    std::string decode(const std::vector<std::int32_t>& ids) const {
        std::string joined;
        for (std::int32_t id : ids) {
            if (id == pad_id || id == bos_id || id == eos_id) continue;
            if (id == unk_id) {
                joined += "<unk>";
                continue;
            }
            joined += token(id);
        }
        std::string out;
        const std::string& marker = word_end_marker();
        std::size_t pos = 0;
        while (pos < joined.size()) {
            if (joined.compare(pos, marker.size(), marker) == 0) {
                out += ' ';
                pos += marker.size();
            } else {
                out += joined[pos++];
            }
        }
        if (!out.empty() && out.back() == ' ') out.pop_back();
        return out;
    }

    void save(std::ostream& os) const {
        os << "musr-bpe v1 " << size() << "\n";
        for (const auto& [l, r] : merges_) os << l << ' ' << r << "\n";
        for (std::size_t id = 0; id < id_to_token_.size(); ++id)
            os << id_to_token_[id] << '\t' << id << "\n";
    }

    void save_file(const std::string& path) const {
        std::ofstream os(path, std::ios::binary);
        if (!os) throw InputError("cannot write vocabulary file: " + path);
        save(os);
    }

    static Vocabulary load(std::istream& is) {
        std::string header;
        if (!std::getline(is, header)) throw InputError("empty vocabulary file");
        std::istringstream hs(header);
        std::string tag, version;
        std::size_t vocab_size = 0;
        if (!(hs >> tag >> version >> vocab_size) || tag != "musr-bpe" || version != "v1")
            throw InputError("bad vocabulary header: " + header);
        Vocabulary v;
        v.id_to_token_.assign(vocab_size, std::string());
        std::string line;
        std::size_t line_no = 1;
        std::size_t table_entries = 0;
        while (std::getline(is, line)) {
            ++line_no;
            if (line.empty()) continue;
            const auto tab = line.find('\t');
            if (tab == std::string::npos) {
                const auto sp = line.find(' ');
                if (sp == std::string::npos || sp == 0 || sp + 1 >= line.size())
                    throw InputError("bad merge at line " + std::to_string(line_no));
                v.merges_.emplace_back(line.substr(0, sp), line.substr(sp + 1));
            } else {
                const std::string token = line.substr(0, tab);
                const std::size_t id = std::stoul(line.substr(tab + 1));
                if (id >= vocab_size)
                    throw InputError("token id exceeds header size at line " +
                                     std::to_string(line_no));
                v.id_to_token_[id] = token;
                ++table_entries;
            }
        }
        if (table_entries != vocab_size)
            throw InputError("vocabulary table has " + std::to_string(table_entries) +
                             " entries, header says " + std::to_string(vocab_size));
        v.check_reserved();
        v.rebuild_indexes();
        v.alphabet_count_ = 0;
        for (std::size_t id = reserved_count; id < v.id_to_token_.size(); ++id)
            if (v.product_components_.find(v.id_to_token_[id]) == v.product_components_.end())
                ++v.alphabet_count_;
        return v;
    }

    static Vocabulary load_file(const std::string& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw InputError("cannot read vocabulary file: " + path);
        return load(is);
    }

    friend Vocabulary learn_bpe(const std::vector<std::string>& lines, std::size_t target_size,
                                long long min_freq);

private:
    // Word -> codepoint symbols plus the end-of-word marker. Raw occurrences
    // of the marker codepoint are stripped.
    static std::vector<std::string> symbolize(const std::string& word) {
        std::vector<std::string> symbols;
        for (auto& cp : utf8::split_codepoints(word))
            if (cp != word_end_marker()) symbols.push_back(std::move(cp));
        symbols.push_back(word_end_marker());
        return symbols;
    }

    void apply_merges(std::vector<std::string>& symbols) const {
        while (symbols.size() > 1) {
            std::size_t best_rank = merge_rank_.size();
            for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
                auto it = merge_rank_.find(pair_key(symbols[i], symbols[i + 1]));
                if (it != merge_rank_.end() && it->second < best_rank) best_rank = it->second;
            }
            if (best_rank == merge_rank_.size()) break;
            const auto& [left, right] = merges_[best_rank];
            std::vector<std::string> next;
            next.reserve(symbols.size());
            for (std::size_t i = 0; i < symbols.size();) {
                if (i + 1 < symbols.size() && symbols[i] == left && symbols[i + 1] == right) {
                    next.push_back(left + right);
                    i += 2;
                } else {
                    next.push_back(std::move(symbols[i]));
                    ++i;
                }
            }
            symbols = std::move(next);
        }
    }

    static std::string pair_key(const std::string& l, const std::string& r) {
        return l + '\n' + r;
    }

    // Emit a symbol as ids: table hit, else split a pruned merge product back
    // into its components, else unk.
    void emit(const std::string& sym, std::vector<std::int32_t>& ids) const {
        auto it = token_to_id_.find(sym);
        if (it != token_to_id_.end()) {
            ids.push_back(it->second);
            return;
        }
        auto prod = product_components_.find(sym);
        if (prod == product_components_.end()) {
            ids.push_back(unk_id);
            return;
        }
        emit(prod->second.first, ids);
        emit(prod->second.second, ids);
    }

    void check_reserved() const {
        static const char* expected[] = {"<pad>", "<bos>", "<eos>", "<unk>"};
        for (std::size_t i = 0; i < reserved_count; ++i)
            if (id_to_token_.size() <= i || id_to_token_[i] != expected[i])
                throw InputError("vocabulary reserved ids are corrupt");
    }

    void rebuild_indexes() {
        token_to_id_.clear();
        for (std::size_t id = 0; id < id_to_token_.size(); ++id)
            token_to_id_[id_to_token_[id]] = static_cast<std::int32_t>(id);
        merge_rank_.clear();
        product_components_.clear();
        for (std::size_t r = 0; r < merges_.size(); ++r) {
            merge_rank_[pair_key(merges_[r].first, merges_[r].second)] = r;
            product_components_.emplace(merges_[r].first + merges_[r].second, merges_[r]);
        }
    }

    std::vector<std::pair<std::string, std::string>> merges_;
    std::vector<std::string> id_to_token_;
    std::unordered_map<std::string, std::int32_t> token_to_id_;
    std::unordered_map<std::string, std::size_t> merge_rank_;
    std::unordered_map<std::string, std::pair<std::string, std::string>> product_components_;
    std::size_t alphabet_count_ = 0;
};

// Greedy BPE learning: merge the most frequent adjacent pair (ties broken by
// the lexicographically smallest pair) until the vocabulary reaches
// target_size or no pair occurs at least min_freq times. Learned tokens whose
// corpus frequency ends up below min_freq are dropped afterwards, together
// with the merge rules that produce them.
inline Vocabulary learn_bpe(const std::vector<std::string>& lines, std::size_t target_size,
                            long long min_freq) {
    std::map<std::string, long long> word_freq;
    for (const auto& line : lines)
        for (const auto& w : split_whitespace(line)) ++word_freq[w];
    if (word_freq.empty()) throw InputError("learn_bpe: empty corpus");

    struct Word {
        std::vector<std::string> symbols;
        long long freq;
    };
    std::vector<Word> words;
    words.reserve(word_freq.size());
    std::set<std::string> alphabet;
    for (const auto& [text, freq] : word_freq) {
        Word w{Vocabulary::symbolize(text), freq};
        for (const auto& s : w.symbols) alphabet.insert(s);
        words.push_back(std::move(w));
    }

    Vocabulary v;
    v.id_to_token_ = {"<pad>", "<bos>", "<eos>", "<unk>"};
    for (const auto& s : alphabet) v.id_to_token_.push_back(s);
    v.alphabet_count_ = alphabet.size();
    std::set<std::string> token_set(v.id_to_token_.begin(), v.id_to_token_.end());
    if (target_size < v.id_to_token_.size())
        throw InputError("learn_bpe: target size " + std::to_string(target_size) +
                         " is below alphabet plus reserved tokens (" +
                         std::to_string(v.id_to_token_.size()) + ")");

    while (v.id_to_token_.size() < target_size) {
        // Ordered map: scanning for the max count visits pairs in
        // lexicographic order, so the first maximum is the smallest pair.
        std::map<std::pair<std::string, std::string>, long long> pair_counts;
        for (const auto& w : words)
            for (std::size_t i = 0; i + 1 < w.symbols.size(); ++i)
                pair_counts[{w.symbols[i], w.symbols[i + 1]}] += w.freq;
        const std::pair<std::string, std::string>* best = nullptr;
        long long best_count = 0;
        for (const auto& [pair, count] : pair_counts)
            if (count > best_count) {
                best = &pair;
                best_count = count;
            }
        if (best == nullptr || best_count < min_freq) break;
        const auto merge = *best;
        const std::string fused = merge.first + merge.second;
        for (auto& w : words) {
            for (std::size_t i = 0; i + 1 < w.symbols.size();) {
                if (w.symbols[i] == merge.first && w.symbols[i + 1] == merge.second) {
                    w.symbols[i] = fused;
                    w.symbols.erase(w.symbols.begin() + i + 1);
                } else {
                    ++i;
                }
            }
        }
        v.merges_.push_back(merge);
        // Distinct merges can fuse to the same string; one table slot is enough.
        if (token_set.insert(fused).second) v.id_to_token_.push_back(fused);
    }

    // Frequency pruning applies to the token table only: learned tokens whose
    // final corpus frequency falls below min_freq lose their id, while the
    // merge list stays intact so surviving products remain reachable. At
    // encode time a pruned product splits back into its components.
    std::map<std::string, long long> token_freq;
    for (const auto& w : words)
        for (const auto& s : w.symbols) token_freq[s] += w.freq;
    const std::size_t first_learned = Vocabulary::reserved_count + v.alphabet_count_;
    std::vector<std::string> kept_tokens(v.id_to_token_.begin(),
                                         v.id_to_token_.begin() + first_learned);
    for (std::size_t id = first_learned; id < v.id_to_token_.size(); ++id) {
        const auto& tok = v.id_to_token_[id];
        auto it = token_freq.find(tok);
        if (it != token_freq.end() && it->second >= min_freq) kept_tokens.push_back(tok);
    }
    v.id_to_token_ = std::move(kept_tokens);
    v.rebuild_indexes();
    return v;
}

inline Vocabulary learn_bpe_stream(std::istream& is, std::size_t target_size,
                                   long long min_freq) {
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(is, line)) lines.push_back(line);
    return learn_bpe(lines, target_size, min_freq);
}

}  // namespace musr
