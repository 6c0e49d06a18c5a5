#pragma once

#include <algorithm>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "morsd/corpus.hpp"
#include "morsd/scorer.hpp"

namespace morsd {

struct SelectionConfig {
    double delta = 0.8;
    int ngram_n = 3;
    int diversity_keep = 6;
    int difficulty_keep = 3;
    std::uint64_t seed = 42;
    bool retain_negatives = true;
    bool use_accuracy = true;
    bool use_diversity = true;
    bool use_difficulty = true;

    void validate() const {
        if (!(delta >= 0.0 && delta <= 1.0)) throw PreconditionError("delta must be in [0, 1]");
        if (ngram_n < 1) throw PreconditionError("ngram n must be >= 1");
        if (diversity_keep < 1) throw PreconditionError("diversity keep must be >= 1");
        if (difficulty_keep < 1) throw PreconditionError("difficulty keep must be >= 1");
        if (use_diversity && difficulty_keep > diversity_keep)
            throw PreconditionError("difficulty keep must not exceed diversity keep");
    }
};

using NgramSet = std::set<std::string>;

/// Lowercased whitespace words with leading/trailing punctuation removed.
inline std::vector<std::string> selection_tokens(std::string_view s) {
    std::vector<std::string> out;
    for (const auto& raw : text::split_whitespace(s)) {
        std::string_view t = raw;
        auto punct = [](char c) { return std::ispunct(static_cast<unsigned char>(c)) != 0; };
        while (!t.empty() && punct(t.front())) t.remove_prefix(1);
        while (!t.empty() && punct(t.back())) t.remove_suffix(1);
        if (!t.empty()) out.push_back(text::to_lower(t));
    }
    return out;
}

/// Set of contiguous n-word windows joined by U+00B7. Texts shorter than n
/// words give one key holding the whole sequence.
inline NgramSet ngrams(std::string_view s, int n) {
    if (n < 1) throw PreconditionError("n must be >= 1");
    static constexpr std::string_view kSep = "\xC2\xB7";
    auto toks = selection_tokens(s);
    NgramSet out;
    if (toks.empty()) return out;
    auto join = [&](std::size_t b, std::size_t e) {
        std::string k = toks[b];
        for (std::size_t i = b + 1; i < e; ++i) {
            k += kSep;
            k += toks[i];
        }
        return k;
    };
    const auto un = static_cast<std::size_t>(n);
    if (toks.size() < un) {
        out.insert(join(0, toks.size()));
        return out;
    }
    for (std::size_t i = 0; i + un <= toks.size(); ++i) out.insert(join(i, i + un));
    return out;
}

/// |A ∩ B| / |A ∪ B|; 1 for two empty sets.
inline double jaccard(const NgramSet& a, const NgramSet& b) {
    if (a.empty() && b.empty()) return 1.0;
    if (a.empty() || b.empty()) return 0.0;
    std::size_t inter = 0;
    auto i = a.begin();
    auto j = b.begin();
    while (i != a.end() && j != b.end()) {
        if (*i < *j) {
            ++i;
        } else if (*j < *i) {
            ++j;
        } else {
            ++inter;
            ++i;
            ++j;
        }
    }
    return static_cast<double>(inter) / static_cast<double>(a.size() + b.size() - inter);
}

// Selection stages operate on any record that exposes a Rationale.
inline const Rationale& as_rationale(const Rationale& r) { return r; }
inline const Rationale& as_rationale(const ScoredRationale& s) { return s.rationale; }

/// Drops incorrect rationales in ascending index order until mean correctness
/// reaches delta. Without negative retention every incorrect one is dropped.
template <typename Record>
std::vector<Record> accuracy_select(std::vector<Record> items, double delta, bool retain_negatives) {
    std::stable_sort(items.begin(), items.end(), [](const Record& a, const Record& b) {
        return as_rationale(a).index < as_rationale(b).index;
    });
    std::size_t correct = 0;
    for (const auto& r : items) correct += as_rationale(r).correct ? 1 : 0;
    std::size_t incorrect = items.size() - correct;

    std::size_t remove = incorrect;
    if (retain_negatives) {
        remove = 0;
        while (remove < incorrect &&
               static_cast<double>(correct) / static_cast<double>(items.size() - remove) < delta)
            ++remove;
    }
    std::vector<Record> out;
    out.reserve(items.size() - remove);
    std::size_t removed = 0;
    for (auto& r : items) {
        if (!as_rationale(r).correct && removed < remove) {
            ++removed;
            continue;
        }
        out.push_back(std::move(r));
    }
    return out;
}

/// Per-question generator so parallel and serial runs draw the same sequence.
inline std::mt19937_64 question_rng(std::uint64_t seed, std::string_view question_id) {
    return std::mt19937_64(derive_seed(seed, question_id));
}

/// While more than `keep` remain, finds the most similar pair (smallest
/// (m, n) on ties) and removes one member chosen by one rng draw: the top bit
/// set removes the later member. Relative order is preserved.
template <typename Record>
std::vector<Record> diversity_select(std::vector<Record> items, int ngram_n, int keep, std::mt19937_64& rng) {
    if (keep < 1) throw PreconditionError("keep must be >= 1");
    const auto k = static_cast<std::size_t>(keep);
    if (items.size() <= k) return items;

    std::vector<NgramSet> sets;
    sets.reserve(items.size());
    for (const auto& r : items) sets.push_back(ngrams(as_rationale(r).rationale_text, ngram_n));
    const std::size_t n = items.size();
    std::vector<std::vector<double>> sim(n, std::vector<double>(n, 0.0));
    for (std::size_t a = 0; a < n; ++a)
        for (std::size_t b = a + 1; b < n; ++b) sim[a][b] = jaccard(sets[a], sets[b]);

    std::vector<bool> alive(n, true);
    std::size_t remaining = n;
    while (remaining > k) {
        double best = -1.0;
        std::size_t bm = 0, bn = 0;
        for (std::size_t a = 0; a < n; ++a) {
            if (!alive[a]) continue;
            for (std::size_t b = a + 1; b < n; ++b) {
                if (alive[b] && sim[a][b] > best) {
                    best = sim[a][b];
                    bm = a;
                    bn = b;
                }
            }
        }
        alive[(rng() >> 63) ? bn : bm] = false;
        --remaining;
    }
    std::vector<Record> out;
    out.reserve(k);
    for (std::size_t i = 0; i < n; ++i)
        if (alive[i]) out.push_back(std::move(items[i]));
    return out;
}

/// The `keep` records with the smallest rd, ascending; ties by index.
inline std::vector<ScoredRationale> difficulty_select(std::vector<ScoredRationale> items, int keep) {
    std::stable_sort(items.begin(), items.end(), [](const ScoredRationale& a, const ScoredRationale& b) {
        if (a.rd != b.rd) return a.rd < b.rd;
        return a.rationale.index < b.rationale.index;
    });
    if (keep >= 0 && items.size() > static_cast<std::size_t>(keep)) items.resize(static_cast<std::size_t>(keep));
    return items;
}

struct QuestionSelection {
    std::string question_id;
    std::size_t input = 0;
    std::vector<ScoredRationale> after_accuracy;
    std::vector<ScoredRationale> after_diversity;
    /// Ascending rd.
    std::vector<ScoredRationale> selected;
};

struct SelectionResult {
    /// In question order; includes questions emptied by accuracy selection.
    std::vector<QuestionSelection> questions;
    std::vector<std::string> emptied;

    std::size_t selected_count() const {
        std::size_t n = 0;
        for (const auto& q : questions) n += q.selected.size();
        return n;
    }
};

inline QuestionSelection select_question(const std::string& question_id, std::vector<ScoredRationale> pool,
                                         const SelectionConfig& cfg) {
    QuestionSelection qs;
    qs.question_id = question_id;
    qs.input = pool.size();
    std::stable_sort(pool.begin(), pool.end(), [](const ScoredRationale& a, const ScoredRationale& b) {
        return a.rationale.index < b.rationale.index;
    });
    qs.after_accuracy = cfg.use_accuracy ? accuracy_select(std::move(pool), cfg.delta, cfg.retain_negatives)
                                         : std::move(pool);
    auto rng = question_rng(cfg.seed, question_id);
    qs.after_diversity = cfg.use_diversity
                             ? diversity_select(qs.after_accuracy, cfg.ngram_n, cfg.diversity_keep, rng)
                             : qs.after_accuracy;
    qs.selected = difficulty_select(qs.after_diversity,
                                    cfg.use_difficulty ? cfg.difficulty_keep : static_cast<int>(qs.after_diversity.size()));
    return qs;
}

/// Accuracy, then diversity, then difficulty selection for every question.
inline SelectionResult run_selection(const Corpus& questions, const ScoredMap& scored, const SelectionConfig& cfg) {
    cfg.validate();
    SelectionResult res;
    for (const auto& q : questions.questions()) {
        auto it = scored.find(q.id);
        if (it == scored.end()) continue;
        auto qs = select_question(q.id, it->second, cfg);
        if (qs.input > 0 && qs.after_accuracy.empty()) res.emptied.push_back(q.id);
        res.questions.push_back(std::move(qs));
    }
    return res;
}

enum class LabelStrategy { Gold, Predict, PositiveOnly };

inline std::string_view to_string(LabelStrategy s) {
    switch (s) {
        case LabelStrategy::Gold: return "gold";
        case LabelStrategy::Predict: return "predict";
        case LabelStrategy::PositiveOnly: return "positive_only";
    }
    return "gold";
}

inline std::optional<LabelStrategy> parse_label_strategy(std::string_view s) {
    if (s == "gold") return LabelStrategy::Gold;
    if (s == "predict") return LabelStrategy::Predict;
    if (s == "positive_only") return LabelStrategy::PositiveOnly;
    return std::nullopt;
}

/// label_source of a record: "predict" only under the predict strategy.
inline std::string_view label_source(LabelStrategy s) { return s == LabelStrategy::Predict ? "predict" : "gold"; }

inline std::vector<json> selected_records(const Corpus& questions, const SelectionResult& sel, LabelStrategy label) {
    std::vector<json> out;
    for (const auto& qs : sel.questions) {
        const auto& q = questions.question(qs.question_id);
        for (const auto& s : qs.selected) {
            const auto& r = s.rationale;
            out.push_back(json{{"question_id", q.id},
                               {"question", q.question},
                               {"rationale", r.rationale_text},
                               {"answer", label == LabelStrategy::Predict ? r.predicted_answer : q.gold_answer},
                               {"rd", s.rd},
                               {"correct", r.correct},
                               {"label_source", label_source(label)},
                               {"index", r.index}});
        }
    }
    return out;
}

}  // namespace morsd
