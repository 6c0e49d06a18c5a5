#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "morsd/judge.hpp"
#include "morsd/selector.hpp"

namespace morsd {

/// Fraction of questions whose prediction matches the gold answer. Missing
/// predictions count as wrong.
inline double evaluate_exact_match(const std::map<std::string, std::string>& predictions, const Corpus& corpus) {
    for (const auto& [id, _] : predictions)
        if (!corpus.find(id)) throw Error("prediction for unknown question \"" + id + "\"");
    if (corpus.questions().empty()) return 0.0;
    std::size_t hits = 0;
    for (const auto& q : corpus.questions()) {
        auto it = predictions.find(q.id);
        if (it != predictions.end() && answers_equal(it->second, q.gold_answer, q.task)) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(corpus.questions().size());
}

// ---- SFT export ------------------------------------------------------------

struct ExportConfig {
    LabelStrategy label = LabelStrategy::Gold;
    std::string prompt_template = "Q: {question}. A: Let's think step by step.";
    std::string completion_template = "{rationale} Therefore, the answer is {answer}";

    void validate() const {
        if (text::count_occurrences(prompt_template, "{question}") != 1)
            throw PreconditionError("prompt template needs exactly one {question} slot");
        if (text::count_occurrences(completion_template, "{rationale}") != 1 ||
            text::count_occurrences(completion_template, "{answer}") != 1)
            throw PreconditionError("completion template needs exactly one {rationale} and one {answer} slot");
    }
};

/// Fills {question}. When the slot is followed by '.' and the question already
/// ends in sentence punctuation, that '.' is dropped.
inline std::string render_export_prompt(const std::string& tmpl, std::string_view question) {
    std::string out = tmpl;
    auto pos = out.find("{question}");
    std::string_view q = text::trim(question);
    auto after = pos + std::string_view("{question}").size();
    if (after < out.size() && out[after] == '.' && text::ends_with_sentence_punct(q)) out.erase(after, 1);
    out.replace(pos, std::string_view("{question}").size(), q);
    return out;
}

inline std::string render_export_completion(const std::string& tmpl, std::string_view rationale,
                                            std::string_view answer) {
    std::string out = tmpl;
    // {answer} first so a rationale containing "{answer}" is not substituted.
    text::replace_slot(out, "{answer}", answer);
    text::replace_slot(out, "{rationale}", rationale);
    return std::string(text::trim(out));
}

struct SftExport {
    std::vector<json> records;
    /// Questions dropped because positive_only left them empty.
    std::vector<std::string> omitted_questions;
};

inline SftExport export_sft(const SelectionResult& selected, const Corpus& corpus, const ExportConfig& cfg) {
    cfg.validate();
    SftExport out;
    for (const auto& qs : selected.questions) {
        if (qs.selected.empty()) continue;
        const auto& q = corpus.question(qs.question_id);
        std::size_t emitted = 0;
        for (const auto& s : qs.selected) {
            const auto& r = s.rationale;
            if (cfg.label == LabelStrategy::PositiveOnly && !r.correct) continue;
            const std::string& label = cfg.label == LabelStrategy::Predict ? r.predicted_answer : q.gold_answer;
            out.records.push_back(json{{"prompt", render_export_prompt(cfg.prompt_template, q.question)},
                                       {"completion", render_export_completion(cfg.completion_template,
                                                                               r.rationale_text, label)},
                                       {"label_source", label_source(cfg.label)},
                                       {"question_id", q.id}});
            ++emitted;
        }
        if (emitted == 0) out.omitted_questions.push_back(q.id);
    }
    return out;
}

// ---- Wilcoxon signed-rank --------------------------------------------------

struct WilcoxonResult {
    double p_value = 1.0;
    /// Sum of ranks of positive deltas.
    double w_plus = 0.0;
    std::size_t n = 0;
    bool exact = true;
    /// Every delta was zero.
    bool degenerate = false;
};

/// Largest non-zero sample size for which the exact null distribution is used.
inline constexpr std::size_t kWilcoxonExactMaxN = 25;

/// Midranks of |d| for the non-zero deltas, doubled so ties stay integral.
inline std::vector<int> wilcoxon_doubled_ranks(std::span<const double> nonzero) {
    const std::size_t n = nonzero.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return std::fabs(nonzero[a]) < std::fabs(nonzero[b]); });
    std::vector<int> ranks(n);
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j + 1 < n && std::fabs(nonzero[order[j + 1]]) == std::fabs(nonzero[order[i]])) ++j;
        int doubled = static_cast<int>(i + 1 + j + 1);  // 2 * average of ranks i+1..j+1
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = doubled;
        i = j + 1;
    }
    return ranks;
}

/// Two-sided test of zero median. Zero deltas are dropped first. Exact null
/// distribution for n <= 25, normal approximation with continuity and tie
/// correction above.
inline WilcoxonResult wilcoxon_signed_rank(std::span<const double> deltas) {
    std::vector<double> nz;
    for (double d : deltas)
        if (d != 0.0) nz.push_back(d);
    WilcoxonResult res;
    res.n = nz.size();
    if (nz.empty()) {
        res.degenerate = true;
        res.p_value = 1.0;
        return res;
    }
    auto ranks = wilcoxon_doubled_ranks(nz);
    int w2 = 0;
    int total2 = 0;
    for (std::size_t i = 0; i < nz.size(); ++i) {
        total2 += ranks[i];
        if (nz[i] > 0) w2 += ranks[i];
    }
    res.w_plus = w2 / 2.0;

    if (nz.size() <= kWilcoxonExactMaxN) {
        // counts[s]: sign assignments whose doubled positive-rank sum is s.
        std::vector<double> counts(static_cast<std::size_t>(total2) + 1, 0.0);
        counts[0] = 1.0;
        int reach = 0;
        for (int r : ranks) {
            for (int s = reach; s >= 0; --s)
                if (counts[static_cast<std::size_t>(s)] != 0.0)
                    counts[static_cast<std::size_t>(s + r)] += counts[static_cast<std::size_t>(s)];
            reach += r;
        }
        double all = std::ldexp(1.0, static_cast<int>(nz.size()));
        double le = 0.0, ge = 0.0;
        for (int s = 0; s <= total2; ++s) {
            if (s <= w2) le += counts[static_cast<std::size_t>(s)];
            if (s >= w2) ge += counts[static_cast<std::size_t>(s)];
        }
        res.exact = true;
        res.p_value = std::min(1.0, 2.0 * std::min(le, ge) / all);
        return res;
    }

    const double n = static_cast<double>(nz.size());
    double mean = n * (n + 1.0) / 4.0;
    double var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0;
    std::map<int, int> ties;
    for (int r : ranks) ++ties[r];
    for (const auto& [_, t] : ties) var -= (static_cast<double>(t) * t * t - t) / 48.0;
    double z = (std::fabs(res.w_plus - mean) - 0.5) / std::sqrt(var);
    if (z < 0.0) z = 0.0;
    res.exact = false;
    res.p_value = std::min(1.0, std::erfc(z / std::sqrt(2.0)));
    return res;
}

// ---- run statistics --------------------------------------------------------

struct Histogram {
    double min = 0.0;
    double max = 0.0;
    double width = 0.0;
    std::vector<std::size_t> counts;
};

inline constexpr std::size_t kRdHistogramBins = 50;

/// Uniform bins over [min, max]; the maximum falls in the last bin.
inline Histogram make_histogram(std::span<const double> values, std::size_t bins = kRdHistogramBins) {
    Histogram h;
    h.counts.assign(bins, 0);
    if (values.empty()) return h;
    auto [lo, hi] = std::minmax_element(values.begin(), values.end());
    h.min = *lo;
    h.max = *hi;
    h.width = (h.max - h.min) / static_cast<double>(bins);
    for (double v : values) {
        std::size_t b = h.width > 0.0 ? static_cast<std::size_t>((v - h.min) / h.width) : 0;
        ++h.counts[std::min(b, bins - 1)];
    }
    return h;
}

inline json histogram_to_json(const Histogram& h) {
    return json{{"bins", h.counts.size()}, {"min", h.min}, {"max", h.max}, {"width", h.width}, {"counts", h.counts}};
}

inline json summary_stats(std::vector<double> v) {
    if (v.empty()) return json{{"count", 0}};
    std::sort(v.begin(), v.end());
    double mean = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) mean += (v[i] - mean) / static_cast<double>(i + 1);
    double median = v.size() % 2 ? v[v.size() / 2] : (v[v.size() / 2 - 1] + v[v.size() / 2]) / 2.0;
    return json{{"count", v.size()}, {"min", v.front()}, {"max", v.back()}, {"mean", mean}, {"median", median}};
}

inline bool has_judge_template_tokens(std::string_view s) {
    return s.find("[System]") != std::string_view::npos || s.find("[The Start of Rationale") != std::string_view::npos ||
           s.find("[The End of Rationale") != std::string_view::npos || s.find("[Question]") != std::string_view::npos;
}

inline json selection_config_json(const SelectionConfig& c) {
    return json{{"seed", c.seed},
                {"delta", c.delta},
                {"ngram_n", c.ngram_n},
                {"diversity_keep", c.diversity_keep},
                {"difficulty_keep", c.difficulty_keep},
                {"retain_negatives", c.retain_negatives},
                {"accuracy_stage", c.use_accuracy},
                {"diversity_stage", c.use_diversity},
                {"difficulty_stage", c.use_difficulty}};
}

struct ReportInputs {
    const Corpus* questions = nullptr;
    const ScoredMap* scored = nullptr;
    const SelectionResult* selection = nullptr;
    const SelectionConfig* config = nullptr;
    /// Optional.
    const std::vector<JudgeVerdict>* verdicts = nullptr;
    const SftExport* sft = nullptr;
    std::size_t scoring_failures = 0;
};

/// The run report document: stage cardinalities, accuracy check, rd
/// statistics, length/rd pairs and raw judge score arrays.
inline json emit_statistics(const ReportInputs& in) {
    const auto& cfg = *in.config;
    json rep;
    rep["config"] = selection_config_json(cfg);
    rep["scoring_templates"] = json{{"base_conditioning", "Q: {question}\nA:"},
                                    {"rationale_conditioning", "Q: {question}\n{rationale}\nA:"},
                                    {"target", " {answer}"}};

    json stages = json::array();
    std::size_t tot_in = 0, tot_acc = 0, tot_div = 0, tot_sel = 0, acc_correct = 0;
    std::vector<std::string> undersized;
    for (const auto& qs : in.selection->questions) {
        bool emptied = qs.input > 0 && qs.after_accuracy.empty();
        bool small = !emptied && cfg.use_difficulty &&
                     qs.selected.size() < static_cast<std::size_t>(cfg.difficulty_keep);
        if (small) undersized.push_back(qs.question_id);
        stages.push_back(json{{"question_id", qs.question_id},
                              {"input", qs.input},
                              {"after_accuracy", qs.after_accuracy.size()},
                              {"after_diversity", qs.after_diversity.size()},
                              {"after_difficulty", qs.selected.size()},
                              {"emptied", emptied},
                              {"undersized", small}});
        tot_in += qs.input;
        tot_acc += qs.after_accuracy.size();
        tot_div += qs.after_diversity.size();
        tot_sel += qs.selected.size();
        for (const auto& s : qs.after_accuracy) acc_correct += s.rationale.correct ? 1 : 0;
    }
    rep["stage_cardinalities"] = stages;
    rep["totals"] = json{{"questions", in.questions->questions().size()},
                         {"scored", tot_in},
                         {"after_accuracy", tot_in ? tot_acc : 0},
                         {"after_diversity", tot_div},
                         {"after_difficulty", tot_sel},
                         {"scoring_failures", in.scoring_failures}};
    rep["emptied_questions"] = in.selection->emptied;
    rep["undersized_questions"] = undersized;

    double avg_acc = tot_acc ? static_cast<double>(acc_correct) / static_cast<double>(tot_acc) : 0.0;
    rep["accuracy_check"] = json{{"delta", cfg.delta},
                                 {"global_avg_acc", avg_acc},
                                 {"passes", !cfg.use_accuracy || tot_acc == 0 || avg_acc >= cfg.delta}};

    std::vector<double> all_rd, sel_rd;
    json length_rd = json::array();
    for (const auto& q : in.questions->questions()) {
        auto it = in.scored->find(q.id);
        if (it == in.scored->end()) continue;
        for (const auto& s : it->second) {
            all_rd.push_back(s.rd);
            length_rd.push_back(json::array({text::split_whitespace(s.rationale.rationale_text).size(), s.rd}));
        }
    }
    for (const auto& qs : in.selection->questions)
        for (const auto& s : qs.selected) sel_rd.push_back(s.rd);
    rep["rd_summary"] = json{{"all", summary_stats(all_rd)}, {"selected", summary_stats(sel_rd)}};
    rep["rd_histogram"] = json{{"all", histogram_to_json(make_histogram(all_rd))},
                               {"selected", histogram_to_json(make_histogram(sel_rd))}};
    rep["length_rd_pairs"] = length_rd;

    if (in.verdicts) {
        auto sum = aggregate_verdicts(*in.verdicts);
        auto side = [](const SideStats& s) {
            return json{{"wins", s.wins},
                        {"win_frequency", s.win_frequency},
                        {"mean_score", s.mean_score},
                        {"scores", s.scores},
                        {"histogram", s.histogram}};
        };
        json by_ds = json::object();
        for (const auto& [ds, w] : sum.by_dataset)
            by_ds[ds] = json{{"verdicts", w.verdicts},
                             {"min_rd_win_frequency", w.low_win_frequency},
                             {"max_rd_win_frequency", w.high_win_frequency}};
        rep["judge"] = json{{"pairs", sum.pairs},
                            {"verdicts", sum.verdicts},
                            {"ties", sum.ties},
                            {"excluded_pairs", sum.excluded_pairs},
                            {"min_rd", side(sum.low)},
                            {"max_rd", side(sum.high)},
                            {"by_dataset", by_ds}};
    }
    if (in.sft)
        rep["sft"] = json{{"records", in.sft->records.size()}, {"omitted_questions", in.sft->omitted_questions}};

    json flagged = json::array();
    for (const auto& q : in.questions->questions())
        if (has_judge_template_tokens(q.question)) flagged.push_back(q.id);
    rep["flags"] = json{{"questions_with_judge_template_tokens", flagged}};
    return rep;
}

}  // namespace morsd
