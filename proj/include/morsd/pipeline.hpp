#pragma once

#include <filesystem>
#include <fstream>
#include <memory>
#include <string>

#include "morsd/report.hpp"
#include "morsd/teacher.hpp"

namespace morsd {

/// A stage input file does not exist.
class MissingInput : public Error {
public:
    explicit MissingInput(const std::filesystem::path& p) : Error("missing input: " + p.string()), path_(p) {}
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

struct OracleSettings {
    int order = 3;
    double alpha = 0.1;
    /// Plain text, one training document per line. Empty: train on the run's
    /// own rationales.
    std::string training_file;
};

struct RunPaths {
    std::filesystem::path questions = "questions.jsonl";
    std::filesystem::path rationales = "rationales.jsonl";
    std::filesystem::path scored = "scored.jsonl";
    std::filesystem::path selected = "selected.jsonl";
    std::filesystem::path verdicts = "verdicts.jsonl";
    std::filesystem::path report = "report.json";
    std::filesystem::path sft = "sft.jsonl";

    /// Re-roots every relative path under `dir`.
    void rebase(const std::filesystem::path& dir) {
        for (auto* p : {&questions, &rationales, &scored, &selected, &verdicts, &report, &sft})
            if (p->is_relative()) *p = dir / *p;
    }
};

struct RunConfig {
    RunPaths paths;
    GenerationConfig generation;
    SelectionConfig selection;
    ExportConfig export_config;
    /// Empty selects the n-gram oracle.
    std::string student_url;
    std::string student_model = "student";
    std::string judge_url = "stub:";
    std::string judge_model = "judge";
    double judge_temperature = 0.0;
    int max_in_flight = 4;
    int retry_budget = 5;
    OracleSettings oracle;
};

namespace detail {

template <typename T>
void read_opt(const json& j, const char* key, T& out) {
    if (auto it = j.find(key); it != j.end() && !it->is_null()) out = it->get<T>();
}

}  // namespace detail

/// Reads a JSON config file over the built-in defaults. Unknown keys are
/// ignored; secrets never come from here.
inline void apply_config_file(RunConfig& cfg, const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw MissingInput(path);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw Error("config " + path.string() + ": " + e.what());
    }
    try {
        if (auto p = j.find("paths"); p != j.end()) {
            auto set = [&](const char* k, std::filesystem::path& dst) {
                if (p->contains(k)) dst = (*p)[k].get<std::string>();
            };
            set("questions", cfg.paths.questions);
            set("rationales", cfg.paths.rationales);
            set("scored", cfg.paths.scored);
            set("selected", cfg.paths.selected);
            set("verdicts", cfg.paths.verdicts);
            set("report", cfg.paths.report);
            set("sft", cfg.paths.sft);
        }
        if (auto g = j.find("generation"); g != j.end()) {
            detail::read_opt(*g, "samples_per_question", cfg.generation.samples_per_question);
            detail::read_opt(*g, "temperatures", cfg.generation.temperatures);
            detail::read_opt(*g, "max_tokens", cfg.generation.max_tokens);
            detail::read_opt(*g, "model", cfg.generation.model_name);
        }
        if (auto s = j.find("selection"); s != j.end()) {
            detail::read_opt(*s, "seed", cfg.selection.seed);
            detail::read_opt(*s, "delta", cfg.selection.delta);
            detail::read_opt(*s, "ngram_n", cfg.selection.ngram_n);
            detail::read_opt(*s, "diversity_keep", cfg.selection.diversity_keep);
            detail::read_opt(*s, "difficulty_keep", cfg.selection.difficulty_keep);
            detail::read_opt(*s, "retain_negatives", cfg.selection.retain_negatives);
        }
        if (auto e = j.find("export"); e != j.end()) {
            if (e->contains("label")) {
                auto l = parse_label_strategy((*e)["label"].get<std::string>());
                if (!l) throw Error("config: unknown label strategy");
                cfg.export_config.label = *l;
            }
            detail::read_opt(*e, "prompt_template", cfg.export_config.prompt_template);
            detail::read_opt(*e, "completion_template", cfg.export_config.completion_template);
        }
        if (auto e = j.find("endpoints"); e != j.end()) {
            detail::read_opt(*e, "teacher", cfg.generation.endpoint_url);
            detail::read_opt(*e, "student", cfg.student_url);
            detail::read_opt(*e, "student_model", cfg.student_model);
            detail::read_opt(*e, "judge", cfg.judge_url);
            detail::read_opt(*e, "judge_model", cfg.judge_model);
            detail::read_opt(*e, "judge_temperature", cfg.judge_temperature);
        }
        if (auto o = j.find("oracle"); o != j.end()) {
            detail::read_opt(*o, "order", cfg.oracle.order);
            detail::read_opt(*o, "alpha", cfg.oracle.alpha);
            detail::read_opt(*o, "training_file", cfg.oracle.training_file);
        }
        detail::read_opt(j, "max_in_flight", cfg.max_in_flight);
        detail::read_opt(j, "retry_budget", cfg.retry_budget);
    } catch (const json::exception& e) {
        throw Error("config " + path.string() + ": " + e.what());
    }
}

inline json stage_header(const RunConfig& cfg, std::string_view stage) {
    return json{{"tool", "morsd"}, {"stage", stage}, {"seed", cfg.selection.seed}};
}

namespace detail {

inline void require_input(const std::filesystem::path& p) {
    if (!std::filesystem::exists(p)) throw MissingInput(p);
}

inline Corpus load_questions_and_rationales(const RunConfig& cfg) {
    require_input(cfg.paths.questions);
    require_input(cfg.paths.rationales);
    Corpus c = load_questions(cfg.paths.questions);
    attach_rationales(c, load_rationales(cfg.paths.rationales));
    return c;
}

inline RetryPolicy retry_policy(const RunConfig& cfg) {
    RetryPolicy p;
    p.budget = cfg.retry_budget;
    return p;
}

}  // namespace detail

inline void stage_generate(const RunConfig& cfg, LogSink log = stderr_log()) {
    detail::require_input(cfg.paths.questions);
    Corpus qs = load_questions(cfg.paths.questions);
    GenerationConfig gen = cfg.generation;
    gen.max_in_flight = cfg.max_in_flight;
    gen.retry_budget = cfg.retry_budget;
    auto teacher = make_teacher(gen, cfg.selection.seed, log);
    auto resume = ResumeFiles::for_output(cfg.paths.rationales);
    Corpus out = generate_rationales(qs, gen, *teacher, &resume);
    save_rationales(out, cfg.paths.rationales, stage_header(cfg, "generate"));
    resume.remove();
}

inline std::unique_ptr<ScoringBackend> make_scorer(const RunConfig& cfg, const Corpus& corpus,
                                                   LogSink log = stderr_log()) {
    if (!cfg.student_url.empty())
        return std::make_unique<RemoteLogprobScorer>(cfg.student_url, cfg.student_model, detail::retry_policy(cfg),
                                                     std::move(log));
    std::vector<std::string> texts;
    if (!cfg.oracle.training_file.empty()) {
        std::ifstream in(cfg.oracle.training_file);
        if (!in) throw MissingInput(cfg.oracle.training_file);
        for (std::string line; std::getline(in, line);)
            if (!text::trim(line).empty()) texts.push_back(line);
    } else {
        texts = oracle_training_texts(corpus);
    }
    return std::make_unique<NgramOracle>(train_oracle(texts, cfg.oracle.order, cfg.oracle.alpha));
}

inline ScoringResult stage_score(const RunConfig& cfg, LogSink log = stderr_log()) {
    Corpus c = detail::load_questions_and_rationales(cfg);
    auto backend = make_scorer(cfg, c, log);
    auto res = score_corpus(*backend, c, static_cast<std::size_t>(cfg.max_in_flight));
    for (const auto& f : res.failures)
        if (log) log("scoring failed for " + f.question_id + "#" + std::to_string(f.index) + ": " + f.message);
    json header = stage_header(cfg, "score");
    header["failures"] = res.failures.size();
    header["base_computations"] = res.base_computations;
    save_scored(c, res.scored, cfg.paths.scored, header);
    return res;
}

struct ScoredInputs {
    Corpus questions;
    ScoredMap scored;
    std::size_t scoring_failures = 0;
};

inline ScoredInputs load_scored_inputs(const RunConfig& cfg) {
    detail::require_input(cfg.paths.questions);
    detail::require_input(cfg.paths.scored);
    ScoredInputs in{load_questions(cfg.paths.questions), load_scored(cfg.paths.scored), 0};
    for (const auto& [id, _] : in.scored)
        if (!in.questions.find(id)) throw Error("scored record references unknown question \"" + id + "\"");
    json h = read_jsonl_header(cfg.paths.scored);
    if (h.is_object() && h.contains("failures")) in.scoring_failures = h["failures"].get<std::size_t>();
    return in;
}

inline SelectionResult stage_select(const RunConfig& cfg) {
    auto in = load_scored_inputs(cfg);
    auto sel = run_selection(in.questions, in.scored, cfg.selection);
    write_jsonl_atomic(cfg.paths.selected, selected_records(in.questions, sel, cfg.export_config.label),
                       stage_header(cfg, "select"));
    return sel;
}

inline std::unique_ptr<JudgeBackend> make_judge(const RunConfig& cfg, LogSink log = stderr_log()) {
    if (is_stub_url(cfg.judge_url)) return StubJudge::from_url(cfg.judge_url);
    return std::make_unique<RemoteJudge>(cfg.judge_url, cfg.judge_model, cfg.judge_temperature,
                                         detail::retry_policy(cfg), std::move(log));
}

inline JudgeRun stage_judge(const RunConfig& cfg, LogSink log = stderr_log()) {
    auto in = load_scored_inputs(cfg);
    auto sel = run_selection(in.questions, in.scored, cfg.selection);
    auto pairs = build_judge_pairs(in.questions, sel);
    auto judge = make_judge(cfg, log);
    auto run = judge_pairs(pairs, *judge, static_cast<std::size_t>(cfg.max_in_flight));
    json header = stage_header(cfg, "judge");
    header["incomplete_pairs"] = run.incomplete;
    header["unparsed_calls"] = run.unparsed_calls;
    save_verdicts(run.verdicts, cfg.paths.verdicts, header);
    return run;
}

/// Writes report.json and sft.jsonl. Verdicts are included when the
/// verdicts file exists.
inline json stage_report(const RunConfig& cfg) {
    auto in = load_scored_inputs(cfg);
    auto sel = run_selection(in.questions, in.scored, cfg.selection);
    std::vector<JudgeVerdict> verdicts;
    bool have_verdicts = std::filesystem::exists(cfg.paths.verdicts);
    if (have_verdicts) verdicts = load_verdicts(cfg.paths.verdicts);
    auto sft = export_sft(sel, in.questions, cfg.export_config);
    write_jsonl_atomic(cfg.paths.sft, sft.records);

    ReportInputs ri;
    ri.questions = &in.questions;
    ri.scored = &in.scored;
    ri.selection = &sel;
    ri.config = &cfg.selection;
    ri.verdicts = have_verdicts ? &verdicts : nullptr;
    ri.sft = &sft;
    ri.scoring_failures = in.scoring_failures;
    json rep = emit_statistics(ri);
    rep["tool"] = "morsd";
    rep["label_strategy"] = to_string(cfg.export_config.label);
    write_json_atomic(cfg.paths.report, rep);
    return rep;
}

inline void stage_run(const RunConfig& cfg, LogSink log = stderr_log()) {
    stage_generate(cfg, log);
    stage_score(cfg, log);
    stage_select(cfg);
    stage_judge(cfg, log);
    stage_report(cfg);
}

}  // namespace morsd
