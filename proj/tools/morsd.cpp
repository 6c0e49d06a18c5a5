// morsd: rationale generation, scoring, selection, judging and export.
//
// Exit codes: 0 success, 1 stage failure, 2 usage error or missing input.

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "morsd/pipeline.hpp"

namespace {

struct Flags {
    std::string config;
    std::string dir;
    std::optional<std::uint64_t> seed;
    std::optional<double> delta;
    std::optional<int> ngram;
    std::optional<int> keep;
    std::optional<int> top;
    std::optional<int> samples;
    std::optional<int> max_in_flight;
    std::string oracle;
    std::optional<std::string> teacher_url;
    std::optional<std::string> student_url;
    std::optional<std::string> judge_url;
    std::optional<std::string> label;
    bool no_accuracy = false;
    bool no_diversity = false;
    bool no_difficulty = false;
    bool positive_only_negatives = false;
};

void print_error(std::string_view stage, std::string_view kind, std::string_view msg) {
    morsd::json e{{"error", {{"stage", stage}, {"kind", kind}, {"message", msg}}}};
    std::cerr << morsd::dump_line(e) << '\n';
}

morsd::RunConfig build_config(const Flags& f) {
    morsd::RunConfig cfg;
    if (!f.config.empty()) morsd::apply_config_file(cfg, f.config);
    if (f.seed) cfg.selection.seed = *f.seed;
    if (f.delta) cfg.selection.delta = *f.delta;
    if (f.ngram) cfg.selection.ngram_n = *f.ngram;
    if (f.keep) cfg.selection.diversity_keep = *f.keep;
    if (f.top) cfg.selection.difficulty_keep = *f.top;
    if (f.samples) cfg.generation.samples_per_question = *f.samples;
    if (f.max_in_flight) cfg.max_in_flight = *f.max_in_flight;
    if (f.teacher_url) cfg.generation.endpoint_url = *f.teacher_url;
    if (f.student_url) cfg.student_url = *f.student_url;
    if (f.oracle == "ngram") cfg.student_url.clear();
    if (f.judge_url) cfg.judge_url = *f.judge_url;
    if (f.label) cfg.export_config.label = *morsd::parse_label_strategy(*f.label);
    if (f.no_accuracy) cfg.selection.use_accuracy = false;
    if (f.no_diversity) cfg.selection.use_diversity = false;
    if (f.no_difficulty) cfg.selection.use_difficulty = false;
    if (f.positive_only_negatives) cfg.selection.retain_negatives = false;
    if (!f.dir.empty()) cfg.paths.rebase(f.dir);
    cfg.selection.validate();
    cfg.export_config.validate();
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Rationale selection for chain-of-thought distillation"};
    app.require_subcommand(1);
    app.fallthrough();

    Flags f;
    app.add_option("--config", f.config, "JSON config file");
    app.add_option("--dir", f.dir, "Directory for stage files with relative paths");
    app.add_option("--seed", f.seed, "Seed for stub generation and diversity selection");
    app.add_option("--delta", f.delta, "Accuracy threshold")->check(CLI::Range(0.0, 1.0));
    app.add_option("--ngram", f.ngram, "N-gram size for diversity selection")->check(CLI::PositiveNumber);
    app.add_option("--keep", f.keep, "Rationales kept by diversity selection")->check(CLI::PositiveNumber);
    app.add_option("--top", f.top, "Rationales kept by difficulty selection")->check(CLI::PositiveNumber);
    app.add_option("--samples", f.samples, "Rationales generated per question")->check(CLI::Range(1, 64));
    app.add_option("--max-in-flight", f.max_in_flight, "Concurrent endpoint requests")->check(CLI::PositiveNumber);
    app.add_option("--oracle", f.oracle, "Offline scorer")->check(CLI::IsMember({"ngram"}));
    app.add_option("--teacher-url", f.teacher_url, "Completions endpoint for generation, or stub:");
    app.add_option("--student-url", f.student_url, "Completions endpoint with echo+logprobs for scoring");
    app.add_option("--judge-url", f.judge_url, "Chat endpoint for judging, or stub:");
    app.add_option("--label", f.label, "Export label strategy")
        ->check(CLI::IsMember({"gold", "predict", "positive_only"}));
    app.add_flag("--no-accuracy", f.no_accuracy, "Skip accuracy selection");
    app.add_flag("--no-diversity", f.no_diversity, "Skip diversity selection");
    app.add_flag("--no-difficulty", f.no_difficulty, "Skip difficulty selection");
    app.add_flag("--drop-negatives", f.positive_only_negatives,
                 "Remove every incorrect rationale during accuracy selection");

    auto* generate = app.add_subcommand("generate", "Sample rationales from the teacher");
    auto* score = app.add_subcommand("score", "Compute perplexities and rationale difficulty");
    auto* select = app.add_subcommand("select", "Accuracy, diversity and difficulty selection");
    auto* judge = app.add_subcommand("judge", "Pairwise min-RD vs max-RD judging");
    auto* report = app.add_subcommand("report", "Write report.json and sft.jsonl");
    auto* run = app.add_subcommand("run", "All stages in order");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    std::string stage = app.get_subcommands().front()->get_name();
    morsd::RunConfig cfg;
    try {
        cfg = build_config(f);
    } catch (const morsd::MissingInput& e) {
        print_error(stage, "missing_input", e.path().string());
        return 2;
    } catch (const std::exception& e) {
        print_error(stage, "usage", e.what());
        return 2;
    }

    try {
        if (generate->parsed()) morsd::stage_generate(cfg);
        else if (score->parsed()) morsd::stage_score(cfg);
        else if (select->parsed()) morsd::stage_select(cfg);
        else if (judge->parsed()) morsd::stage_judge(cfg);
        else if (report->parsed()) morsd::stage_report(cfg);
        else if (run->parsed()) morsd::stage_run(cfg);
    } catch (const morsd::MissingInput& e) {
        print_error(stage, "missing_input", e.path().string());
        return 2;
    } catch (const std::exception& e) {
        print_error(stage, "stage_failure", e.what());
        return 1;
    }
    return 0;
}
