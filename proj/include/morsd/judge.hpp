#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "morsd/http.hpp"
#include "morsd/jsonl.hpp"
#include "morsd/selector.hpp"

namespace morsd {

inline constexpr std::string_view kJudgeSystemPrompt =
    "You are a helpful and precise assistant for checking the quality of the rationale based on a given question.";

inline constexpr std::string_view kJudgeTaskDescription =
    "We would like to request your feedback on the performance of two rationales in response to the question "
    "displayed above. Please rate the rationales. Each rationale receives an overall score on a scale of 1 to 10, "
    "where a higher score indicates better overall performance. Please first output a single line containing only "
    "two values indicating the scores for rationale 1 and rationale 2, respectively. The two scores are separated "
    "by a space. In the subsequent line, please provide a comprehensive explanation of your evaluation and fully "
    "compare the quality of the two rationales, avoiding any potential bias and ensuring that the order in which "
    "the rationale was presented does not affect your judgment.";

struct JudgePrompt {
    std::string system;
    std::string user;
};

/// Plain concatenation; inputs are not escaped.
inline JudgePrompt render_judge_prompt(std::string_view question, std::string_view rationale_1,
                                       std::string_view rationale_2) {
    if (question.empty() || rationale_1.empty() || rationale_2.empty())
        throw PreconditionError("judge prompt inputs must be non-empty");
    JudgePrompt p;
    p.system = kJudgeSystemPrompt;
    p.user = "[Question] ";
    p.user += question;
    p.user += " [The Start of Rationale1] ";
    p.user += rationale_1;
    p.user += " [The End of Rationale1] [The Start of Rationale2] ";
    p.user += rationale_2;
    p.user += " [The End of Rationale2] [System] ";
    p.user += kJudgeTaskDescription;
    return p;
}

class VerdictUnparseable : public Error {
public:
    using Error::Error;
};

struct ParsedVerdict {
    int score1 = 0;
    int score2 = 0;
    std::string explanation;
};

namespace detail {

inline std::optional<int> parse_score(std::string_view tok) {
    if (tok.empty() || tok.size() > 3) return std::nullopt;
    int v = 0;
    for (char c : tok) {
        if (!std::isdigit(static_cast<unsigned char>(c))) return std::nullopt;
        v = v * 10 + (c - '0');
    }
    return v;
}

}  // namespace detail

/// Reads "<s1> <s2>" from the start of the first line; the rest of the reply
/// is the explanation. Scores outside 1..10 are rejected.
inline ParsedVerdict parse_verdict(std::string_view raw_reply) {
    std::string_view s = text::trim(raw_reply);
    auto next_token = [&](std::string_view& rest) {
        std::size_t i = 0;
        while (i < rest.size() && (rest[i] == ' ' || rest[i] == '\t')) ++i;
        std::size_t j = i;
        while (j < rest.size() && !text::is_space(rest[j])) ++j;
        auto tok = rest.substr(i, j - i);
        rest = rest.substr(j);
        return tok;
    };
    std::string_view rest = s;
    auto a = detail::parse_score(next_token(rest));
    auto b = detail::parse_score(next_token(rest));
    if (!a || !b) throw VerdictUnparseable("first line does not start with two integer scores");
    if (*a < 1 || *a > 10 || *b < 1 || *b > 10) throw VerdictUnparseable("score outside 1..10");
    ParsedVerdict v{*a, *b, std::string(text::trim(rest))};
    return v;
}

enum class JudgeOrder { LowFirst, HighFirst };

inline std::string_view to_string(JudgeOrder o) { return o == JudgeOrder::LowFirst ? "low_first" : "high_first"; }

inline JudgeOrder parse_judge_order(std::string_view s) {
    if (s == "low_first") return JudgeOrder::LowFirst;
    if (s == "high_first") return JudgeOrder::HighFirst;
    throw Error("unknown judge order \"" + std::string(s) + "\"");
}

struct JudgePair {
    std::string question_id;
    std::string question;
    std::string rationale_low;
    std::string rationale_high;
};

struct JudgeVerdict {
    std::string question_id;
    JudgeOrder order = JudgeOrder::LowFirst;
    int score_position1 = 0;
    int score_position2 = 0;
    std::string explanation;
    std::string raw_reply;

    int score_low() const { return order == JudgeOrder::LowFirst ? score_position1 : score_position2; }
    int score_high() const { return order == JudgeOrder::LowFirst ? score_position2 : score_position1; }
};

/// Min-rd and max-rd rationale of each question's pool. Questions with
/// fewer than two rationales are skipped.
inline std::vector<JudgePair> build_judge_pairs(const Corpus& questions, const SelectionResult& sel) {
    std::vector<JudgePair> out;
    for (const auto& qs : sel.questions) {
        const auto& pool = qs.after_diversity;
        if (pool.size() < 2) continue;
        auto by_rd = [](const ScoredRationale& a, const ScoredRationale& b) {
            if (a.rd != b.rd) return a.rd < b.rd;
            return a.rationale.index < b.rationale.index;
        };
        auto [lo, hi] = std::minmax_element(pool.begin(), pool.end(), by_rd);
        out.push_back({qs.question_id, questions.question(qs.question_id).question, lo->rationale.rationale_text,
                       hi->rationale.rationale_text});
    }
    return out;
}

struct JudgeCall {
    const JudgePair* pair = nullptr;
    JudgeOrder order = JudgeOrder::LowFirst;
    JudgePrompt prompt;
};

class JudgeBackend {
public:
    virtual ~JudgeBackend() = default;
    virtual std::string reply(const JudgeCall& call) const = 0;
};

/// OpenAI-compatible /v1/chat/completions judge.
class RemoteJudge final : public JudgeBackend {
public:
    RemoteJudge(std::string url, std::string model, double temperature, RetryPolicy policy,
                LogSink log = stderr_log())
        : url_(std::move(url)), model_(std::move(model)), temperature_(temperature), client_(policy, std::move(log)) {}

    static json request_body(const std::string& model, double temperature, const JudgePrompt& p) {
        return json{{"model", model},
                    {"temperature", temperature},
                    {"messages", json::array({json{{"role", "system"}, {"content", p.system}},
                                              json{{"role", "user"}, {"content", p.user}}})}};
    }

    std::string reply(const JudgeCall& call) const override {
        auto res = client_.post(url_, request_body(model_, temperature_, call.prompt));
        try {
            return res.body.at("choices").at(0).at("message").at("content").get<std::string>();
        } catch (const json::exception&) {
            throw HttpError(200, "chat response lacks choices[0].message.content");
        }
    }

private:
    std::string url_;
    std::string model_;
    double temperature_;
    JsonHttpClient client_;
};

/// Offline judge. "stub:" replies "5 5"; "stub:position" always favours
/// position 1; "stub:reply=<text>" replies with fixed text;
/// "stub:script=<file>" reads a JSON object keyed "<question_id>/<order>"
/// with an optional "default" entry.
class StubJudge final : public JudgeBackend {
public:
    using ReplyFn = std::function<std::string(const JudgeCall&)>;
    explicit StubJudge(ReplyFn fn) : fn_(std::move(fn)) {}

    static std::unique_ptr<StubJudge> from_url(std::string_view url) {
        std::string_view spec = url.substr(std::string_view("stub:").size());
        if (spec.empty()) return std::make_unique<StubJudge>([](const JudgeCall&) { return std::string("5 5"); });
        if (spec == "position")
            return std::make_unique<StubJudge>([](const JudgeCall&) { return std::string("8 4\nPosition one."); });
        if (spec.starts_with("reply=")) {
            std::string r(spec.substr(6));
            return std::make_unique<StubJudge>([r](const JudgeCall&) { return r; });
        }
        if (spec.starts_with("script=")) {
            std::ifstream in{std::string(spec.substr(7))};
            if (!in) throw Error("cannot open judge script " + std::string(spec.substr(7)));
            json table = json::parse(in);
            return std::make_unique<StubJudge>([table](const JudgeCall& c) {
                std::string key = c.pair->question_id + "/" + std::string(to_string(c.order));
                if (table.contains(key)) return table[key].get<std::string>();
                if (table.contains("default")) return table["default"].get<std::string>();
                return std::string("5 5");
            });
        }
        throw PreconditionError("unknown judge stub \"" + std::string(url) + "\"");
    }

    std::string reply(const JudgeCall& call) const override { return fn_(call); }

private:
    ReplyFn fn_;
};

struct JudgeRun {
    /// Sorted by (question_id, order).
    std::vector<JudgeVerdict> verdicts;
    /// Pairs missing at least one verdict after retries.
    std::vector<std::string> incomplete;
    std::size_t unparsed_calls = 0;
};

/// Judges every pair twice, once in each order. An unparseable reply is
/// retried once; transport failures are retried by the backend.
inline JudgeRun judge_pairs(const std::vector<JudgePair>& pairs, const JudgeBackend& backend,
                            std::size_t max_in_flight) {
    struct Outcome {
        std::optional<JudgeVerdict> verdict;
        bool unparsed = false;
    };
    auto calls = parallel_map<Outcome>(pairs.size() * 2, max_in_flight, [&](std::size_t i) {
        const JudgePair& p = pairs[i / 2];
        JudgeCall call;
        call.pair = &p;
        call.order = i % 2 == 0 ? JudgeOrder::LowFirst : JudgeOrder::HighFirst;
        call.prompt = call.order == JudgeOrder::LowFirst ? render_judge_prompt(p.question, p.rationale_low, p.rationale_high)
                                                         : render_judge_prompt(p.question, p.rationale_high, p.rationale_low);
        Outcome o;
        for (int attempt = 0; attempt < 2; ++attempt) {
            std::string raw;
            try {
                raw = backend.reply(call);
            } catch (const Error&) {
                return o;
            }
            try {
                auto pv = parse_verdict(raw);
                o.verdict = JudgeVerdict{p.question_id, call.order, pv.score1, pv.score2, pv.explanation, raw};
                return o;
            } catch (const VerdictUnparseable&) {
                o.unparsed = true;
            }
        }
        return o;
    });
    JudgeRun run;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        bool complete = true;
        for (std::size_t k = 0; k < 2; ++k) {
            auto& o = calls[2 * i + k];
            if (o.unparsed && !o.verdict) ++run.unparsed_calls;
            if (o.verdict)
                run.verdicts.push_back(std::move(*o.verdict));
            else
                complete = false;
        }
        if (!complete) run.incomplete.push_back(pairs[i].question_id);
    }
    std::stable_sort(run.verdicts.begin(), run.verdicts.end(), [](const JudgeVerdict& a, const JudgeVerdict& b) {
        if (a.question_id != b.question_id) return a.question_id < b.question_id;
        return a.order < b.order;
    });
    return run;
}

struct SideStats {
    std::size_t wins = 0;
    double win_frequency = 0.0;
    double mean_score = 0.0;
    /// Raw 1..10 scores of every verdict, including incomplete pairs, for
    /// density plots.
    std::vector<int> scores;
    /// counts[s-1] = number of verdicts giving this side score s.
    std::array<std::size_t, 10> histogram{};
};

struct DatasetWins {
    std::size_t verdicts = 0;
    std::size_t low_wins = 0;
    std::size_t high_wins = 0;
    double low_win_frequency = 0.0;
    double high_win_frequency = 0.0;
};

/// Dataset of a question id: the text before its first '/', or "default".
inline std::string dataset_of(std::string_view question_id) {
    auto slash = question_id.find('/');
    return slash == std::string_view::npos ? std::string("default") : std::string(question_id.substr(0, slash));
}

struct VerdictSummary {
    std::map<std::string, DatasetWins> by_dataset;
    SideStats low;
    SideStats high;
    std::size_t ties = 0;
    std::size_t verdicts = 0;
    std::size_t pairs = 0;
    std::size_t excluded_pairs = 0;
};

/// Strict score comparison per verdict; ties are their own bucket. Pairs
/// without both orders are excluded and counted.
inline VerdictSummary aggregate_verdicts(const std::vector<JudgeVerdict>& verdicts) {
    std::map<std::string, std::vector<const JudgeVerdict*>> by_pair;
    for (const auto& v : verdicts) by_pair[v.question_id].push_back(&v);
    VerdictSummary s;
    double sum_low = 0.0, sum_high = 0.0;
    for (const auto& [id, vs] : by_pair) {
        bool has_low_first = false, has_high_first = false;
        for (const auto* v : vs) (v->order == JudgeOrder::LowFirst ? has_low_first : has_high_first) = true;
        for (const auto* v : vs) {
            s.low.scores.push_back(v->score_low());
            s.high.scores.push_back(v->score_high());
            ++s.low.histogram[static_cast<std::size_t>(v->score_low() - 1)];
            ++s.high.histogram[static_cast<std::size_t>(v->score_high() - 1)];
        }
        if (vs.size() < 2 || !has_low_first || !has_high_first) {
            ++s.excluded_pairs;
            continue;
        }
        ++s.pairs;
        for (const auto* v : vs) {
            int lo = v->score_low(), hi = v->score_high();
            ++s.verdicts;
            auto& ds = s.by_dataset[dataset_of(id)];
            ++ds.verdicts;
            if (lo > hi) {
                ++s.low.wins;
                ++ds.low_wins;
            } else if (hi > lo) {
                ++s.high.wins;
                ++ds.high_wins;
            } else {
                ++s.ties;
            }
            sum_low += lo;
            sum_high += hi;
        }
    }
    if (s.verdicts > 0) {
        double n = static_cast<double>(s.verdicts);
        s.low.win_frequency = static_cast<double>(s.low.wins) / n;
        s.high.win_frequency = static_cast<double>(s.high.wins) / n;
        s.low.mean_score = sum_low / n;
        s.high.mean_score = sum_high / n;
    }
    for (auto& [_, ds] : s.by_dataset) {
        ds.low_win_frequency = static_cast<double>(ds.low_wins) / static_cast<double>(ds.verdicts);
        ds.high_win_frequency = static_cast<double>(ds.high_wins) / static_cast<double>(ds.verdicts);
    }
    return s;
}

inline json verdict_to_json(const JudgeVerdict& v) {
    return json{{"question_id", v.question_id},
                {"order", to_string(v.order)},
                {"score_position1", v.score_position1},
                {"score_position2", v.score_position2},
                {"explanation", v.explanation}};
}

inline JudgeVerdict verdict_from_json(const json& j, std::size_t line) {
    JudgeVerdict v;
    v.question_id = require_field<std::string>(j, "question_id", line);
    try {
        v.order = parse_judge_order(require_field<std::string>(j, "order", line));
    } catch (const SchemaError&) {
        throw;
    } catch (const Error& e) {
        throw SchemaError(line, e.what());
    }
    v.score_position1 = require_field<int>(j, "score_position1", line);
    v.score_position2 = require_field<int>(j, "score_position2", line);
    v.explanation = require_field<std::string>(j, "explanation", line);
    for (int s : {v.score_position1, v.score_position2})
        if (s < 1 || s > 10) throw SchemaError(line, "score outside 1..10");
    return v;
}

inline void save_verdicts(const std::vector<JudgeVerdict>& vs, const std::filesystem::path& path,
                          const json& header = nullptr) {
    std::vector<json> recs;
    for (const auto& v : vs) recs.push_back(verdict_to_json(v));
    write_jsonl_atomic(path, recs, header);
}

inline std::vector<JudgeVerdict> load_verdicts(const std::filesystem::path& path) {
    std::vector<JudgeVerdict> out;
    read_jsonl(path, [&](std::size_t line, const json& j) { out.push_back(verdict_from_json(j, line)); });
    return out;
}

}  // namespace morsd
