#pragma once

#include <charconv>
#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "morsd/common.hpp"
#include "morsd/jsonl.hpp"

namespace morsd {

enum class TaskKind { Numeric, MultipleChoice, Boolean, FreeText };

inline std::string_view to_string(TaskKind k) {
    switch (k) {
        case TaskKind::Numeric: return "numeric";
        case TaskKind::MultipleChoice: return "multiple_choice";
        case TaskKind::Boolean: return "boolean";
        case TaskKind::FreeText: return "free_text";
    }
    return "free_text";
}

inline std::optional<TaskKind> parse_task_kind(std::string_view s) {
    if (s == "numeric") return TaskKind::Numeric;
    if (s == "multiple_choice") return TaskKind::MultipleChoice;
    if (s == "boolean") return TaskKind::Boolean;
    if (s == "free_text") return TaskKind::FreeText;
    return std::nullopt;
}

/// The answer declaration that ends every teacher completion.
inline constexpr std::string_view kAnswerMarker = "Therefore, the answer is";
inline constexpr std::string_view kPromptLeadIn = "Let's think step by step.";

class MarkerMissing : public Error {
public:
    MarkerMissing() : Error("answer marker not found in completion") {}
};

class AnswerUnparseable : public Error {
public:
    using Error::Error;
};

struct QuestionInstance {
    std::string id;
    std::string question;
    std::string gold_answer;
    TaskKind task = TaskKind::FreeText;

    bool operator==(const QuestionInstance&) const = default;
};

struct Rationale {
    std::string question_id;
    int index = 1;
    std::string rationale_text;
    std::string predicted_answer;
    std::string raw_completion;
    double temperature = 0.0;
    bool correct = false;

    bool operator==(const Rationale&) const = default;
};

/// Questions in file order plus their candidate rationales keyed by question id.
class Corpus {
public:
    Corpus() = default;

    void add_question(QuestionInstance q) {
        if (index_.contains(q.id)) throw Error("duplicate question id \"" + q.id + "\"");
        index_.emplace(q.id, questions_.size());
        questions_.push_back(std::move(q));
    }

    const std::vector<QuestionInstance>& questions() const { return questions_; }

    const QuestionInstance* find(std::string_view id) const {
        auto it = index_.find(std::string(id));
        return it == index_.end() ? nullptr : &questions_[it->second];
    }

    const QuestionInstance& question(std::string_view id) const {
        const auto* q = find(id);
        if (!q) throw Error("unknown question id \"" + std::string(id) + "\"");
        return *q;
    }

    std::map<std::string, std::vector<Rationale>>& rationales() { return rationales_; }
    const std::map<std::string, std::vector<Rationale>>& rationales() const { return rationales_; }

    /// Rationales of one question; empty if it has none.
    const std::vector<Rationale>& rationales_for(std::string_view id) const {
        static const std::vector<Rationale> kEmpty;
        auto it = rationales_.find(std::string(id));
        return it == rationales_.end() ? kEmpty : it->second;
    }

    std::size_t rationale_count() const {
        std::size_t n = 0;
        for (const auto& [_, v] : rationales_) n += v.size();
        return n;
    }

    bool operator==(const Corpus& o) const {
        return questions_ == o.questions_ && rationales_ == o.rationales_;
    }

private:
    std::vector<QuestionInstance> questions_;
    std::unordered_map<std::string, std::size_t> index_;
    std::map<std::string, std::vector<Rationale>> rationales_;
};

namespace detail {

struct NumberToken {
    double value;
    std::size_t end;
};

// First decimal number in s: optional sign, digit groups with commas, optional
// fraction. "342." stops before the dot.
inline std::optional<NumberToken> find_number(std::string_view s) {
    auto digit = [&](std::size_t i) { return i < s.size() && std::isdigit(static_cast<unsigned char>(s[i])); };
    for (std::size_t i = 0; i < s.size(); ++i) {
        std::size_t start = i;
        bool neg = false;
        if (s[i] == '-' && (digit(i + 1) || (i + 2 < s.size() && s[i + 1] == '.' && digit(i + 2)))) {
            neg = true;
            ++i;
        }
        if (!digit(i) && !(s[i] == '.' && digit(i + 1))) {
            i = start;
            continue;
        }
        std::string buf;
        if (neg) buf.push_back('-');
        while (digit(i) || (i < s.size() && s[i] == ',' && digit(i + 1) && i > start && digit(i - 1))) {
            if (s[i] != ',') buf.push_back(s[i]);
            ++i;
        }
        if (i < s.size() && s[i] == '.' && digit(i + 1)) {
            if (buf.empty() || buf == "-") buf.push_back('0');
            buf.push_back('.');
            ++i;
            while (digit(i)) buf.push_back(s[i++]);
        }
        double v = 0.0;
        auto res = std::from_chars(buf.data(), buf.data() + buf.size(), v);
        if (res.ec != std::errc{}) return std::nullopt;
        return NumberToken{v, i};
    }
    return std::nullopt;
}

inline std::string canonical_number(double v) {
    if (v == 0.0) v = 0.0;  // folds -0
    char buf[512];
    auto res = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::fixed);
    return std::string(buf, res.ptr);
}

inline bool is_alpha(char c) { return std::isalpha(static_cast<unsigned char>(c)) != 0; }

// First standalone choice letter: "(e)" in any case, or a bare uppercase
// letter optionally followed by ')' or punctuation ("E)", "E", "E.").
inline std::optional<char> find_choice_letter(std::string_view s) {
    for (const auto& tok : text::split_whitespace(s)) {
        std::string_view t = tok;
        while (!t.empty() && (t.back() == ',' || t.back() == '.' || t.back() == ':' || t.back() == ';'))
            t.remove_suffix(1);
        if (t.size() == 3 && t[0] == '(' && t[2] == ')' && is_alpha(t[1]))
            return static_cast<char>(std::toupper(static_cast<unsigned char>(t[1])));
        if (t.size() == 2 && t[1] == ')' && is_alpha(t[0]) && std::isupper(static_cast<unsigned char>(t[0])))
            return t[0];
        if (t.size() == 1 && std::isupper(static_cast<unsigned char>(t[0]))) return t[0];
    }
    return std::nullopt;
}

inline std::optional<std::string> find_yes_no(std::string_view s) {
    for (const auto& tok : text::split_whitespace(s)) {
        std::string t = text::to_lower(tok);
        std::string_view v = t;
        while (!v.empty() && !is_alpha(v.front())) v.remove_prefix(1);
        while (!v.empty() && !is_alpha(v.back())) v.remove_suffix(1);
        if (v == "yes" || v == "no") return std::string(v);
    }
    return std::nullopt;
}

inline std::string collapse_whitespace_lower(std::string_view s) {
    std::string out;
    for (const auto& tok : text::split_whitespace(s)) {
        if (!out.empty()) out.push_back(' ');
        out += text::to_lower(tok);
    }
    return out;
}

}  // namespace detail

/// Canonical answer form used for equality: numbers in shortest fixed
/// notation, choice letters uppercased, booleans as yes/no, free text
/// lowercased with collapsed whitespace and no terminal punctuation.
inline std::string normalize_answer(std::string_view answer, TaskKind task) {
    switch (task) {
        case TaskKind::Numeric: {
            auto n = detail::find_number(answer);
            if (!n) throw AnswerUnparseable("no number in \"" + std::string(answer) + "\"");
            return detail::canonical_number(n->value);
        }
        case TaskKind::MultipleChoice: {
            if (auto c = detail::find_choice_letter(answer)) return std::string(1, *c);
            std::string_view t = text::strip_terminal_punct(answer);
            if (t.size() >= 2 && t.front() == '(' && t.back() == ')') t = t.substr(1, t.size() - 2);
            if (t.size() == 1 && detail::is_alpha(t[0]))
                return std::string(1, static_cast<char>(std::toupper(static_cast<unsigned char>(t[0]))));
            throw AnswerUnparseable("no choice letter in \"" + std::string(answer) + "\"");
        }
        case TaskKind::Boolean: {
            if (auto b = detail::find_yes_no(answer)) return *b;
            throw AnswerUnparseable("no yes/no in \"" + std::string(answer) + "\"");
        }
        case TaskKind::FreeText: {
            std::string out = detail::collapse_whitespace_lower(answer);
            std::string_view v = text::strip_terminal_punct(out);
            if (v.empty()) throw AnswerUnparseable("empty answer");
            return std::string(v);
        }
    }
    throw AnswerUnparseable("unknown task kind");
}

/// Equality of answers under their canonical forms. Numbers compare by value
/// within 1e-9. Unparseable input on either side is unequal.
inline bool answers_equal(std::string_view a, std::string_view b, TaskKind task) {
    try {
        if (task == TaskKind::Numeric) {
            auto x = detail::find_number(a);
            auto y = detail::find_number(b);
            if (!x || !y) return false;
            return std::fabs(x->value - y->value) <= 1e-9;
        }
        return normalize_answer(a, task) == normalize_answer(b, task);
    } catch (const AnswerUnparseable&) {
        return false;
    }
}

struct ExtractedAnswer {
    std::string rationale_text;
    std::string predicted_answer;
};

/// Parses only the answer part of a completion (the text after the marker,
/// or a second-stage continuation).
inline std::string parse_answer_text(std::string_view after_marker, TaskKind task) {
    std::string_view s = text::trim(after_marker);
    if (s.empty()) throw AnswerUnparseable("nothing after answer marker");
    if (task == TaskKind::MultipleChoice) {
        if (auto c = detail::find_choice_letter(s)) return std::string(1, *c);
        return normalize_answer(s, task);
    }
    if (task == TaskKind::FreeText) {
        // Only the first line belongs to the answer.
        auto nl = s.find('\n');
        return normalize_answer(s.substr(0, nl), task);
    }
    return normalize_answer(s, task);
}

/// Rationale text with the prompt lead-in stripped and any earlier marker
/// restatements lowercased so the marker string occurs nowhere in it.
inline std::string clean_rationale_text(std::string_view before) {
    std::string_view r = text::trim(before);
    if (r.starts_with(kPromptLeadIn)) r = text::trim(r.substr(kPromptLeadIn.size()));
    std::string out(r);
    for (auto pos = out.find(kAnswerMarker); pos != std::string::npos; pos = out.find(kAnswerMarker, pos))
        out[pos] = 't';
    return out;
}

/// Splits a completion at the last answer marker.
/// Throws MarkerMissing if the marker is absent and AnswerUnparseable if the
/// text after it holds no answer of the requested kind.
inline ExtractedAnswer extract_answer(std::string_view raw_completion, TaskKind task) {
    if (raw_completion.empty()) throw PreconditionError("empty completion");
    auto pos = raw_completion.rfind(kAnswerMarker);
    if (pos == std::string_view::npos) throw MarkerMissing();
    ExtractedAnswer out;
    out.rationale_text = clean_rationale_text(raw_completion.substr(0, pos));
    out.predicted_answer = parse_answer_text(raw_completion.substr(pos + kAnswerMarker.size()), task);
    return out;
}

// ---- JSONL I/O -------------------------------------------------------------

inline Corpus load_questions(const std::filesystem::path& path) {
    Corpus c;
    read_jsonl(path, [&](std::size_t line, const json& j) {
        QuestionInstance q;
        q.id = require_field<std::string>(j, "id", line);
        q.question = require_field<std::string>(j, "question", line);
        q.gold_answer = require_field<std::string>(j, "answer", line);
        auto task = parse_task_kind(require_field<std::string>(j, "task", line));
        if (!task) throw SchemaError(line, "unknown task kind");
        q.task = *task;
        if (text::trim(q.question).empty()) throw SchemaError(line, "empty question");
        if (text::trim(q.gold_answer).empty()) throw SchemaError(line, "empty answer");
        try {
            normalize_answer(q.gold_answer, q.task);
        } catch (const AnswerUnparseable& e) {
            throw SchemaError(line, std::string("gold answer: ") + e.what());
        }
        try {
            c.add_question(std::move(q));
        } catch (const Error& e) {
            throw SchemaError(line, e.what());
        }
    });
    return c;
}

inline json question_to_json(const QuestionInstance& q) {
    return json{{"id", q.id}, {"question", q.question}, {"answer", q.gold_answer}, {"task", to_string(q.task)}};
}

inline json rationale_to_json(const Rationale& r) {
    return json{{"question_id", r.question_id},
                {"index", r.index},
                {"rationale", r.rationale_text},
                {"predicted_answer", r.predicted_answer},
                {"raw_completion", r.raw_completion},
                {"temperature", r.temperature},
                {"correct", r.correct}};
}

inline Rationale rationale_from_json(const json& j, std::size_t line) {
    Rationale r;
    r.question_id = require_field<std::string>(j, "question_id", line);
    r.index = require_field<int>(j, "index", line);
    r.rationale_text = require_field<std::string>(j, "rationale", line);
    r.predicted_answer = require_field<std::string>(j, "predicted_answer", line);
    r.raw_completion = require_field<std::string>(j, "raw_completion", line);
    r.temperature = require_field<double>(j, "temperature", line);
    r.correct = require_field<bool>(j, "correct", line);
    if (r.index < 1) throw SchemaError(line, "index must be >= 1");
    return r;
}

/// Rationale records in question order, then index order. Rationales of ids
/// without a question entry follow in id order.
template <typename Record, typename ToJson>
std::vector<json> ordered_records(const Corpus& c, const std::map<std::string, std::vector<Record>>& by_q,
                                  ToJson to_json) {
    std::vector<json> out;
    auto emit = [&](const std::vector<Record>& v) {
        for (const auto& r : v) out.push_back(to_json(r));
    };
    for (const auto& q : c.questions())
        if (auto it = by_q.find(q.id); it != by_q.end()) emit(it->second);
    for (const auto& [id, v] : by_q)
        if (!c.find(id)) emit(v);
    return out;
}

inline void save_rationales(const Corpus& c, const std::filesystem::path& path, const json& header = nullptr) {
    write_jsonl_atomic(path, ordered_records(c, c.rationales(), rationale_to_json), header);
}

/// Loads a rationale map; the returned corpus has no questions.
inline Corpus load_rationales(const std::filesystem::path& path) {
    Corpus c;
    read_jsonl(path, [&](std::size_t line, const json& j) {
        Rationale r = rationale_from_json(j, line);
        auto& v = c.rationales()[r.question_id];
        for (const auto& other : v)
            if (other.index == r.index) throw SchemaError(line, "duplicate rationale index");
        v.push_back(std::move(r));
    });
    return c;
}

/// Merges a loaded rationale map into a question corpus, checking references.
inline void attach_rationales(Corpus& questions, Corpus&& rationales) {
    for (auto& [id, v] : rationales.rationales()) {
        if (!questions.find(id)) throw Error("rationale references unknown question \"" + id + "\"");
        questions.rationales()[id] = std::move(v);
    }
}

}  // namespace morsd
