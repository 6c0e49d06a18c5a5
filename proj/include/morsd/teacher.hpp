#pragma once

#include <filesystem>
#include <fstream>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "morsd/corpus.hpp"
#include "morsd/http.hpp"

namespace morsd {

struct GenerationConfig {
    int samples_per_question = 8;
    std::vector<double> temperatures{0.7, 1.0};
    int max_tokens = 256;
    std::string endpoint_url = "stub:";
    std::string model_name = "teacher";
    int max_in_flight = 4;
    int retry_budget = 5;

    void validate() const {
        if (samples_per_question < 1 || samples_per_question > 64)
            throw PreconditionError("samples_per_question must be in [1, 64]");
        if (temperatures.empty()) throw PreconditionError("temperatures must be non-empty");
        for (double t : temperatures)
            if (!std::isfinite(t) || t < 0.0) throw PreconditionError("temperatures must be finite and >= 0");
        if (max_tokens <= 0) throw PreconditionError("max_tokens must be > 0");
        if (max_in_flight < 1) throw PreconditionError("max_in_flight must be >= 1");
        if (retry_budget < 0) throw PreconditionError("retry_budget must be >= 0");
    }

    double temperature_for(int sample_index) const {
        return temperatures[static_cast<std::size_t>(sample_index - 1) % temperatures.size()];
    }
};

/// Zero-shot chain-of-thought prompt: "Q: <question>. A: Let's think step by step."
/// A question already ending in . ? or ! is not given a second period.
inline std::string render_generation_prompt(std::string_view question) {
    std::string_view q = text::trim(question);
    if (q.empty()) throw PreconditionError("question must be non-empty");
    std::string out = "Q: ";
    out += q;
    out += text::ends_with_sentence_punct(q) ? " A: " : ". A: ";
    out += kPromptLeadIn;
    return out;
}

struct TeacherRequest {
    const QuestionInstance* question = nullptr;
    int sample_index = 1;
    double temperature = 0.0;
    std::string prompt;
    /// True for the follow-up call that asks only for the answer.
    bool answer_only = false;
};

class TeacherBackend {
public:
    virtual ~TeacherBackend() = default;
    virtual std::string complete(const TeacherRequest& req) const = 0;
};

/// OpenAI-compatible /v1/completions teacher.
class RemoteTeacher final : public TeacherBackend {
public:
    RemoteTeacher(std::string url, std::string model, int max_tokens, RetryPolicy policy, LogSink log = stderr_log())
        : url_(std::move(url)), model_(std::move(model)), max_tokens_(max_tokens), client_(policy, std::move(log)) {}

    std::string complete(const TeacherRequest& req) const override {
        json body{{"model", model_},
                  {"prompt", req.prompt},
                  {"temperature", req.temperature},
                  {"max_tokens", req.answer_only ? 32 : max_tokens_}};
        auto res = client_.post(url_, body);
        try {
            return res.body.at("choices").at(0).at("text").get<std::string>();
        } catch (const json::exception&) {
            throw HttpError(200, "completion response lacks choices[0].text");
        }
    }

private:
    std::string url_;
    std::string model_;
    int max_tokens_;
    JsonHttpClient client_;
};

/// Knobs of the offline teacher. All probabilities are per sample.
struct StubOptions {
    std::uint64_t seed = 0;
    double p_correct = 0.7;
    /// Rationale's last sentence states the sampled answer.
    double p_bearing = 0.5;
    /// Sample repeats sample 1 of the same question byte-for-byte.
    double p_duplicate = 0.0;
    /// Completion omits the answer marker, forcing a second-stage call.
    double p_missing_marker = 0.0;
};

namespace detail {

inline const std::vector<std::string>& stub_openers() {
    static const std::vector<std::string> v{
        "First, let us restate what the question asks.", "We start by reading the problem carefully.",
        "Let us identify the important facts.", "To begin, we list what is given.",
        "The question gives us a few pieces of information.", "We should work through this one step at a time."};
    return v;
}

inline const std::vector<std::string>& stub_middles() {
    static const std::vector<std::string> v{
        "The key detail is about {w}.",        "We need to keep track of {w}.",
        "Notice how {w} changes the picture.", "Then we combine this with what we know about {w}.",
        "It helps to think about {w} first.",  "Next, consider the part that mentions {w}.",
        "This tells us something about {w}.",  "We compare the numbers related to {w}.",
        "After that, {w} is the remaining piece.", "Putting the facts about {w} together narrows it down."};
    return v;
}

inline const std::vector<std::string>& stub_closers() {
    static const std::vector<std::string> v{"That settles the reasoning.", "Now we can conclude.",
                                            "This completes the argument.", "We have everything we need."};
    return v;
}

inline std::string wrong_answer(const QuestionInstance& q, std::mt19937_64& rng) {
    switch (q.task) {
        case TaskKind::Numeric: {
            auto n = find_number(q.gold_answer);
            double v = n ? n->value : 0.0;
            return canonical_number(v + static_cast<double>(1 + rng() % 9));
        }
        case TaskKind::MultipleChoice: {
            char gold = normalize_answer(q.gold_answer, q.task)[0];
            char c = static_cast<char>('A' + rng() % 4);
            if (c >= gold) ++c;
            return std::string(1, c);
        }
        case TaskKind::Boolean: return normalize_answer(q.gold_answer, q.task) == "yes" ? "no" : "yes";
        case TaskKind::FreeText: return "not " + normalize_answer(q.gold_answer, q.task);
    }
    return "unknown";
}

inline std::string render_stub_answer(const std::string& answer, TaskKind task) {
    switch (task) {
        case TaskKind::MultipleChoice: return "(" + answer + ")";
        case TaskKind::Boolean: return answer == "yes" ? "Yes" : "No";
        default: return answer;
    }
}

struct StubSample {
    std::string body;
    std::string answer;
    bool missing_marker = false;
};

inline StubSample stub_sample(const QuestionInstance& q, int sample_index, const StubOptions& opt) {
    if (sample_index > 1 && unit_interval(std::mt19937_64(derive_seed(opt.seed, q.id, 1000 + sample_index))()) <
                                opt.p_duplicate)
        sample_index = 1;
    std::mt19937_64 rng(derive_seed(opt.seed, q.id, static_cast<std::uint64_t>(sample_index)));
    bool correct = unit_interval(rng()) < opt.p_correct;
    bool bearing = unit_interval(rng()) < opt.p_bearing;
    bool missing = unit_interval(rng()) < opt.p_missing_marker;

    StubSample s;
    s.answer = correct ? normalize_answer(q.gold_answer, q.task) : wrong_answer(q, rng);
    s.missing_marker = missing;

    auto words = text::split_whitespace(q.question);
    auto word = [&] {
        if (words.empty()) return std::string("it");
        std::string w = text::to_lower(words[rng() % words.size()]);
        std::string_view v = text::strip_terminal_punct(w);
        return v.empty() ? std::string("it") : std::string(v);
    };
    const auto& mids = stub_middles();
    s.body = stub_openers()[rng() % stub_openers().size()];
    int n_mid = 2 + static_cast<int>(rng() % 3);
    for (int i = 0; i < n_mid; ++i) {
        std::string m = mids[rng() % mids.size()];
        text::replace_slot(m, "{w}", word());
        s.body += " " + m;
    }
    if (bearing)
        s.body += " So the result is " + s.answer;
    else
        s.body += " " + stub_closers()[rng() % stub_closers().size()];
    return s;
}

}  // namespace detail

/// Deterministic offline completion for (question, sample index, seed).
inline std::string stub_generate(const QuestionInstance& q, int sample_index, const StubOptions& opt) {
    auto s = detail::stub_sample(q, sample_index, opt);
    if (s.missing_marker) return " " + s.body + " We are done.";
    return " " + s.body + " " + std::string(kAnswerMarker) + " " + detail::render_stub_answer(s.answer, q.task) + ".";
}

class StubTeacher final : public TeacherBackend {
public:
    explicit StubTeacher(StubOptions opt) : opt_(opt) {}

    /// Parses "stub:" URLs with optional query keys p, bearing, dup, nomarker,
    /// seed, e.g. "stub:?p=0.8&dup=0.2". Unset seed falls back to `run_seed`.
    static StubOptions parse_url(std::string_view url, std::uint64_t run_seed) {
        StubOptions o;
        o.seed = run_seed;
        auto q = url.find('?');
        if (q == std::string_view::npos) return o;
        std::string_view rest = url.substr(q + 1);
        while (!rest.empty()) {
            auto amp = rest.find('&');
            std::string_view kv = rest.substr(0, amp);
            rest = amp == std::string_view::npos ? std::string_view{} : rest.substr(amp + 1);
            auto eq = kv.find('=');
            if (eq == std::string_view::npos) continue;
            std::string key(kv.substr(0, eq));
            std::string val(kv.substr(eq + 1));
            try {
                if (key == "p") o.p_correct = std::stod(val);
                else if (key == "bearing") o.p_bearing = std::stod(val);
                else if (key == "dup") o.p_duplicate = std::stod(val);
                else if (key == "nomarker") o.p_missing_marker = std::stod(val);
                else if (key == "seed") o.seed = std::stoull(val);
                else throw PreconditionError("unknown stub option \"" + key + "\"");
            } catch (const std::logic_error&) {
                throw PreconditionError("bad stub option value for \"" + key + "\"");
            }
        }
        return o;
    }

    std::string complete(const TeacherRequest& req) const override {
        if (req.answer_only) {
            auto s = detail::stub_sample(*req.question, req.sample_index, opt_);
            return " " + detail::render_stub_answer(s.answer, req.question->task) + ".";
        }
        return stub_generate(*req.question, req.sample_index, opt_);
    }

    const StubOptions& options() const { return opt_; }

private:
    StubOptions opt_;
};

inline std::unique_ptr<TeacherBackend> make_teacher(const GenerationConfig& cfg, std::uint64_t run_seed,
                                                    LogSink log = stderr_log()) {
    if (is_stub_url(cfg.endpoint_url))
        return std::make_unique<StubTeacher>(StubTeacher::parse_url(cfg.endpoint_url, run_seed));
    RetryPolicy policy;
    policy.budget = cfg.retry_budget;
    return std::make_unique<RemoteTeacher>(cfg.endpoint_url, cfg.model_name, cfg.max_tokens, policy, std::move(log));
}

class GenerationError : public Error {
public:
    GenerationError(const std::string& question_id, int sample_index, const std::string& cause)
        : Error("generation failed for question \"" + question_id + "\" sample " + std::to_string(sample_index) +
                ": " + cause),
          question_id_(question_id),
          sample_index_(sample_index) {}
    const std::string& question_id() const { return question_id_; }
    int sample_index() const { return sample_index_; }

private:
    std::string question_id_;
    int sample_index_;
};

/// One sample: completion, extraction, and the second-stage answer call when
/// the marker is missing. Unparseable answers become incorrect rationales.
inline Rationale generate_one(const TeacherBackend& backend, const QuestionInstance& q, int sample_index,
                              double temperature) {
    TeacherRequest req;
    req.question = &q;
    req.sample_index = sample_index;
    req.temperature = temperature;
    req.prompt = render_generation_prompt(q.question);

    Rationale r;
    r.question_id = q.id;
    r.index = sample_index;
    r.temperature = temperature;
    r.raw_completion = backend.complete(req);
    try {
        auto ex = extract_answer(r.raw_completion, q.task);
        r.rationale_text = std::move(ex.rationale_text);
        r.predicted_answer = std::move(ex.predicted_answer);
    } catch (const MarkerMissing&) {
        r.rationale_text = clean_rationale_text(r.raw_completion);
        TeacherRequest follow = req;
        follow.answer_only = true;
        follow.prompt = req.prompt + r.raw_completion + " " + std::string(kAnswerMarker);
        std::string cont = backend.complete(follow);
        r.raw_completion += " " + std::string(kAnswerMarker) + cont;
        try {
            r.predicted_answer = parse_answer_text(cont, q.task);
        } catch (const AnswerUnparseable&) {
            r.predicted_answer.clear();
        }
    } catch (const AnswerUnparseable&) {
        auto pos = r.raw_completion.rfind(kAnswerMarker);
        r.rationale_text = clean_rationale_text(std::string_view(r.raw_completion).substr(0, pos));
        r.predicted_answer.clear();
    }
    r.correct = !r.predicted_answer.empty() && answers_equal(r.predicted_answer, q.gold_answer, q.task);
    return r;
}

/// Sidecar files that make generation resumable: completed questions are
/// appended to `partial`, and `cursor` names the last fully persisted
/// (question id, sample index).
struct ResumeFiles {
    std::filesystem::path partial;
    std::filesystem::path cursor;

    static ResumeFiles for_output(const std::filesystem::path& out) {
        return {out.string() + ".partial", out.string() + ".cursor"};
    }

    void remove() const {
        std::error_code ec;
        std::filesystem::remove(partial, ec);
        std::filesystem::remove(cursor, ec);
    }
};

namespace detail {

// Rationales already persisted for questions up to and including the cursor.
inline std::size_t restore_progress(const Corpus& questions, const ResumeFiles& files, Corpus& out) {
    if (!std::filesystem::exists(files.cursor) || !std::filesystem::exists(files.partial)) return 0;
    std::ifstream in(files.cursor);
    json cur = json::parse(in);
    std::string last = cur.at("question_id").get<std::string>();
    std::size_t done = 0;
    bool found = false;
    for (; done < questions.questions().size(); ++done)
        if (questions.questions()[done].id == last) {
            found = true;
            ++done;
            break;
        }
    if (!found) return 0;
    Corpus loaded = load_rationales(files.partial);
    for (std::size_t i = 0; i < done; ++i) {
        const auto& id = questions.questions()[i].id;
        out.rationales()[id] = loaded.rationales_for(id);
    }
    return done;
}

}  // namespace detail

/// Adds `samples_per_question` rationales to every question. Output order is
/// (question order, sample index) whatever order responses arrive in.
/// With `resume`, progress is checkpointed after each batch of questions and
/// a previous interrupted run is continued from its cursor.
inline Corpus generate_rationales(const Corpus& questions, const GenerationConfig& cfg,
                                  const TeacherBackend& backend, const ResumeFiles* resume = nullptr) {
    cfg.validate();
    if (questions.questions().empty()) throw PreconditionError("corpus has no questions");
    Corpus out;
    for (const auto& q : questions.questions()) out.add_question(q);

    std::size_t start = resume ? detail::restore_progress(questions, *resume, out) : 0;
    std::ofstream partial;
    if (resume) {
        // Rewrite the partial file so it holds exactly the restored prefix.
        partial.open(resume->partial, std::ios::binary | std::ios::trunc);
        for (std::size_t i = 0; i < start; ++i)
            for (const auto& r : out.rationales_for(questions.questions()[i].id))
                partial << dump_line(rationale_to_json(r)) << '\n';
        partial.flush();
    }

    const auto m = static_cast<std::size_t>(cfg.samples_per_question);
    const auto in_flight = static_cast<std::size_t>(cfg.max_in_flight);
    const std::size_t window = std::max<std::size_t>(1, (in_flight + m - 1) / m);
    const auto& qs = questions.questions();
    for (std::size_t begin = start; begin < qs.size(); begin += window) {
        std::size_t end = std::min(qs.size(), begin + window);
        auto batch = parallel_map<Rationale>((end - begin) * m, in_flight, [&](std::size_t t) {
            const auto& q = qs[begin + t / m];
            int idx = static_cast<int>(t % m) + 1;
            try {
                return generate_one(backend, q, idx, cfg.temperature_for(idx));
            } catch (const HttpError& e) {
                throw GenerationError(q.id, idx, e.what());
            }
        });
        for (std::size_t t = 0; t < batch.size(); ++t) {
            const auto& id = qs[begin + t / m].id;
            if (resume) partial << dump_line(rationale_to_json(batch[t])) << '\n';
            out.rationales()[id].push_back(std::move(batch[t]));
        }
        if (resume) {
            partial.flush();
            write_json_atomic(resume->cursor,
                              json{{"question_id", qs[end - 1].id}, {"index", cfg.samples_per_question}});
        }
    }
    return out;
}

}  // namespace morsd
