#pragma once

#include <cmath>
#include <filesystem>
#include <limits>
#include <map>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "morsd/corpus.hpp"
#include "morsd/http.hpp"

namespace morsd {

struct ScoreRequest {
    std::string conditioning_text;
    std::string target_text;
};

class ScoringError : public Error {
public:
    using Error::Error;
};

class ZeroProbabilityToken : public ScoringError {
public:
    explicit ZeroProbabilityToken(std::size_t position)
        : ScoringError("target token " + std::to_string(position) + " has zero probability"), position_(position) {}
    std::size_t position() const noexcept { return position_; }

private:
    std::size_t position_;
};

/// Anything that can report log p(y_j | conditioning, y_<j) for the tokens
/// of a target. Implementations must be callable concurrently.
class ScoringBackend {
public:
    virtual ~ScoringBackend() = default;
    /// Natural-log probabilities, one per target token.
    virtual std::vector<double> target_logprobs(const ScoreRequest& req) const = 0;
};

/// exp of the mean negative log-likelihood of the target tokens.
inline double perplexity_from_logprobs(std::span<const double> logprobs) {
    if (logprobs.empty()) throw ScoringError("target has no tokens");
    // Running mean: exact when all terms are equal, and never forms a large sum.
    double mean = 0.0;
    for (std::size_t j = 0; j < logprobs.size(); ++j) {
        double lp = logprobs[j];
        if (!std::isfinite(lp)) throw ZeroProbabilityToken(j);
        mean += (lp - mean) / static_cast<double>(j + 1);
    }
    double ppl = std::exp(-mean);
    if (!std::isfinite(ppl) || ppl <= 0.0) throw ScoringError("perplexity out of range");
    return ppl;
}

inline double perplexity(const ScoringBackend& backend, const ScoreRequest& req) {
    if (req.target_text.empty()) throw PreconditionError("target_text must be non-empty");
    auto lps = backend.target_logprobs(req);
    return perplexity_from_logprobs(lps);
}

// ---- n-gram oracle ---------------------------------------------------------

/// Word-level add-alpha smoothed n-gram model. Tokens are lowercased
/// whitespace-separated words; out-of-vocabulary words map to <unk>.
/// Immutable after construction.
class NgramOracle final : public ScoringBackend {
public:
    static constexpr const char* kBos = "<s>";
    static constexpr const char* kEos = "</s>";
    static constexpr const char* kUnk = "<unk>";

    /// Model with no counts: uniform over `vocabulary`.
    NgramOracle(int order, double alpha, const std::vector<std::string>& vocabulary)
        : order_(order), alpha_(alpha) {
        if (order < 1) throw PreconditionError("order must be >= 1");
        if (!(alpha > 0.0)) throw PreconditionError("alpha must be > 0");
        for (const auto& w : vocabulary) vocab_.insert(w);
        if (vocab_.empty()) throw PreconditionError("vocabulary must be non-empty");
    }

    static std::vector<std::string> tokenize(std::string_view s) {
        auto toks = text::split_whitespace(s);
        for (auto& t : toks) t = text::to_lower(t);
        return toks;
    }

    int order() const { return order_; }
    double alpha() const { return alpha_; }
    std::size_t vocabulary_size() const { return vocab_.size(); }
    const std::set<std::string>& vocabulary() const { return vocab_; }

    /// p(word | context), using the last order-1 context words.
    double probability(std::span<const std::string> context, const std::string& word) const {
        const std::string& w = vocab_.contains(word) ? word : unk();
        std::uint64_t c_ctx = 0;
        std::uint64_t c_w = 0;
        if (auto it = table_.find(context_key(context)); it != table_.end()) {
            c_ctx = it->second.total;
            if (auto jt = it->second.next.find(w); jt != it->second.next.end()) c_w = jt->second;
        }
        return (static_cast<double>(c_w) + alpha_) /
               (static_cast<double>(c_ctx) + alpha_ * static_cast<double>(vocab_.size()));
    }

    std::vector<double> target_logprobs(const ScoreRequest& req) const override {
        auto history = tokenize(req.conditioning_text);
        auto target = tokenize(req.target_text);
        std::vector<double> out;
        out.reserve(target.size());
        for (const auto& tok : target) {
            out.push_back(std::log(probability(history, tok)));
            history.push_back(tok);
        }
        return out;
    }

    bool operator==(const NgramOracle& o) const {
        return order_ == o.order_ && alpha_ == o.alpha_ && vocab_ == o.vocab_ && table_ == o.table_;
    }

    /// Counts every word of every text in its (order-1)-word context. Texts
    /// are padded on the left with <s>. </s> and <unk> belong to the
    /// vocabulary but are never counted as events.
    friend NgramOracle train_oracle(std::span<const std::string> texts, int order, double alpha);

private:
    struct ContextCounts {
        std::uint64_t total = 0;
        std::map<std::string, std::uint64_t> next;
        bool operator==(const ContextCounts&) const = default;
    };

    const std::string& unk() const {
        static const std::string u = kUnk;
        return u;
    }

    std::string context_key(std::span<const std::string> history) const {
        std::string key;
        const auto need = static_cast<std::size_t>(order_ - 1);
        for (std::size_t i = 0; i < need; ++i) {
            // history index aligned so the last element is the nearest word
            std::size_t back = need - i;
            if (back > history.size()) {
                key += kBos;
            } else {
                const std::string& h = history[history.size() - back];
                key += vocab_.contains(h) ? h : unk();
            }
            key.push_back('\x1f');
        }
        return key;
    }

    int order_;
    double alpha_;
    std::set<std::string> vocab_;
    std::map<std::string, ContextCounts> table_;
};

inline NgramOracle train_oracle(std::span<const std::string> texts, int order, double alpha) {
    if (texts.empty()) throw PreconditionError("training texts must be non-empty");
    std::vector<std::vector<std::string>> docs;
    std::vector<std::string> vocab{NgramOracle::kEos, NgramOracle::kUnk};
    for (const auto& t : texts) {
        docs.push_back(NgramOracle::tokenize(t));
        vocab.insert(vocab.end(), docs.back().begin(), docs.back().end());
    }
    NgramOracle m(order, alpha, vocab);
    for (const auto& doc : docs) {
        std::span<const std::string> all(doc);
        for (std::size_t i = 0; i < doc.size(); ++i) {
            auto& cc = m.table_[m.context_key(all.first(i))];
            ++cc.total;
            ++cc.next[doc[i]];
        }
    }
    return m;
}

// ---- remote scorer ---------------------------------------------------------

namespace detail {

inline std::size_t utf8_length(std::string_view s) {
    std::size_t n = 0;
    for (unsigned char c : s)
        if ((c & 0xC0) != 0x80) ++n;
    return n;
}

}  // namespace detail

/// Student model behind an OpenAI-compatible /v1/completions endpoint. The
/// prompt is conditioning + target with echo enabled; only tokens whose text
/// offset falls inside the target contribute.
class RemoteLogprobScorer final : public ScoringBackend {
public:
    RemoteLogprobScorer(std::string url, std::string model, RetryPolicy policy, LogSink log = stderr_log())
        : url_(std::move(url)), model_(std::move(model)), client_(policy, std::move(log)) {}

    static json request_body(const std::string& model, const ScoreRequest& req) {
        return json{{"model", model},  {"prompt", req.conditioning_text + req.target_text},
                    {"echo", true},    {"logprobs", 0},
                    {"max_tokens", 1}, {"temperature", 0.0}};
    }

    /// Extracts target-token log-probabilities from a completions response.
    static std::vector<double> parse_response(const json& body, const ScoreRequest& req) {
        const json* lp = nullptr;
        try {
            lp = &body.at("choices").at(0).at("logprobs");
        } catch (const json::exception&) {
            throw ScoringError("response lacks choices[0].logprobs");
        }
        const auto& offsets = lp->at("text_offset");
        const auto& values = lp->at("token_logprobs");
        if (offsets.size() != values.size()) throw ScoringError("logprobs arrays differ in length");
        const std::size_t begin = detail::utf8_length(req.conditioning_text);
        const std::size_t end = begin + detail::utf8_length(req.target_text);
        std::vector<double> out;
        for (std::size_t i = 0; i < offsets.size(); ++i) {
            auto off = offsets[i].get<std::size_t>();
            if (off < begin || off >= end) continue;
            if (values[i].is_null()) throw ZeroProbabilityToken(out.size());
            out.push_back(values[i].get<double>());
        }
        if (out.empty()) throw ScoringError("no target tokens in echoed prompt");
        return out;
    }

    std::vector<double> target_logprobs(const ScoreRequest& req) const override {
        auto res = client_.post(url_, request_body(model_, req));
        return parse_response(res.body, req);
    }

private:
    std::string url_;
    std::string model_;
    JsonHttpClient client_;
};

// ---- rationale difficulty --------------------------------------------------

struct RationaleDifficulty {
    double ppl_with = 0.0;
    double ppl_base = 0.0;
    double rd = 0.0;
};

inline ScoreRequest base_request(std::string_view question, std::string_view answer) {
    return {"Q: " + std::string(question) + "\nA:", " " + std::string(answer)};
}

/// An empty rationale yields the base conditioning text byte-for-byte.
inline ScoreRequest with_rationale_request(std::string_view question, std::string_view rationale,
                                           std::string_view answer) {
    if (rationale.empty()) return base_request(question, answer);
    return {"Q: " + std::string(question) + "\n" + std::string(rationale) + "\nA:", " " + std::string(answer)};
}

inline RationaleDifficulty rationale_difficulty(const ScoringBackend& backend, std::string_view question,
                                                std::string_view rationale, std::string_view answer) {
    if (answer.empty()) throw PreconditionError("answer must be non-empty");
    RationaleDifficulty d;
    d.ppl_base = perplexity(backend, base_request(question, answer));
    d.ppl_with = perplexity(backend, with_rationale_request(question, rationale, answer));
    d.rd = d.ppl_with / d.ppl_base;
    return d;
}

struct ScoredRationale {
    Rationale rationale;
    double ppl_with = 0.0;
    double ppl_base = 0.0;
    double rd = 0.0;

    bool operator==(const ScoredRationale&) const = default;
};

using ScoredMap = std::map<std::string, std::vector<ScoredRationale>>;

struct ScoringFailure {
    std::string question_id;
    int index = 0;
    std::string message;
};

struct ScoringResult {
    ScoredMap scored;
    std::vector<ScoringFailure> failures;
    std::size_t base_computations = 0;
    std::size_t attempted = 0;
};

class ScoringAborted : public ScoringError {
public:
    using ScoringError::ScoringError;
};

/// Fraction of failed records above which score_corpus aborts.
inline constexpr double kMaxScoringFailureRate = 0.10;

/// Scores every rationale against its question's gold answer. The base
/// perplexity is computed once per question. Failed records are dropped and
/// reported; more than 10% failures aborts.
inline ScoringResult score_corpus(const ScoringBackend& backend, const Corpus& corpus, std::size_t max_in_flight) {
    struct Job {
        const QuestionInstance* q;
        const Rationale* r;
    };
    std::vector<const QuestionInstance*> qs;
    std::vector<Job> jobs;
    for (const auto& q : corpus.questions()) {
        const auto& rs = corpus.rationales_for(q.id);
        if (rs.empty()) continue;
        qs.push_back(&q);
        for (const auto& r : rs) jobs.push_back({&q, &r});
    }

    struct Outcome {
        double value = 0.0;
        std::string error;
    };
    auto guarded = [](auto&& fn) {
        Outcome o;
        try {
            o.value = fn();
        } catch (const Error& e) {
            o.error = e.what();
        }
        return o;
    };

    auto bases = parallel_map<Outcome>(qs.size(), max_in_flight, [&](std::size_t i) {
        return guarded([&] { return perplexity(backend, base_request(qs[i]->question, qs[i]->gold_answer)); });
    });
    std::unordered_map<std::string, const Outcome*> base_of;
    for (std::size_t i = 0; i < qs.size(); ++i) base_of[qs[i]->id] = &bases[i];

    auto withs = parallel_map<Outcome>(jobs.size(), max_in_flight, [&](std::size_t i) {
        const auto& j = jobs[i];
        if (!base_of.at(j.q->id)->error.empty()) return Outcome{0.0, "base perplexity failed"};
        return guarded([&] {
            return perplexity(backend, with_rationale_request(j.q->question, j.r->rationale_text, j.q->gold_answer));
        });
    });

    ScoringResult res;
    res.base_computations = qs.size();
    res.attempted = jobs.size();
    for (std::size_t i = 0; i < jobs.size(); ++i) {
        const auto& j = jobs[i];
        const Outcome& base = *base_of.at(j.q->id);
        const std::string& err = base.error.empty() ? withs[i].error : base.error;
        if (!err.empty()) {
            res.failures.push_back({j.q->id, j.r->index, err});
            continue;
        }
        ScoredRationale s{*j.r, withs[i].value, base.value, withs[i].value / base.value};
        res.scored[j.q->id].push_back(std::move(s));
    }
    if (!jobs.empty() &&
        static_cast<double>(res.failures.size()) > kMaxScoringFailureRate * static_cast<double>(jobs.size()))
        throw ScoringAborted(std::to_string(res.failures.size()) + " of " + std::to_string(jobs.size()) +
                             " records failed to score");
    return res;
}

/// Oracle training documents built from a run's own rationales: the scoring
/// layout with the teacher's predicted answer filled in.
inline std::vector<std::string> oracle_training_texts(const Corpus& corpus) {
    std::vector<std::string> texts;
    for (const auto& q : corpus.questions())
        for (const auto& r : corpus.rationales_for(q.id)) {
            auto req = with_rationale_request(q.question, r.rationale_text,
                                              r.predicted_answer.empty() ? std::string_view("?") : r.predicted_answer);
            texts.push_back(req.conditioning_text + req.target_text);
        }
    return texts;
}

// ---- scored.jsonl ----------------------------------------------------------

inline json scored_to_json(const ScoredRationale& s) {
    json j = rationale_to_json(s.rationale);
    j["ppl_with"] = s.ppl_with;
    j["ppl_base"] = s.ppl_base;
    j["rd"] = s.rd;
    return j;
}

inline ScoredRationale scored_from_json(const json& j, std::size_t line) {
    ScoredRationale s;
    s.rationale = rationale_from_json(j, line);
    s.ppl_with = require_field<double>(j, "ppl_with", line);
    s.ppl_base = require_field<double>(j, "ppl_base", line);
    s.rd = require_field<double>(j, "rd", line);
    if (!(s.ppl_with > 0.0) || !(s.ppl_base > 0.0) || !(s.rd > 0.0))
        throw SchemaError(line, "perplexities and rd must be positive");
    return s;
}

inline void save_scored(const Corpus& questions, const ScoredMap& scored, const std::filesystem::path& path,
                        const json& header = nullptr) {
    write_jsonl_atomic(path, ordered_records(questions, scored, scored_to_json), header);
}

inline ScoredMap load_scored(const std::filesystem::path& path) {
    ScoredMap m;
    read_jsonl(path, [&](std::size_t line, const json& j) {
        auto s = scored_from_json(j, line);
        m[s.rationale.question_id].push_back(std::move(s));
    });
    return m;
}

}  // namespace morsd
