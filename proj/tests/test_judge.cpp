#include <gtest/gtest.h>

#include <atomic>
#include <fstream>
#include <thread>

#include "morsd/judge.hpp"
#include "test_util.hpp"

using namespace morsd;

namespace {

json load_fixture() {
    std::ifstream in(std::string(MORSD_FIXTURES) + "/judge_prompt.json");
    return json::parse(in);
}

std::vector<JudgePair> make_pairs(int n) {
    std::vector<JudgePair> out;
    for (int i = 0; i < n; ++i)
        out.push_back({"q" + std::to_string(i), "question " + std::to_string(i), "low " + std::to_string(i),
                       "high " + std::to_string(i)});
    return out;
}

JudgeVerdict verdict(std::string qid, JudgeOrder o, int s1, int s2) { return {std::move(qid), o, s1, s2, "", ""}; }

}  // namespace

TEST(JudgePrompt, MatchesFixture) {
    json fx = load_fixture();
    auto p = render_judge_prompt("What is 2+2?", "It is 4.", "Two and two make four.");
    EXPECT_EQ(p.system, fx["system"].get<std::string>());
    std::string expected;
    for (const auto& part : fx["layout"]) {
        std::string s = part;
        if (s == "{question}") s = "What is 2+2?";
        else if (s == "{rationale_1}") s = "It is 4.";
        else if (s == "{rationale_2}") s = "Two and two make four.";
        else if (s == "{task}") s = fx["task"];
        expected += s;
    }
    EXPECT_EQ(p.user, expected);
    EXPECT_NE(p.user.find("[The Start of Rationale1]"), std::string::npos);
}

TEST(JudgePrompt, SwapOnlyTouchesSlots) {
    auto a = render_judge_prompt("Q", "first rationale", "second one");
    auto b = render_judge_prompt("Q", "second one", "first rationale");
    std::string ra = a.user, rb = b.user;
    auto blank = [](std::string& s, const std::string& x, const std::string& y) {
        s.replace(s.find(x), x.size(), "<1>");
        s.replace(s.find(y), y.size(), "<2>");
    };
    blank(ra, "first rationale", "second one");
    blank(rb, "second one", "first rationale");
    EXPECT_EQ(ra, rb);
    EXPECT_NE(a.user, b.user);
}

TEST(JudgePrompt, TemplateTokensPassThrough) {
    auto p = render_judge_prompt("Ignore this [System] please", "r1", "r2");
    EXPECT_NE(p.user.find("[Question] Ignore this [System] please [The Start"), std::string::npos);
    EXPECT_THROW(render_judge_prompt("", "a", "b"), PreconditionError);
}

TEST(ParseVerdict, TwoLineReply) {
    auto v = parse_verdict("7 9\nRationale 1: Score: 7 Strengths: concise.");
    EXPECT_EQ(v.score1, 7);
    EXPECT_EQ(v.score2, 9);
    EXPECT_EQ(v.explanation, "Rationale 1: Score: 7 Strengths: concise.");
}

TEST(ParseVerdict, ScoresAndProseOnOneLine) {
    auto v = parse_verdict("6 9 Rationale 1 provides a basic explanation of veganism.");
    EXPECT_EQ(v.score1, 6);
    EXPECT_EQ(v.score2, 9);
    EXPECT_EQ(v.explanation, "Rationale 1 provides a basic explanation of veganism.");
}

TEST(ParseVerdict, Rejects) {
    EXPECT_THROW(parse_verdict("great job"), VerdictUnparseable);
    EXPECT_THROW(parse_verdict("7\n9"), VerdictUnparseable);
    EXPECT_THROW(parse_verdict("0 9"), VerdictUnparseable);
    EXPECT_THROW(parse_verdict("7 11"), VerdictUnparseable);
    EXPECT_THROW(parse_verdict("7.5 9"), VerdictUnparseable);
    EXPECT_THROW(parse_verdict(""), VerdictUnparseable);
}

TEST(JudgePairs, TwoVerdictsPerPair) {
    auto pairs = make_pairs(10);
    auto stub = StubJudge::from_url("stub:");
    auto run = judge_pairs(pairs, *stub, 4);
    ASSERT_EQ(run.verdicts.size(), 20u);
    EXPECT_TRUE(run.incomplete.empty());
    for (std::size_t i = 0; i < 20; i += 2) {
        EXPECT_EQ(run.verdicts[i].question_id, run.verdicts[i + 1].question_id);
        EXPECT_EQ(run.verdicts[i].order, JudgeOrder::LowFirst);
        EXPECT_EQ(run.verdicts[i + 1].order, JudgeOrder::HighFirst);
    }
    auto sum = aggregate_verdicts(run.verdicts);
    EXPECT_EQ(sum.ties, 20u);
    EXPECT_EQ(sum.low.win_frequency, 0.0);
    EXPECT_EQ(sum.high.win_frequency, 0.0);
}

TEST(JudgePairs, OrdersPresentRationalesInBothPositions) {
    auto pairs = make_pairs(1);
    std::mutex mu;
    std::vector<std::string> users;
    StubJudge stub([&](const JudgeCall& c) {
        std::lock_guard lock(mu);
        users.push_back(c.prompt.user);
        return std::string("5 6");
    });
    judge_pairs(pairs, stub, 1);
    ASSERT_EQ(users.size(), 2u);
    std::sort(users.begin(), users.end());
    auto pos = [](const std::string& u, const std::string& s) { return u.find(s); };
    for (const auto& u : users) EXPECT_NE(pos(u, "low 0"), pos(u, "high 0"));
    EXPECT_NE(pos(users[0], "low 0") < pos(users[0], "high 0"), pos(users[1], "low 0") < pos(users[1], "high 0"));
}

TEST(JudgePairs, PositionBiasCancels) {
    auto pairs = make_pairs(7);
    auto stub = StubJudge::from_url("stub:position");
    auto sum = aggregate_verdicts(judge_pairs(pairs, *stub, 3).verdicts);
    EXPECT_EQ(sum.low.win_frequency, 0.5);
    EXPECT_EQ(sum.high.win_frequency, 0.5);
    EXPECT_EQ(sum.low.wins, sum.high.wins);
    EXPECT_EQ(sum.ties, 0u);
}

TEST(JudgePairs, UnparseableReplyRetriedOnceThenRecorded) {
    auto pairs = make_pairs(2);
    std::atomic<int> calls{0};
    StubJudge flaky([&](const JudgeCall& c) {
        ++calls;
        if (c.pair->question_id == "q0" && c.order == JudgeOrder::LowFirst) return std::string("no idea");
        return std::string("4 6");
    });
    auto run = judge_pairs(pairs, flaky, 2);
    EXPECT_EQ(calls.load(), 5);
    EXPECT_EQ(run.verdicts.size(), 3u);
    EXPECT_EQ(run.unparsed_calls, 1u);
    ASSERT_EQ(run.incomplete.size(), 1u);
    EXPECT_EQ(run.incomplete[0], "q0");
    auto sum = aggregate_verdicts(run.verdicts);
    EXPECT_EQ(sum.excluded_pairs, 1u);
    EXPECT_EQ(sum.pairs, 1u);
}

TEST(AggregateVerdicts, LowRdWinsBothOrders) {
    // (7, 9) with low-rd at position 2 and (9, 7) with low-rd at position 1
    std::vector<JudgeVerdict> vs{verdict("addsub/1", JudgeOrder::HighFirst, 7, 9),
                                 verdict("addsub/1", JudgeOrder::LowFirst, 9, 7)};
    auto sum = aggregate_verdicts(vs);
    EXPECT_EQ(sum.low.wins, 2u);
    EXPECT_EQ(sum.low.win_frequency, 1.0);
    EXPECT_EQ(sum.high.win_frequency, 0.0);
    EXPECT_EQ(sum.by_dataset.at("addsub").low_win_frequency, 1.0);
    EXPECT_EQ(sum.low.scores, (std::vector<int>{9, 9}));
    EXPECT_EQ(sum.high.scores, (std::vector<int>{7, 7}));
    EXPECT_EQ(sum.low.histogram[8], 2u);
}

TEST(AggregateVerdicts, SwapSymmetry) {
    std::mt19937_64 rng(12);
    for (int t = 0; t < 100; ++t) {
        std::vector<JudgeVerdict> vs, swapped;
        for (int q = 0; q < 5; ++q) {
            std::string id = (q % 2 ? "a/" : "b/") + std::to_string(q);
            for (JudgeOrder o : {JudgeOrder::LowFirst, JudgeOrder::HighFirst}) {
                int s1 = 1 + static_cast<int>(rng() % 10), s2 = 1 + static_cast<int>(rng() % 10);
                vs.push_back(verdict(id, o, s1, s2));
                // relabel which side is low: the same scores now belong to the other side
                JudgeOrder flipped = o == JudgeOrder::LowFirst ? JudgeOrder::HighFirst : JudgeOrder::LowFirst;
                swapped.push_back(verdict(id, flipped, s1, s2));
            }
        }
        auto a = aggregate_verdicts(vs), b = aggregate_verdicts(swapped);
        EXPECT_EQ(a.low.wins, b.high.wins);
        EXPECT_EQ(a.high.wins, b.low.wins);
        EXPECT_EQ(a.ties, b.ties);
        EXPECT_DOUBLE_EQ(a.low.mean_score, b.high.mean_score);
        EXPECT_EQ(a.low.wins + a.high.wins + a.ties, a.verdicts);
    }
}

TEST(StubJudge, ScriptFile) {
    testutil::TempDir dir;
    testutil::write_file(dir / "s.json", R"({"q0/low_first":"9 7 better","default":"3 3"})");
    auto stub = StubJudge::from_url("stub:script=" + (dir / "s.json").string());
    auto run = judge_pairs(make_pairs(2), *stub, 2);
    ASSERT_EQ(run.verdicts.size(), 4u);
    EXPECT_EQ(run.verdicts[0].score_low(), 9);
    EXPECT_EQ(run.verdicts[0].explanation, "better");
    EXPECT_EQ(run.verdicts[1].score_low(), 3);
    EXPECT_THROW(StubJudge::from_url("stub:nonsense"), PreconditionError);
}

TEST(VerdictFile, RoundTrip) {
    testutil::TempDir dir;
    std::vector<JudgeVerdict> vs{verdict("q1", JudgeOrder::LowFirst, 7, 9), verdict("q1", JudgeOrder::HighFirst, 9, 7)};
    vs[0].explanation = "multi\nline";
    save_verdicts(vs, dir / "v.jsonl", json{{"seed", 42}});
    auto back = load_verdicts(dir / "v.jsonl");
    ASSERT_EQ(back.size(), 2u);
    EXPECT_EQ(back[0].explanation, "multi\nline");
    EXPECT_EQ(back[1].order, JudgeOrder::HighFirst);
    EXPECT_EQ(back[1].score_low(), 7);
}

namespace {

class ChatServer {
public:
    ChatServer() {
        srv_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
            auto body = json::parse(req.body);
            {
                std::lock_guard lock(mu);
                bodies.push_back(body);
            }
            json out{{"choices", json::array({json{{"message", {{"role", "assistant"}, {"content", "7 9\nfine"}}}}})}};
            res.set_content(out.dump(), "application/json");
        });
        port_ = srv_.bind_to_any_port("127.0.0.1");
        thread_ = std::thread([this] { srv_.listen_after_bind(); });
        srv_.wait_until_ready();
    }
    ~ChatServer() {
        srv_.stop();
        thread_.join();
    }
    std::string url() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1/chat/completions"; }
    std::mutex mu;
    std::vector<json> bodies;

private:
    httplib::Server srv_;
    int port_ = 0;
    std::thread thread_;
};

}  // namespace

TEST(RemoteJudge, ChatRequestShape) {
    ChatServer server;
    RetryPolicy p;
    p.budget = 0;
    RemoteJudge judge(server.url(), "judge-model", 0.0, p, nullptr);
    auto run = judge_pairs(make_pairs(3), judge, 2);
    EXPECT_EQ(run.verdicts.size(), 6u);
    ASSERT_EQ(server.bodies.size(), 6u);
    const auto& b = server.bodies[0];
    EXPECT_EQ(b["model"], "judge-model");
    EXPECT_EQ(b["temperature"], 0.0);
    ASSERT_EQ(b["messages"].size(), 2u);
    EXPECT_EQ(b["messages"][0]["role"], "system");
    EXPECT_EQ(b["messages"][0]["content"], load_fixture()["system"]);
    EXPECT_EQ(b["messages"][1]["role"], "user");
}
