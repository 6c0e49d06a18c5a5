#include <gtest/gtest.h>

#include <random>

#include "morsd/selector.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace morsd;

namespace {

Rationale rat(int index, bool correct, std::string text) { return {"q", index, std::move(text), "1", "raw", 0.7, correct}; }

Rationale rat(int index, bool correct) { return rat(index, correct, "rationale number " + std::to_string(index)); }

ScoredRationale scored(int index, double rd, std::string text, bool correct = true) {
    return {rat(index, correct, std::move(text)), rd, 1.0, rd};
}

ScoredRationale scored(int index, double rd) { return {rat(index, true), rd, 1.0, rd}; }

std::string random_text(std::mt19937_64& rng) {
    static const std::vector<std::string> pool{"the", "cat", "sat", "on", "mat", "a", "dog", "ran"};
    int len = static_cast<int>(rng() % 7);
    std::string s;
    for (int i = 0; i < len; ++i) s += (i ? " " : "") + pool[rng() % pool.size()];
    return s;
}

std::vector<std::string> as_vector(const NgramSet& s) { return {s.begin(), s.end()}; }

}  // namespace

TEST(Ngrams, Examples) {
    EXPECT_EQ(ngrams("the cat sat on the mat", 3),
              (NgramSet{"the\xC2\xB7" "cat\xC2\xB7" "sat", "cat\xC2\xB7" "sat\xC2\xB7" "on",
                        "sat\xC2\xB7" "on\xC2\xB7" "the", "on\xC2\xB7" "the\xC2\xB7" "mat"}));
    EXPECT_EQ(ngrams("a b", 3), (NgramSet{"a\xC2\xB7" "b"}));
    EXPECT_TRUE(ngrams("", 3).empty());
    EXPECT_EQ(ngrams("The cat, sat.", 2), ngrams("the CAT sat", 2));
}

TEST(Ngrams, MatchesWindowLoop) {
    std::mt19937_64 rng(1);
    for (int t = 0; t < 300; ++t) {
        auto s = random_text(rng);
        int n = 1 + static_cast<int>(rng() % 4);
        auto ref = oracle::ngram_list(s, n);
        std::sort(ref.begin(), ref.end());
        EXPECT_EQ(as_vector(ngrams(s, n)), ref) << s;
    }
}

TEST(Jaccard, Examples) {
    NgramSet a{"x", "y"}, b{"z"};
    EXPECT_EQ(jaccard(a, a), 1.0);
    EXPECT_EQ(jaccard(a, b), 0.0);
    EXPECT_DOUBLE_EQ(jaccard(ngrams("the cat sat on the mat", 3), ngrams("the cat sat on a mat", 3)), 2.0 / 6.0);
}

TEST(Jaccard, MatchesBruteForce) {
    std::mt19937_64 rng(2);
    for (int t = 0; t < 1000; ++t) {
        NgramSet a, b;
        auto na = rng() % 11, nb = rng() % 11;
        for (std::size_t i = 0; i < na; ++i) a.insert(std::to_string(rng() % 15));
        for (std::size_t i = 0; i < nb; ++i) b.insert(std::to_string(rng() % 15));
        EXPECT_EQ(jaccard(a, b), oracle::jaccard(as_vector(a), as_vector(b)));
        EXPECT_EQ(jaccard(a, b), jaccard(b, a));
    }
}

TEST(AccuracySelect, TenWithSixCorrect) {
    std::vector<Rationale> rs;
    for (int i = 1; i <= 10; ++i) rs.push_back(rat(i, i <= 6));
    auto out = accuracy_select(rs, 0.8, true);
    ASSERT_EQ(out.size(), 7u);
    // lowest-index incorrect ones go first
    EXPECT_EQ(out.back().index, 10);
    for (int i = 0; i < 6; ++i) EXPECT_TRUE(out[static_cast<std::size_t>(i)].correct);
}

TEST(AccuracySelect, Degenerate) {
    std::vector<Rationale> all_ok{rat(1, true), rat(2, true)};
    EXPECT_EQ(accuracy_select(all_ok, 1.0, true).size(), 2u);
    std::vector<Rationale> mixed{rat(1, false), rat(2, true), rat(3, false)};
    EXPECT_EQ(accuracy_select(mixed, 0.0, true).size(), 3u);
    EXPECT_EQ(accuracy_select(mixed, 0.0, false).size(), 1u);
    std::vector<Rationale> none{rat(1, false), rat(2, false)};
    EXPECT_TRUE(accuracy_select(none, 0.5, true).empty());
}

TEST(AccuracySelect, MinimalRemovalExhaustive) {
    for (double delta : {0.5, 0.7, 0.8, 0.9, 1.0})
        for (unsigned mask = 0; mask < 256; ++mask) {
            std::vector<Rationale> rs;
            std::vector<bool> flags;
            for (int i = 0; i < 8; ++i) {
                bool c = mask >> i & 1;
                rs.push_back(rat(i + 1, c));
                flags.push_back(c);
            }
            auto out = accuracy_select(rs, delta, true);
            EXPECT_EQ(8 - out.size(), oracle::min_accuracy_removals(flags, delta)) << mask << " " << delta;
            std::size_t c = 0;
            for (const auto& r : out) c += r.correct;
            if (!out.empty()) {
                EXPECT_GE(static_cast<double>(c) / static_cast<double>(out.size()), delta);
            }
        }
}

TEST(DiversitySelect, BelowThresholdKeepsAllWithoutDrawing) {
    std::vector<Rationale> rs{rat(1, true, "a b c"), rat(2, true, "d e f"), rat(3, true, "g h i"),
                              rat(4, true, "j k l")};
    std::mt19937_64 rng(5), fresh(5);
    EXPECT_EQ(diversity_select(rs, 3, 6, rng).size(), 4u);
    EXPECT_EQ(rng(), fresh());
}

TEST(DiversitySelect, DropsOneOfIdenticalPair) {
    std::vector<Rationale> rs;
    const std::vector<std::string> texts{"alpha beta gamma", "delta epsilon zeta", "eta theta iota",
                                         "kappa lambda mu",  "nu xi omicron",      "pi rho sigma"};
    for (int i = 0; i < 6; ++i) rs.push_back(rat(i + 1, true, texts[static_cast<std::size_t>(i)]));
    rs.push_back(rat(7, true, texts[2]));
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        std::mt19937_64 rng(seed);
        auto out = diversity_select(rs, 3, 6, rng);
        ASSERT_EQ(out.size(), 6u);
        int copies = 0;
        for (const auto& r : out) copies += r.rationale_text == texts[2];
        EXPECT_EQ(copies, 1);
    }
}

TEST(DiversitySelect, MatchesGreedyReference) {
    std::mt19937_64 gen(9);
    for (int t = 0; t < 200; ++t) {
        std::size_t m = 1 + gen() % 10;
        int keep = 1 + static_cast<int>(gen() % 7);
        int n = 1 + static_cast<int>(gen() % 3);
        std::vector<Rationale> rs;
        std::vector<std::string> texts;
        for (std::size_t i = 0; i < m; ++i) {
            auto s = random_text(gen);
            texts.push_back(s);
            rs.push_back(rat(static_cast<int>(i) + 1, true, s));
        }
        std::uint64_t seed = gen();
        std::mt19937_64 a(seed), b(seed);
        auto out = diversity_select(rs, n, keep, a);
        auto ref = oracle::diversity_greedy(texts, n, keep, b);
        ASSERT_EQ(out.size(), std::min<std::size_t>(keep, m));
        ASSERT_EQ(out.size(), ref.size());
        for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_EQ(out[i].index, static_cast<int>(ref[i]) + 1);
        EXPECT_EQ(a(), b());
    }
}

TEST(DifficultySelect, Examples) {
    std::vector<ScoredRationale> v;
    std::vector<double> rds{0.5, 1.2, 0.9, 0.7, 1.1, 0.6};
    for (std::size_t i = 0; i < rds.size(); ++i) v.push_back(scored(static_cast<int>(i) + 1, rds[i]));
    auto out = difficulty_select(v, 3);
    ASSERT_EQ(out.size(), 3u);
    EXPECT_EQ(out[0].rd, 0.5);
    EXPECT_EQ(out[1].rd, 0.6);
    EXPECT_EQ(out[2].rd, 0.7);

    EXPECT_EQ(difficulty_select({scored(1, 1.0), scored(2, 2.0)}, 3).size(), 2u);

    auto tie = difficulty_select({scored(2, 0.7), scored(1, 0.7), scored(3, 0.9)}, 1);
    ASSERT_EQ(tie.size(), 1u);
    EXPECT_EQ(tie[0].rationale.index, 1);
}

TEST(DifficultySelect, OptimalAgainstSortOracle) {
    std::mt19937_64 rng(4);
    for (int t = 0; t < 1000; ++t) {
        std::size_t m = 1 + rng() % 10;
        int k = 1 + static_cast<int>(rng() % 6);
        std::vector<ScoredRationale> v;
        for (std::size_t i = 0; i < m; ++i) v.push_back(scored(static_cast<int>(i) + 1, 0.1 * (1 + rng() % 8)));
        std::shuffle(v.begin(), v.end(), rng);
        auto out = difficulty_select(v, k);
        std::vector<std::pair<double, int>> ref;
        for (const auto& s : v) ref.push_back({s.rd, s.rationale.index});
        std::sort(ref.begin(), ref.end());
        ref.resize(std::min<std::size_t>(m, k));
        ASSERT_EQ(out.size(), ref.size());
        for (std::size_t i = 0; i < ref.size(); ++i) {
            EXPECT_EQ(out[i].rd, ref[i].first);
            EXPECT_EQ(out[i].rationale.index, ref[i].second);
        }
    }
}

namespace {

Corpus planted(int questions, ScoredMap& scored_out) {
    Corpus c;
    std::mt19937_64 rng(77);
    for (int q = 0; q < questions; ++q) {
        std::string id = "q" + std::to_string(q);
        c.add_question({id, "question " + std::to_string(q), "1", TaskKind::Numeric});
        for (int i = 1; i <= 8; ++i) {
            std::string text = i <= 3 ? "we add the two apples and get one" : "path " + std::to_string(i) + " " +
                                                                                  random_text(rng);
            bool correct = i != 8;
            scored_out[id].push_back(scored(i, 0.5 + 0.1 * static_cast<double>((i * 5 + q) % 8), text, correct));
            scored_out[id].back().rationale.question_id = id;
        }
    }
    return c;
}

}  // namespace

TEST(RunSelection, DefaultsGiveThreePerQuestion) {
    Corpus c;
    ScoredMap sm;
    for (int q = 0; q < 4; ++q) {
        std::string id = "q" + std::to_string(q);
        c.add_question({id, "q?", "1", TaskKind::Numeric});
        for (int i = 1; i <= 8; ++i) {
            sm[id].push_back(scored(i, 1.0 / i, "distinct text " + std::to_string(q) + " " + std::to_string(i)));
            sm[id].back().rationale.question_id = id;
        }
    }
    auto res = run_selection(c, sm, SelectionConfig{});
    ASSERT_EQ(res.questions.size(), 4u);
    for (const auto& qs : res.questions) {
        EXPECT_EQ(qs.after_accuracy.size(), 8u);
        EXPECT_EQ(qs.after_diversity.size(), 6u);
        EXPECT_EQ(qs.selected.size(), 3u);
    }
}

TEST(RunSelection, DeterministicFile) {
    testutil::TempDir dir;
    ScoredMap sm;
    Corpus c = planted(10, sm);
    auto r1 = selected_records(c, run_selection(c, sm, SelectionConfig{}), LabelStrategy::Gold);
    auto r2 = selected_records(c, run_selection(c, sm, SelectionConfig{}), LabelStrategy::Gold);
    write_jsonl_atomic(dir / "a.jsonl", r1);
    write_jsonl_atomic(dir / "b.jsonl", r2);
    EXPECT_EQ(testutil::read_file(dir / "a.jsonl"), testutil::read_file(dir / "b.jsonl"));
}

TEST(RunSelection, AblationsChangeOutput) {
    ScoredMap sm;
    Corpus c = planted(10, sm);
    auto records = [&](SelectionConfig cfg) {
        return selected_records(c, run_selection(c, sm, cfg), LabelStrategy::Gold);
    };
    SelectionConfig full;
    full.delta = 1.0;
    auto base = records(full);
    SelectionConfig no_acc = full, no_div = full, no_diff = full;
    no_acc.use_accuracy = false;
    no_div.use_diversity = false;
    no_diff.use_difficulty = false;
    EXPECT_NE(records(no_acc), base);
    EXPECT_NE(records(no_div), base);
    EXPECT_NE(records(no_diff), base);

    // without diversity the planted triplicates survive
    auto res = run_selection(c, sm, no_div);
    EXPECT_EQ(res.questions[0].after_diversity.size(), res.questions[0].after_accuracy.size());
    // without difficulty everything after diversity is selected
    auto res2 = run_selection(c, sm, no_diff);
    EXPECT_EQ(res2.questions[0].selected.size(), 6u);
}

TEST(RunSelection, ConfigValidation) {
    SelectionConfig c;
    c.delta = 1.5;
    EXPECT_THROW(c.validate(), PreconditionError);
    c = {};
    c.difficulty_keep = 7;
    EXPECT_THROW(c.validate(), PreconditionError);
    c.use_diversity = false;
    EXPECT_NO_THROW(c.validate());
}

TEST(SelectedRecords, LabelStrategy) {
    Corpus c;
    c.add_question({"q", "Q?", "26", TaskKind::Numeric});
    ScoredMap sm;
    sm["q"].push_back({{"q", 1, "r", "27", "raw", 0.7, false}, 1, 1, 1});
    SelectionConfig cfg;
    cfg.delta = 0.0;
    auto sel = run_selection(c, sm, cfg);
    auto gold = selected_records(c, sel, LabelStrategy::Gold);
    auto pred = selected_records(c, sel, LabelStrategy::Predict);
    EXPECT_EQ(gold[0]["answer"], "26");
    EXPECT_EQ(gold[0]["label_source"], "gold");
    EXPECT_EQ(pred[0]["answer"], "27");
    EXPECT_EQ(pred[0]["label_source"], "predict");
}
