#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <sstream>

#include "ehrgpt/errors.hpp"
#include "ehrgpt/forecast.hpp"
#include "ehrgpt/rng.hpp"
#include "ehrgpt/sequencer.hpp"
#include "support.hpp"

using namespace ehrgpt;
using namespace ehrgpt::test;

namespace {

struct Fixture {
    PatientRecord patient = dx_patient("p", {{0, {"E11"}}, {40, {"I10", "J44"}}, {400, {"E11", "J44"}}});
    Vocabulary vocab = vocab_of({patient});
    std::vector<TokenId> prefix = encode_patient(patient, vocab).token_ids;
    TokenId a = vocab.id("dx:E11");
    TokenId b = vocab.id("dx:I10");
    TokenId c = vocab.id("dx:J44");
    TokenId sep = vocab.specials().sep;
    std::size_t V = vocab.size();

    // Predictor whose ranking depends only on how many tokens were generated so far.
    ScriptedPredictor by_step(std::vector<std::vector<TokenId>> plan) const {
        const std::size_t base = prefix.size();
        const std::size_t v = V;
        return ScriptedPredictor(V, [plan, base, v](std::span<const TokenId> p) {
            const std::size_t k = std::min(p.size() - base, plan.size() - 1);
            return ranked_distribution(v, plan[k]);
        });
    }
};

// Full sort of (probability desc, id asc); the reference for top_n.
std::vector<TokenId> sorted_ids(const std::vector<double>& p) {
    std::vector<TokenId> ids(p.size());
    std::iota(ids.begin(), ids.end(), 0);
    std::stable_sort(ids.begin(), ids.end(), [&](TokenId x, TokenId y) {
        return p[static_cast<std::size_t>(x)] > p[static_cast<std::size_t>(y)];
    });
    return ids;
}

}  // namespace

TEST(GenerateVisit, ImmediateSepGivesEmptyVisit) {
    Fixture f;
    auto p = f.by_step({{f.sep}});
    const auto v = generate_visit(p, f.vocab, f.prefix);
    EXPECT_TRUE(v.tokens.empty());
    EXPECT_EQ(v.terminated_by, Termination::sep);
    EXPECT_EQ(p.calls, 1u);
}

TEST(GenerateVisit, CyclingPredictorStopsAtSep) {
    Fixture f;
    auto p = f.by_step({{f.a}, {f.b}, {f.sep}});
    const auto v = generate_visit(p, f.vocab, f.prefix);
    EXPECT_EQ(v.tokens, (std::vector<TokenId>{f.a, f.b}));
    EXPECT_EQ(v.terminated_by, Termination::sep);
}

TEST(GenerateVisit, BudgetStopsNonTerminatingPredictor) {
    Fixture f;
    auto p = f.by_step({{f.c}});
    const auto v = generate_visit(p, f.vocab, f.prefix, 2);
    EXPECT_EQ(v.tokens, (std::vector<TokenId>{f.c, f.c}));
    EXPECT_EQ(v.terminated_by, Termination::token_budget);
}

TEST(GenerateVisit, ContextOverflowSlidesInsteadOfFailing) {
    Fixture f;
    const std::size_t base = f.prefix.size();
    const std::size_t V = f.V;
    const TokenId c = f.c;
    std::size_t longest = 0;
    ScriptedPredictor p(
        V,
        [&](std::span<const TokenId> prefix) {
            longest = std::max(longest, prefix.size());
            return ranked_distribution(V, {c});
        },
        base + 2);
    const auto v = generate_visit(p, f.vocab, f.prefix, 40);
    EXPECT_EQ(v.tokens.size(), 40u);
    EXPECT_LT(longest, base + 2);
}

TEST(TopN, Examples) {
    const std::vector<double> p{0.5, 0.3, 0.2};
    const auto two = top_n(p, 2);
    ASSERT_EQ(two.size(), 2u);
    EXPECT_EQ(two[0].token, 0);
    EXPECT_EQ(two[1].token, 1);
    EXPECT_DOUBLE_EQ(two[0].probability, 0.5);
    EXPECT_EQ(top_n(p, 10).size(), 3u);

    const std::vector<double> tied{0.1, 0.3, 0.3, 0.3};
    const auto t = top_n(tied, 3);
    EXPECT_EQ(t[0].token, 1);
    EXPECT_EQ(t[1].token, 2);
    EXPECT_EQ(t[2].token, 3);
}

TEST(TopN, MatchesFullSortAndNests) {
    Rng rng(17, "topn");
    for (int trial = 0; trial < 200; ++trial) {
        const auto V = static_cast<std::size_t>(rng.uniform_int(1, 40));
        std::vector<double> p(V);
        for (auto& x : p) {
            // coarse values so ties are frequent
            x = static_cast<double>(rng.uniform_int(0, 5));
        }
        const auto ref = sorted_ids(p);
        std::vector<TokenId> previous;
        for (std::size_t n = 1; n <= V + 1; ++n) {
            const auto got = top_n(p, n);
            std::vector<TokenId> ids;
            for (const auto& cand : got) {
                ids.push_back(cand.token);
            }
            ASSERT_EQ(ids, std::vector<TokenId>(ref.begin(), ref.begin() + static_cast<std::ptrdiff_t>(std::min(n, V))));
            ASSERT_TRUE(std::equal(previous.begin(), previous.end(), ids.begin()));
            previous = ids;
        }
    }
}

TEST(TopNSets, HorizonStopsAtTheFirstTimeTokenBeyondTheWindow) {
    Fixture f;
    const TokenId t1 = f.vocab.specials().time[1];
    auto p = f.by_step({{f.sep}, {t1}, {f.a}});
    const auto fs = top_n_sets(p, f.vocab, f.prefix, 3, 90);
    ASSERT_EQ(fs.steps.size(), 2u);
    EXPECT_EQ(fs.steps[0].greedy, f.sep);
    EXPECT_EQ(fs.steps[1].greedy, t1);
    EXPECT_EQ(fs.terminated_by, Termination::horizon);
    EXPECT_EQ(fs.elapsed_bucket_days, 93);
}

TEST(TopNSets, LowerBoundEqualToHorizonDoesNotStop) {
    Fixture f;
    const TokenId t0 = f.vocab.specials().time[0];
    const TokenId t1 = f.vocab.specials().time[1];
    auto p = f.by_step({{f.sep}, {t0}, {f.a}, {f.sep}, {t1}, {f.b}});
    const auto fs = top_n_sets(p, f.vocab, f.prefix, 1, 93, 12);
    EXPECT_EQ(fs.terminated_by, Termination::token_budget);
    EXPECT_EQ(fs.steps.size(), 12u);
    EXPECT_EQ(fs.elapsed_bucket_days, 93);
}

TEST(TopNSets, GreedyContainmentNestingAndDeterminism) {
    Fixture f;
    const std::size_t V = f.V;
    ScriptedPredictor p(V, [&](std::span<const TokenId> prefix) {
        Rng local(prefix.size(), "dist", static_cast<std::uint64_t>(prefix.back()));
        std::vector<double> d(V);
        double total = 0;
        for (auto& x : d) {
            x = local.uniform();
            total += x;
        }
        for (auto& x : d) {
            x /= total;
        }
        return d;
    });
    const auto small = top_n_sets(p, f.vocab, f.prefix, 3, 365, 30);
    const auto large = top_n_sets(p, f.vocab, f.prefix, 4, 365, 30);
    const auto again = top_n_sets(p, f.vocab, f.prefix, 3, 365, 30);
    ASSERT_EQ(small.steps.size(), large.steps.size());
    for (std::size_t s = 0; s < small.steps.size(); ++s) {
        EXPECT_EQ(small.steps[s].greedy, small.steps[s].candidates.front().token);
        EXPECT_EQ(small.steps[s].greedy, large.steps[s].greedy);
        for (std::size_t i = 0; i < 3; ++i) {
            EXPECT_EQ(small.steps[s].candidates[i].token, large.steps[s].candidates[i].token);
            EXPECT_EQ(small.steps[s].candidates[i].token, again.steps[s].candidates[i].token);
        }
    }
    EXPECT_THROW(top_n_sets(p, f.vocab, f.prefix, 0, 90), ConfigError);
}

TEST(ForecastSet, HitsAndGreedyHits) {
    ForecastSet fs;
    fs.steps.push_back({1, {{1, 0.5}, {2, 0.3}, {3, 0.1}}});
    fs.steps.push_back({4, {{4, 0.6}, {5, 0.2}, {1, 0.1}}});
    EXPECT_TRUE(fs.hits({4}, 1));
    EXPECT_FALSE(fs.hits({2}, 1));
    EXPECT_TRUE(fs.hits({2}, 2));
    EXPECT_FALSE(fs.hits({9}, 3));
    EXPECT_EQ(fs.greedy_hits({1, 4}), (std::vector<std::size_t>{0, 1}));
}

TEST(SlideWindow, DropsOldestWholeVisitsAndTheirTimeToken) {
    Fixture f;
    // [CLS][AGE][SEX] [VT] E11 [SEP] [T0][VT] I10 J44 [SEP] [T2][VT] E11 J44 [SEP]
    ASSERT_EQ(f.prefix.size(), 16u);
    auto w = f.prefix;
    EXPECT_EQ(slide_window(w, f.vocab, 17), 0u);
    EXPECT_EQ(w, f.prefix);

    EXPECT_EQ(slide_window(w, f.vocab, 16), 4u);
    ASSERT_EQ(w.size(), 12u);
    EXPECT_EQ(f.vocab.info(w[3]).kind, TokenKind::visit_type);
    EXPECT_EQ(w[4], f.b);
    EXPECT_NO_THROW(decode_tokens(w, f.vocab));

    w = f.prefix;
    EXPECT_EQ(slide_window(w, f.vocab, 10), 9u);
    EXPECT_EQ(w.size(), 7u);
    EXPECT_EQ(decode_tokens(w, f.vocab).visits.size(), 1u);
    EXPECT_THROW(slide_window(w, f.vocab, 4), ConfigError);
}

TEST(Trace, OneRowPerCandidate) {
    Fixture f;
    ForecastSet fs;
    fs.steps.push_back({f.a, {{f.a, 0.5}, {f.b, 0.25}}});
    std::ostringstream out;
    write_trace(out, fs, f.vocab);
    EXPECT_EQ(out.str(), "step,greedy,rank,token,probability\n0,dx:E11,1,dx:E11,0.5\n0,dx:E11,2,dx:I10,0.25\n");
}
