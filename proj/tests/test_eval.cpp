#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <set>
#include <sstream>

#include "ehrgpt/errors.hpp"
#include "ehrgpt/eval.hpp"
#include "ehrgpt/icd.hpp"
#include "ehrgpt/sequencer.hpp"
#include "support.hpp"

using namespace ehrgpt;
using namespace ehrgpt::test;

namespace {

PatientVisitEval one_patient(std::vector<double> precisions, std::vector<double> recalls) {
    PatientVisitEval e;
    for (std::size_t i = 0; i < precisions.size(); ++i) {
        VisitScore v;
        v.visit_index = i + 1;
        v.precision = precisions[i];
        v.recall = recalls[i];
        e.visits.push_back(v);
    }
    return e;
}

bool contains(std::span<const TokenId> prefix, TokenId id) {
    return std::find(prefix.begin(), prefix.end(), id) != prefix.end();
}

// Small corpus: positives carry K86 before a later C25; negatives never see C25.
Corpus scripted_cohort_corpus() {
    return {
        dx_patient("pos1", {{1, {"K86"}}, {100, {"I10"}}, {400, {"C25"}}}),
        dx_patient("pos2", {{1, {"K86"}}, {150, {"E11"}}, {420, {"C25"}}}),
        dx_patient("neg1", {{1, {"I10"}}, {100, {"E11"}}, {400, {"I10"}}}),
        dx_patient("neg2", {{1, {"E11"}}, {120, {"J44"}}, {500, {"E11"}}}),
    };
}

}  // namespace

// ---------------------------------------------------------------------------
// Set metrics
// ---------------------------------------------------------------------------

TEST(SetMetrics, Examples) {
    const std::vector<TokenId> ab{1, 2}, bc{2, 3}, a{1}, none{};
    std::size_t tp = 0;
    auto [p, r] = set_precision_recall(ab, bc, &tp);
    EXPECT_DOUBLE_EQ(p, 0.5);
    EXPECT_DOUBLE_EQ(r, 0.5);
    EXPECT_EQ(tp, 1u);
    std::tie(p, r) = set_precision_recall(ab, ab);
    EXPECT_DOUBLE_EQ(p, 1.0);
    EXPECT_DOUBLE_EQ(r, 1.0);
    std::tie(p, r) = set_precision_recall(none, a);
    EXPECT_DOUBLE_EQ(p, 0.0);
    EXPECT_DOUBLE_EQ(r, 0.0);
}

TEST(Aggregate, Examples) {
    const std::vector<PatientVisitEval> two{one_patient({1.0, 0.0}, {0.5, 0.5})};
    const auto m = aggregate_metrics(two);
    EXPECT_DOUBLE_EQ(m.mean_precision, 0.5);
    EXPECT_DOUBLE_EQ(m.mean_recall, 0.5);
    EXPECT_EQ(m.visits, 2u);

    const std::vector<PatientVisitEval> single{one_patient({0.25}, {0.75})};
    EXPECT_DOUBLE_EQ(aggregate_metrics(single).mean_precision, 0.25);
    EXPECT_DOUBLE_EQ(aggregate_metrics(single).mean_recall, 0.75);

    PatientVisitEval skipped;
    skipped.skipped_single_visit = true;
    const std::vector<PatientVisitEval> empty{skipped};
    EXPECT_THROW(aggregate_metrics(empty), DataError);
}

TEST(Aggregate, CompensatedSumIsExactOnCancellingTerms) {
    CompensatedSum s;
    for (double x : {1e16, 1.0, -1e16, 1.0}) {
        s.add(x);
    }
    EXPECT_DOUBLE_EQ(s.value(), 2.0);
}

// ---------------------------------------------------------------------------
// Visit-level evaluation
// ---------------------------------------------------------------------------

TEST(VisitEval, ExcludesStructuralTokensFromBothSides) {
    const PatientRecord p = dx_patient("p", {{0, {"E11"}}, {30, {"I10", "J44"}}});
    const Vocabulary v = vocab_of({p});
    const TokenId i10 = v.id("dx:I10"), e11 = v.id("dx:E11");
    const TokenId t0 = v.specials().time[0], vt = v.specials().visit_type[0], unk = v.specials().unknown[0];
    std::size_t step = 0;
    ScriptedPredictor pred(v.size(), [&](std::span<const TokenId>) {
        static const std::vector<std::vector<TokenId>> plan{{t0}, {vt}, {i10}, {unk}, {i10}, {e11}};
        const auto& r = step < plan.size() ? plan[step] : std::vector<TokenId>{v.specials().sep};
        ++step;
        return ranked_distribution(v.size(), r);
    });
    const auto e = visit_level_eval(pred, p, v);
    ASSERT_EQ(e.visits.size(), 1u);
    const auto& s = e.visits[0];
    EXPECT_EQ(s.visit_index, 1u);
    EXPECT_EQ(s.predicted, (std::vector<TokenId>{std::min(i10, e11), std::max(i10, e11)}));
    EXPECT_EQ(s.true_positives, 1u);
    EXPECT_DOUBLE_EQ(s.precision, 0.5);
    EXPECT_DOUBLE_EQ(s.recall, 0.5);
    ASSERT_EQ(s.by_domain.count(Domain::diagnosis), 1u);
    EXPECT_EQ(s.by_domain.size(), 1u);
}

TEST(VisitEval, SingleVisitPatientIsSkipped) {
    const PatientRecord p = dx_patient("p", {{0, {"E11"}}});
    const Vocabulary v = vocab_of({p});
    ScriptedPredictor pred(v.size(), [&](std::span<const TokenId>) { return ranked_distribution(v.size(), {}); });
    const auto e = visit_level_eval(pred, p, v);
    EXPECT_TRUE(e.skipped_single_visit);
    EXPECT_TRUE(e.visits.empty());
    EXPECT_EQ(pred.calls, 0u);
}

TEST(VisitEval, BigramMatchesBruteForceReference) {
    GeneratorConfig g;
    g.n_patients = 100;
    g.seed = 12;
    const Corpus corpus = generate_corpus(g);
    const Vocabulary vocab = Vocabulary::build(corpus);
    std::vector<TokenSequence> train;
    for (const auto& p : corpus) {
        train.push_back(encode_patient(p, vocab));
    }
    BigramPredictor bigram(train, vocab.size());

    // Reference: raw pair counts, argmax with lowest-id ties, deduplicated code sets.
    const std::size_t V = vocab.size();
    std::vector<std::vector<std::size_t>> counts(V, std::vector<std::size_t>(V, 0));
    for (const auto& s : train) {
        for (std::size_t i = 0; i + 1 < s.size(); ++i) {
            ++counts[static_cast<std::size_t>(s.token_ids[i])][static_cast<std::size_t>(s.token_ids[i + 1])];
        }
    }
    auto argmax_after = [&](TokenId a) {
        const auto& row = counts[static_cast<std::size_t>(a)];
        return static_cast<TokenId>(std::max_element(row.begin(), row.end()) - row.begin());
    };
    auto codes = [&](const std::vector<TokenId>& ids) {
        std::set<TokenId> out;
        for (TokenId id : ids) {
            if (vocab.info(id).kind == TokenKind::code) {
                out.insert(id);
            }
        }
        return out;
    };
    double sum_p = 0.0, sum_r = 0.0;
    std::size_t n = 0;
    for (const auto& p : corpus) {
        for (std::size_t k = 1; k < p.visits.size(); ++k) {
            std::vector<TokenId> actual_ids;
            for (const auto& e : p.visits[k].events) {
                actual_ids.push_back(vocab.event_token(e));
            }
            const auto actual = codes(actual_ids);
            if (actual.empty()) {
                continue;
            }
            PatientRecord history = p;
            history.visits.resize(k);
            TokenId last = encode_patient(history, vocab).token_ids.back();
            std::vector<TokenId> generated;
            for (std::size_t step = 0; step < kDefaultTokenBudget; ++step) {
                last = argmax_after(last);
                if (last == vocab.specials().sep) {
                    break;
                }
                generated.push_back(last);
            }
            const auto predicted = codes(generated);
            std::size_t tp = 0;
            for (TokenId id : predicted) {
                tp += actual.count(id);
            }
            sum_p += predicted.empty() ? 0.0 : double(tp) / double(predicted.size());
            sum_r += double(tp) / double(actual.size());
            ++n;
        }
    }
    ASSERT_GT(n, 50u);

    const auto results = evaluate_visits(bigram, corpus, vocab);
    const auto m = aggregate_metrics(results);
    EXPECT_EQ(m.visits, n);
    EXPECT_NEAR(m.mean_precision, sum_p / double(n), 1e-12);
    EXPECT_NEAR(m.mean_recall, sum_r / double(n), 1e-12);

    const auto threaded = evaluate_visits(bigram, corpus, vocab, kDefaultTokenBudget, 4);
    ASSERT_EQ(threaded.size(), results.size());
    for (std::size_t i = 0; i < results.size(); ++i) {
        ASSERT_EQ(threaded[i].visits.size(), results[i].visits.size());
        for (std::size_t j = 0; j < results[i].visits.size(); ++j) {
            EXPECT_EQ(threaded[i].visits[j].predicted, results[i].visits[j].predicted);
        }
    }
}

// ---------------------------------------------------------------------------
// Cohorts
// ---------------------------------------------------------------------------

TEST(Cohort, ArithmeticExamples) {
    const Corpus corpus{
        dx_patient("pos", {{1, {"I10"}}, {200, {"E11"}}, {350, {"J44"}}, {400, {"C25"}}}),
        dx_patient("early", {{1, {"C25"}}, {300, {"I10"}}}),
        dx_patient("short", {{1, {"I10"}}, {500, {"E11"}}}),
        dx_patient("neg", {{1, {"I10"}}, {50, {"E11"}}, {600, {"J44"}}}),
    };
    const Vocabulary v = vocab_of(corpus);
    const auto c90 = build_cohort(corpus, v, {"C25"}, 90);
    ASSERT_EQ(c90.members.size(), 2u);
    EXPECT_EQ(c90.members[0].patient_id, "pos");
    EXPECT_TRUE(c90.members[0].positive);
    EXPECT_EQ(c90.members[0].cutoff, day(310));
    EXPECT_EQ(truncate_history_at(corpus[0], c90.members[0].cutoff).visits.size(), 2u);
    EXPECT_EQ(c90.excluded_positive_history, 1u);  // target in the first visit
    EXPECT_EQ(c90.excluded_negative_history, 1u);

    const auto c180 = build_cohort(corpus, v, {"C25"}, 180);
    EXPECT_EQ(c180.excluded_negative_history, 1u);  // "short": cutoff 320 keeps only day 1
    EXPECT_TRUE(std::none_of(c180.members.begin(), c180.members.end(),
                             [](const auto& m) { return m.patient_id == "short"; }));

    const auto lenient = build_cohort(corpus, v, {"C25"}, 180, 1);
    const auto it = std::find_if(lenient.members.begin(), lenient.members.end(),
                                 [](const auto& m) { return m.patient_id == "short"; });
    ASSERT_NE(it, lenient.members.end());
    EXPECT_FALSE(it->positive);
    EXPECT_EQ(it->cutoff, day(320));
    EXPECT_EQ(truncate_history_at(corpus[2], it->cutoff).visits.size(), 1u);
}

TEST(Cohort, Errors) {
    const Corpus corpus = scripted_cohort_corpus();
    const Vocabulary v = vocab_of(corpus);
    EXPECT_THROW(build_cohort(corpus, v, {"Z99"}, 90), ConfigError);
    EXPECT_THROW(build_cohort(corpus, v, {"K86"}, 90), DataError);  // target in every positive's first visit
    EXPECT_THROW(build_cohort(corpus, v, {"C25"}, 0), ConfigError);
    const auto partial = build_cohort(corpus, v, {"C25", "Z99"}, 90);
    EXPECT_EQ(partial.missing_codes, std::vector<std::string>{"Z99"});
}

TEST(Cohort, InvariantsOnGeneratedCorpus) {
    GeneratorConfig g;
    g.n_patients = 800;
    g.seed = 31;
    const Corpus corpus = generate_corpus(g);
    const Vocabulary v = Vocabulary::build(corpus);
    for (int window : {90, 180}) {
        const auto cohort = chapter_task(corpus, v, "I00-I99", window);
        const auto targets = cohort.target_codes;
        for (const auto& m : cohort.members) {
            const auto& p = corpus[m.corpus_index];
            EXPECT_GE(truncate_history_at(p, m.cutoff).visits.size(), 2u);
            std::optional<Date> first;
            for (const auto& visit : p.visits) {
                for (const auto& e : visit.events) {
                    if (e.domain == Domain::diagnosis && targets.contains(normalize_diagnosis(e.code, v.icd_mapping()))) {
                        first = first ? std::min(*first, visit.start_date) : visit.start_date;
                    }
                }
            }
            EXPECT_EQ(first.has_value(), m.positive) << m.patient_id;
            if (first) {
                EXPECT_GT(*first, m.cutoff);
                EXPECT_LE(*first, m.cutoff.plus_days(window));
            }
        }
    }
}

TEST(Chapters, Examples) {
    EXPECT_EQ(icd_chapter("F32").id, "F01-F99");
    EXPECT_EQ(icd_chapter("A00").id, "A00-B99");
    EXPECT_EQ(icd_chapter("D50").id, "D50-D89");
    EXPECT_EQ(icd_chapter("D49").id, "C00-D49");
    EXPECT_THROW(icd_chapter("F3"), DataError);
    EXPECT_THROW(icd_chapter("332"), DataError);
    std::size_t evaluated = 0;
    for (const auto& c : icd_chapters()) {
        evaluated += c.evaluated ? 1 : 0;
    }
    EXPECT_EQ(evaluated, 14u);
}

TEST(Chapters, CodesAndTasks) {
    const Corpus corpus = scripted_cohort_corpus();
    const Vocabulary v = vocab_of(corpus);
    EXPECT_EQ(chapter_codes(v, "C00-D49"), std::set<std::string>{"C25"});
    EXPECT_EQ(chapter_codes(v, "I00-I99"), std::set<std::string>{"I10"});
    EXPECT_THROW(chapter_task(corpus, v, "L00-L99", 90), ConfigError);
    EXPECT_EQ(chapter_task(corpus, v, "C00-D49", 90).positives(), 2u);

    ASSERT_EQ(condition_tasks().size(), 12u);
    EXPECT_EQ(condition_tasks()[0].codes, (std::vector<std::string>{"F32", "F33", "F34"}));
}

// ---------------------------------------------------------------------------
// Zero-shot
// ---------------------------------------------------------------------------

TEST(ZeroShot, DegeneratePredictors) {
    const Corpus corpus = scripted_cohort_corpus();
    const Vocabulary v = vocab_of(corpus);
    const auto cohort = build_cohort(corpus, v, {"C25"}, 90);
    const TokenId c25 = v.id("dx:C25");
    const TokenId sep = v.specials().sep, t3 = v.specials().time[3];

    ScriptedPredictor always(v.size(), [&](std::span<const TokenId>) { return ranked_distribution(v.size(), {c25}); });
    const auto yes = zero_shot_eval(always, corpus, v, cohort, kDefaultTopN, 8);
    ASSERT_EQ(yes.counts.rows.size(), 4u);
    for (const auto& r : yes.counts.rows) {
        EXPECT_DOUBLE_EQ(r.tp_pct, 100.0);
        EXPECT_DOUBLE_EQ(r.fp_pct, 100.0);
    }

    // Targets only ever rank last; the path ends the visit and jumps a year.
    std::vector<TokenId> order{sep, t3};
    for (std::size_t id = 0; id < v.size(); ++id) {
        if (TokenId(id) != sep && TokenId(id) != t3 && TokenId(id) != c25) {
            order.push_back(TokenId(id));
        }
    }
    ScriptedPredictor never(v.size(), [&](std::span<const TokenId> p) {
        auto o = order;
        if (p.back() == sep) {
            std::swap(o[0], o[1]);
        }
        return ranked_distribution(v.size(), o, 0.999);
    });
    const auto no = zero_shot_eval(never, corpus, v, cohort);
    for (const auto& r : no.counts.rows) {
        EXPECT_EQ(r.tp, 0u);
        EXPECT_EQ(r.fp, 0u);
        EXPECT_DOUBLE_EQ(r.fn_pct, 100.0);
        EXPECT_DOUBLE_EQ(r.tn_pct, 100.0);
    }
    EXPECT_EQ(no.outcomes[0].forecast.terminated_by, Termination::horizon);
}

TEST(ZeroShot, TwoPlusTwoScriptedTrace) {
    const Corpus corpus = scripted_cohort_corpus();
    const Vocabulary v = vocab_of(corpus);
    const auto cohort = build_cohort(corpus, v, {"C25"}, 90);
    ASSERT_EQ(cohort.positives(), 2u);
    ASSERT_EQ(cohort.negatives(), 2u);
    const TokenId k86 = v.id("dx:K86"), c25 = v.id("dx:C25"), e11 = v.id("dx:E11"), i10 = v.id("dx:I10"),
                  j44 = v.id("dx:J44");
    ScriptedPredictor pred(v.size(), [&](std::span<const TokenId> p) {
        if (contains(p, k86)) {
            return ranked_distribution(v.size(), {e11, i10, j44, c25});
        }
        return ranked_distribution(v.size(), {e11, i10, j44});
    });
    const auto r = zero_shot_eval(pred, corpus, v, cohort, kDefaultTopN, 16);
    EXPECT_EQ(r.failures, 0u);
    const auto& rows = r.counts.rows;
    ASSERT_EQ(rows.size(), 4u);
    EXPECT_EQ(rows[0].n, 1u);
    EXPECT_EQ(rows[0].tp, 0u);
    EXPECT_EQ(rows[0].fn, 2u);
    EXPECT_EQ(rows[1].n, 5u);
    EXPECT_EQ(rows[1].tp, 2u);
    EXPECT_EQ(rows[1].fp, 0u);
    EXPECT_EQ(rows[1].tn, 2u);
    EXPECT_DOUBLE_EQ(rows[1].tp_pct, 100.0);
    for (const auto& o : r.outcomes) {
        EXPECT_EQ(o.predicted.size(), 4u);
        EXPECT_EQ(o.forecast.steps.size(), 16u);
    }

    std::ostringstream csv;
    write_confusion_csv(csv, r.counts);
    EXPECT_EQ(csv.str().substr(0, csv.str().find('\n')), "N,TP,FP,TN,FN,TP%,FP%,TN%,FN%,positives,negatives");
    EXPECT_NE(csv.str().find("\n5,2,0,2,0,100,0,100,0,2,2\n"), std::string::npos);
}

TEST(ZeroShot, AccountingAndMonotonicityWithBigram) {
    GeneratorConfig g;
    g.n_patients = 300;
    g.seed = 8;
    const Corpus corpus = generate_corpus(g);
    const Vocabulary v = Vocabulary::build(corpus);
    std::vector<TokenSequence> train;
    for (const auto& p : corpus) {
        train.push_back(encode_patient(p, v));
    }
    BigramPredictor bigram(train, v.size());
    const auto cohort = chapter_task(corpus, v, "E00-E89", 90);
    const auto r = zero_shot_eval(bigram, corpus, v, cohort, kDefaultTopN, 32, 3);
    EXPECT_EQ(r.counts.positives + r.counts.negatives + r.failures, cohort.members.size());
    for (std::size_t i = 0; i < r.counts.rows.size(); ++i) {
        const auto& row = r.counts.rows[i];
        EXPECT_EQ(row.tp + row.fn, r.counts.positives);
        EXPECT_EQ(row.fp + row.tn, r.counts.negatives);
        EXPECT_NEAR(row.tp_pct + row.fn_pct, 100.0, 1e-9);
        EXPECT_NEAR(row.fp_pct + row.tn_pct, 100.0, 1e-9);
        if (i > 0) {
            EXPECT_GE(row.tp, r.counts.rows[i - 1].tp);
            EXPECT_GE(row.fp, r.counts.rows[i - 1].fp);
        }
    }
    const auto serial = zero_shot_eval(bigram, corpus, v, cohort, kDefaultTopN, 32, 1);
    for (std::size_t i = 0; i < r.counts.rows.size(); ++i) {
        EXPECT_EQ(serial.counts.rows[i].tp, r.counts.rows[i].tp);
        EXPECT_EQ(serial.counts.rows[i].fp, r.counts.rows[i].fp);
    }
}

TEST(ZeroShot, RejectsBadArguments) {
    const Corpus corpus = scripted_cohort_corpus();
    const Vocabulary v = vocab_of(corpus);
    const auto cohort = build_cohort(corpus, v, {"C25"}, 90);
    ScriptedPredictor pred(v.size(), [&](std::span<const TokenId>) { return ranked_distribution(v.size(), {}); });
    const std::vector<std::size_t> zero{0, 5};
    EXPECT_THROW(zero_shot_eval(pred, corpus, v, cohort, zero), ConfigError);
    auto one_sided = cohort;
    std::erase_if(one_sided.members, [](const auto& m) { return !m.positive; });
    EXPECT_THROW(zero_shot_eval(pred, corpus, v, one_sided), DataError);
}
