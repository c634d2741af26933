#pragma once

#include <array>
#include <iosfwd>
#include <map>
#include <set>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "ehrgpt/corpus.hpp"
#include "ehrgpt/forecast.hpp"
#include "ehrgpt/predictor.hpp"
#include "ehrgpt/vocab.hpp"

namespace ehrgpt {

// ---------------------------------------------------------------------------
// Visit-level precision / recall
// ---------------------------------------------------------------------------

struct DomainScore {
    double precision = 0.0;
    double recall = 0.0;
};

struct VisitScore {
    std::size_t visit_index = 0;  // index of the generated (target) visit
    std::vector<TokenId> predicted;  // sorted, deduplicated code tokens
    std::vector<TokenId> actual;
    std::size_t true_positives = 0;
    double precision = 0.0;
    double recall = 0.0;
    std::map<Domain, DomainScore> by_domain;  // domains with a nonempty actual set
};

struct PatientVisitEval {
    std::string patient_id;
    std::vector<VisitScore> visits;
    std::size_t skipped_empty_truth = 0;  // target visits without any known code token
    bool skipped_single_visit = false;
};

/// Precision/recall of two deduplicated sets; precision is 0 for an empty
/// prediction and recall 0 for an empty truth.
std::pair<double, double> set_precision_recall(std::span<const TokenId> predicted, std::span<const TokenId> actual,
                                               std::size_t* true_positives = nullptr);

/// For k = 1..L-1 encodes the first k visits, greedily generates the next
/// visit and compares code-token sets (time, visit-type, discharge, SEP and
/// UNK tokens are excluded from both sides).
PatientVisitEval visit_level_eval(Predictor& predictor, const PatientRecord& patient, const Vocabulary& vocab,
                                  std::size_t budget = kDefaultTokenBudget);

struct AggregateMetrics {
    std::size_t visits = 0;
    double mean_precision = 0.0;
    double mean_recall = 0.0;
    std::map<Domain, std::size_t> domain_visits;
    std::map<Domain, DomainScore> by_domain;
    std::size_t patients = 0;
    std::size_t skipped_single_visit = 0;
    std::size_t skipped_empty_truth = 0;
};

/// Unweighted means over every evaluated (patient, visit) pair, with
/// compensated summation. Throws DataError when no visit was evaluated.
AggregateMetrics aggregate_metrics(std::span<const PatientVisitEval> results);

/// visit_level_eval over a corpus, parallel across patients.
std::vector<PatientVisitEval> evaluate_visits(const Predictor& predictor, const Corpus& corpus,
                                              const Vocabulary& vocab, std::size_t budget = kDefaultTokenBudget,
                                              std::size_t threads = 1);

// ---------------------------------------------------------------------------
// Zero-shot cohorts
// ---------------------------------------------------------------------------

struct CohortMember {
    std::string patient_id;
    std::size_t corpus_index = 0;
    Date cutoff;
    bool positive = false;
};

struct CohortSpec {
    std::string name;
    std::set<std::string> target_codes;  // normalized diagnosis categories present in the vocabulary
    std::vector<std::string> missing_codes;  // requested but absent from the vocabulary
    std::vector<TokenId> target_tokens;
    int window_days = 90;
    std::size_t min_history_visits = 2;
    std::vector<CohortMember> members;  // corpus order
    std::size_t excluded_positive_history = 0;  // target too early for the required history
    std::size_t excluded_negative_history = 0;

    std::size_t positives() const;
    std::size_t negatives() const;
    std::unordered_set<TokenId> target_set() const { return {target_tokens.begin(), target_tokens.end()}; }
};

/// Cohort for a set of diagnosis categories. Positives: first target at visit
/// date D with >= min_history visits dated <= D - window; cutoff D - window.
/// Negatives: no target anywhere, cutoff = last visit - window, same history
/// rule. Throws ConfigError when no target is in the vocabulary and DataError
/// when either side is empty.
CohortSpec build_cohort(const Corpus& corpus, const Vocabulary& vocab, const std::set<std::string>& target_codes,
                        int window_days, std::size_t min_history_visits = 2, std::string name = {});

/// Vocabulary diagnosis categories falling in an ICD-10 chapter.
std::set<std::string> chapter_codes(const Vocabulary& vocab, std::string_view chapter_id);

/// build_cohort over every vocabulary code in the chapter. Throws ConfigError
/// when the chapter has no vocabulary codes.
CohortSpec chapter_task(const Corpus& corpus, const Vocabulary& vocab, std::string_view chapter_id, int window_days,
                        std::size_t min_history_visits = 2);

struct ConditionTask {
    std::string name;
    std::vector<std::string> codes;
};

/// The twelve specific-condition tasks.
std::span<const ConditionTask> condition_tasks();

// ---------------------------------------------------------------------------
// Zero-shot evaluation
// ---------------------------------------------------------------------------

inline constexpr std::array<std::size_t, 4> kDefaultTopN{1, 5, 10, 20};

struct ConfusionRow {
    std::size_t n = 0;
    std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
    double tp_pct = 0, fp_pct = 0, tn_pct = 0, fn_pct = 0;
};

struct ConfusionCounts {
    std::size_t positives = 0;
    std::size_t negatives = 0;
    std::vector<ConfusionRow> rows;  // one per N, ascending
};

struct MemberOutcome {
    std::size_t member = 0;  // index into CohortSpec::members
    bool evaluated = false;
    std::string failure;  // encode failure reason when !evaluated
    ForecastSet forecast;
    std::vector<bool> predicted;  // per N
};

struct ZeroShotResult {
    ConfusionCounts counts;
    std::vector<MemberOutcome> outcomes;  // cohort member order
    std::size_t failures = 0;
};

/// Confusion counts of already generated forecasts against a target set.
ConfusionCounts score_forecasts(const CohortSpec& cohort, std::span<const MemberOutcome> outcomes,
                                const std::unordered_set<TokenId>& targets, std::span<const std::size_t> ns);

/// Encodes each member's history up to its cutoff, walks the greedy path with
/// top-max(N) sets under the cohort's horizon and counts hits per N. Members
/// whose history cannot be encoded are excluded from both sides and reported.
ZeroShotResult zero_shot_eval(const Predictor& predictor, const Corpus& corpus, const Vocabulary& vocab,
                              const CohortSpec& cohort, std::span<const std::size_t> ns = kDefaultTopN,
                              std::size_t budget = kDefaultTokenBudget, std::size_t threads = 1);

/// Columns: N,TP,FP,TN,FN,TP%,FP%,TN%,FN%,positives,negatives
void write_confusion_csv(std::ostream& out, const ConfusionCounts& counts);

/// Neumaier-compensated sum.
class CompensatedSum {
public:
    void add(double x);
    double value() const { return sum_ + compensation_; }

private:
    double sum_ = 0.0;
    double compensation_ = 0.0;
};

}  // namespace ehrgpt
