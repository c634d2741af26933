#include "ehrgpt/eval.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <optional>
#include <ostream>

#include "ehrgpt/errors.hpp"
#include "ehrgpt/icd.hpp"
#include "ehrgpt/parallel.hpp"
#include "ehrgpt/sequencer.hpp"

namespace ehrgpt {

void CompensatedSum::add(double x) {
    const double t = sum_ + x;
    if (std::abs(sum_) >= std::abs(x)) {
        compensation_ += (sum_ - t) + x;
    } else {
        compensation_ += (x - t) + sum_;
    }
    sum_ = t;
}

std::pair<double, double> set_precision_recall(std::span<const TokenId> predicted, std::span<const TokenId> actual,
                                               std::size_t* true_positives) {
    std::size_t tp = 0;
    for (TokenId p : predicted) {
        tp += std::find(actual.begin(), actual.end(), p) != actual.end() ? 1 : 0;
    }
    if (true_positives) {
        *true_positives = tp;
    }
    const double precision = predicted.empty() ? 0.0 : static_cast<double>(tp) / static_cast<double>(predicted.size());
    const double recall = actual.empty() ? 0.0 : static_cast<double>(tp) / static_cast<double>(actual.size());
    return {precision, recall};
}

namespace {

std::vector<TokenId> code_set(std::vector<TokenId> tokens, const Vocabulary& vocab) {
    std::erase_if(tokens, [&](TokenId id) { return !vocab.is_code(id); });
    std::sort(tokens.begin(), tokens.end());
    tokens.erase(std::unique(tokens.begin(), tokens.end()), tokens.end());
    return tokens;
}

std::vector<TokenId> of_domain(std::span<const TokenId> tokens, const Vocabulary& vocab, Domain d) {
    std::vector<TokenId> out;
    for (TokenId id : tokens) {
        if (vocab.info(id).domain == d) {
            out.push_back(id);
        }
    }
    return out;
}

}  // namespace

PatientVisitEval visit_level_eval(Predictor& predictor, const PatientRecord& patient, const Vocabulary& vocab,
                                  std::size_t budget) {
    PatientVisitEval result;
    result.patient_id = patient.patient_id;
    if (patient.visits.size() < 2) {
        result.skipped_single_visit = true;
        return result;
    }
    PatientRecord history = patient;
    for (std::size_t k = 1; k < patient.visits.size(); ++k) {
        const Visit& target = patient.visits[k];
        std::vector<TokenId> truth;
        for (const auto& e : target.events) {
            truth.push_back(vocab.event_token(e));
        }
        truth = code_set(std::move(truth), vocab);
        if (truth.empty()) {
            ++result.skipped_empty_truth;
            continue;
        }
        history.visits.assign(patient.visits.begin(), patient.visits.begin() + static_cast<std::ptrdiff_t>(k));
        const TokenSequence prefix = encode_patient(history, vocab, std::nullopt, predictor.context());
        const GeneratedVisit generated = generate_visit(predictor, vocab, prefix.token_ids, budget);

        VisitScore score;
        score.visit_index = k;
        score.predicted = code_set(generated.tokens, vocab);
        score.actual = std::move(truth);
        std::tie(score.precision, score.recall) =
            set_precision_recall(score.predicted, score.actual, &score.true_positives);
        for (Domain d : kDomains) {
            const auto actual_d = of_domain(score.actual, vocab, d);
            if (actual_d.empty()) {
                continue;
            }
            const auto predicted_d = of_domain(score.predicted, vocab, d);
            const auto [p, r] = set_precision_recall(predicted_d, actual_d);
            score.by_domain[d] = DomainScore{p, r};
        }
        result.visits.push_back(std::move(score));
    }
    return result;
}

AggregateMetrics aggregate_metrics(std::span<const PatientVisitEval> results) {
    AggregateMetrics m;
    CompensatedSum precision, recall;
    std::map<Domain, std::pair<CompensatedSum, CompensatedSum>> domain_sums;
    for (const auto& patient : results) {
        ++m.patients;
        m.skipped_single_visit += patient.skipped_single_visit ? 1 : 0;
        m.skipped_empty_truth += patient.skipped_empty_truth;
        for (const auto& v : patient.visits) {
            ++m.visits;
            precision.add(v.precision);
            recall.add(v.recall);
            for (const auto& [d, s] : v.by_domain) {
                ++m.domain_visits[d];
                domain_sums[d].first.add(s.precision);
                domain_sums[d].second.add(s.recall);
            }
        }
    }
    if (m.visits == 0) {
        throw DataError("aggregate_metrics: no visit was evaluated");
    }
    m.mean_precision = precision.value() / static_cast<double>(m.visits);
    m.mean_recall = recall.value() / static_cast<double>(m.visits);
    for (const auto& [d, sums] : domain_sums) {
        const double n = static_cast<double>(m.domain_visits[d]);
        m.by_domain[d] = DomainScore{sums.first.value() / n, sums.second.value() / n};
    }
    return m;
}

std::vector<PatientVisitEval> evaluate_visits(const Predictor& predictor, const Corpus& corpus,
                                              const Vocabulary& vocab, std::size_t budget, std::size_t threads) {
    std::vector<PatientVisitEval> out(corpus.size());
    std::vector<std::unique_ptr<Predictor>> workers;
    for (std::size_t w = 0; w < std::max<std::size_t>(1, threads); ++w) {
        workers.push_back(predictor.clone());
    }
    parallel_for(corpus.size(), threads, [&](std::size_t i, std::size_t w) {
        out[i] = visit_level_eval(*workers[w], corpus[i], vocab, budget);
    });
    return out;
}

// ---------------------------------------------------------------------------
// Cohorts
// ---------------------------------------------------------------------------

std::size_t CohortSpec::positives() const {
    return static_cast<std::size_t>(std::count_if(members.begin(), members.end(), [](auto& m) { return m.positive; }));
}

std::size_t CohortSpec::negatives() const { return members.size() - positives(); }

namespace {

bool visit_has_target(const Visit& visit, const std::set<std::string>& targets, const IcdMapping& mapping) {
    for (const auto& e : visit.events) {
        if (e.domain == Domain::diagnosis && targets.contains(normalize_diagnosis(e.code, mapping))) {
            return true;
        }
    }
    return false;
}

std::size_t visits_on_or_before(const PatientRecord& p, Date cutoff) {
    return static_cast<std::size_t>(
        std::count_if(p.visits.begin(), p.visits.end(), [&](const Visit& v) { return v.start_date <= cutoff; }));
}

}  // namespace

CohortSpec build_cohort(const Corpus& corpus, const Vocabulary& vocab, const std::set<std::string>& target_codes,
                        int window_days, std::size_t min_history_visits, std::string name) {
    if (window_days <= 0) {
        throw ConfigError("window_days must be positive");
    }
    CohortSpec cohort;
    cohort.window_days = window_days;
    cohort.min_history_visits = min_history_visits;
    for (const auto& code : target_codes) {
        if (auto id = vocab.find(Vocabulary::diagnosis_token(code))) {
            cohort.target_codes.insert(code);
            cohort.target_tokens.push_back(*id);
        } else {
            cohort.missing_codes.push_back(code);
        }
    }
    std::sort(cohort.target_tokens.begin(), cohort.target_tokens.end());
    if (cohort.target_codes.empty()) {
        throw ConfigError("none of the target codes is in the vocabulary");
    }
    if (name.empty()) {
        for (const auto& c : target_codes) {
            name += (name.empty() ? "" : "+") + c;
        }
    }
    cohort.name = std::move(name);

    // Targets are matched against every requested code, present in the
    // vocabulary or not, so negatives are truly target-free.
    const IcdMapping& mapping = vocab.icd_mapping();
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        const PatientRecord& p = corpus[i];
        if (p.visits.empty()) {
            continue;
        }
        std::optional<Date> first_target;
        for (const auto& v : p.visits) {
            if (visit_has_target(v, target_codes, mapping)) {
                first_target = v.start_date;
                break;
            }
        }
        const Date cutoff = (first_target ? *first_target : p.visits.back().start_date).plus_days(-window_days);
        if (visits_on_or_before(p, cutoff) < std::max<std::size_t>(1, min_history_visits)) {
            ++(first_target ? cohort.excluded_positive_history : cohort.excluded_negative_history);
            continue;
        }
        cohort.members.push_back(CohortMember{p.patient_id, i, cutoff, first_target.has_value()});
    }
    const std::size_t pos = cohort.positives();
    const std::size_t neg = cohort.negatives();
    if (pos == 0 || neg == 0) {
        throw DataError("cohort '" + cohort.name + "' has " + std::to_string(pos) + " positives and " +
                        std::to_string(neg) + " negatives; both sides must be nonempty");
    }
    return cohort;
}

std::set<std::string> chapter_codes(const Vocabulary& vocab, std::string_view chapter_id) {
    const IcdChapter& chapter = chapter_by_id(chapter_id);
    std::set<std::string> codes;
    for (std::size_t id = 0; id < vocab.size(); ++id) {
        const auto category = vocab.diagnosis_category(static_cast<TokenId>(id));
        if (!category || !is_icd10_category(*category)) {
            continue;
        }
        if (*category >= chapter.first && *category <= chapter.last) {
            codes.insert(*category);
        }
    }
    return codes;
}

CohortSpec chapter_task(const Corpus& corpus, const Vocabulary& vocab, std::string_view chapter_id, int window_days,
                        std::size_t min_history_visits) {
    const auto codes = chapter_codes(vocab, chapter_id);
    if (codes.empty()) {
        throw ConfigError("chapter " + std::string(chapter_id) + " has no vocabulary codes");
    }
    return build_cohort(corpus, vocab, codes, window_days, min_history_visits, std::string(chapter_id));
}

std::span<const ConditionTask> condition_tasks() {
    static const std::vector<ConditionTask> tasks{
        {"major_depressive_disorder", {"F32", "F33", "F34"}},
        {"heart_failure", {"I50"}},
        {"end_stage_renal_disease", {"N18"}},
        {"chronic_ischemic_heart_disease", {"I25"}},
        {"type2_diabetes", {"E11"}},
        {"copd", {"J44"}},
        {"pancreatic_cancer", {"C25"}},
        {"liver_cancer", {"C22"}},
        {"brain_cancer", {"C71"}},
        {"cerebral_infarction", {"I63"}},
        {"rheumatoid_arthritis", {"M06"}},
        {"systemic_lupus_erythematosus", {"M32"}},
    };
    return tasks;
}

// ---------------------------------------------------------------------------
// Zero-shot evaluation
// ---------------------------------------------------------------------------

ConfusionCounts score_forecasts(const CohortSpec& cohort, std::span<const MemberOutcome> outcomes,
                                const std::unordered_set<TokenId>& targets, std::span<const std::size_t> ns) {
    ConfusionCounts counts;
    for (const auto& o : outcomes) {
        if (!o.evaluated) {
            continue;
        }
        ++(cohort.members[o.member].positive ? counts.positives : counts.negatives);
    }
    std::vector<std::size_t> sorted(ns.begin(), ns.end());
    std::sort(sorted.begin(), sorted.end());
    sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
    auto pct = [](std::size_t k, std::size_t total) {
        return total == 0 ? 0.0 : 100.0 * static_cast<double>(k) / static_cast<double>(total);
    };
    for (std::size_t n : sorted) {
        ConfusionRow row;
        row.n = n;
        for (const auto& o : outcomes) {
            if (!o.evaluated) {
                continue;
            }
            const bool hit = o.forecast.hits(targets, n);
            if (cohort.members[o.member].positive) {
                ++(hit ? row.tp : row.fn);
            } else {
                ++(hit ? row.fp : row.tn);
            }
        }
        row.tp_pct = pct(row.tp, counts.positives);
        row.fn_pct = pct(row.fn, counts.positives);
        row.fp_pct = pct(row.fp, counts.negatives);
        row.tn_pct = pct(row.tn, counts.negatives);
        counts.rows.push_back(row);
    }
    return counts;
}

ZeroShotResult zero_shot_eval(const Predictor& predictor, const Corpus& corpus, const Vocabulary& vocab,
                              const CohortSpec& cohort, std::span<const std::size_t> ns, std::size_t budget,
                              std::size_t threads) {
    if (ns.empty() || *std::min_element(ns.begin(), ns.end()) == 0) {
        throw ConfigError("zero_shot_eval needs N values >= 1");
    }
    if (cohort.positives() == 0 || cohort.negatives() == 0) {
        throw DataError("zero_shot_eval: cohort side empty");
    }
    const std::size_t max_n = *std::max_element(ns.begin(), ns.end());
    const auto targets = cohort.target_set();
    ZeroShotResult result;
    result.outcomes.resize(cohort.members.size());
    std::vector<std::unique_ptr<Predictor>> workers;
    for (std::size_t w = 0; w < std::max<std::size_t>(1, threads); ++w) {
        workers.push_back(predictor.clone());
    }
    parallel_for(cohort.members.size(), threads, [&](std::size_t i, std::size_t w) {
        const CohortMember& m = cohort.members[i];
        MemberOutcome& o = result.outcomes[i];
        o.member = i;
        TokenSequence prefix;
        try {
            prefix = encode_patient(corpus.at(m.corpus_index), vocab, m.cutoff, workers[w]->context());
        } catch (const Error& e) {
            o.failure = e.what();
            return;
        }
        o.forecast = top_n_sets(*workers[w], vocab, prefix.token_ids, max_n, cohort.window_days, budget);
        o.evaluated = true;
        for (std::size_t n : ns) {
            o.predicted.push_back(o.forecast.hits(targets, n));
        }
    });
    for (const auto& o : result.outcomes) {
        result.failures += o.evaluated ? 0 : 1;
    }
    result.counts = score_forecasts(cohort, result.outcomes, targets, ns);
    return result;
}

void write_confusion_csv(std::ostream& out, const ConfusionCounts& counts) {
    auto num = [](double x) {
        char buf[64];
        auto r = std::to_chars(buf, buf + sizeof(buf), x);
        return std::string(buf, r.ptr);
    };
    out << "N,TP,FP,TN,FN,TP%,FP%,TN%,FN%,positives,negatives\n";
    for (const auto& r : counts.rows) {
        out << r.n << ',' << r.tp << ',' << r.fp << ',' << r.tn << ',' << r.fn << ',' << num(r.tp_pct) << ','
            << num(r.fp_pct) << ',' << num(r.tn_pct) << ',' << num(r.fn_pct) << ',' << counts.positives << ','
            << counts.negatives << '\n';
    }
}

}  // namespace ehrgpt
