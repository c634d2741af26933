#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ehrgpt/corpus.hpp"
#include "ehrgpt/predictor.hpp"
#include "ehrgpt/vocab.hpp"

namespace ehrgpt::test {

inline Date day(int n) { return Date::from_ymd(2010, 1, 1).plus_days(n); }

inline ClinicalEvent dx(std::string code, Date at) { return {Domain::diagnosis, std::move(code), std::nullopt, at}; }
inline ClinicalEvent rx(std::string code, Date at) { return {Domain::medication, std::move(code), std::nullopt, at}; }
inline ClinicalEvent px(std::string code, Date at) { return {Domain::procedure, std::move(code), std::nullopt, at}; }
inline ClinicalEvent lab(std::string code, double value, Date at) {
    return {Domain::lab, std::move(code), value, at};
}

inline Visit visit(std::string id, Date at, std::vector<ClinicalEvent> events,
                   VisitType type = VisitType::outpatient, std::optional<DischargeType> discharge = std::nullopt) {
    Visit v;
    v.visit_id = std::move(id);
    v.start_date = at;
    v.end_date = at;
    v.visit_type = type;
    if (type == VisitType::inpatient && !discharge) {
        discharge = DischargeType::home;
    }
    v.discharge_type = discharge;
    for (auto& e : events) {
        e.timestamp = at;
    }
    v.events = std::move(events);
    std::stable_sort(v.events.begin(), v.events.end(), event_less);
    return v;
}

/// Patient with one visit per (day offset, dx codes) pair.
inline PatientRecord dx_patient(std::string id, const std::vector<std::pair<int, std::vector<std::string>>>& visits,
                                int birth_year = 1960, Sex sex = Sex::female) {
    PatientRecord p;
    p.patient_id = std::move(id);
    p.birth_year = birth_year;
    p.sex = sex;
    std::size_t k = 0;
    for (const auto& [offset, codes] : visits) {
        std::vector<ClinicalEvent> events;
        for (const auto& c : codes) {
            events.push_back(dx(c, day(offset)));
        }
        p.visits.push_back(visit(p.patient_id + "-" + std::to_string(++k), day(offset), std::move(events)));
    }
    return p;
}

/// Vocabulary over a hand-built corpus with no frequency filtering.
inline Vocabulary vocab_of(const Corpus& corpus) {
    VocabularyOptions opts;
    opts.frequency_threshold = 0.0;
    return Vocabulary::build(corpus, opts);
}

/// Predictor driven by a callback over the prefix.
class ScriptedPredictor : public Predictor {
public:
    using Script = std::function<std::vector<double>(std::span<const TokenId>)>;

    ScriptedPredictor(std::size_t vocab, Script script, std::size_t context = 513)
        : vocab_(vocab), context_(context), script_(std::move(script)) {}

    std::size_t vocab_size() const override { return vocab_; }
    std::size_t context() const override { return context_; }
    std::vector<double> predict_next(std::span<const TokenId> prefix) override {
        check_prefix(prefix, vocab_, context_);
        ++calls;
        return script_(prefix);
    }
    std::unique_ptr<Predictor> clone() const override { return std::make_unique<ScriptedPredictor>(*this); }

    std::size_t calls = 0;

private:
    std::size_t vocab_;
    std::size_t context_;
    Script script_;
};

/// Distribution with `mass` spread over `ranked` (first gets the most) and
/// the rest shared evenly by every other id.
inline std::vector<double> ranked_distribution(std::size_t vocab, const std::vector<TokenId>& ranked,
                                               double mass = 0.9) {
    std::vector<double> p(vocab, 0.0);
    const std::size_t others = vocab - ranked.size();
    const double rest = others == 0 ? 0.0 : (1.0 - mass) / static_cast<double>(others);
    for (auto& x : p) {
        x = rest;
    }
    double weight_total = 0.0;
    for (std::size_t i = 0; i < ranked.size(); ++i) {
        weight_total += static_cast<double>(ranked.size() - i);
    }
    const double scale = others == 0 ? 1.0 : mass;
    for (std::size_t i = 0; i < ranked.size(); ++i) {
        p[static_cast<std::size_t>(ranked[i])] = scale * static_cast<double>(ranked.size() - i) / weight_total;
    }
    return p;
}

}  // namespace ehrgpt::test
