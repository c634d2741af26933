#include "ehrgpt/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "ehrgpt/errors.hpp"
#include "ehrgpt/io.hpp"
#include "ehrgpt/icd.hpp"
#include "ehrgpt/rng.hpp"

namespace ehrgpt {

using json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Enum names
// ---------------------------------------------------------------------------

namespace {

template <class E, std::size_t N>
E parse_enum(std::string_view s, const std::array<E, N>& values, std::string_view what) {
    for (E v : values) {
        if (to_string(v) == s) {
            return v;
        }
    }
    throw DataError("unknown " + std::string(what) + " '" + std::string(s) + "'");
}

}  // namespace

std::string_view to_string(Domain d) {
    switch (d) {
        case Domain::diagnosis: return "diagnosis";
        case Domain::medication: return "medication";
        case Domain::procedure: return "procedure";
        case Domain::lab: return "lab";
    }
    return "?";
}

std::string_view to_string(VisitType v) {
    switch (v) {
        case VisitType::outpatient: return "outpatient";
        case VisitType::inpatient: return "inpatient";
        case VisitType::emergency: return "emergency";
        case VisitType::telehealth: return "telehealth";
    }
    return "?";
}

std::string_view to_string(DischargeType d) {
    switch (d) {
        case DischargeType::home: return "home";
        case DischargeType::skilled_nursing: return "skilled_nursing";
        case DischargeType::expired: return "expired";
        case DischargeType::other: return "other";
    }
    return "?";
}

std::string_view to_string(Sex s) {
    switch (s) {
        case Sex::male: return "male";
        case Sex::female: return "female";
        case Sex::other: return "other";
    }
    return "?";
}

Domain parse_domain(std::string_view s) { return parse_enum(s, kDomains, "domain"); }
VisitType parse_visit_type(std::string_view s) { return parse_enum(s, kVisitTypes, "visit type"); }
DischargeType parse_discharge_type(std::string_view s) { return parse_enum(s, kDischargeTypes, "discharge type"); }
Sex parse_sex(std::string_view s) { return parse_enum(s, kSexes, "sex"); }

bool event_less(const ClinicalEvent& a, const ClinicalEvent& b) {
    if (a.timestamp != b.timestamp) {
        return a.timestamp < b.timestamp;
    }
    if (a.domain != b.domain) {
        return a.domain < b.domain;
    }
    return a.code < b.code;
}

std::vector<std::string> validate_patient(const PatientRecord& patient) {
    std::vector<std::string> problems;
    auto report = [&](const std::string& msg) { problems.push_back(patient.patient_id + ": " + msg); };
    if (patient.visits.empty()) {
        report("no visits");
        return problems;
    }
    if (patient.birth_year >= patient.visits.front().start_date.year()) {
        report("birth_year does not precede the first visit");
    }
    for (std::size_t v = 0; v < patient.visits.size(); ++v) {
        const Visit& visit = patient.visits[v];
        const std::string where = "visit " + visit.visit_id + ": ";
        if (v > 0 && visit.start_date <= patient.visits[v - 1].start_date) {
            report(where + "start_date not strictly after previous visit");
        }
        if (visit.end_date < visit.start_date) {
            report(where + "end_date before start_date");
        }
        if (visit.discharge_type.has_value() != (visit.visit_type == VisitType::inpatient)) {
            report(where + "discharge_type must be present iff inpatient");
        }
        if (visit.events.empty()) {
            report(where + "no events");
        }
        for (std::size_t e = 0; e < visit.events.size(); ++e) {
            const ClinicalEvent& ev = visit.events[e];
            if (ev.value.has_value() != (ev.domain == Domain::lab)) {
                report(where + "lab events need a value, other events none");
            }
            if (ev.timestamp < visit.start_date || ev.timestamp > visit.end_date) {
                report(where + "event timestamp outside visit span");
            }
            if (e > 0 && event_less(ev, visit.events[e - 1])) {
                report(where + "events out of canonical order");
            }
        }
    }
    return problems;
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

namespace {

void require(bool ok, const std::string& msg) {
    if (!ok) {
        throw ConfigError(msg);
    }
}

bool sums_to_one(std::span<const double> probs) {
    double total = 0.0;
    for (double p : probs) {
        if (!(p >= 0.0)) {
            return false;
        }
        total += p;
    }
    return std::abs(total - 1.0) < 1e-9;
}

}  // namespace

void validate(const GeneratorConfig& config) {
    require(config.visit_stop_probability > 0.0 && config.visit_stop_probability <= 1.0,
            "visit_stop_probability must lie in (0, 1]");
    require(config.max_visits >= 1, "max_visits must be >= 1");
    std::array<double, 4> gap_probs{};
    for (std::size_t b = 0; b < 4; ++b) {
        gap_probs[b] = config.gap_mixture[b].probability;
        require(config.gap_mixture[b].min_days >= 1 &&
                    config.gap_mixture[b].min_days <= config.gap_mixture[b].max_days,
                "gap bucket day ranges must satisfy 1 <= min <= max");
    }
    require(sums_to_one(gap_probs), "gap mixture probabilities must sum to 1");
    require(sums_to_one(config.visit_type_probabilities), "visit type probabilities must sum to 1");
    require(sums_to_one(config.discharge_probabilities), "discharge probabilities must sum to 1");
    for (const auto& pool : config.pools) {
        require(pool.size >= 1, "code pool sizes must be >= 1");
        require(pool.zipf_exponent >= 0.0, "zipf exponents must be >= 0");
        require(pool.mean_per_visit >= 0.0, "mean events per visit must be >= 0");
    }
    require(config.max_inpatient_days >= 1, "max_inpatient_days must be >= 1");
    require(config.chronic_repeat_probability >= 0.0 && config.chronic_repeat_probability <= 1.0,
            "chronic_repeat_probability must lie in [0, 1]");
    require(config.icd9_fraction >= 0.0 && config.icd9_fraction <= 1.0, "icd9_fraction must lie in [0, 1]");
    require(config.first_visit_year_min <= config.first_visit_year_max, "first visit year range is empty");

    for (const auto& rule : config.planted_rules) {
        require(rule.probability >= 0.0 && rule.probability <= 1.0, "rule probability must lie in [0, 1]");
        require(!rule.precursor.empty() && !rule.target.empty(), "rule needs precursor and target codes");
        const Domain domain = rule.kind == PlantedRule::Kind::trajectory ? Domain::diagnosis : rule.domain;
        const auto pool = code_pool(domain, config.pools[static_cast<std::size_t>(domain)].size);
        auto in_pool = [&](const std::string& c) { return std::find(pool.begin(), pool.end(), c) != pool.end(); };
        for (const auto& c : rule.precursor) {
            require(in_pool(c), "rule code '" + c + "' is not in the " + std::string(to_string(domain)) + " pool");
        }
        require(in_pool(rule.target),
                "rule code '" + rule.target + "' is not in the " + std::string(to_string(domain)) + " pool");
        if (rule.kind == PlantedRule::Kind::next_token) {
            require(rule.domain != Domain::lab, "next_token rules cannot use lab codes");
            require(rule.precursor.size() == 1, "next_token rules take exactly one precursor code");
            require(rule.precursor.front() < rule.target,
                    "next_token target must sort after its precursor within the domain");
        } else {
            require(rule.horizon_days > 0, "trajectory horizon must be > 0");
            require(rule.min_gap_days >= 1 && rule.min_gap_days <= rule.horizon_days,
                    "trajectory min_gap_days must lie in [1, horizon_days]");
            require(std::find(rule.precursor.begin(), rule.precursor.end(), rule.target) == rule.precursor.end(),
                    "trajectory target cannot be its own precursor");
        }
    }
}

// ---------------------------------------------------------------------------
// Code pools
// ---------------------------------------------------------------------------

namespace {

// Diagnosis categories in rank order; every evaluated ICD-10 chapter is represented.
constexpr std::array<std::string_view, 104> kDiagnosisCategories{
    "I10", "E11", "E78", "J44", "I25", "F32", "N18", "I50", "K21", "M54", "E66", "J45", "F41", "G47", "I48",
    "E03", "K86", "M17", "N39", "J06", "I63", "C25", "C22", "C71", "M06", "M32", "F33", "F34", "A41", "B34",
    "C34", "C50", "C61", "D50", "D64", "D69", "E05", "E55", "E87", "F10", "F17", "F20", "F31", "G20", "G30",
    "G40", "G43", "H25", "H35", "H40", "H52", "H61", "H66", "H91", "I20", "I21", "I35", "I42", "I70", "I80",
    "J18", "J20", "J30", "J96", "K29", "K57", "K70", "K74", "K80", "K92", "L03", "L20", "L40", "L89", "M10",
    "M19", "M25", "M47", "M79", "M81", "N17", "N20", "N40", "N81", "A09", "B18", "B20", "C18", "C43", "C67",
    "D12", "D48", "D86", "E10", "E28", "E83", "F03", "F43", "G35", "H10", "L70", "K35", "N28", "J32",
};

std::string zero_pad(std::size_t value, int width) {
    std::ostringstream os;
    os << std::setw(width) << std::setfill('0') << value;
    return os.str();
}

}  // namespace

std::vector<std::string> code_pool(Domain domain, std::size_t size) {
    std::vector<std::string> pool;
    pool.reserve(size);
    for (std::size_t i = 0; i < size; ++i) {
        switch (domain) {
            case Domain::diagnosis: {
                const std::size_t n = kDiagnosisCategories.size();
                pool.push_back(std::string(kDiagnosisCategories[i % n]) + "." + std::to_string(i / n));
                break;
            }
            case Domain::medication: pool.push_back("RX" + zero_pad(i + 1, 4)); break;
            case Domain::procedure: pool.push_back(std::to_string(10000 + (i * 7919) % 90000)); break;
            case Domain::lab: pool.push_back("LAB" + zero_pad(i + 1, 3)); break;
        }
    }
    return pool;
}

std::pair<double, double> lab_distribution(std::string_view lab_code) {
    const std::uint64_t h = fnv1a64(lab_code);
    const double center = 5.0 + static_cast<double>(h % 150);
    const double sigma = 0.25 + 0.05 * static_cast<double>((h >> 16) % 6);
    return {std::log(center), sigma};
}

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

namespace {

struct Pool {
    std::vector<std::string> codes;
    std::vector<double> weights;  // zipf, zero for reserved codes
    std::vector<double> cumulative;
    double mean_per_visit = 0.0;

    std::size_t sample(Rng& rng) const {
        const double r = rng.uniform() * cumulative.back();
        const auto it = std::upper_bound(cumulative.begin(), cumulative.end(), r);
        return std::min<std::size_t>(static_cast<std::size_t>(it - cumulative.begin()), codes.size() - 1);
    }
};

struct GeneratorTables {
    std::array<Pool, 4> pools;
    std::map<std::string, std::string, std::less<>> icd9_for_category;  // category -> ICD-9 source
    std::set<std::string, std::less<>> planted_codes;
};

GeneratorTables build_tables(const GeneratorConfig& config) {
    GeneratorTables tables;
    std::set<std::pair<Domain, std::string>> reserved;
    for (const auto& rule : config.planted_rules) {
        const Domain d = rule.kind == PlantedRule::Kind::trajectory ? Domain::diagnosis : rule.domain;
        if (rule.exclusive_target) {
            reserved.emplace(d, rule.target);
        }
        tables.planted_codes.insert(rule.target);
        for (const auto& c : rule.precursor) {
            tables.planted_codes.insert(c);
        }
    }
    for (Domain d : kDomains) {
        const auto& pc = config.pools[static_cast<std::size_t>(d)];
        Pool& pool = tables.pools[static_cast<std::size_t>(d)];
        pool.codes = code_pool(d, pc.size);
        pool.mean_per_visit = pc.mean_per_visit;
        double acc = 0.0;
        for (std::size_t i = 0; i < pool.codes.size(); ++i) {
            double w = 1.0 / std::pow(static_cast<double>(i + 1), pc.zipf_exponent);
            if (reserved.contains({d, pool.codes[i]})) {
                w = 0.0;
            }
            pool.weights.push_back(w);
            acc += w;
            pool.cumulative.push_back(acc);
        }
        if (acc <= 0.0) {
            throw ConfigError("every code of the " + std::string(to_string(d)) + " pool is reserved by a rule");
        }
    }
    for (const auto& [icd9, icd10] : default_icd_mapping()) {
        tables.icd9_for_category.emplace(truncate_icd(icd10), icd9);
    }
    return tables;
}

std::size_t count_draw(Rng& rng, double mean) {
    if (mean <= 0.0) {
        return 0;
    }
    return static_cast<std::size_t>(rng.geometric(1.0 / (1.0 + mean)));
}

double round2(double v) { return std::round(v * 100.0) / 100.0; }

void sort_and_dedupe(std::vector<ClinicalEvent>& events) {
    std::stable_sort(events.begin(), events.end(), event_less);
    events.erase(std::unique(events.begin(), events.end(),
                             [](const ClinicalEvent& a, const ClinicalEvent& b) {
                                 return a.timestamp == b.timestamp && a.domain == b.domain && a.code == b.code;
                             }),
                 events.end());
}

bool has_code(const std::vector<ClinicalEvent>& events, Domain d, std::string_view code) {
    return std::any_of(events.begin(), events.end(),
                       [&](const ClinicalEvent& e) { return e.domain == d && e.code == code; });
}

// Enforces X -> Y adjacency under the canonical order: Y is placed at X's
// timestamp and anything of the same domain sorting strictly between is removed.
void apply_next_token_rule(const PlantedRule& rule, std::vector<ClinicalEvent>& events, Rng& rng) {
    const std::string& x = rule.precursor.front();
    const std::string& y = rule.target;
    std::vector<Date> fire_at;
    for (const auto& e : events) {
        if (e.domain == rule.domain && e.code == x && rng.bernoulli(rule.probability)) {
            fire_at.push_back(e.timestamp);
        }
    }
    for (Date ts : fire_at) {
        std::erase_if(events, [&](const ClinicalEvent& e) {
            return e.timestamp == ts && e.domain == rule.domain && e.code > x && e.code <= y;
        });
        events.push_back(ClinicalEvent{rule.domain, y, std::nullopt, ts});
    }
    if (!fire_at.empty()) {
        std::stable_sort(events.begin(), events.end(), event_less);
    }
}

}  // namespace

namespace {

PatientRecord generate_with(const GeneratorConfig& config, const GeneratorTables& tables, std::size_t index) {
    Rng rng(config.seed, "patient", index);
    PatientRecord patient;
    patient.patient_id = "P" + zero_pad(index + 1, 7);

    const std::array<double, 3> sex_probs{0.49, 0.49, 0.02};
    patient.sex = kSexes[rng.categorical(sex_probs)];

    const int first_year =
        static_cast<int>(rng.uniform_int(config.first_visit_year_min, config.first_visit_year_max));
    Date date = Date::from_ymd(first_year, 1, 1).plus_days(static_cast<std::int32_t>(rng.uniform_int(0, 364)));
    if (date.year() != first_year) {
        date = Date::from_ymd(first_year, 12, 31);
    }
    patient.birth_year = first_year - static_cast<int>(rng.uniform_int(1, 90));

    const Pool& dx_pool = tables.pools[0];
    std::vector<std::size_t> chronic;
    const auto n_chronic = rng.uniform_int(1, 3);
    for (std::int64_t c = 0; c < n_chronic; ++c) {
        chronic.push_back(dx_pool.sample(rng));
    }

    const std::size_t planned_visits = std::min<std::size_t>(
        config.max_visits, 1 + static_cast<std::size_t>(rng.geometric(config.visit_stop_probability)));

    struct Pending {
        std::string target;
        int min_gap;
        int max_gap;
    };
    std::vector<Pending> pending;

    for (std::size_t v = 0;; ++v) {
        Visit visit;
        visit.visit_id = patient.patient_id + "-V" + zero_pad(v + 1, 3);
        visit.start_date = date;
        visit.visit_type = kVisitTypes[rng.categorical(config.visit_type_probabilities)];
        int stay = 0;
        if (visit.visit_type == VisitType::inpatient) {
            stay = static_cast<int>(rng.uniform_int(1, config.max_inpatient_days));
        }
        visit.end_date = date.plus_days(stay);

        auto stamp = [&] { return date.plus_days(static_cast<std::int32_t>(rng.uniform_int(0, stay))); };
        auto& events = visit.events;
        for (Domain d : kDomains) {
            const Pool& pool = tables.pools[static_cast<std::size_t>(d)];
            const std::size_t n = count_draw(rng, pool.mean_per_visit);
            for (std::size_t k = 0; k < n; ++k) {
                const std::string& code = pool.codes[pool.sample(rng)];
                ClinicalEvent ev{d, code, std::nullopt, stamp()};
                if (d == Domain::lab) {
                    const auto [mu, sigma] = lab_distribution(code);
                    ev.value = round2(std::exp(rng.normal(mu, sigma)));
                }
                events.push_back(std::move(ev));
            }
        }
        for (std::size_t c : chronic) {
            if (rng.bernoulli(config.chronic_repeat_probability)) {
                events.push_back(ClinicalEvent{Domain::diagnosis, dx_pool.codes[c], std::nullopt, stamp()});
            }
        }
        for (const auto& p : pending) {
            events.push_back(ClinicalEvent{Domain::diagnosis, p.target, std::nullopt, date});
        }
        pending.clear();
        if (events.empty()) {
            events.push_back(ClinicalEvent{Domain::diagnosis, dx_pool.codes[dx_pool.sample(rng)], std::nullopt,
                                           stamp()});
        }
        sort_and_dedupe(events);

        for (const auto& rule : config.planted_rules) {
            if (rule.kind == PlantedRule::Kind::next_token) {
                apply_next_token_rule(rule, events, rng);
            }
        }
        for (const auto& rule : config.planted_rules) {
            if (rule.kind != PlantedRule::Kind::trajectory) {
                continue;
            }
            const bool triggered = std::all_of(rule.precursor.begin(), rule.precursor.end(), [&](const auto& c) {
                return has_code(events, Domain::diagnosis, c);
            });
            if (triggered && rng.bernoulli(rule.probability)) {
                pending.push_back(Pending{rule.target, rule.min_gap_days, rule.horizon_days});
            }
        }

        // ICD-9 rendering happens after rule evaluation; planted codes keep their ICD-10 form.
        if (config.icd9_fraction > 0.0) {
            for (auto& e : events) {
                if (e.domain != Domain::diagnosis || tables.planted_codes.contains(e.code)) {
                    continue;
                }
                const auto it = tables.icd9_for_category.find(truncate_icd(e.code));
                if (it != tables.icd9_for_category.end() && rng.bernoulli(config.icd9_fraction)) {
                    e.code = it->second;
                }
            }
            sort_and_dedupe(events);
        }

        if (visit.visit_type == VisitType::inpatient) {
            auto discharge = kDischargeTypes[rng.categorical(config.discharge_probabilities)];
            if (discharge == DischargeType::expired && !pending.empty()) {
                discharge = DischargeType::home;
            }
            visit.discharge_type = discharge;
        }
        const bool expired = visit.discharge_type == DischargeType::expired;
        patient.visits.push_back(std::move(visit));

        if (expired || (v + 1 >= planned_visits && pending.empty())) {
            break;
        }

        int gap;
        if (!pending.empty()) {
            int lo = pending.front().min_gap;
            int hi = pending.front().max_gap;
            for (const auto& p : pending) {
                lo = std::max(lo, p.min_gap);
                hi = std::min(hi, p.max_gap);
            }
            if (lo > hi) {
                lo = hi;
            }
            gap = static_cast<int>(rng.uniform_int(lo, hi));
        } else {
            std::array<double, 4> probs{};
            for (std::size_t b = 0; b < 4; ++b) {
                probs[b] = config.gap_mixture[b].probability;
            }
            const auto& bucket = config.gap_mixture[rng.categorical(probs)];
            gap = static_cast<int>(rng.uniform_int(bucket.min_days, bucket.max_days));
        }
        gap = std::max(gap, stay + 1);
        date = date.plus_days(gap);
    }
    return patient;
}

}  // namespace

PatientRecord generate_patient(const GeneratorConfig& config, std::size_t index) {
    validate(config);
    return generate_with(config, build_tables(config), index);
}

Corpus generate_corpus(const GeneratorConfig& config) {
    validate(config);
    const GeneratorTables tables = build_tables(config);
    Corpus corpus;
    corpus.reserve(config.n_patients);
    for (std::size_t i = 0; i < config.n_patients; ++i) {
        corpus.push_back(generate_with(config, tables, i));
    }
    return corpus;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

namespace {

json to_json(const PatientRecord& p) {
    json visits = json::array();
    for (const auto& v : p.visits) {
        json events = json::array();
        for (const auto& e : v.events) {
            json ev{{"domain", to_string(e.domain)}, {"code", e.code}, {"time", e.timestamp.iso()}};
            if (e.value) {
                ev["value"] = *e.value;
            }
            events.push_back(std::move(ev));
        }
        json jv{{"visit_id", v.visit_id},
                {"start", v.start_date.iso()},
                {"end", v.end_date.iso()},
                {"type", to_string(v.visit_type)}};
        if (v.discharge_type) {
            jv["discharge"] = to_string(*v.discharge_type);
        }
        jv["events"] = std::move(events);
        visits.push_back(std::move(jv));
    }
    return json{{"patient_id", p.patient_id},
                {"birth_year", p.birth_year},
                {"sex", to_string(p.sex)},
                {"visits", std::move(visits)}};
}

PatientRecord from_json(const json& j) {
    PatientRecord p;
    p.patient_id = j.at("patient_id").get<std::string>();
    p.birth_year = j.at("birth_year").get<int>();
    p.sex = parse_sex(j.at("sex").get<std::string>());
    for (const auto& jv : j.at("visits")) {
        Visit v;
        v.visit_id = jv.at("visit_id").get<std::string>();
        v.start_date = Date::parse(jv.at("start").get<std::string>());
        v.end_date = Date::parse(jv.at("end").get<std::string>());
        v.visit_type = parse_visit_type(jv.at("type").get<std::string>());
        if (jv.contains("discharge")) {
            v.discharge_type = parse_discharge_type(jv.at("discharge").get<std::string>());
        }
        for (const auto& je : jv.at("events")) {
            ClinicalEvent e;
            e.domain = parse_domain(je.at("domain").get<std::string>());
            e.code = je.at("code").get<std::string>();
            e.timestamp = Date::parse(je.at("time").get<std::string>());
            if (je.contains("value")) {
                e.value = je.at("value").get<double>();
            }
            v.events.push_back(std::move(e));
        }
        p.visits.push_back(std::move(v));
    }
    return p;
}

}  // namespace

void write_corpus(std::ostream& out, const Corpus& corpus) {
    const json header{{"format", "ehrgpt-corpus"}, {"version", kCorpusFormatVersion}, {"n_patients", corpus.size()}};
    out << header.dump() << '\n';
    for (const auto& p : corpus) {
        out << to_json(p).dump() << '\n';
    }
}

Corpus read_corpus(std::istream& in) {
    std::string line;
    std::size_t line_no = 0;
    if (!std::getline(in, line)) {
        throw ParseError("missing corpus header", 1);
    }
    ++line_no;
    std::size_t expected = 0;
    try {
        const json header = json::parse(line);
        if (header.at("format") != "ehrgpt-corpus") {
            throw ParseError("not an ehrgpt corpus file", line_no);
        }
        if (header.at("version").get<int>() != kCorpusFormatVersion) {
            throw ParseError("unsupported corpus version " + header.at("version").dump(), line_no);
        }
        expected = header.at("n_patients").get<std::size_t>();
    } catch (const json::exception& e) {
        throw ParseError(std::string("bad corpus header: ") + e.what(), line_no);
    }
    Corpus corpus;
    corpus.reserve(expected);
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        try {
            corpus.push_back(from_json(json::parse(line)));
        } catch (const json::exception& e) {
            throw ParseError(std::string("malformed patient record: ") + e.what(), line_no);
        } catch (const DataError& e) {
            throw ParseError(std::string("invalid patient record: ") + e.what(), line_no);
        }
        if (const auto problems = validate_patient(corpus.back()); !problems.empty()) {
            throw ParseError("invalid patient record: " + problems.front(), line_no);
        }
    }
    if (corpus.size() != expected) {
        throw ParseError("header announces " + std::to_string(expected) + " patients, found " +
                             std::to_string(corpus.size()),
                         line_no);
    }
    return corpus;
}

void save_corpus(const Corpus& corpus, const std::filesystem::path& path) {
    atomic_write(path, [&](std::ostream& out) { write_corpus(out, corpus); }, true);
}

Corpus load_corpus(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open corpus file " + path.string());
    }
    return read_corpus(in);
}

// ---------------------------------------------------------------------------
// Split
// ---------------------------------------------------------------------------

Split split_of(std::string_view patient_id, std::uint64_t seed, SplitFractions fractions) {
    const double u =
        static_cast<double>(derive_seed(seed, "split", fnv1a64(patient_id)) >> 11) * 0x1.0p-53;
    if (u < fractions.train) {
        return Split::train;
    }
    if (u < fractions.train + fractions.validation) {
        return Split::validation;
    }
    return Split::test;
}

Corpus select_split(const Corpus& corpus, Split split, std::uint64_t seed, SplitFractions fractions) {
    Corpus out;
    for (const auto& p : corpus) {
        if (split_of(p.patient_id, seed, fractions) == split) {
            out.push_back(p);
        }
    }
    return out;
}

std::string_view to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::validation: return "validation";
        case Split::test: return "test";
    }
    return "?";
}

Split parse_split(std::string_view s) {
    constexpr std::array<Split, 3> all{Split::train, Split::validation, Split::test};
    return parse_enum(s, all, "split");
}

}  // namespace ehrgpt
