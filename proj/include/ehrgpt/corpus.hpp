#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ehrgpt/date.hpp"

namespace ehrgpt {

/// Event domains, in canonical intra-visit order (d < m < p < l).
enum class Domain : std::uint8_t { diagnosis, medication, procedure, lab };
enum class VisitType : std::uint8_t { outpatient, inpatient, emergency, telehealth };
enum class DischargeType : std::uint8_t { home, skilled_nursing, expired, other };
enum class Sex : std::uint8_t { male, female, other };

inline constexpr std::array<Domain, 4> kDomains{Domain::diagnosis, Domain::medication, Domain::procedure,
                                                Domain::lab};
inline constexpr std::array<VisitType, 4> kVisitTypes{VisitType::outpatient, VisitType::inpatient,
                                                      VisitType::emergency, VisitType::telehealth};
inline constexpr std::array<DischargeType, 4> kDischargeTypes{DischargeType::home, DischargeType::skilled_nursing,
                                                              DischargeType::expired, DischargeType::other};
inline constexpr std::array<Sex, 3> kSexes{Sex::male, Sex::female, Sex::other};

std::string_view to_string(Domain d);
std::string_view to_string(VisitType v);
std::string_view to_string(DischargeType d);
std::string_view to_string(Sex s);
/// Inverse lookups; throw DataError on unknown names.
Domain parse_domain(std::string_view s);
VisitType parse_visit_type(std::string_view s);
DischargeType parse_discharge_type(std::string_view s);
Sex parse_sex(std::string_view s);

struct ClinicalEvent {
    Domain domain = Domain::diagnosis;
    std::string code;
    std::optional<double> value;  // present iff domain == lab
    Date timestamp;

    friend bool operator==(const ClinicalEvent&, const ClinicalEvent&) = default;
};

struct Visit {
    std::string visit_id;
    Date start_date;
    Date end_date;  // inclusive; equals start_date for same-day encounters
    VisitType visit_type = VisitType::outpatient;
    std::optional<DischargeType> discharge_type;  // present iff inpatient
    std::vector<ClinicalEvent> events;            // sorted by (timestamp, domain, code)

    friend bool operator==(const Visit&, const Visit&) = default;
};

struct PatientRecord {
    std::string patient_id;
    int birth_year = 1970;
    Sex sex = Sex::other;
    std::vector<Visit> visits;  // strictly increasing start_date

    friend bool operator==(const PatientRecord&, const PatientRecord&) = default;
};

using Corpus = std::vector<PatientRecord>;

/// Canonical event order inside a visit.
bool event_less(const ClinicalEvent& a, const ClinicalEvent& b);

/// Checks every record invariant; returns human-readable violations (empty when valid).
std::vector<std::string> validate_patient(const PatientRecord& patient);

// ---------------------------------------------------------------------------
// Generator configuration
// ---------------------------------------------------------------------------

struct PlantedRule {
    enum class Kind : std::uint8_t { next_token, trajectory };

    Kind kind = Kind::next_token;
    /// next_token: codes of `domain`, precursor = {X}, target = Y with X < Y.
    /// trajectory: diagnosis codes; every precursor must occur in one visit.
    Domain domain = Domain::medication;
    std::vector<std::string> precursor;
    std::string target;
    int horizon_days = 92;  // trajectory: target visit lies within this many days
    int min_gap_days = 1;   // trajectory: earliest target visit offset
    double probability = 1.0;
    /// When set, the target code is never sampled outside the rule.
    bool exclusive_target = true;
};

struct CodePoolConfig {
    std::size_t size = 1;
    double zipf_exponent = 1.0;
    double mean_per_visit = 1.0;
};

struct GapBucketConfig {
    double probability = 0.25;
    int min_days = 1;
    int max_days = 92;
};

struct GeneratorConfig {
    std::size_t n_patients = 1000;
    std::uint64_t seed = 1;
    /// visits = 1 + Geometric(visit_stop_probability), capped at max_visits.
    double visit_stop_probability = 0.15;
    std::size_t max_visits = 40;
    /// One entry per time bucket t0..t3.
    std::array<GapBucketConfig, 4> gap_mixture{{{0.40, 1, 92}, {0.25, 93, 183}, {0.20, 184, 365}, {0.15, 366, 1460}}};
    /// Indexed by Domain.
    std::array<CodePoolConfig, 4> pools{{{60, 1.0, 2.0}, {40, 1.0, 1.5}, {30, 1.0, 1.0}, {12, 0.8, 1.5}}};
    std::array<double, 4> visit_type_probabilities{0.60, 0.15, 0.15, 0.10};
    std::array<double, 4> discharge_probabilities{0.75, 0.12, 0.03, 0.10};
    int max_inpatient_days = 7;
    /// Each patient carries 1..3 chronic diagnoses re-recorded with this probability per visit.
    double chronic_repeat_probability = 0.5;
    /// Fraction of eligible diagnoses emitted in ICD-9 form (via the default mapping).
    double icd9_fraction = 0.1;
    int first_visit_year_min = 2005;
    int first_visit_year_max = 2015;
    std::vector<PlantedRule> planted_rules;
};

/// Throws ConfigError describing the first violated constraint.
void validate(const GeneratorConfig& config);

/// Deterministic pool members for a domain (rank order: rank 0 is most frequent).
std::vector<std::string> code_pool(Domain domain, std::size_t size);

/// Log-normal parameters (mu, sigma of the log) for a lab code from the pool.
std::pair<double, double> lab_distribution(std::string_view lab_code);

Corpus generate_corpus(const GeneratorConfig& config);
/// Patient `index` of the corpus, independent of every other patient.
PatientRecord generate_patient(const GeneratorConfig& config, std::size_t index);

// ---------------------------------------------------------------------------
// Serialization: JSON lines, first line is a header object.
// ---------------------------------------------------------------------------

inline constexpr int kCorpusFormatVersion = 1;

void write_corpus(std::ostream& out, const Corpus& corpus);
Corpus read_corpus(std::istream& in);
void save_corpus(const Corpus& corpus, const std::filesystem::path& path);
Corpus load_corpus(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Patient-level data split
// ---------------------------------------------------------------------------

enum class Split : std::uint8_t { train, validation, test };

struct SplitFractions {
    double train = 0.8;
    double validation = 0.1;
};

/// Stable assignment from a hash of (seed, patient_id).
Split split_of(std::string_view patient_id, std::uint64_t seed, SplitFractions fractions = {});
Corpus select_split(const Corpus& corpus, Split split, std::uint64_t seed, SplitFractions fractions = {});
std::string_view to_string(Split s);
Split parse_split(std::string_view s);

}  // namespace ehrgpt
