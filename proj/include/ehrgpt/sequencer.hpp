#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ehrgpt/corpus.hpp"
#include "ehrgpt/vocab.hpp"

namespace ehrgpt {

/// Model context: [CLS] plus 512 timeline tokens.
inline constexpr std::size_t kDefaultContext = 513;
/// [CLS][AGE][SEX] lead every sequence and survive truncation.
inline constexpr std::size_t kDemographicTokens = 3;

struct TokenSequence {
    std::string patient_id;
    std::vector<TokenId> token_ids;
    std::vector<Date> token_dates;         // start date of the token's visit
    std::vector<std::int32_t> visit_index;  // index into PatientRecord::visits

    std::size_t size() const { return token_ids.size(); }
    friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

/// Timeline layout:
///   [CLS][AGE][SEX] then per visit [TT]? [VT] events [DT]? [SEP]
/// where TT is absent on the first emitted visit and DT present for inpatient
/// stays. Visits after `as_of` are ignored. Oldest whole visits are dropped
/// until the sequence fits `context`. Throws DataError when no visit is on or
/// before `as_of`.
TokenSequence encode_patient(const PatientRecord& patient, const Vocabulary& vocab,
                             std::optional<Date> as_of = std::nullopt, std::size_t context = kDefaultContext);

struct DecodedVisit {
    std::optional<TimeBucket> time;
    std::optional<VisitType> visit_type;  // absent only for an open visit cut before its VT
    std::optional<DischargeType> discharge;
    std::vector<TokenId> events;
    std::size_t first_position = 0;
    bool open = false;  // stream ended before this visit's [SEP]
};

struct DecodedTimeline {
    int age_bucket = 0;
    Sex sex = Sex::other;
    std::vector<DecodedVisit> visits;
};

/// Parses a full sequence back into visits. Throws GrammarError naming the
/// offending position.
DecodedTimeline decode_tokens(std::span<const TokenId> tokens, const Vocabulary& vocab);

/// Every grammar rule plus the parallel-list, length, ordering, discharge and
/// time-token-versus-dates invariants. Empty result means valid.
std::vector<std::string> validate_sequence(const TokenSequence& sequence, const Vocabulary& vocab,
                                           std::size_t context = kDefaultContext);

/// Visits with start_date <= cutoff. Throws DataError when none qualify.
PatientRecord truncate_history_at(const PatientRecord& patient, Date cutoff);

// ---------------------------------------------------------------------------
// Encoded dataset file: header line, then one tab-separated record per patient:
//   patient_id <TAB> ids <TAB> dates <TAB> visit indices   (space-separated lists)
// ---------------------------------------------------------------------------

inline constexpr int kEncodedFormatVersion = 1;

void write_encoded(std::ostream& out, std::span<const TokenSequence> sequences);
std::vector<TokenSequence> read_encoded(std::istream& in);
void save_encoded(std::span<const TokenSequence> sequences, const std::filesystem::path& path);
std::vector<TokenSequence> load_encoded(const std::filesystem::path& path);

}  // namespace ehrgpt
