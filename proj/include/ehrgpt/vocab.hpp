#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "ehrgpt/corpus.hpp"
#include "ehrgpt/icd.hpp"

namespace ehrgpt {

using TokenId = std::int32_t;

enum class TimeBucket : std::uint8_t { t0, t1, t2, t3 };

/// Gap between consecutive visits: <=92 days t0, <=183 t1, <=365 t2, else t3.
/// Throws DataError for negative gaps.
TimeBucket time_bucket(std::int64_t delta_days);

/// Smallest gap, in days, that a bucket can stand for (0, 93, 184, 366).
int bucket_lower_bound_days(TimeBucket bucket);

/// Short token tag for a domain: dx, rx, px, lab.
std::string_view domain_tag(Domain d);

/// Number of age tokens: 5-year buckets 0-4 ... 95-99, then 100+.
inline constexpr int kAgeBuckets = 21;
int age_bucket(int age_years);

// ---------------------------------------------------------------------------
// Frequency filter and lab discretization
// ---------------------------------------------------------------------------

inline constexpr double kDefaultFrequencyThreshold = 0.001;

/// Domain-qualified key of an event before lab binning: "dx:E11", "rx:RX0001", "lab:LAB001".
std::string code_key(const ClinicalEvent& event, const IcdMapping& mapping);

/// Keys whose distinct-patient share is >= threshold. Throws DataError on an
/// empty corpus and ConfigError for a threshold outside [0, 1].
std::set<std::string> filter_infrequent(const Corpus& corpus, const IcdMapping& mapping,
                                        double threshold = kDefaultFrequencyThreshold);

/// Per lab code: 9 ascending decile edges, or no edges for a degenerate single-bin code.
using LabBins = std::map<std::string, std::vector<double>, std::less<>>;

struct LabEcdfFit {
    LabBins bins;
    std::vector<std::string> warnings;
};

/// Nearest-rank percentile (p in (0, 100]) of an ascending-sorted list.
double nearest_rank_percentile(const std::vector<double>& sorted, double p);

/// Codes with >= 10 distinct values get nearest-rank 10th..90th percentile
/// edges; fewer distinct values give a degenerate entry; empty lists are
/// dropped with a warning.
LabEcdfFit fit_lab_ecdf(const std::map<std::string, std::vector<double>, std::less<>>& training_values);

/// Decile index 0..9 (number of edges <= value), nullopt for an unknown code.
std::optional<int> bin_lab_value(std::string_view code, double value, const LabBins& bins);

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

enum class TokenKind : std::uint8_t { pad, cls, sep, eos, time, visit_type, discharge, sex, age, unknown, code };

struct TokenInfo {
    TokenKind kind = TokenKind::code;
    Domain domain = Domain::diagnosis;  // code and unknown tokens
    int index = 0;                      // bucket / enum index / lab decile
};

struct SpecialTokens {
    TokenId pad = 0;
    TokenId cls = 0;
    TokenId sep = 0;
    TokenId eos = 0;  // shared BOS/EOS
    std::array<TokenId, 4> time{};
    std::array<TokenId, 4> visit_type{};
    std::array<TokenId, 4> discharge{};
    std::array<TokenId, 3> sex{};
    std::array<TokenId, kAgeBuckets> age{};
    std::array<TokenId, 4> unknown{};  // per domain
};

struct VocabularyOptions {
    double frequency_threshold = kDefaultFrequencyThreshold;
    IcdMapping icd_mapping = default_icd_mapping();
};

class Vocabulary {
public:
    /// Mapping -> truncation -> frequency filter -> lab binning on a training corpus.
    static Vocabulary build(const Corpus& training_corpus, const VocabularyOptions& options = {});

    std::size_t size() const { return tokens_.size(); }
    const std::string& token(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)); }
    std::optional<TokenId> find(std::string_view token) const;
    /// Like find, throws DataError when absent.
    TokenId id(std::string_view token) const;
    const TokenInfo& info(TokenId id) const { return info_.at(static_cast<std::size_t>(id)); }
    const SpecialTokens& specials() const { return specials_; }
    std::size_t special_count() const { return special_count_; }

    bool is_code(TokenId id) const { return info(id).kind == TokenKind::code; }
    bool is_event(TokenId id) const;  // code or unknown token
    std::optional<TimeBucket> as_time(TokenId id) const;

    /// Token of a clinical event; per-domain UNK when the code is not in the vocabulary.
    TokenId event_token(const ClinicalEvent& event) const;
    /// Token string of the normalized diagnosis category, e.g. "dx:E11".
    static std::string diagnosis_token(std::string_view category);
    /// Diagnosis category of a dx code token ("dx:E11" -> "E11"), nullopt otherwise.
    std::optional<std::string> diagnosis_category(TokenId id) const;

    const LabBins& lab_bins() const { return lab_bins_; }
    double frequency_threshold() const { return threshold_; }
    const IcdMapping& icd_mapping() const { return mapping_; }
    const std::vector<std::string>& warnings() const { return warnings_; }

    void write(std::ostream& out) const;
    static Vocabulary read(std::istream& in);
    void save(const std::filesystem::path& path) const;
    static Vocabulary load(const std::filesystem::path& path);

    friend bool operator==(const Vocabulary& a, const Vocabulary& b) {
        return a.tokens_ == b.tokens_ && a.lab_bins_ == b.lab_bins_ && a.threshold_ == b.threshold_ &&
               a.mapping_ == b.mapping_;
    }

private:
    static Vocabulary assemble(std::vector<std::string> code_tokens, LabBins bins, double threshold,
                               IcdMapping mapping);

    std::vector<std::string> tokens_;
    std::vector<TokenInfo> info_;
    std::unordered_map<std::string, TokenId> index_;
    SpecialTokens specials_;
    std::size_t special_count_ = 0;
    LabBins lab_bins_;
    double threshold_ = kDefaultFrequencyThreshold;
    IcdMapping mapping_;
    std::vector<std::string> warnings_;
};

inline constexpr int kVocabFormatVersion = 1;

}  // namespace ehrgpt
