#pragma once

#include <iosfwd>
#include <span>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "ehrgpt/predictor.hpp"
#include "ehrgpt/vocab.hpp"

namespace ehrgpt {

inline constexpr std::size_t kDefaultTokenBudget = 128;

enum class Termination : std::uint8_t { sep, token_budget, horizon };
std::string_view to_string(Termination t);

struct Candidate {
    TokenId token = 0;
    double probability = 0.0;
};

struct ForecastStep {
    TokenId greedy = 0;
    std::vector<Candidate> candidates;  // descending probability, ties by ascending id
};

struct ForecastSet {
    std::vector<ForecastStep> steps;
    Termination terminated_by = Termination::token_budget;
    int elapsed_bucket_days = 0;  // sum of generated time-token lower bounds
    std::size_t window_slides = 0;

    /// True when any target appears among the first `n` candidates of any step.
    bool hits(const std::unordered_set<TokenId>& targets, std::size_t n) const;
    /// Positions (step indices) where a target is the greedy token.
    std::vector<std::size_t> greedy_hits(const std::unordered_set<TokenId>& targets) const;
};

struct GeneratedVisit {
    std::vector<TokenId> tokens;  // SEP excluded
    Termination terminated_by = Termination::token_budget;
};

/// The `n` most probable ids, descending, ties by ascending id.
std::vector<Candidate> top_n(std::span<const double> probabilities, std::size_t n);

/// Makes room for one more token: drops the oldest whole visits after the
/// demographic tokens (and the time token that opened the new first visit)
/// until prefix.size() < context. Returns the number of tokens removed.
std::size_t slide_window(std::vector<TokenId>& prefix, const Vocabulary& vocab, std::size_t context);

/// Greedy decoding of one visit: argmax until [SEP] or `budget` tokens.
GeneratedVisit generate_visit(Predictor& predictor, const Vocabulary& vocab, std::span<const TokenId> prefix,
                              std::size_t budget = kDefaultTokenBudget);

/// Greedy path across visit boundaries, recording the top-N candidate set at
/// every step. Stops once the accumulated time-token lower bound exceeds
/// `horizon_days` (the step that emitted that time token is kept) or after
/// `budget` steps.
ForecastSet top_n_sets(Predictor& predictor, const Vocabulary& vocab, std::span<const TokenId> prefix, std::size_t n,
                       int horizon_days, std::size_t budget = kDefaultTokenBudget);

/// Trace CSV: step,greedy,rank,token,probability (one row per candidate).
void write_trace(std::ostream& out, const ForecastSet& forecast, const Vocabulary& vocab);

}  // namespace ehrgpt
