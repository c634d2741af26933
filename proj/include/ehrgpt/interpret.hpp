#pragma once

#include <iosfwd>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "ehrgpt/eval.hpp"
#include "ehrgpt/predictor.hpp"

namespace ehrgpt {

/// Indices of the k largest weights, descending, ties by ascending index.
std::vector<std::size_t> select_top_k(std::span<const double> weights, std::size_t k);

struct AttributionOptions {
    std::optional<std::size_t> layer;  // default: final layer
    std::size_t per_step = 15;
    std::size_t report = 10;
    std::size_t budget = kDefaultTokenBudget;
};

struct AttributedToken {
    TokenId token = 0;
    std::size_t count = 0;
    double frequency = 0.0;  // count / max count
};

struct AttributionReport {
    std::string target;
    std::size_t layer = 0;
    std::size_t patients = 0;        // members examined
    std::size_t patients_fired = 0;  // members with at least one firing step
    std::size_t firing_steps = 0;
    std::map<TokenId, std::size_t> counts;
    std::vector<AttributedToken> top;  // most frequent first, ties by ascending id
    bool empty() const { return firing_steps == 0; }
};

/// Walks each member's greedy path within the cohort horizon. At every step
/// whose top-1 token is a target, takes the chosen layer's attention row at
/// the emitting position, averaged over heads and restricted to history
/// positions, and counts the tokens at its `per_step` highest positions.
AttributionReport attribute(TransformerPredictor& predictor, const Corpus& corpus, const Vocabulary& vocab,
                            const CohortSpec& cohort, const AttributionOptions& options = {});

/// Reduces raw counts to the `report` most frequent tokens normalized so the
/// maximum is exactly 1.
std::vector<AttributedToken> normalize_counts(const std::map<TokenId, std::size_t>& counts, std::size_t report);

/// Columns: token,count,frequency
void write_attribution_csv(std::ostream& out, const AttributionReport& report, const Vocabulary& vocab);

struct EmbeddingRow {
    std::string key;    // token string or patient id
    std::string label;  // ICD chapter id or zero-shot outcome
    std::vector<float> values;
};

struct EmbeddingTable {
    std::vector<EmbeddingRow> rows;
    std::vector<std::string> warnings;
    std::size_t excluded = 0;
};

/// Input-embedding rows of code tokens. `filter` holds token strings
/// ("dx:E11") or bare diagnosis categories ("E11"); empty selects every
/// diagnosis code. Unknown entries are skipped with a warning. The label is
/// the ICD-10 chapter for diagnosis categories, empty otherwise.
EmbeddingTable export_code_embeddings(const Transformer<float>& model, const Vocabulary& vocab,
                                      const std::set<std::string>& filter = {});

/// Mean-pooled embeddings of cohort histories labelled TP/FP/TN/FN by the
/// zero-shot outcome at top-`n`. With `predicted_only`, rows are restricted to
/// TP and FP. Members without an outcome are excluded and counted.
EmbeddingTable export_patient_embeddings(TransformerPredictor& predictor, const Corpus& corpus,
                                         const Vocabulary& vocab, const CohortSpec& cohort,
                                         const ZeroShotResult& zero_shot, std::size_t n, bool predicted_only = true);

/// Header: <key_name>,<label_name>,e0..e{d-1}; floats in shortest round-trip form.
void write_embedding_csv(std::ostream& out, const EmbeddingTable& table, std::string_view key_name,
                         std::string_view label_name);

}  // namespace ehrgpt
