#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "ehrgpt/predictor.hpp"

namespace ehrgpt {

/// Mean of the rows of `hidden` ([n, d] row-major) whose mask entry is
/// nonzero; an empty mask keeps every row. Throws DataError when no row is kept.
std::vector<float> masked_mean(std::span<const float> hidden, std::span<const std::uint8_t> mask, std::size_t d);

/// Mean-pooled final-LayerNorm hidden states of a history. The backbone is
/// only read. Throws DataError on an empty history.
std::vector<float> patient_embedding(TransformerPredictor& backbone, std::span<const TokenId> history);

struct ProbeConfig {
    double learning_rate = 1e-4;
    double dropout = 0.1;  // on the pooled input features
    std::size_t epochs = 20;
    std::size_t batch_size = 32;
    std::uint64_t seed = 0;
    double validation_fraction = 0.2;
    std::size_t patience = 3;  // epochs without validation improvement before stopping

    void validate() const;
};

struct LinearHead {
    std::vector<double> weights;
    double bias = 0.0;

    double logit(std::span<const float> x) const;
    double probability(std::span<const float> x) const;
};

struct ProbeEpoch {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double validation_loss = 0.0;  // NaN without a validation split
};

struct ProbeResult {
    LinearHead head;
    std::vector<ProbeEpoch> log;
    std::size_t best_epoch = 0;
};

/// Logistic head trained with Adam on a seeded stratified split. Training
/// batches are drawn with replacement, each example weighted inversely to its
/// class frequency. Keeps the head of the epoch with the lowest validation
/// loss. Throws DataError for single-class input or ragged features.
ProbeResult train_probe(const std::vector<std::vector<float>>& features, const std::vector<int>& labels,
                        const ProbeConfig& config);

/// Out-of-fold probability for every example from k stratified folds.
std::vector<double> cross_fit_scores(const std::vector<std::vector<float>>& features, const std::vector<int>& labels,
                                     const ProbeConfig& config, std::size_t folds = 5);

/// Area under the ROC curve, ties counted half. Throws DataError when a class is missing.
double roc_auc(std::span<const double> scores, std::span<const int> labels);

/// True positives at the most permissive threshold that still admits at most
/// `fp_budget` false positives. Positive iff score > tau where tau is the
/// (budget+1)-th largest negative score (-inf when budget = |negatives|);
/// examples tied with tau are negative. Throws ConfigError when the budget
/// exceeds the number of negatives.
std::size_t matched_fp_tp(std::span<const double> scores, std::span<const int> labels, std::size_t fp_budget);

struct ProbeReportRow {
    std::string task;
    std::size_t n = 0;
    std::size_t tp_probe = 0;
    std::size_t tp_zero_shot = 0;
    std::size_t fp_budget = 0;
    std::size_t positives = 0;
    std::size_t negatives = 0;
    double auc = 0.0;
};

/// Columns: task,N,TP_f,TP_z,FP_budget,positives,negatives,AUC
void write_probe_report(std::ostream& out, std::span<const ProbeReportRow> rows);

}  // namespace ehrgpt
