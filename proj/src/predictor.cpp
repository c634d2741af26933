#include "ehrgpt/predictor.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "ehrgpt/errors.hpp"

namespace ehrgpt {

void check_prefix(std::span<const TokenId> prefix, std::size_t vocab_size, std::size_t context) {
    if (prefix.empty()) {
        throw DataError("predict_next: empty prefix (minimum is [CLS])");
    }
    if (prefix.size() >= context) {
        throw DataError("predict_next: prefix of " + std::to_string(prefix.size()) +
                        " tokens leaves no room in a context of " + std::to_string(context));
    }
    for (TokenId id : prefix) {
        if (id < 0 || static_cast<std::size_t>(id) >= vocab_size) {
            throw DataError("predict_next: token id " + std::to_string(id) + " outside the vocabulary");
        }
    }
}

std::vector<double> softmax(std::span<const float> logits) {
    std::vector<double> p(logits.size());
    if (logits.empty()) {
        return p;
    }
    const double maxv = *std::max_element(logits.begin(), logits.end());
    double total = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        p[i] = std::exp(static_cast<double>(logits[i]) - maxv);
        total += p[i];
    }
    for (double& x : p) {
        x /= total;
    }
    return p;
}

TransformerPredictor::TransformerPredictor(std::shared_ptr<const Transformer<float>> model)
    : model_(std::move(model)) {
    if (!model_) {
        throw Error("TransformerPredictor needs a model");
    }
}

void TransformerPredictor::run(std::span<const TokenId> tokens) {
    std::size_t common = 0;
    const std::size_t cached = cache_.size();
    while (common < cached && common < tokens.size() && cache_.tokens[common] == tokens[common]) {
        ++common;
    }
    if (common == tokens.size() && common == cached) {
        return;
    }
    // Recompute at least the last position so logits rows are fresh.
    if (common == tokens.size()) {
        --common;
    }
    model_->truncate(cache_, common);
    model_->forward(cache_, tokens, common);
}

std::vector<double> TransformerPredictor::predict_next(std::span<const TokenId> prefix) {
    check_prefix(prefix, vocab_size(), context());
    run(prefix);
    const std::size_t V = vocab_size();
    return softmax(std::span<const float>(cache_.logits).subspan((prefix.size() - 1) * V, V));
}

std::unique_ptr<Predictor> TransformerPredictor::clone() const {
    return std::make_unique<TransformerPredictor>(model_);
}

std::vector<std::vector<float>> TransformerPredictor::embed(std::span<const TokenId> tokens) {
    if (tokens.empty()) {
        throw DataError("embed: empty token list");
    }
    run(tokens);
    const std::size_t d = model_->config().d_model;
    std::vector<std::vector<float>> rows(tokens.size());
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        rows[t].assign(cache_.lnf_out.begin() + static_cast<std::ptrdiff_t>(t * d),
                       cache_.lnf_out.begin() + static_cast<std::ptrdiff_t>((t + 1) * d));
    }
    return rows;
}

std::vector<double> TransformerPredictor::mean_attention_row(std::size_t layer, std::size_t position) const {
    const std::size_t heads = model_->config().n_heads;
    if (layer >= model_->config().n_layers || position >= cache_.size()) {
        throw Error("mean_attention_row: layer or position out of range");
    }
    std::vector<double> row(position + 1, 0.0);
    for (std::size_t h = 0; h < heads; ++h) {
        const auto r = model_->attention_row(cache_, layer, h, position);
        for (std::size_t j = 0; j <= position; ++j) {
            row[j] += r[j];
        }
    }
    for (double& x : row) {
        x /= static_cast<double>(heads);
    }
    return row;
}

BigramPredictor::BigramPredictor(std::span<const TokenSequence> training, std::size_t vocab_size, std::size_t context)
    : vocab_size_(vocab_size), context_(context) {
    if (vocab_size == 0) {
        throw ConfigError("bigram predictor needs a nonempty vocabulary");
    }
    for (const auto& seq : training) {
        for (std::size_t i = 0; i + 1 < seq.token_ids.size(); ++i) {
            ++pairs_[seq.token_ids[i]][seq.token_ids[i + 1]];
            ++totals_[seq.token_ids[i]];
        }
    }
}

std::size_t BigramPredictor::count(TokenId a, TokenId b) const {
    auto it = pairs_.find(a);
    if (it == pairs_.end()) {
        return 0;
    }
    auto jt = it->second.find(b);
    return jt == it->second.end() ? 0 : jt->second;
}

std::size_t BigramPredictor::count(TokenId a) const {
    auto it = totals_.find(a);
    return it == totals_.end() ? 0 : it->second;
}

std::vector<double> BigramPredictor::predict_next(std::span<const TokenId> prefix) {
    check_prefix(prefix, vocab_size_, context_);
    const TokenId last = prefix.back();
    const double denom = static_cast<double>(count(last) + vocab_size_);
    std::vector<double> p(vocab_size_, 1.0 / denom);
    auto it = pairs_.find(last);
    if (it != pairs_.end()) {
        for (const auto& [b, c] : it->second) {
            if (static_cast<std::size_t>(b) < vocab_size_) {
                p[static_cast<std::size_t>(b)] = static_cast<double>(c + 1) / denom;
            }
        }
    }
    return p;
}

}  // namespace ehrgpt
