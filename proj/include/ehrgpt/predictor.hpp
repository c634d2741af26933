#pragma once

#include <map>
#include <memory>
#include <span>
#include <unordered_map>
#include <vector>

#include "ehrgpt/model.hpp"
#include "ehrgpt/sequencer.hpp"

namespace ehrgpt {

/// Next-token distribution source. Implementations may keep per-instance
/// caches, so one instance serves one thread; use clone() for more.
class Predictor {
public:
    virtual ~Predictor() = default;

    virtual std::size_t vocab_size() const = 0;
    /// Longest prefix predict_next accepts plus one.
    virtual std::size_t context() const = 0;
    /// Probabilities over the vocabulary, summing to 1. Throws DataError on an
    /// empty prefix, a prefix of context() tokens or more, or out-of-range ids.
    virtual std::vector<double> predict_next(std::span<const TokenId> prefix) = 0;
    virtual std::unique_ptr<Predictor> clone() const = 0;
};

/// Numerically stable softmax in double.
std::vector<double> softmax(std::span<const float> logits);

class TransformerPredictor : public Predictor {
public:
    explicit TransformerPredictor(std::shared_ptr<const Transformer<float>> model);

    std::size_t vocab_size() const override { return model_->config().vocab_size; }
    std::size_t context() const override { return model_->config().context; }
    std::vector<double> predict_next(std::span<const TokenId> prefix) override;
    std::unique_ptr<Predictor> clone() const override;

    /// Runs (or reuses) the forward over `tokens`; afterwards activations()
    /// covers exactly these tokens. Reuses the longest cached common prefix.
    void run(std::span<const TokenId> tokens);
    const Activations<float>& activations() const { return cache_; }
    const Transformer<float>& model() const { return *model_; }

    /// Final-LayerNorm hidden states, one d_model row per token.
    std::vector<std::vector<float>> embed(std::span<const TokenId> tokens);
    /// Attention of the last position in `layer`, averaged over heads.
    std::vector<double> mean_attention_row(std::size_t layer, std::size_t position) const;

private:
    std::shared_ptr<const Transformer<float>> model_;
    Activations<float> cache_;
};

/// Add-one-smoothed bigram model over encoded sequences:
///   P(b | a) = (count(a, b) + 1) / (count(a) + V).
class BigramPredictor : public Predictor {
public:
    BigramPredictor(std::span<const TokenSequence> training, std::size_t vocab_size,
                    std::size_t context = kDefaultContext);

    std::size_t vocab_size() const override { return vocab_size_; }
    std::size_t context() const override { return context_; }
    std::vector<double> predict_next(std::span<const TokenId> prefix) override;
    std::unique_ptr<Predictor> clone() const override { return std::make_unique<BigramPredictor>(*this); }

    std::size_t count(TokenId a, TokenId b) const;
    std::size_t count(TokenId a) const;

private:
    std::size_t vocab_size_;
    std::size_t context_;
    std::unordered_map<TokenId, std::map<TokenId, std::size_t>> pairs_;
    std::unordered_map<TokenId, std::size_t> totals_;
};

/// Shared argument checks for predict_next implementations.
void check_prefix(std::span<const TokenId> prefix, std::size_t vocab_size, std::size_t context);

}  // namespace ehrgpt
