#include "ehrgpt/forecast.hpp"

#include <algorithm>
#include <charconv>
#include <numeric>
#include <ostream>

#include "ehrgpt/errors.hpp"
#include "ehrgpt/sequencer.hpp"

namespace ehrgpt {

std::string_view to_string(Termination t) {
    switch (t) {
        case Termination::sep: return "sep";
        case Termination::token_budget: return "token_budget";
        case Termination::horizon: return "horizon";
    }
    return "unknown";
}

bool ForecastSet::hits(const std::unordered_set<TokenId>& targets, std::size_t n) const {
    for (const auto& step : steps) {
        const std::size_t k = std::min(n, step.candidates.size());
        for (std::size_t i = 0; i < k; ++i) {
            if (targets.contains(step.candidates[i].token)) {
                return true;
            }
        }
    }
    return false;
}

std::vector<std::size_t> ForecastSet::greedy_hits(const std::unordered_set<TokenId>& targets) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < steps.size(); ++i) {
        if (targets.contains(steps[i].greedy)) {
            out.push_back(i);
        }
    }
    return out;
}

std::vector<Candidate> top_n(std::span<const double> probabilities, std::size_t n) {
    std::vector<TokenId> ids(probabilities.size());
    std::iota(ids.begin(), ids.end(), TokenId{0});
    const std::size_t k = std::min(n, ids.size());
    auto better = [&](TokenId a, TokenId b) {
        const double pa = probabilities[static_cast<std::size_t>(a)];
        const double pb = probabilities[static_cast<std::size_t>(b)];
        return pa != pb ? pa > pb : a < b;
    };
    std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k), ids.end(), better);
    std::vector<Candidate> out(k);
    for (std::size_t i = 0; i < k; ++i) {
        out[i] = Candidate{ids[i], probabilities[static_cast<std::size_t>(ids[i])]};
    }
    return out;
}

std::size_t slide_window(std::vector<TokenId>& prefix, const Vocabulary& vocab, std::size_t context) {
    if (context <= kDemographicTokens + 1) {
        throw ConfigError("context too small for sliding-window decoding");
    }
    const std::size_t before = prefix.size();
    const TokenId sep = vocab.specials().sep;
    while (prefix.size() >= context) {
        // First [SEP] after the demographic block closes the oldest visit.
        auto begin = prefix.begin() + static_cast<std::ptrdiff_t>(kDemographicTokens);
        auto sep_it = std::find(begin, prefix.end(), sep);
        if (sep_it == prefix.end() || sep_it + 1 == prefix.end()) {
            // One open visit longer than the window: keep its most recent tokens.
            const std::size_t keep = context - 1 - kDemographicTokens;
            prefix.erase(begin, prefix.end() - static_cast<std::ptrdiff_t>(keep));
            break;
        }
        prefix.erase(begin, sep_it + 1);
        begin = prefix.begin() + static_cast<std::ptrdiff_t>(kDemographicTokens);
        if (begin != prefix.end() && vocab.as_time(*begin)) {
            prefix.erase(begin);
        }
    }
    return before - prefix.size();
}

GeneratedVisit generate_visit(Predictor& predictor, const Vocabulary& vocab, std::span<const TokenId> prefix,
                              std::size_t budget) {
    GeneratedVisit visit;
    std::vector<TokenId> working(prefix.begin(), prefix.end());
    const TokenId sep = vocab.specials().sep;
    for (std::size_t step = 0; step < budget; ++step) {
        if (working.size() >= predictor.context()) {
            slide_window(working, vocab, predictor.context());
        }
        const auto probs = predictor.predict_next(working);
        const TokenId next = top_n(probs, 1).front().token;
        if (next == sep) {
            visit.terminated_by = Termination::sep;
            return visit;
        }
        visit.tokens.push_back(next);
        working.push_back(next);
    }
    visit.terminated_by = Termination::token_budget;
    return visit;
}

ForecastSet top_n_sets(Predictor& predictor, const Vocabulary& vocab, std::span<const TokenId> prefix, std::size_t n,
                       int horizon_days, std::size_t budget) {
    if (n == 0) {
        throw ConfigError("top_n_sets: N must be >= 1");
    }
    ForecastSet out;
    std::vector<TokenId> working(prefix.begin(), prefix.end());
    for (std::size_t step = 0; step < budget; ++step) {
        if (working.size() >= predictor.context()) {
            slide_window(working, vocab, predictor.context());
            ++out.window_slides;
        }
        const auto probs = predictor.predict_next(working);
        ForecastStep fs;
        fs.candidates = top_n(probs, n);
        fs.greedy = fs.candidates.front().token;
        out.steps.push_back(std::move(fs));
        const TokenId next = out.steps.back().greedy;
        working.push_back(next);
        if (const auto bucket = vocab.as_time(next)) {
            out.elapsed_bucket_days += bucket_lower_bound_days(*bucket);
            if (out.elapsed_bucket_days > horizon_days) {
                out.terminated_by = Termination::horizon;
                return out;
            }
        }
    }
    out.terminated_by = Termination::token_budget;
    return out;
}

void write_trace(std::ostream& out, const ForecastSet& forecast, const Vocabulary& vocab) {
    out << "step,greedy,rank,token,probability\n";
    char buf[64];
    for (std::size_t s = 0; s < forecast.steps.size(); ++s) {
        const auto& step = forecast.steps[s];
        for (std::size_t r = 0; r < step.candidates.size(); ++r) {
            auto res = std::to_chars(buf, buf + sizeof(buf), step.candidates[r].probability);
            out << s << ',' << vocab.token(step.greedy) << ',' << r + 1 << ',' << vocab.token(step.candidates[r].token)
                << ',' << std::string_view(buf, static_cast<std::size_t>(res.ptr - buf)) << '\n';
        }
    }
}

}  // namespace ehrgpt
