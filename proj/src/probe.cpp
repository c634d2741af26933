#include "ehrgpt/probe.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>

#include "ehrgpt/errors.hpp"
#include "ehrgpt/rng.hpp"

namespace ehrgpt {

std::vector<float> masked_mean(std::span<const float> hidden, std::span<const std::uint8_t> mask, std::size_t d) {
    if (d == 0 || hidden.size() % d != 0) {
        throw DataError("masked_mean: hidden size is not a multiple of d");
    }
    const std::size_t n = hidden.size() / d;
    if (!mask.empty() && mask.size() != n) {
        throw DataError("masked_mean: mask length differs from row count");
    }
    std::vector<double> acc(d, 0.0);
    std::size_t kept = 0;
    for (std::size_t t = 0; t < n; ++t) {
        if (!mask.empty() && mask[t] == 0) {
            continue;
        }
        ++kept;
        for (std::size_t i = 0; i < d; ++i) {
            acc[i] += hidden[t * d + i];
        }
    }
    if (kept == 0) {
        throw DataError("masked_mean: every row is masked");
    }
    std::vector<float> out(d);
    for (std::size_t i = 0; i < d; ++i) {
        out[i] = static_cast<float>(acc[i] / static_cast<double>(kept));
    }
    return out;
}

std::vector<float> patient_embedding(TransformerPredictor& backbone, std::span<const TokenId> history) {
    if (history.empty()) {
        throw DataError("patient_embedding: empty history");
    }
    if (history.size() > backbone.context()) {
        history = history.last(backbone.context());
    }
    backbone.run(history);
    const std::size_t d = backbone.model().config().d_model;
    return masked_mean(std::span<const float>(backbone.activations().lnf_out).first(history.size() * d), {}, d);
}

void ProbeConfig::validate() const {
    if (!(learning_rate > 0.0)) {
        throw ConfigError("probe learning_rate must be positive");
    }
    if (!(dropout >= 0.0 && dropout < 1.0)) {
        throw ConfigError("probe dropout must lie in [0, 1)");
    }
    if (epochs == 0 || batch_size == 0) {
        throw ConfigError("probe epochs and batch_size must be >= 1");
    }
    if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) {
        throw ConfigError("probe validation_fraction must lie in [0, 1)");
    }
}

double LinearHead::logit(std::span<const float> x) const {
    double z = bias;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        z += weights[i] * x[i];
    }
    return z;
}

double LinearHead::probability(std::span<const float> x) const { return 1.0 / (1.0 + std::exp(-logit(x))); }

namespace {

// -log sigmoid(z) for label 1, -log(1 - sigmoid(z)) for label 0, computed stably.
double logistic_loss(double z, int label) {
    const double s = label ? -z : z;
    return s > 0 ? s + std::log1p(std::exp(-s)) : std::log1p(std::exp(s));
}

double mean_loss(const LinearHead& head, const std::vector<std::vector<float>>& x, const std::vector<int>& y,
                 std::span<const std::size_t> idx) {
    double total = 0.0;
    for (std::size_t i : idx) {
        total += logistic_loss(head.logit(x[i]), y[i]);
    }
    return total / static_cast<double>(idx.size());
}

void check_inputs(const std::vector<std::vector<float>>& features, const std::vector<int>& labels) {
    if (features.size() != labels.size() || features.empty()) {
        throw DataError("probe: features and labels must be nonempty and of equal length");
    }
    const std::size_t d = features.front().size();
    std::size_t pos = 0;
    for (std::size_t i = 0; i < features.size(); ++i) {
        if (features[i].size() != d) {
            throw DataError("probe: ragged feature rows");
        }
        if (labels[i] != 0 && labels[i] != 1) {
            throw DataError("probe: labels must be 0 or 1");
        }
        pos += static_cast<std::size_t>(labels[i]);
    }
    if (pos == 0 || pos == labels.size()) {
        throw DataError("probe: both classes must be present");
    }
}

// Per-class seeded shuffle, then the first fraction of each class goes to validation.
void stratified_split(const std::vector<int>& labels, double fraction, Rng& rng, std::vector<std::size_t>& train,
                      std::vector<std::size_t>& validation) {
    for (int cls = 0; cls <= 1; ++cls) {
        std::vector<std::size_t> members;
        for (std::size_t i = 0; i < labels.size(); ++i) {
            if (labels[i] == cls) {
                members.push_back(i);
            }
        }
        rng.shuffle(members.begin(), members.end());
        std::size_t n_val = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(members.size())));
        if (members.size() < 2) {
            n_val = 0;
        }
        validation.insert(validation.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(n_val));
        train.insert(train.end(), members.begin() + static_cast<std::ptrdiff_t>(n_val), members.end());
    }
    std::sort(train.begin(), train.end());
    std::sort(validation.begin(), validation.end());
}

ProbeResult fit(const std::vector<std::vector<float>>& x, const std::vector<int>& y, std::vector<std::size_t> train,
                std::vector<std::size_t> validation, const ProbeConfig& cfg, Rng& rng) {
    const std::size_t d = x.front().size();
    std::size_t n_pos = 0;
    for (std::size_t i : train) {
        n_pos += static_cast<std::size_t>(y[i]);
    }
    const std::size_t n_neg = train.size() - n_pos;
    std::vector<double> weights(train.size());
    for (std::size_t k = 0; k < train.size(); ++k) {
        const std::size_t cls_count = y[train[k]] ? n_pos : n_neg;
        weights[k] = cls_count == 0 ? 0.0 : 1.0 / static_cast<double>(cls_count);
    }
    const bool has_validation = !validation.empty() && std::any_of(validation.begin(), validation.end(), [&](auto i) {
        return y[i] == 1;
    }) && std::any_of(validation.begin(), validation.end(), [&](auto i) { return y[i] == 0; });

    ProbeResult result;
    LinearHead head{std::vector<double>(d, 0.0), 0.0};
    std::vector<double> m(d + 1, 0.0), v(d + 1, 0.0), grad(d + 1);
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    std::uint64_t t = 0;
    double best = std::numeric_limits<double>::infinity();
    std::size_t since_best = 0;
    result.head = head;
    std::vector<float> dropped(d);
    const double keep_scale = 1.0 / (1.0 - cfg.dropout);
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        double epoch_loss = 0.0;
        std::size_t seen = 0;
        for (std::size_t start = 0; start < train.size(); start += cfg.batch_size) {
            const std::size_t bsz = std::min(cfg.batch_size, train.size() - start);
            std::fill(grad.begin(), grad.end(), 0.0);
            for (std::size_t b = 0; b < bsz; ++b) {
                const std::size_t i = train[rng.categorical(weights)];
                for (std::size_t j = 0; j < d; ++j) {
                    dropped[j] = rng.bernoulli(cfg.dropout) ? 0.0f : static_cast<float>(x[i][j] * keep_scale);
                }
                const double z = head.logit(dropped);
                epoch_loss += logistic_loss(z, y[i]);
                ++seen;
                const double err = 1.0 / (1.0 + std::exp(-z)) - y[i];
                for (std::size_t j = 0; j < d; ++j) {
                    grad[j] += err * dropped[j];
                }
                grad[d] += err;
            }
            ++t;
            const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t));
            const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t));
            for (std::size_t j = 0; j <= d; ++j) {
                const double g = grad[j] / static_cast<double>(bsz);
                m[j] = b1 * m[j] + (1 - b1) * g;
                v[j] = b2 * v[j] + (1 - b2) * g * g;
                const double step = cfg.learning_rate * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps);
                (j < d ? head.weights[j] : head.bias) -= step;
            }
        }
        ProbeEpoch log{epoch, epoch_loss / static_cast<double>(seen), std::numeric_limits<double>::quiet_NaN()};
        if (has_validation) {
            log.validation_loss = mean_loss(head, x, y, validation);
            if (log.validation_loss < best) {
                best = log.validation_loss;
                result.head = head;
                result.best_epoch = epoch;
                since_best = 0;
            } else if (++since_best >= cfg.patience) {
                result.log.push_back(log);
                break;
            }
        } else {
            result.head = head;
            result.best_epoch = epoch;
        }
        result.log.push_back(log);
    }
    return result;
}

}  // namespace

ProbeResult train_probe(const std::vector<std::vector<float>>& features, const std::vector<int>& labels,
                        const ProbeConfig& config) {
    config.validate();
    check_inputs(features, labels);
    Rng rng(config.seed, "probe");
    std::vector<std::size_t> train, validation;
    stratified_split(labels, config.validation_fraction, rng, train, validation);
    return fit(features, labels, std::move(train), std::move(validation), config, rng);
}

std::vector<double> cross_fit_scores(const std::vector<std::vector<float>>& features, const std::vector<int>& labels,
                                     const ProbeConfig& config, std::size_t folds) {
    config.validate();
    check_inputs(features, labels);
    if (folds < 2) {
        throw ConfigError("cross_fit_scores needs at least 2 folds");
    }
    // Stratified fold assignment: each class shuffled and dealt round-robin.
    Rng rng(config.seed, "probe-folds");
    std::vector<std::size_t> fold(labels.size());
    for (int cls = 0; cls <= 1; ++cls) {
        std::vector<std::size_t> members;
        for (std::size_t i = 0; i < labels.size(); ++i) {
            if (labels[i] == cls) {
                members.push_back(i);
            }
        }
        rng.shuffle(members.begin(), members.end());
        for (std::size_t k = 0; k < members.size(); ++k) {
            fold[members[k]] = k % folds;
        }
    }
    std::vector<double> scores(labels.size(), 0.0);
    for (std::size_t f = 0; f < folds; ++f) {
        std::vector<std::vector<float>> x;
        std::vector<int> y;
        for (std::size_t i = 0; i < labels.size(); ++i) {
            if (fold[i] != f) {
                x.push_back(features[i]);
                y.push_back(labels[i]);
            }
        }
        const bool both = std::count(y.begin(), y.end(), 1) > 0 && std::count(y.begin(), y.end(), 0) > 0;
        ProbeConfig cfg = config;
        cfg.seed = derive_seed(config.seed, "probe-fold", f);
        const LinearHead head = both ? train_probe(x, y, cfg).head : LinearHead{std::vector<double>(features[0].size()), 0.0};
        for (std::size_t i = 0; i < labels.size(); ++i) {
            if (fold[i] == f) {
                scores[i] = head.probability(features[i]);
            }
        }
    }
    return scores;
}

double roc_auc(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) {
        throw DataError("roc_auc: scores and labels differ in length");
    }
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
    // Mann-Whitney U with mid-ranks for ties.
    double rank_sum = 0.0;
    std::size_t n_pos = 0;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) {
            ++j;
        }
        const double mid = 0.5 * static_cast<double>(i + 1 + j);
        for (std::size_t k = i; k < j; ++k) {
            if (labels[order[k]] == 1) {
                rank_sum += mid;
                ++n_pos;
            }
        }
        i = j;
    }
    const std::size_t n_neg = scores.size() - n_pos;
    if (n_pos == 0 || n_neg == 0) {
        throw DataError("roc_auc: both classes must be present");
    }
    const double np = static_cast<double>(n_pos);
    return (rank_sum - np * (np + 1) / 2.0) / (np * static_cast<double>(n_neg));
}

std::size_t matched_fp_tp(std::span<const double> scores, std::span<const int> labels, std::size_t fp_budget) {
    if (scores.size() != labels.size()) {
        throw DataError("matched_fp_tp: scores and labels differ in length");
    }
    std::vector<double> negatives;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (labels[i] == 0) {
            negatives.push_back(scores[i]);
        }
    }
    if (fp_budget > negatives.size()) {
        throw ConfigError("matched_fp_tp: FP budget " + std::to_string(fp_budget) + " exceeds " +
                          std::to_string(negatives.size()) + " negatives");
    }
    double tau = -std::numeric_limits<double>::infinity();
    if (fp_budget < negatives.size()) {
        std::sort(negatives.begin(), negatives.end(), std::greater<>());
        tau = negatives[fp_budget];
    }
    std::size_t tp = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        tp += labels[i] == 1 && scores[i] > tau ? 1 : 0;
    }
    return tp;
}

void write_probe_report(std::ostream& out, std::span<const ProbeReportRow> rows) {
    out << "task,N,TP_f,TP_z,FP_budget,positives,negatives,AUC\n";
    for (const auto& r : rows) {
        char buf[64];
        auto res = std::to_chars(buf, buf + sizeof(buf), r.auc);
        out << r.task << ',' << r.n << ',' << r.tp_probe << ',' << r.tp_zero_shot << ',' << r.fp_budget << ','
            << r.positives << ',' << r.negatives << ',' << std::string_view(buf, static_cast<std::size_t>(res.ptr - buf))
            << '\n';
    }
}

}  // namespace ehrgpt
