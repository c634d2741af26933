#include "ehrgpt/interpret.hpp"

#include <algorithm>
#include <charconv>
#include <numeric>
#include <ostream>

#include "ehrgpt/errors.hpp"
#include "ehrgpt/icd.hpp"
#include "ehrgpt/probe.hpp"
#include "ehrgpt/sequencer.hpp"

namespace ehrgpt {

std::vector<std::size_t> select_top_k(std::span<const double> weights, std::size_t k) {
    std::vector<std::size_t> idx(weights.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    k = std::min(k, idx.size());
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                      [&](std::size_t a, std::size_t b) { return weights[a] != weights[b] ? weights[a] > weights[b] : a < b; });
    idx.resize(k);
    return idx;
}

std::vector<AttributedToken> normalize_counts(const std::map<TokenId, std::size_t>& counts, std::size_t report) {
    std::vector<AttributedToken> all;
    for (const auto& [token, count] : counts) {
        all.push_back(AttributedToken{token, count, 0.0});
    }
    std::stable_sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.count > b.count; });
    all.resize(std::min(report, all.size()));
    if (!all.empty()) {
        const double max_count = static_cast<double>(all.front().count);
        for (auto& t : all) {
            t.frequency = static_cast<double>(t.count) / max_count;
        }
    }
    return all;
}

AttributionReport attribute(TransformerPredictor& predictor, const Corpus& corpus, const Vocabulary& vocab,
                            const CohortSpec& cohort, const AttributionOptions& options) {
    const std::size_t n_layers = predictor.model().config().n_layers;
    AttributionReport report;
    report.target = cohort.name;
    report.layer = options.layer.value_or(n_layers - 1);
    if (report.layer >= n_layers) {
        throw ConfigError("attribution layer out of range");
    }
    const auto targets = cohort.target_set();
    for (const auto& member : cohort.members) {
        TokenSequence history;
        try {
            history = encode_patient(corpus.at(member.corpus_index), vocab, member.cutoff, predictor.context());
        } catch (const DataError&) {
            continue;
        }
        ++report.patients;
        std::vector<TokenId> working = history.token_ids;
        std::size_t n_input = working.size();
        int elapsed = 0;
        bool fired = false;
        for (std::size_t step = 0; step < options.budget; ++step) {
            if (working.size() >= predictor.context()) {
                const std::size_t removed = slide_window(working, vocab, predictor.context());
                n_input -= std::min(removed, n_input - kDemographicTokens);
            }
            const auto probs = predictor.predict_next(working);
            const TokenId next = top_n(probs, 1).front().token;
            if (targets.contains(next)) {
                const auto row = predictor.mean_attention_row(report.layer, working.size() - 1);
                const std::span<const double> inputs(row.data(), std::min(n_input, row.size()));
                for (std::size_t pos : select_top_k(inputs, options.per_step)) {
                    ++report.counts[working[pos]];
                }
                ++report.firing_steps;
                fired = true;
            }
            working.push_back(next);
            if (const auto bucket = vocab.as_time(next)) {
                elapsed += bucket_lower_bound_days(*bucket);
                if (elapsed > cohort.window_days) {
                    break;
                }
            }
        }
        report.patients_fired += fired ? 1 : 0;
    }
    report.top = normalize_counts(report.counts, options.report);
    return report;
}

void write_attribution_csv(std::ostream& out, const AttributionReport& report, const Vocabulary& vocab) {
    out << "token,count,frequency\n";
    for (const auto& t : report.top) {
        char buf[64];
        auto r = std::to_chars(buf, buf + sizeof(buf), t.frequency);
        out << vocab.token(t.token) << ',' << t.count << ',' << std::string_view(buf, static_cast<std::size_t>(r.ptr - buf))
            << '\n';
    }
}

EmbeddingTable export_code_embeddings(const Transformer<float>& model, const Vocabulary& vocab,
                                      const std::set<std::string>& filter) {
    EmbeddingTable table;
    std::vector<TokenId> ids;
    if (filter.empty()) {
        for (std::size_t id = 0; id < vocab.size(); ++id) {
            if (vocab.diagnosis_category(static_cast<TokenId>(id))) {
                ids.push_back(static_cast<TokenId>(id));
            }
        }
    } else {
        for (const auto& f : filter) {
            auto id = vocab.find(f);
            if (!id) {
                id = vocab.find(Vocabulary::diagnosis_token(f));
            }
            if (!id || !vocab.is_code(*id)) {
                table.warnings.push_back("unknown code skipped: " + f);
                ++table.excluded;
                continue;
            }
            ids.push_back(*id);
        }
        std::sort(ids.begin(), ids.end());
        ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    }
    for (TokenId id : ids) {
        EmbeddingRow row;
        row.key = vocab.token(id);
        if (const auto cat = vocab.diagnosis_category(id); cat && is_icd10_category(*cat)) {
            try {
                row.label = icd_chapter(*cat).id;
            } catch (const DataError&) {
                row.label.clear();
            }
        }
        const auto e = model.token_embedding(id);
        row.values.assign(e.begin(), e.end());
        table.rows.push_back(std::move(row));
    }
    return table;
}

EmbeddingTable export_patient_embeddings(TransformerPredictor& predictor, const Corpus& corpus,
                                         const Vocabulary& vocab, const CohortSpec& cohort,
                                         const ZeroShotResult& zero_shot, std::size_t n, bool predicted_only) {
    EmbeddingTable table;
    const auto targets = cohort.target_set();
    std::vector<const MemberOutcome*> by_member(cohort.members.size(), nullptr);
    for (const auto& o : zero_shot.outcomes) {
        if (o.evaluated && o.member < by_member.size()) {
            by_member[o.member] = &o;
        }
    }
    for (std::size_t i = 0; i < cohort.members.size(); ++i) {
        const auto& m = cohort.members[i];
        if (!by_member[i]) {
            ++table.excluded;
            continue;
        }
        const bool hit = by_member[i]->forecast.hits(targets, n);
        if (predicted_only && !hit) {
            continue;
        }
        const char* label = m.positive ? (hit ? "TP" : "FN") : (hit ? "FP" : "TN");
        const auto history = encode_patient(corpus.at(m.corpus_index), vocab, m.cutoff, predictor.context());
        table.rows.push_back(EmbeddingRow{m.patient_id, label, patient_embedding(predictor, history.token_ids)});
    }
    if (table.excluded > 0) {
        table.warnings.push_back(std::to_string(table.excluded) + " cohort members without a zero-shot outcome");
    }
    return table;
}

void write_embedding_csv(std::ostream& out, const EmbeddingTable& table, std::string_view key_name,
                         std::string_view label_name) {
    const std::size_t d = table.rows.empty() ? 0 : table.rows.front().values.size();
    out << key_name << ',' << label_name;
    for (std::size_t i = 0; i < d; ++i) {
        out << ",e" << i;
    }
    out << '\n';
    char buf[64];
    for (const auto& row : table.rows) {
        out << row.key << ',' << row.label;
        for (float v : row.values) {
            auto r = std::to_chars(buf, buf + sizeof(buf), v);
            out << ',' << std::string_view(buf, static_cast<std::size_t>(r.ptr - buf));
        }
        out << '\n';
    }
}

}  // namespace ehrgpt
