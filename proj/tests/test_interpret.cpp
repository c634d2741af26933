#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <sstream>

#include "ehrgpt/errors.hpp"
#include "ehrgpt/interpret.hpp"
#include "ehrgpt/probe.hpp"
#include "ehrgpt/rng.hpp"
#include "ehrgpt/sequencer.hpp"
#include "support.hpp"

using namespace ehrgpt;
using namespace ehrgpt::test;

namespace {

std::vector<std::size_t> brute_top_k(const std::vector<double>& w, std::size_t k) {
    std::vector<std::size_t> idx(w.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return w[a] > w[b]; });
    idx.resize(std::min(k, idx.size()));
    return idx;
}

Corpus cohort_corpus() {
    return {
        dx_patient("pos1", {{1, {"K86", "I10"}}, {100, {"I10", "E11", "J44"}}, {400, {"C25"}}}),
        dx_patient("pos2", {{1, {"K86"}}, {150, {"E11"}}, {420, {"C25"}}}),
        dx_patient("neg1", {{1, {"I10"}}, {100, {"E11"}}, {400, {"I10"}}}),
        dx_patient("neg2", {{1, {"E11"}}, {120, {"J44"}}, {200, {"J44", "E11"}}, {500, {"E11"}}}),
    };
}

// A model whose greedy output is always `target`: the final LayerNorm gain is
// zero, so every position emits lnf.b . wte[v], maximal for the target row.
std::shared_ptr<Transformer<float>> always_emits(std::size_t vocab, TokenId target, bool random_attention) {
    ModelConfig c;
    c.d_model = 8;
    c.n_layers = 2;
    c.n_heads = 2;
    c.context = 64;
    c.vocab_size = vocab;
    c.init_std = 0.5;
    auto m = std::make_shared<Transformer<float>>(c);
    if (random_attention) {
        m->init_random(3);
    }
    auto& p = m->parameters();
    const auto& layout = m->layout();
    for (const auto& s : layout) {
        if (s.name == "lnf.g") {
            std::fill_n(p.begin() + static_cast<std::ptrdiff_t>(s.offset), s.size(), 0.0f);
        }
        if (s.name == "lnf.b") {
            p[s.offset] = 1.0f;
        }
    }
    for (std::size_t v = 0; v < vocab; ++v) {
        p[v * 8] = static_cast<TokenId>(v) == target ? 5.0f : 0.01f * static_cast<float>(v % 7);
    }
    return m;
}

}  // namespace

TEST(SelectTopK, MatchesBruteForceWithAscendingTies) {
    const std::vector<double> w{0.1, 0.3, 0.3, 0.05, 0.3};
    EXPECT_EQ(select_top_k(w, 2), (std::vector<std::size_t>{1, 2}));
    EXPECT_EQ(select_top_k(w, 15), (std::vector<std::size_t>{1, 2, 4, 0, 3}));
    Rng rng(4, "topk");
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> weights(static_cast<std::size_t>(rng.uniform_int(0, 40)));
        for (auto& x : weights) {
            x = static_cast<double>(rng.uniform_int(0, 8)) / 8.0;
        }
        const auto k = static_cast<std::size_t>(rng.uniform_int(0, 20));
        ASSERT_EQ(select_top_k(weights, k), brute_top_k(weights, k));
    }
}

TEST(NormalizeCounts, MaxIsExactlyOneAndTiesAscend) {
    const std::map<TokenId, std::size_t> counts{{7, 3}, {2, 6}, {5, 3}, {9, 1}};
    const auto top = normalize_counts(counts, 3);
    ASSERT_EQ(top.size(), 3u);
    EXPECT_EQ(top[0].token, 2);
    EXPECT_EQ(top[0].frequency, 1.0);
    EXPECT_EQ(top[1].token, 5);
    EXPECT_EQ(top[2].token, 7);
    EXPECT_DOUBLE_EQ(top[2].frequency, 0.5);
    EXPECT_TRUE(normalize_counts({}, 10).empty());
}

TEST(Attribute, UniformAttentionSelectsEarliestPositions) {
    const Corpus corpus = cohort_corpus();
    const Vocabulary v = vocab_of(corpus);
    const auto cohort = build_cohort(corpus, v, {"C25"}, 90);
    const TokenId c25 = v.id("dx:C25");
    TransformerPredictor p(always_emits(v.size(), c25, false));
    AttributionOptions o;
    o.budget = 1;
    o.per_step = 4;
    const auto r = attribute(p, corpus, v, cohort, o);
    EXPECT_EQ(r.patients, 4u);
    EXPECT_EQ(r.patients_fired, 4u);
    EXPECT_EQ(r.firing_steps, 4u);
    // Every history starts [CLS][AGE][SEX][VT]; uniform rows pick positions 0..3.
    std::map<TokenId, std::size_t> expected;
    for (const auto& m : cohort.members) {
        const auto h = encode_patient(corpus[m.corpus_index], v, m.cutoff).token_ids;
        for (std::size_t i = 0; i < 4; ++i) {
            ++expected[h[i]];
        }
    }
    EXPECT_EQ(r.counts, expected);
    EXPECT_EQ(r.top.front().token, v.specials().cls);
    EXPECT_EQ(r.top.front().frequency, 1.0);
}

TEST(Attribute, FewerInputsThanPerStepSelectsAll) {
    const Corpus corpus{
        dx_patient("pos", {{1, {"I10"}}, {200, {"C25"}}}),
        dx_patient("neg", {{1, {"E11"}}, {300, {"J44"}}}),
    };
    const Vocabulary v = vocab_of(corpus);
    const auto cohort = build_cohort(corpus, v, {"C25"}, 90, 1);
    TransformerPredictor p(always_emits(v.size(), v.id("dx:C25"), true));
    AttributionOptions o;
    o.budget = 1;
    const auto r = attribute(p, corpus, v, cohort, o);
    ASSERT_EQ(r.firing_steps, 2u);
    std::size_t total = 0;
    for (const auto& [token, count] : r.counts) {
        total += count;
    }
    EXPECT_EQ(total, 12u);  // two histories of 6 tokens, all selected
}

TEST(Attribute, MatchesBruteForceOverRecomputedAttention) {
    const Corpus corpus = cohort_corpus();
    const Vocabulary v = vocab_of(corpus);
    const auto cohort = build_cohort(corpus, v, {"C25"}, 90);
    const TokenId c25 = v.id("dx:C25");
    const auto model = always_emits(v.size(), c25, true);
    for (std::size_t layer : {0u, 1u}) {
        TransformerPredictor p(model);
        AttributionOptions o;
        o.budget = 3;
        o.per_step = 5;
        o.layer = layer;
        const auto r = attribute(p, corpus, v, cohort, o);
        EXPECT_EQ(r.layer, layer);
        EXPECT_EQ(r.firing_steps, 12u);

        std::map<TokenId, std::size_t> expected;
        for (const auto& m : cohort.members) {
            auto working = encode_patient(corpus[m.corpus_index], v, m.cutoff).token_ids;
            const std::size_t n_input = working.size();
            for (int step = 0; step < 3; ++step) {
                Activations<float> a;
                model->forward(a, working, 0);
                const std::size_t t = working.size() - 1;
                std::vector<double> row(n_input, 0.0);
                for (std::size_t h = 0; h < 2; ++h) {
                    const auto att = model->attention_row(a, layer, h, t);
                    double sum = 0;
                    for (std::size_t j = 0; j <= t; ++j) {
                        sum += att[j];
                    }
                    ASSERT_NEAR(sum, 1.0, 1e-5);
                    for (std::size_t j = 0; j < n_input; ++j) {
                        row[j] += att[j] / 2.0;
                    }
                }
                for (std::size_t pos : brute_top_k(row, 5)) {
                    ++expected[working[pos]];
                }
                working.push_back(c25);
            }
        }
        EXPECT_EQ(r.counts, expected) << "layer " << layer;
    }
    TransformerPredictor p(model);
    AttributionOptions bad;
    bad.layer = 2;
    EXPECT_THROW(attribute(p, corpus, v, cohort, bad), ConfigError);
}

TEST(Attribute, NeverFiringIsFlaggedEmpty) {
    const Corpus corpus = cohort_corpus();
    const Vocabulary v = vocab_of(corpus);
    const auto cohort = build_cohort(corpus, v, {"C25"}, 90);
    TransformerPredictor p(always_emits(v.size(), v.id("dx:E11"), true));
    AttributionOptions o;
    o.budget = 4;
    const auto r = attribute(p, corpus, v, cohort, o);
    EXPECT_TRUE(r.empty());
    EXPECT_TRUE(r.top.empty());
    std::ostringstream out;
    write_attribution_csv(out, r, v);
    EXPECT_EQ(out.str(), "token,count,frequency\n");
}

TEST(CodeEmbeddings, RowsAreTheEmbeddingTable) {
    const Corpus corpus = cohort_corpus();
    const Vocabulary v = vocab_of(corpus);
    const auto model = always_emits(v.size(), 0, true);
    const auto one = export_code_embeddings(*model, v, {"E11"});
    ASSERT_EQ(one.rows.size(), 1u);
    EXPECT_EQ(one.rows[0].key, "dx:E11");
    EXPECT_EQ(one.rows[0].label, "E00-E89");
    ASSERT_EQ(one.rows[0].values.size(), 8u);
    const auto id = static_cast<std::size_t>(v.id("dx:E11"));
    for (std::size_t j = 0; j < 8; ++j) {
        EXPECT_EQ(one.rows[0].values[j], model->parameters()[id * 8 + j]);
    }

    const auto all = export_code_embeddings(*model, v);
    EXPECT_EQ(all.rows.size(), 5u);  // C25 E11 I10 J44 K86

    const auto mixed = export_code_embeddings(*model, v, {"dx:C25", "Z99", "I10"});
    EXPECT_EQ(mixed.rows.size(), 2u);
    EXPECT_EQ(mixed.excluded, 1u);
    ASSERT_EQ(mixed.warnings.size(), 1u);

    std::ostringstream out;
    write_embedding_csv(out, one, "code", "chapter");
    EXPECT_EQ(out.str().substr(0, out.str().find('\n')), "code,chapter,e0,e1,e2,e3,e4,e5,e6,e7");
}

TEST(PatientEmbeddings, LabelsPartitionTheZeroShotOutcomeAndMatchProbe) {
    const Corpus corpus = cohort_corpus();
    const Vocabulary v = vocab_of(corpus);
    const auto cohort = build_cohort(corpus, v, {"C25"}, 90);
    const auto model = always_emits(v.size(), v.id("dx:C25"), true);
    TransformerPredictor p(model);
    const auto zs = zero_shot_eval(p, corpus, v, cohort, kDefaultTopN, 4);

    const auto predicted = export_patient_embeddings(p, corpus, v, cohort, zs, 1);
    ASSERT_EQ(predicted.rows.size(), 4u);  // the target is always top-1
    const auto all = export_patient_embeddings(p, corpus, v, cohort, zs, 1, false);
    ASSERT_EQ(all.rows.size(), 4u);
    std::size_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < all.rows.size(); ++i) {
        const auto& m = cohort.members[i];
        tp += all.rows[i].label == "TP" ? 1 : 0;
        fp += all.rows[i].label == "FP" ? 1 : 0;
        EXPECT_EQ(all.rows[i].label, m.positive ? "TP" : "FP");
        const auto h = encode_patient(corpus[m.corpus_index], v, m.cutoff).token_ids;
        EXPECT_EQ(all.rows[i].values, patient_embedding(p, h));
    }
    EXPECT_EQ(tp, zs.counts.rows[0].tp);
    EXPECT_EQ(fp, zs.counts.rows[0].fp);

    auto partial = zs;
    partial.outcomes[1].evaluated = false;
    const auto fewer = export_patient_embeddings(p, corpus, v, cohort, partial, 1, false);
    EXPECT_EQ(fewer.rows.size(), 3u);
    EXPECT_EQ(fewer.excluded, 1u);
    EXPECT_FALSE(fewer.warnings.empty());
}
