#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "ehrgpt/errors.hpp"
#include "ehrgpt/icd.hpp"
#include "ehrgpt/rng.hpp"
#include "ehrgpt/vocab.hpp"
#include "support.hpp"

using namespace ehrgpt;
using namespace ehrgpt::test;

namespace {

// Independent nearest-rank percentile: smallest value with at least p% of the
// sample at or below it.
double brute_percentile(std::vector<double> values, double p) {
    std::sort(values.begin(), values.end());
    for (double v : values) {
        const auto at_or_below = std::count_if(values.begin(), values.end(), [&](double x) { return x <= v; });
        if (100.0 * static_cast<double>(at_or_below) >= p * static_cast<double>(values.size())) {
            return v;
        }
    }
    return values.back();
}

Corpus filler(std::size_t n) {
    Corpus c;
    for (std::size_t i = 0; i < n; ++i) {
        c.push_back(dx_patient("F" + std::to_string(i), {{0, {"I10"}}}));
    }
    return c;
}

}  // namespace

TEST(IcdMapping, Examples) {
    const IcdMapping m{{"250.00", "E11.9"}};
    EXPECT_EQ(map_icd9_to_icd10("250.00", m), "E11.9");
    EXPECT_EQ(map_icd9_to_icd10("E11.9", m), "E11.9");
    EXPECT_EQ(map_icd9_to_icd10("", m), "");
}

TEST(IcdMapping, DefaultTableMapsIntoCategories) {
    for (const auto& [icd9, icd10] : default_icd_mapping()) {
        EXPECT_TRUE(is_icd10_category(truncate_icd(icd10))) << icd9 << " -> " << icd10;
    }
}

TEST(IcdMapping, FileRoundTrip) {
    const auto path = std::filesystem::temp_directory_path() / "ehrgpt_icd_map.tsv";
    save_icd_mapping(default_icd_mapping(), path);
    EXPECT_EQ(load_icd_mapping(path), default_icd_mapping());
    std::filesystem::remove(path);
}

TEST(Truncation, Examples) {
    EXPECT_EQ(truncate_icd("E11.9"), "E11");
    EXPECT_EQ(truncate_icd("I50"), "I50");
    EXPECT_EQ(truncate_icd("C25.01"), "C25");
}

TEST(FrequencyFilter, RarePatientShareIsRemoved) {
    Corpus c = filler(2000);
    c[0].visits[0].events.push_back(dx("Z99.1", day(0)));
    const auto kept = filter_infrequent(c, default_icd_mapping(), 0.001);
    EXPECT_FALSE(kept.contains("dx:Z99"));
    EXPECT_TRUE(kept.contains("dx:I10"));
}

TEST(FrequencyFilter, ThreePatientsOfTwoThousandIsKept) {
    Corpus c = filler(2000);
    for (int i : {3, 400, 1999}) {
        c[i].visits[0].events.push_back(dx("Z99.1", day(0)));
    }
    EXPECT_TRUE(filter_infrequent(c, default_icd_mapping(), 0.001).contains("dx:Z99"));
}

TEST(FrequencyFilter, CountsPatientsNotOccurrences) {
    Corpus c = filler(2000);
    for (int v = 1; v <= 10; ++v) {
        c[0].visits.push_back(visit("x" + std::to_string(v), day(100 * v), {dx("Z99.1", day(0))}));
    }
    EXPECT_FALSE(filter_infrequent(c, default_icd_mapping(), 0.001).contains("dx:Z99"));
}

TEST(FrequencyFilter, ZeroThresholdKeepsEverything) {
    Corpus c = filler(50);
    c[7].visits[0].events.push_back(rx("RX0042", day(0)));
    EXPECT_EQ(filter_infrequent(c, default_icd_mapping(), 0.0).size(), 2u);
}

TEST(FrequencyFilter, EmptyCorpusAndBadThreshold) {
    EXPECT_THROW(filter_infrequent({}, default_icd_mapping()), DataError);
    EXPECT_THROW(filter_infrequent(filler(3), default_icd_mapping(), 1.5), ConfigError);
}

TEST(FrequencyFilter, MonotoneInThreshold) {
    GeneratorConfig g;
    g.n_patients = 300;
    const Corpus c = generate_corpus(g);
    std::set<std::string> previous = filter_infrequent(c, default_icd_mapping(), 0.0);
    for (double t : {0.001, 0.01, 0.05, 0.1, 0.3, 0.8}) {
        const auto kept = filter_infrequent(c, default_icd_mapping(), t);
        EXPECT_TRUE(std::includes(previous.begin(), previous.end(), kept.begin(), kept.end())) << t;
        previous = kept;
    }
}

TEST(LabEcdf, UniformOneToHundred) {
    std::vector<double> v;
    for (int i = 1; i <= 100; ++i) {
        v.push_back(i);
    }
    const auto fit = fit_lab_ecdf({{"LAB001", v}});
    const std::vector<double> expected{10, 20, 30, 40, 50, 60, 70, 80, 90};
    EXPECT_EQ(fit.bins.at("LAB001"), expected);
    EXPECT_EQ(bin_lab_value("LAB001", 55, fit.bins), 5);
    EXPECT_EQ(bin_lab_value("LAB001", 1, fit.bins), 0);
    EXPECT_EQ(bin_lab_value("LAB001", 1000, fit.bins), 9);
    EXPECT_EQ(bin_lab_value("LAB999", 5, fit.bins), std::nullopt);
}

TEST(LabEcdf, DegenerateCodes) {
    const auto fit = fit_lab_ecdf({{"SAME", std::vector<double>(50, 5.0)}, {"TWO", {1.0, 2.0}}, {"NONE", {}}});
    EXPECT_TRUE(fit.bins.at("SAME").empty());
    EXPECT_TRUE(fit.bins.at("TWO").empty());
    EXPECT_EQ(bin_lab_value("SAME", 5.0, fit.bins), 0);
    EXPECT_EQ(bin_lab_value("TWO", 100.0, fit.bins), 0);
    EXPECT_FALSE(fit.bins.contains("NONE"));
    ASSERT_EQ(fit.warnings.size(), 1u);
    EXPECT_NE(fit.warnings.front().find("NONE"), std::string::npos);
}

TEST(LabEcdf, EdgesMatchBruteForceAndBinsBalance) {
    Rng rng(17, "labs");
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> values;
        const auto n = rng.uniform_int(100, 700);
        for (std::int64_t i = 0; i < n; ++i) {
            values.push_back(std::round(std::exp(rng.normal(3.0, 0.6)) * 10.0) / 10.0);
        }
        const auto fit = fit_lab_ecdf({{"L", values}});
        const auto& edges = fit.bins.at("L");
        ASSERT_EQ(edges.size(), 9u);
        for (int k = 1; k <= 9; ++k) {
            EXPECT_EQ(edges[k - 1], brute_percentile(values, 10.0 * k));
        }
        EXPECT_TRUE(std::is_sorted(edges.begin(), edges.end()));
        std::set<double> distinct(values.begin(), values.end());
        if (distinct.size() < 100) {
            continue;
        }
        std::array<std::size_t, 10> counts{};
        for (double v : values) {
            ++counts[static_cast<std::size_t>(*bin_lab_value("L", v, fit.bins))];
        }
        for (std::size_t b = 0; b < 10; ++b) {
            const double share = static_cast<double>(counts[b]) / static_cast<double>(values.size());
            EXPECT_GE(share, 0.05) << "bin " << b;
            EXPECT_LE(share, 0.15) << "bin " << b;
        }
    }
}

TEST(TimeBuckets, Examples) {
    EXPECT_EQ(time_bucket(0), TimeBucket::t0);
    EXPECT_EQ(time_bucket(120), TimeBucket::t1);
    EXPECT_EQ(time_bucket(400), TimeBucket::t3);
}

TEST(TimeBuckets, Boundaries) {
    EXPECT_EQ(time_bucket(92), TimeBucket::t0);
    EXPECT_EQ(time_bucket(93), TimeBucket::t1);
    EXPECT_EQ(time_bucket(183), TimeBucket::t1);
    EXPECT_EQ(time_bucket(184), TimeBucket::t2);
    EXPECT_EQ(time_bucket(365), TimeBucket::t2);
    EXPECT_EQ(time_bucket(366), TimeBucket::t3);
    EXPECT_THROW(time_bucket(-1), DataError);
}

TEST(TimeBuckets, TotalAndMonotone) {
    auto previous = time_bucket(0);
    for (int d = 1; d <= 2000; ++d) {
        const auto b = time_bucket(d);
        EXPECT_GE(b, previous);
        EXPECT_GE(d, bucket_lower_bound_days(b));
        previous = b;
    }
    EXPECT_EQ(bucket_lower_bound_days(TimeBucket::t0), 0);
    EXPECT_EQ(bucket_lower_bound_days(TimeBucket::t1), 93);
    EXPECT_EQ(bucket_lower_bound_days(TimeBucket::t2), 184);
    EXPECT_EQ(bucket_lower_bound_days(TimeBucket::t3), 366);
}

TEST(AgeBuckets, FiveYearBands) {
    EXPECT_EQ(age_bucket(0), 0);
    EXPECT_EQ(age_bucket(4), 0);
    EXPECT_EQ(age_bucket(5), 1);
    EXPECT_EQ(age_bucket(99), 19);
    EXPECT_EQ(age_bucket(100), 20);
    EXPECT_EQ(age_bucket(130), 20);
}

TEST(Vocabulary, TruncationMergesSubcodes) {
    const Corpus c{dx_patient("a", {{0, {"E11.9"}}}), dx_patient("b", {{0, {"E11.2"}}})};
    const Vocabulary v = Vocabulary::build(c);
    std::vector<std::string> dx_tokens;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (v.is_code(static_cast<TokenId>(i)) && v.info(static_cast<TokenId>(i)).domain == Domain::diagnosis) {
            dx_tokens.push_back(v.token(static_cast<TokenId>(i)));
        }
    }
    EXPECT_EQ(dx_tokens, std::vector<std::string>{"dx:E11"});
}

TEST(Vocabulary, Icd9CodesAreMappedBeforeTruncation) {
    const Corpus c{dx_patient("a", {{0, {"250.00"}}})};
    const Vocabulary v = vocab_of(c);
    EXPECT_TRUE(v.find("dx:E11").has_value());
    EXPECT_FALSE(v.find("dx:250").has_value());
}

TEST(Vocabulary, EmptyCorpusThrows) { EXPECT_THROW(Vocabulary::build({}), DataError); }

TEST(Vocabulary, BijectionContiguityAndOrder) {
    GeneratorConfig g;
    g.n_patients = 200;
    const Vocabulary v = Vocabulary::build(generate_corpus(g));
    std::set<std::string> seen;
    for (std::size_t i = 0; i < v.size(); ++i) {
        const auto id = static_cast<TokenId>(i);
        EXPECT_EQ(v.id(v.token(id)), id);
        EXPECT_TRUE(seen.insert(v.token(id)).second);
    }
    // specials first, then code tokens in lexicographic order
    for (std::size_t i = 0; i < v.special_count(); ++i) {
        EXPECT_FALSE(v.is_code(static_cast<TokenId>(i)));
    }
    for (std::size_t i = v.special_count() + 1; i < v.size(); ++i) {
        EXPECT_TRUE(v.is_code(static_cast<TokenId>(i)));
        EXPECT_LT(v.token(static_cast<TokenId>(i - 1)), v.token(static_cast<TokenId>(i)));
    }
    EXPECT_EQ(v.specials().eos, v.id("[BOS/EOS]"));
    EXPECT_EQ(v.find("[BOS]"), std::nullopt);
    EXPECT_EQ(v.find("[EOS]"), std::nullopt);
}

TEST(Vocabulary, SpecialRegistryIsComplete) {
    const Vocabulary v = vocab_of({dx_patient("a", {{0, {"I10"}}})});
    const auto& s = v.specials();
    std::set<TokenId> ids{s.pad, s.cls, s.sep, s.eos};
    ids.insert(s.time.begin(), s.time.end());
    ids.insert(s.visit_type.begin(), s.visit_type.end());
    ids.insert(s.discharge.begin(), s.discharge.end());
    ids.insert(s.sex.begin(), s.sex.end());
    ids.insert(s.age.begin(), s.age.end());
    ids.insert(s.unknown.begin(), s.unknown.end());
    EXPECT_EQ(ids.size(), v.special_count());
    for (int b = 0; b < 4; ++b) {
        EXPECT_EQ(v.as_time(s.time[b]), static_cast<TimeBucket>(b));
    }
}

TEST(Vocabulary, UnknownCodesMapToDomainUnk) {
    const Vocabulary v = vocab_of({dx_patient("a", {{0, {"I10"}}})});
    EXPECT_EQ(v.event_token(dx("Q99.9", day(0))), v.specials().unknown[0]);
    EXPECT_EQ(v.event_token(rx("RX0404", day(0))), v.specials().unknown[1]);
    EXPECT_EQ(v.event_token(lab("LAB404", 1.0, day(0))), v.specials().unknown[3]);
    EXPECT_TRUE(v.is_event(v.specials().unknown[2]));
    EXPECT_FALSE(v.is_code(v.specials().unknown[2]));
}

TEST(Vocabulary, LabTokensPerDecile) {
    PatientRecord p = dx_patient("a", {{0, {"I10"}}});
    for (int i = 1; i <= 100; ++i) {
        p.visits[0].events.push_back(lab("LAB001", i, day(0)));
    }
    const Vocabulary v = vocab_of({p});
    for (int q = 0; q < 10; ++q) {
        EXPECT_TRUE(v.find("lab:LAB001:q" + std::to_string(q)).has_value()) << q;
    }
    EXPECT_EQ(v.event_token(lab("LAB001", 55, day(0))), v.id("lab:LAB001:q5"));
    EXPECT_EQ(v.event_token(lab("LAB001", 1e6, day(0))), v.id("lab:LAB001:q9"));
}

TEST(Vocabulary, SameCorpusSameFileBytes) {
    GeneratorConfig g;
    g.n_patients = 150;
    const Corpus c = generate_corpus(g);
    std::ostringstream a, b;
    Vocabulary::build(c).write(a);
    Vocabulary::build(c).write(b);
    EXPECT_EQ(a.str(), b.str());
    std::istringstream in(a.str());
    EXPECT_EQ(Vocabulary::read(in), Vocabulary::build(c));
}
