#include "ehrgpt/vocab.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "ehrgpt/errors.hpp"
#include "ehrgpt/io.hpp"

namespace ehrgpt {

TimeBucket time_bucket(std::int64_t delta_days) {
    if (delta_days < 0) {
        throw DataError("negative gap between visits (" + std::to_string(delta_days) + " days)");
    }
    if (delta_days <= 92) {
        return TimeBucket::t0;
    }
    if (delta_days <= 183) {
        return TimeBucket::t1;
    }
    if (delta_days <= 365) {
        return TimeBucket::t2;
    }
    return TimeBucket::t3;
}

int bucket_lower_bound_days(TimeBucket bucket) {
    switch (bucket) {
        case TimeBucket::t0: return 0;
        case TimeBucket::t1: return 93;
        case TimeBucket::t2: return 184;
        case TimeBucket::t3: return 366;
    }
    return 0;
}

std::string_view domain_tag(Domain d) {
    switch (d) {
        case Domain::diagnosis: return "dx";
        case Domain::medication: return "rx";
        case Domain::procedure: return "px";
        case Domain::lab: return "lab";
    }
    return "?";
}

int age_bucket(int age_years) { return std::clamp(age_years / 5, 0, kAgeBuckets - 1); }

// ---------------------------------------------------------------------------

std::string code_key(const ClinicalEvent& event, const IcdMapping& mapping) {
    std::string key(domain_tag(event.domain));
    key += ':';
    if (event.domain == Domain::diagnosis) {
        key += normalize_diagnosis(event.code, mapping);
    } else {
        key += event.code;
    }
    return key;
}

std::set<std::string> filter_infrequent(const Corpus& corpus, const IcdMapping& mapping, double threshold) {
    if (corpus.empty()) {
        throw DataError("frequency filter needs a nonempty corpus");
    }
    if (!(threshold >= 0.0 && threshold <= 1.0)) {
        throw ConfigError("frequency threshold must lie in [0, 1]");
    }
    std::map<std::string, std::size_t> patients_with;
    for (const auto& patient : corpus) {
        std::set<std::string> seen;
        for (const auto& visit : patient.visits) {
            for (const auto& event : visit.events) {
                seen.insert(code_key(event, mapping));
            }
        }
        for (const auto& key : seen) {
            ++patients_with[key];
        }
    }
    const double total = static_cast<double>(corpus.size());
    std::set<std::string> retained;
    for (const auto& [key, count] : patients_with) {
        if (static_cast<double>(count) / total >= threshold) {
            retained.insert(key);
        }
    }
    return retained;
}

double nearest_rank_percentile(const std::vector<double>& sorted, double p) {
    const auto n = static_cast<double>(sorted.size());
    auto rank = static_cast<std::size_t>(std::ceil(p / 100.0 * n));
    rank = std::clamp<std::size_t>(rank, 1, sorted.size());
    return sorted[rank - 1];
}

LabEcdfFit fit_lab_ecdf(const std::map<std::string, std::vector<double>, std::less<>>& training_values) {
    LabEcdfFit fit;
    for (const auto& [code, values] : training_values) {
        if (values.empty()) {
            fit.warnings.push_back("lab code " + code + " has no training values; dropped");
            continue;
        }
        std::vector<double> sorted = values;
        std::sort(sorted.begin(), sorted.end());
        const auto distinct = static_cast<std::size_t>(std::unique(sorted.begin(), sorted.end()) - sorted.begin());
        if (distinct < 10) {
            fit.bins.emplace(code, std::vector<double>{});
            continue;
        }
        sorted = values;
        std::sort(sorted.begin(), sorted.end());
        std::vector<double> edges;
        for (int decile = 1; decile <= 9; ++decile) {
            edges.push_back(nearest_rank_percentile(sorted, 10.0 * decile));
        }
        fit.bins.emplace(code, std::move(edges));
    }
    return fit;
}

std::optional<int> bin_lab_value(std::string_view code, double value, const LabBins& bins) {
    const auto it = bins.find(code);
    if (it == bins.end()) {
        return std::nullopt;
    }
    const auto& edges = it->second;
    return static_cast<int>(std::upper_bound(edges.begin(), edges.end(), value) - edges.begin());
}

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

namespace {

std::string lab_token(std::string_view code, int decile) {
    return "lab:" + std::string(code) + ":q" + std::to_string(decile);
}

std::string age_token(int bucket) {
    if (bucket == kAgeBuckets - 1) {
        return "[AGE:100+]";
    }
    const int lo = bucket * 5;
    std::string s = "[AGE:";
    s += (lo < 10 ? "0" : "") + std::to_string(lo) + "-" + (lo + 4 < 10 ? "0" : "") + std::to_string(lo + 4) + "]";
    return s;
}

struct SpecialEntry {
    std::string token;
    TokenInfo info;
};

std::vector<SpecialEntry> special_layout() {
    std::vector<SpecialEntry> out;
    out.push_back({"[PAD]", {TokenKind::pad, Domain::diagnosis, 0}});
    out.push_back({"[CLS]", {TokenKind::cls, Domain::diagnosis, 0}});
    out.push_back({"[SEP]", {TokenKind::sep, Domain::diagnosis, 0}});
    out.push_back({"[BOS/EOS]", {TokenKind::eos, Domain::diagnosis, 0}});
    for (int b = 0; b < 4; ++b) {
        out.push_back({"[T" + std::to_string(b) + "]", {TokenKind::time, Domain::diagnosis, b}});
    }
    for (VisitType v : kVisitTypes) {
        out.push_back({"[VT:" + std::string(to_string(v)) + "]",
                       {TokenKind::visit_type, Domain::diagnosis, static_cast<int>(v)}});
    }
    for (DischargeType d : kDischargeTypes) {
        out.push_back({"[DT:" + std::string(to_string(d)) + "]",
                       {TokenKind::discharge, Domain::diagnosis, static_cast<int>(d)}});
    }
    for (Sex s : kSexes) {
        out.push_back({"[SEX:" + std::string(to_string(s)) + "]", {TokenKind::sex, Domain::diagnosis, static_cast<int>(s)}});
    }
    for (int a = 0; a < kAgeBuckets; ++a) {
        out.push_back({age_token(a), {TokenKind::age, Domain::diagnosis, a}});
    }
    for (Domain d : kDomains) {
        out.push_back({"[UNK:" + std::string(domain_tag(d)) + "]", {TokenKind::unknown, d, 0}});
    }
    return out;
}

TokenInfo parse_code_token(std::string_view token) {
    const auto colon = token.find(':');
    if (colon == std::string_view::npos || colon + 1 >= token.size()) {
        throw DataError("malformed code token '" + std::string(token) + "'");
    }
    const std::string_view tag = token.substr(0, colon);
    for (Domain d : kDomains) {
        if (domain_tag(d) != tag) {
            continue;
        }
        TokenInfo info{TokenKind::code, d, 0};
        if (d == Domain::lab) {
            const auto q = token.rfind(":q");
            if (q == std::string_view::npos || q <= colon) {
                throw DataError("malformed lab token '" + std::string(token) + "'");
            }
            int decile = -1;
            const auto digits = token.substr(q + 2);
            auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), decile);
            if (ec != std::errc{} || ptr != digits.data() + digits.size() || decile < 0 || decile > 9) {
                throw DataError("malformed lab token '" + std::string(token) + "'");
            }
            info.index = decile;
        }
        return info;
    }
    throw DataError("unknown domain tag in token '" + std::string(token) + "'");
}

std::string format_double(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
}

double parse_double(std::string_view s, std::size_t line) {
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || ptr != s.data() + s.size()) {
        throw ParseError("bad number '" + std::string(s) + "'", line);
    }
    return v;
}

std::vector<std::string> split_tabs(const std::string& line) {
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
        const auto tab = line.find('\t', start);
        fields.push_back(line.substr(start, tab - start));
        if (tab == std::string::npos) {
            break;
        }
        start = tab + 1;
    }
    return fields;
}

}  // namespace

Vocabulary Vocabulary::assemble(std::vector<std::string> code_tokens, LabBins bins, double threshold,
                                IcdMapping mapping) {
    Vocabulary vocab;
    const auto layout = special_layout();
    for (const auto& entry : layout) {
        vocab.tokens_.push_back(entry.token);
        vocab.info_.push_back(entry.info);
    }
    vocab.special_count_ = layout.size();
    std::sort(code_tokens.begin(), code_tokens.end());
    code_tokens.erase(std::unique(code_tokens.begin(), code_tokens.end()), code_tokens.end());
    for (auto& token : code_tokens) {
        vocab.info_.push_back(parse_code_token(token));
        vocab.tokens_.push_back(std::move(token));
    }
    for (std::size_t i = 0; i < vocab.tokens_.size(); ++i) {
        const auto [it, inserted] = vocab.index_.emplace(vocab.tokens_[i], static_cast<TokenId>(i));
        if (!inserted) {
            throw DataError("duplicate token '" + vocab.tokens_[i] + "'");
        }
    }
    auto& sp = vocab.specials_;
    sp.pad = vocab.id("[PAD]");
    sp.cls = vocab.id("[CLS]");
    sp.sep = vocab.id("[SEP]");
    sp.eos = vocab.id("[BOS/EOS]");
    for (std::size_t i = 0; i < vocab.special_count_; ++i) {
        const TokenInfo& info = vocab.info_[i];
        const auto id = static_cast<TokenId>(i);
        switch (info.kind) {
            case TokenKind::time: sp.time[static_cast<std::size_t>(info.index)] = id; break;
            case TokenKind::visit_type: sp.visit_type[static_cast<std::size_t>(info.index)] = id; break;
            case TokenKind::discharge: sp.discharge[static_cast<std::size_t>(info.index)] = id; break;
            case TokenKind::sex: sp.sex[static_cast<std::size_t>(info.index)] = id; break;
            case TokenKind::age: sp.age[static_cast<std::size_t>(info.index)] = id; break;
            case TokenKind::unknown: sp.unknown[static_cast<std::size_t>(info.domain)] = id; break;
            default: break;
        }
    }
    vocab.lab_bins_ = std::move(bins);
    vocab.threshold_ = threshold;
    vocab.mapping_ = std::move(mapping);
    return vocab;
}

Vocabulary Vocabulary::build(const Corpus& training_corpus, const VocabularyOptions& options) {
    if (training_corpus.empty()) {
        throw DataError("cannot build a vocabulary from an empty corpus");
    }
    const auto retained = filter_infrequent(training_corpus, options.icd_mapping, options.frequency_threshold);

    std::map<std::string, std::vector<double>, std::less<>> lab_values;
    for (const auto& patient : training_corpus) {
        for (const auto& visit : patient.visits) {
            for (const auto& event : visit.events) {
                if (event.domain == Domain::lab && event.value && retained.contains(code_key(event, {}))) {
                    lab_values[event.code].push_back(*event.value);
                }
            }
        }
    }
    LabEcdfFit fit = fit_lab_ecdf(lab_values);

    std::vector<std::string> code_tokens;
    for (const auto& key : retained) {
        if (key.starts_with("lab:")) {
            const std::string code = key.substr(4);
            const auto it = fit.bins.find(code);
            if (it == fit.bins.end()) {
                continue;
            }
            const int n_bins = it->second.empty() ? 1 : 10;
            for (int q = 0; q < n_bins; ++q) {
                code_tokens.push_back(lab_token(code, q));
            }
        } else {
            code_tokens.push_back(key);
        }
    }
    Vocabulary vocab =
        assemble(std::move(code_tokens), std::move(fit.bins), options.frequency_threshold, options.icd_mapping);
    vocab.warnings_ = std::move(fit.warnings);
    return vocab;
}

std::optional<TokenId> Vocabulary::find(std::string_view token) const {
    const auto it = index_.find(std::string(token));
    if (it == index_.end()) {
        return std::nullopt;
    }
    return it->second;
}

TokenId Vocabulary::id(std::string_view token) const {
    if (auto id = find(token)) {
        return *id;
    }
    throw DataError("token '" + std::string(token) + "' is not in the vocabulary");
}

bool Vocabulary::is_event(TokenId id) const {
    const auto kind = info(id).kind;
    return kind == TokenKind::code || kind == TokenKind::unknown;
}

std::optional<TimeBucket> Vocabulary::as_time(TokenId id) const {
    const TokenInfo& i = info(id);
    if (i.kind != TokenKind::time) {
        return std::nullopt;
    }
    return static_cast<TimeBucket>(i.index);
}

TokenId Vocabulary::event_token(const ClinicalEvent& event) const {
    const TokenId unknown = specials_.unknown[static_cast<std::size_t>(event.domain)];
    if (event.domain == Domain::lab) {
        if (!event.value) {
            return unknown;
        }
        const auto decile = bin_lab_value(event.code, *event.value, lab_bins_);
        if (!decile) {
            return unknown;
        }
        const auto& edges = lab_bins_.find(event.code)->second;
        return find(lab_token(event.code, edges.empty() ? 0 : *decile)).value_or(unknown);
    }
    return find(code_key(event, mapping_)).value_or(unknown);
}

std::string Vocabulary::diagnosis_token(std::string_view category) { return "dx:" + std::string(category); }

std::optional<std::string> Vocabulary::diagnosis_category(TokenId id) const {
    const TokenInfo& i = info(id);
    if (i.kind != TokenKind::code || i.domain != Domain::diagnosis) {
        return std::nullopt;
    }
    return token(id).substr(3);
}

// ---------------------------------------------------------------------------
// Text serialization
// ---------------------------------------------------------------------------

void Vocabulary::write(std::ostream& out) const {
    out << "ehrgpt-vocab\t" << kVocabFormatVersion << '\n';
    out << "threshold\t" << format_double(threshold_) << '\n';
    out << "specials\t" << special_count_ << '\n';
    for (std::size_t i = 0; i < special_count_; ++i) {
        out << i << '\t' << tokens_[i] << '\n';
    }
    out << "codes\t" << tokens_.size() - special_count_ << '\n';
    for (std::size_t i = special_count_; i < tokens_.size(); ++i) {
        out << i << '\t' << tokens_[i] << '\n';
    }
    out << "labbins\t" << lab_bins_.size() << '\n';
    for (const auto& [code, edges] : lab_bins_) {
        out << code << '\t' << edges.size();
        for (double e : edges) {
            out << '\t' << format_double(e);
        }
        out << '\n';
    }
    out << "icdmap\t" << mapping_.size() << '\n';
    for (const auto& [icd9, icd10] : mapping_) {
        out << icd9 << '\t' << icd10 << '\n';
    }
    out << "end\n";
}

Vocabulary Vocabulary::read(std::istream& in) {
    std::string line;
    std::size_t line_no = 0;
    auto next = [&]() -> std::vector<std::string> {
        if (!std::getline(in, line)) {
            throw ParseError("unexpected end of vocabulary file", line_no + 1);
        }
        ++line_no;
        return split_tabs(line);
    };
    auto count_of = [&](const std::vector<std::string>& f, std::string_view section) {
        if (f.size() != 2 || f[0] != section) {
            throw ParseError("expected section '" + std::string(section) + "'", line_no);
        }
        std::size_t n = 0;
        auto [ptr, ec] = std::from_chars(f[1].data(), f[1].data() + f[1].size(), n);
        if (ec != std::errc{} || ptr != f[1].data() + f[1].size()) {
            throw ParseError("bad count '" + f[1] + "'", line_no);
        }
        return n;
    };

    auto f = next();
    if (f.size() != 2 || f[0] != "ehrgpt-vocab") {
        throw ParseError("not an ehrgpt vocabulary file", line_no);
    }
    if (f[1] != std::to_string(kVocabFormatVersion)) {
        throw ParseError("unsupported vocabulary version " + f[1], line_no);
    }
    f = next();
    if (f.size() != 2 || f[0] != "threshold") {
        throw ParseError("expected threshold", line_no);
    }
    const double threshold = parse_double(f[1], line_no);

    const auto layout = special_layout();
    const std::size_t n_specials = count_of(next(), "specials");
    if (n_specials != layout.size()) {
        throw ParseError("special token count mismatch", line_no);
    }
    for (std::size_t i = 0; i < n_specials; ++i) {
        f = next();
        if (f.size() != 2 || f[0] != std::to_string(i) || f[1] != layout[i].token) {
            throw ParseError("special token table does not match this library version", line_no);
        }
    }
    const std::size_t n_codes = count_of(next(), "codes");
    std::vector<std::string> codes;
    for (std::size_t i = 0; i < n_codes; ++i) {
        f = next();
        if (f.size() != 2 || f[0] != std::to_string(n_specials + i)) {
            throw ParseError("expected '<id>\\t<token>' with contiguous ids", line_no);
        }
        codes.push_back(f[1]);
    }
    if (!std::is_sorted(codes.begin(), codes.end())) {
        throw ParseError("code tokens are not in lexicographic id order", line_no);
    }
    const std::size_t n_bins = count_of(next(), "labbins");
    LabBins bins;
    for (std::size_t i = 0; i < n_bins; ++i) {
        f = next();
        if (f.size() < 2) {
            throw ParseError("malformed labbins row", line_no);
        }
        const auto k = static_cast<std::size_t>(parse_double(f[1], line_no));
        if ((k != 0 && k != 9) || f.size() != 2 + k) {
            throw ParseError("lab bins need 0 or 9 edges", line_no);
        }
        std::vector<double> edges;
        for (std::size_t e = 0; e < k; ++e) {
            edges.push_back(parse_double(f[2 + e], line_no));
        }
        if (!std::is_sorted(edges.begin(), edges.end())) {
            throw ParseError("lab bin edges must be nondecreasing", line_no);
        }
        bins.emplace(f[0], std::move(edges));
    }
    const std::size_t n_map = count_of(next(), "icdmap");
    IcdMapping mapping;
    for (std::size_t i = 0; i < n_map; ++i) {
        f = next();
        if (f.size() != 2) {
            throw ParseError("malformed icdmap row", line_no);
        }
        mapping.emplace(f[0], f[1]);
    }
    f = next();
    if (f.size() != 1 || f[0] != "end") {
        throw ParseError("expected 'end'", line_no);
    }
    try {
        return assemble(std::move(codes), std::move(bins), threshold, std::move(mapping));
    } catch (const DataError& e) {
        throw ParseError(e.what(), line_no);
    }
}

void Vocabulary::save(const std::filesystem::path& path) const {
    atomic_write(path, [&](std::ostream& out) { write(out); }, true);
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open vocabulary file " + path.string());
    }
    return read(in);
}

}  // namespace ehrgpt
