#include "ehrgpt/sequencer.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <tuple>

#include "ehrgpt/errors.hpp"
#include "ehrgpt/io.hpp"

namespace ehrgpt {

namespace {

struct EncodedVisit {
    std::vector<TokenId> body;  // VT events DT? SEP, without the time token
    TokenId time_token = 0;
    Date date;
    std::int32_t index = 0;
};

EncodedVisit encode_visit(const Visit& visit, std::int32_t index, const Vocabulary& vocab) {
    const SpecialTokens& sp = vocab.specials();
    EncodedVisit out;
    out.date = visit.start_date;
    out.index = index;
    out.body.push_back(sp.visit_type[static_cast<std::size_t>(visit.visit_type)]);

    std::vector<std::tuple<Date, Domain, TokenId>> events;
    events.reserve(visit.events.size());
    for (const auto& e : visit.events) {
        events.emplace_back(e.timestamp, e.domain, vocab.event_token(e));
    }
    std::sort(events.begin(), events.end());
    for (const auto& [ts, domain, id] : events) {
        out.body.push_back(id);
    }
    if (visit.discharge_type) {
        out.body.push_back(sp.discharge[static_cast<std::size_t>(*visit.discharge_type)]);
    }
    out.body.push_back(sp.sep);
    return out;
}

}  // namespace

TokenSequence encode_patient(const PatientRecord& patient, const Vocabulary& vocab, std::optional<Date> as_of,
                             std::size_t context) {
    if (context < kDemographicTokens + 4) {
        throw ConfigError("context window too small for a single visit");
    }
    const SpecialTokens& sp = vocab.specials();
    std::vector<EncodedVisit> visits;
    for (std::size_t v = 0; v < patient.visits.size(); ++v) {
        const Visit& visit = patient.visits[v];
        if (as_of && visit.start_date > *as_of) {
            break;
        }
        visits.push_back(encode_visit(visit, static_cast<std::int32_t>(v), vocab));
        if (!visits.back().body.empty() && visits.size() > 1) {
            const auto gap = days_between(visits[visits.size() - 2].date, visit.start_date);
            visits.back().time_token = sp.time[static_cast<std::size_t>(time_bucket(gap))];
        }
    }
    if (visits.empty()) {
        throw DataError("patient " + patient.patient_id + " has no visit on or before the cutoff");
    }

    // Total length with the first kept visit carrying no time token.
    std::size_t first = 0;
    std::size_t total = kDemographicTokens;
    for (std::size_t v = 0; v < visits.size(); ++v) {
        total += visits[v].body.size() + (v == 0 ? 0 : 1);
    }
    while (total > context && first + 1 < visits.size()) {
        total -= visits[first].body.size();
        ++first;
        total -= 1;  // the new first visit loses its time token
    }
    if (total > context) {
        // A single visit longer than the window: keep its leading events.
        auto& body = visits[first].body;
        const std::size_t excess = total - context;
        const bool has_dt = vocab.info(body[body.size() - 2]).kind == TokenKind::discharge;
        const auto tail = body.end() - (has_dt ? 2 : 1);
        body.erase(tail - static_cast<std::ptrdiff_t>(excess), tail);
    }

    TokenSequence seq;
    seq.patient_id = patient.patient_id;
    const Date first_date = visits[first].date;
    const int age = first_date.year() - patient.birth_year;
    auto emit = [&](TokenId id, Date date, std::int32_t index) {
        seq.token_ids.push_back(id);
        seq.token_dates.push_back(date);
        seq.visit_index.push_back(index);
    };
    emit(sp.cls, first_date, visits[first].index);
    emit(sp.age[static_cast<std::size_t>(age_bucket(age))], first_date, visits[first].index);
    emit(sp.sex[static_cast<std::size_t>(patient.sex)], first_date, visits[first].index);
    for (std::size_t v = first; v < visits.size(); ++v) {
        if (v != first) {
            emit(visits[v].time_token, visits[v].date, visits[v].index);
        }
        for (TokenId id : visits[v].body) {
            emit(id, visits[v].date, visits[v].index);
        }
    }
    return seq;
}

DecodedTimeline decode_tokens(std::span<const TokenId> tokens, const Vocabulary& vocab) {
    const auto n_vocab = static_cast<TokenId>(vocab.size());
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] < 0 || tokens[i] >= n_vocab) {
            throw GrammarError("token id " + std::to_string(tokens[i]) + " outside the vocabulary", i);
        }
    }
    if (tokens.size() < kDemographicTokens) {
        throw GrammarError("sequence shorter than the demographic header", tokens.size());
    }
    if (vocab.info(tokens[0]).kind != TokenKind::cls) {
        throw GrammarError("expected [CLS]", 0);
    }
    DecodedTimeline out;
    if (vocab.info(tokens[1]).kind != TokenKind::age) {
        throw GrammarError("expected an age token", 1);
    }
    out.age_bucket = vocab.info(tokens[1]).index;
    if (vocab.info(tokens[2]).kind != TokenKind::sex) {
        throw GrammarError("expected a sex token", 2);
    }
    out.sex = static_cast<Sex>(vocab.info(tokens[2]).index);

    enum class State { visit_start, after_time, after_type, in_events, after_discharge };
    State state = State::visit_start;
    for (std::size_t pos = kDemographicTokens; pos < tokens.size(); ++pos) {
        const TokenInfo& info = vocab.info(tokens[pos]);
        const std::string name = vocab.token(tokens[pos]);
        switch (state) {
            case State::visit_start:
                out.visits.push_back(DecodedVisit{});
                out.visits.back().first_position = pos;
                out.visits.back().open = true;
                if (info.kind == TokenKind::time) {
                    if (out.visits.size() == 1) {
                        throw GrammarError("time token on the first visit", pos);
                    }
                    out.visits.back().time = static_cast<TimeBucket>(info.index);
                    state = State::after_time;
                    break;
                }
                if (info.kind == TokenKind::visit_type) {
                    if (out.visits.size() > 1) {
                        throw GrammarError("visit without a leading time token", pos);
                    }
                    out.visits.back().visit_type = static_cast<VisitType>(info.index);
                    state = State::after_type;
                    break;
                }
                throw GrammarError("expected a visit start, got " + name, pos);
            case State::after_time:
                if (info.kind != TokenKind::visit_type) {
                    throw GrammarError("expected a visit-type token after the time token, got " + name, pos);
                }
                out.visits.back().visit_type = static_cast<VisitType>(info.index);
                state = State::after_type;
                break;
            case State::after_type:
            case State::in_events:
                if (info.kind == TokenKind::code || info.kind == TokenKind::unknown) {
                    out.visits.back().events.push_back(tokens[pos]);
                    state = State::in_events;
                    break;
                }
                if (state == State::in_events && info.kind == TokenKind::discharge) {
                    if (out.visits.back().visit_type != VisitType::inpatient) {
                        throw GrammarError("discharge token on a non-inpatient visit", pos);
                    }
                    out.visits.back().discharge = static_cast<DischargeType>(info.index);
                    state = State::after_discharge;
                    break;
                }
                if (state == State::in_events && info.kind == TokenKind::sep) {
                    out.visits.back().open = false;
                    state = State::visit_start;
                    break;
                }
                throw GrammarError(state == State::after_type ? "visit without events, got " + name
                                                               : "unexpected " + name + " inside a visit",
                                   pos);
            case State::after_discharge:
                if (info.kind != TokenKind::sep) {
                    throw GrammarError("expected [SEP] after the discharge token, got " + name, pos);
                }
                out.visits.back().open = false;
                state = State::visit_start;
                break;
        }
    }
    return out;
}

std::vector<std::string> validate_sequence(const TokenSequence& seq, const Vocabulary& vocab, std::size_t context) {
    std::vector<std::string> problems;
    auto report = [&](const std::string& msg) { problems.push_back(seq.patient_id + ": " + msg); };
    if (seq.token_ids.size() != seq.token_dates.size() || seq.token_ids.size() != seq.visit_index.size()) {
        report("parallel lists differ in length");
        return problems;
    }
    if (seq.size() > context) {
        report("length " + std::to_string(seq.size()) + " exceeds the context window");
    }
    for (std::size_t i = 1; i < seq.size(); ++i) {
        if (seq.visit_index[i] < seq.visit_index[i - 1]) {
            report("visit_index decreases at position " + std::to_string(i));
        }
        if (seq.token_dates[i] < seq.token_dates[i - 1]) {
            report("token_dates decrease at position " + std::to_string(i));
        }
    }
    DecodedTimeline timeline;
    try {
        timeline = decode_tokens(seq.token_ids, vocab);
    } catch (const GrammarError& e) {
        report(e.what());
        return problems;
    }
    if (timeline.visits.empty()) {
        report("no visits");
    }
    for (std::size_t v = 0; v < timeline.visits.size(); ++v) {
        const DecodedVisit& visit = timeline.visits[v];
        if (visit.open) {
            report("final visit lacks [SEP]");
            continue;
        }
        if ((visit.visit_type == VisitType::inpatient) != visit.discharge.has_value()) {
            report("visit at position " + std::to_string(visit.first_position) +
                   ": discharge token must be present iff inpatient");
        }
        if (v > 0) {
            const Date prev = seq.token_dates[timeline.visits[v - 1].first_position];
            const Date cur = seq.token_dates[visit.first_position];
            if (visit.time != time_bucket(days_between(prev, cur))) {
                report("time token at position " + std::to_string(visit.first_position) +
                       " disagrees with the visit dates");
            }
        }
    }
    return problems;
}

PatientRecord truncate_history_at(const PatientRecord& patient, Date cutoff) {
    PatientRecord out;
    out.patient_id = patient.patient_id;
    out.birth_year = patient.birth_year;
    out.sex = patient.sex;
    for (const auto& visit : patient.visits) {
        if (visit.start_date > cutoff) {
            break;
        }
        out.visits.push_back(visit);
    }
    if (out.visits.empty()) {
        throw DataError("patient " + patient.patient_id + " has no visit on or before " + cutoff.iso());
    }
    return out;
}

// ---------------------------------------------------------------------------
// Encoded dataset file
// ---------------------------------------------------------------------------

namespace {

template <class T, class Fn>
void write_list(std::ostream& out, const std::vector<T>& values, Fn&& fmt) {
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (i > 0) {
            out << ' ';
        }
        out << fmt(values[i]);
    }
}

template <class Fn>
void for_each_word(const std::string& field, Fn&& fn) {
    std::size_t start = 0;
    while (start < field.size()) {
        auto end = field.find(' ', start);
        if (end == std::string::npos) {
            end = field.size();
        }
        if (end > start) {
            fn(std::string_view(field).substr(start, end - start));
        }
        start = end + 1;
    }
}

template <class Int>
Int parse_int(std::string_view s, std::size_t line) {
    Int v{};
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || ptr != s.data() + s.size()) {
        throw ParseError("bad integer '" + std::string(s) + "'", line);
    }
    return v;
}

}  // namespace

void write_encoded(std::ostream& out, std::span<const TokenSequence> sequences) {
    out << "ehrgpt-encoded\t" << kEncodedFormatVersion << '\t' << sequences.size() << '\n';
    for (const auto& s : sequences) {
        out << s.patient_id << '\t';
        write_list(out, s.token_ids, [](TokenId id) { return id; });
        out << '\t';
        write_list(out, s.token_dates, [](Date d) { return d.iso(); });
        out << '\t';
        write_list(out, s.visit_index, [](std::int32_t v) { return v; });
        out << '\n';
    }
}

std::vector<TokenSequence> read_encoded(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) {
        throw ParseError("missing encoded-dataset header", 1);
    }
    std::size_t line_no = 1;
    std::size_t expected = 0;
    {
        std::istringstream header(line);
        std::string magic;
        int version = 0;
        if (!(header >> magic >> version >> expected) || magic != "ehrgpt-encoded") {
            throw ParseError("not an ehrgpt encoded-dataset file", line_no);
        }
        if (version != kEncodedFormatVersion) {
            throw ParseError("unsupported encoded-dataset version " + std::to_string(version), line_no);
        }
    }
    std::vector<TokenSequence> out;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
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
        if (fields.size() != 4) {
            throw ParseError("expected 4 tab-separated fields", line_no);
        }
        TokenSequence s;
        s.patient_id = fields[0];
        for_each_word(fields[1], [&](std::string_view w) { s.token_ids.push_back(parse_int<TokenId>(w, line_no)); });
        for_each_word(fields[2], [&](std::string_view w) {
            try {
                s.token_dates.push_back(Date::parse(w));
            } catch (const DataError& e) {
                throw ParseError(e.what(), line_no);
            }
        });
        for_each_word(fields[3],
                      [&](std::string_view w) { s.visit_index.push_back(parse_int<std::int32_t>(w, line_no)); });
        if (s.token_ids.size() != s.token_dates.size() || s.token_ids.size() != s.visit_index.size()) {
            throw ParseError("token, date and visit lists differ in length", line_no);
        }
        out.push_back(std::move(s));
    }
    if (out.size() != expected) {
        throw ParseError("header announces " + std::to_string(expected) + " sequences, found " +
                             std::to_string(out.size()),
                         line_no);
    }
    return out;
}

void save_encoded(std::span<const TokenSequence> sequences, const std::filesystem::path& path) {
    atomic_write(path, [&](std::ostream& out) { write_encoded(out, sequences); }, true);
}

std::vector<TokenSequence> load_encoded(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open encoded dataset " + path.string());
    }
    return read_encoded(in);
}

}  // namespace ehrgpt
