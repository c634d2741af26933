#include "ehrgpt/date.hpp"

#include <charconv>

#include "ehrgpt/errors.hpp"

namespace ehrgpt {

namespace chr = std::chrono;

Date Date::from_ymd(int year, unsigned month, unsigned day) {
    const chr::year_month_day ymd{chr::year{year}, chr::month{month}, chr::day{day}};
    if (!ymd.ok()) {
        throw DataError("invalid calendar date");
    }
    return Date{static_cast<std::int32_t>(chr::sys_days{ymd}.time_since_epoch().count())};
}

Date Date::parse(std::string_view iso) {
    if (iso.size() != 10 || iso[4] != '-' || iso[7] != '-') {
        throw DataError("expected YYYY-MM-DD, got '" + std::string(iso) + "'");
    }
    auto field = [&](std::size_t pos, std::size_t len) {
        int v = 0;
        auto [ptr, ec] = std::from_chars(iso.data() + pos, iso.data() + pos + len, v);
        if (ec != std::errc{} || ptr != iso.data() + pos + len) {
            throw DataError("expected YYYY-MM-DD, got '" + std::string(iso) + "'");
        }
        return v;
    };
    return from_ymd(field(0, 4), static_cast<unsigned>(field(5, 2)), static_cast<unsigned>(field(8, 2)));
}

std::string Date::iso() const {
    const chr::year_month_day ymd{chr::sys_days{chr::days{days}}};
    char buf[16];
    const int y = static_cast<int>(ymd.year());
    const unsigned m = static_cast<unsigned>(ymd.month());
    const unsigned d = static_cast<unsigned>(ymd.day());
    buf[0] = static_cast<char>('0' + (y / 1000) % 10);
    buf[1] = static_cast<char>('0' + (y / 100) % 10);
    buf[2] = static_cast<char>('0' + (y / 10) % 10);
    buf[3] = static_cast<char>('0' + y % 10);
    buf[4] = '-';
    buf[5] = static_cast<char>('0' + m / 10);
    buf[6] = static_cast<char>('0' + m % 10);
    buf[7] = '-';
    buf[8] = static_cast<char>('0' + d / 10);
    buf[9] = static_cast<char>('0' + d % 10);
    return std::string(buf, 10);
}

int Date::year() const {
    const chr::year_month_day ymd{chr::sys_days{chr::days{days}}};
    return static_cast<int>(ymd.year());
}

}  // namespace ehrgpt
