#pragma once

#include <chrono>
#include <compare>
#include <cstdint>
#include <string>
#include <string_view>

namespace ehrgpt {

/// Calendar day, stored as days since 1970-01-01.
struct Date {
    std::int32_t days = 0;

    friend auto operator<=>(const Date&, const Date&) = default;

    static Date from_ymd(int year, unsigned month, unsigned day);
    /// Parses YYYY-MM-DD. Throws DataError on anything else.
    static Date parse(std::string_view iso);

    std::string iso() const;
    int year() const;

    Date plus_days(std::int32_t n) const { return Date{days + n}; }
};

inline std::int32_t days_between(Date from, Date to) { return to.days - from.days; }

}  // namespace ehrgpt
