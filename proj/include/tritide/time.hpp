#pragma once

#include <charconv>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <string>
#include <string_view>

namespace tritide {

/// UTC instant with one-second resolution.
using Timestamp = std::chrono::sys_seconds;
using Seconds = std::chrono::seconds;
using Date = std::chrono::sys_days;

/// Seconds after midnight of a service day. GTFS allows values past 24:00:00.
struct TimeOfDay {
    std::int64_t seconds = 0;

    friend auto operator<=>(const TimeOfDay&, const TimeOfDay&) = default;

    int hour() const { return static_cast<int>(seconds / 3600); }
};

namespace detail {

inline std::optional<int> parse_fixed_int(std::string_view s) {
    if (s.empty()) {
        return std::nullopt;
    }
    int value = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
    if (ec != std::errc{} || ptr != s.data() + s.size()) {
        return std::nullopt;
    }
    return value;
}

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) {
        s.remove_prefix(1);
    }
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) {
        s.remove_suffix(1);
    }
    return s;
}

} // namespace detail

/// "HH:MM:SS" or "H:MM:SS"; hours may exceed 23.
inline std::optional<TimeOfDay> parse_time_of_day(std::string_view text) {
    text = detail::trim(text);
    auto c1 = text.find(':');
    if (c1 == std::string_view::npos) {
        return std::nullopt;
    }
    auto c2 = text.find(':', c1 + 1);
    if (c2 == std::string_view::npos) {
        return std::nullopt;
    }
    auto h = detail::parse_fixed_int(text.substr(0, c1));
    auto m = detail::parse_fixed_int(text.substr(c1 + 1, c2 - c1 - 1));
    auto s = detail::parse_fixed_int(text.substr(c2 + 1));
    if (!h || !m || !s || *h < 0 || *m < 0 || *m > 59 || *s < 0 || *s > 59) {
        return std::nullopt;
    }
    return TimeOfDay{*h * 3600LL + *m * 60LL + *s};
}

inline std::string format_time_of_day(TimeOfDay t) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%02lld:%02lld:%02lld", static_cast<long long>(t.seconds / 3600),
                  static_cast<long long>((t.seconds / 60) % 60), static_cast<long long>(t.seconds % 60));
    return buf;
}

/// "YYYY-MM-DD"
inline std::optional<Date> parse_date(std::string_view text) {
    text = detail::trim(text);
    if (text.size() != 10 || text[4] != '-' || text[7] != '-') {
        // GTFS calendar dates are "YYYYMMDD".
        if (text.size() == 8) {
            auto y = detail::parse_fixed_int(text.substr(0, 4));
            auto m = detail::parse_fixed_int(text.substr(4, 2));
            auto d = detail::parse_fixed_int(text.substr(6, 2));
            if (!y || !m || !d) {
                return std::nullopt;
            }
            std::chrono::year_month_day ymd{std::chrono::year{*y}, std::chrono::month{static_cast<unsigned>(*m)},
                                            std::chrono::day{static_cast<unsigned>(*d)}};
            if (!ymd.ok()) {
                return std::nullopt;
            }
            return Date{ymd};
        }
        return std::nullopt;
    }
    auto y = detail::parse_fixed_int(text.substr(0, 4));
    auto m = detail::parse_fixed_int(text.substr(5, 2));
    auto d = detail::parse_fixed_int(text.substr(8, 2));
    if (!y || !m || !d) {
        return std::nullopt;
    }
    std::chrono::year_month_day ymd{std::chrono::year{*y}, std::chrono::month{static_cast<unsigned>(*m)},
                                    std::chrono::day{static_cast<unsigned>(*d)}};
    if (!ymd.ok()) {
        return std::nullopt;
    }
    return Date{ymd};
}

inline std::string format_date(Date d) {
    std::chrono::year_month_day ymd{d};
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(ymd.year()),
                  static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()));
    return buf;
}

/// GTFS "YYYYMMDD".
inline std::string format_date_compact(Date d) {
    std::chrono::year_month_day ymd{d};
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04d%02u%02u", static_cast<int>(ymd.year()), static_cast<unsigned>(ymd.month()),
                  static_cast<unsigned>(ymd.day()));
    return buf;
}

/// ISO-8601 "YYYY-MM-DDTHH:MM:SS" with optional "Z" or "+hh:mm"/"-hh:mm".
/// Stamps without a zone designator are read in `default_offset` (local = UTC + offset).
inline std::optional<Timestamp> parse_timestamp(std::string_view text, Seconds default_offset = Seconds{0}) {
    text = detail::trim(text);
    if (text.size() < 19 || (text[10] != 'T' && text[10] != ' ')) {
        return std::nullopt;
    }
    auto date = parse_date(text.substr(0, 10));
    if (!date || text[13] != ':' || text[16] != ':') {
        return std::nullopt;
    }
    auto h = detail::parse_fixed_int(text.substr(11, 2));
    auto m = detail::parse_fixed_int(text.substr(14, 2));
    auto s = detail::parse_fixed_int(text.substr(17, 2));
    if (!h || !m || !s || *h > 23 || *m > 59 || *s > 60) {
        return std::nullopt;
    }
    auto rest = text.substr(19);
    Seconds offset = default_offset;
    if (rest == "Z" || rest == "z") {
        offset = Seconds{0};
    } else if (!rest.empty()) {
        if (rest.size() != 6 || (rest[0] != '+' && rest[0] != '-') || rest[3] != ':') {
            return std::nullopt;
        }
        auto oh = detail::parse_fixed_int(rest.substr(1, 2));
        auto om = detail::parse_fixed_int(rest.substr(4, 2));
        if (!oh || !om || *oh > 23 || *om > 59) {
            return std::nullopt;
        }
        auto magnitude = Seconds{*oh * 3600 + *om * 60};
        offset = rest[0] == '+' ? magnitude : -magnitude;
    }
    Timestamp local = std::chrono::time_point_cast<Seconds>(*date) + Seconds{*h * 3600 + *m * 60 + *s};
    return local - offset;
}

inline std::string format_timestamp(Timestamp t) {
    auto day = std::chrono::floor<std::chrono::days>(t);
    auto tod = (t - day).count();
    return format_date(day) + "T" + format_time_of_day(TimeOfDay{tod}) + "Z";
}

inline std::int64_t epoch_seconds(Timestamp t) { return t.time_since_epoch().count(); }

inline Timestamp from_epoch(std::int64_t s) { return Timestamp{Seconds{s}}; }

/// Local calendar date of an instant given the feed's UTC offset.
inline Date local_date(Timestamp t, Seconds offset = Seconds{0}) {
    return std::chrono::floor<std::chrono::days>(t + offset);
}

inline TimeOfDay local_time_of_day(Timestamp t, Seconds offset = Seconds{0}) {
    auto local = t + offset;
    return TimeOfDay{(local - std::chrono::floor<std::chrono::days>(local)).count()};
}

/// The UTC instant of `tod` on service day `date`.
inline Timestamp at(Date date, TimeOfDay tod, Seconds offset = Seconds{0}) {
    return std::chrono::time_point_cast<Seconds>(date) + Seconds{tod.seconds} - offset;
}

} // namespace tritide
