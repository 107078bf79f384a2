#pragma once

#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>

namespace mstgat {

// ISO-8601 wall-clock timestamps ("YYYY-MM-DDTHH:MM:SS", 'T' or ' '
// separator, optional trailing 'Z') converted to seconds since the Unix
// epoch. Everything is naive UTC; the pipeline never does timezone math.

namespace detail {

// Howard Hinnant's days-from-civil.
inline std::int64_t days_from_civil(std::int64_t y, std::int64_t m, std::int64_t d) {
    y -= m <= 2;
    const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
    const std::int64_t yoe = y - era * 400;
    const std::int64_t doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
    const std::int64_t doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    return era * 146097 + doe - 719468;
}

inline void civil_from_days(std::int64_t z, std::int64_t& y, std::int64_t& m, std::int64_t& d) {
    z += 719468;
    const std::int64_t era = (z >= 0 ? z : z - 146096) / 146097;
    const std::int64_t doe = z - era * 146097;
    const std::int64_t yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
    y = yoe + era * 400;
    const std::int64_t doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    const std::int64_t mp = (5 * doy + 2) / 153;
    d = doy - (153 * mp + 2) / 5 + 1;
    m = mp + (mp < 10 ? 3 : -9);
    y += m <= 2;
}

}  // namespace detail

inline std::int64_t parse_timestamp(const std::string& s) {
    int y = 0, mo = 0, d = 0, h = 0, mi = 0, se = 0;
    char sep = 0;
    char tail[4] = {0, 0, 0, 0};
    const int got = std::sscanf(s.c_str(), "%4d-%2d-%2d%c%2d:%2d:%2d%1s", &y, &mo, &d, &sep, &h,
                                &mi, &se, tail);
    const bool sep_ok = sep == 'T' || sep == ' ';
    const bool tail_ok = got == 7 || (got == 8 && tail[0] == 'Z');
    if (got < 7 || !sep_ok || !tail_ok || mo < 1 || mo > 12 || d < 1 || d > 31 || h > 23 ||
        mi > 59 || se > 60) {
        throw std::invalid_argument("bad timestamp \"" + s + "\" (expected YYYY-MM-DDTHH:MM:SS)");
    }
    return detail::days_from_civil(y, mo, d) * 86400 + h * 3600 + mi * 60 + se;
}

inline std::string format_timestamp(std::int64_t epoch_s) {
    std::int64_t days = epoch_s / 86400;
    std::int64_t rem = epoch_s % 86400;
    if (rem < 0) {
        rem += 86400;
        days -= 1;
    }
    std::int64_t y, m, d;
    detail::civil_from_days(days, y, m, d);
    char buf[72];
    std::snprintf(buf, sizeof buf, "%04lld-%02lld-%02lldT%02lld:%02lld:%02lld",
                  static_cast<long long>(y), static_cast<long long>(m),
                  static_cast<long long>(d), static_cast<long long>(rem / 3600),
                  static_cast<long long>((rem / 60) % 60), static_cast<long long>(rem % 60));
    return buf;
}

}  // namespace mstgat
