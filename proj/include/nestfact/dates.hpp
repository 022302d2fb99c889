#pragma once

// Civil-date arithmetic (Hinnant's algorithm) plus the week convention used
// throughout: a week starts on Tuesday, so a Tuesday and the following
// Wednesday always share a week index. Price changes land on Tuesday nights,
// which makes (Tue, Wed) the natural within-week contrast.

#include <cstdio>
#include <cstdint>
#include <string>

#include "nestfact/common.hpp"

namespace nestfact {

// Days since 1970-01-01 for a proleptic Gregorian date.
inline std::int64_t days_from_civil(int y, int m, int d) {
  y -= m <= 2;
  const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
  const unsigned yoe = static_cast<unsigned>(y - era * 400);
  const unsigned doy = (153u * (m + (m > 2 ? -3 : 9)) + 2u) / 5u + d - 1;
  const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
  return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

inline void civil_from_days(std::int64_t z, int& y, int& m, int& d) {
  z += 719468;
  const std::int64_t era = (z >= 0 ? z : z - 146096) / 146097;
  const unsigned doe = static_cast<unsigned>(z - era * 146097);
  const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
  const std::int64_t yy = static_cast<std::int64_t>(yoe) + era * 400;
  const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
  const unsigned mp = (5 * doy + 2) / 153;
  d = static_cast<int>(doy - (153 * mp + 2) / 5 + 1);
  m = static_cast<int>(mp + (mp < 10 ? 3 : -9));
  y = static_cast<int>(yy + (m <= 2));
}

// 0=Sunday .. 6=Saturday (1970-01-01 was a Thursday).
inline int weekday_of(std::int64_t days) {
  return static_cast<int>(((days % 7) + 11) % 7);
}

inline constexpr int kTuesday = 2;
inline constexpr int kWednesday = 3;

// 2000-01-04 was a Tuesday; weeks are counted from it so that each week index
// spans Tue..Mon and pairs a Tuesday with the Wednesday right after it.
inline constexpr std::int64_t kWeekAnchor = 10960;

inline int week_of(std::int64_t days) {
  std::int64_t delta = days - kWeekAnchor;
  return static_cast<int>(delta >= 0 ? delta / 7 : (delta - 6) / 7);
}

// Parses strict "YYYY-MM-DD". Throws DataError on malformed input.
inline std::int64_t parse_iso_date(const std::string& s) {
  if (s.size() != 10 || s[4] != '-' || s[7] != '-') throw DataError("bad date: " + s);
  for (int i : {0, 1, 2, 3, 5, 6, 8, 9})
    if (s[i] < '0' || s[i] > '9') throw DataError("bad date: " + s);
  const int y = (s[0] - '0') * 1000 + (s[1] - '0') * 100 + (s[2] - '0') * 10 + (s[3] - '0');
  const int m = (s[5] - '0') * 10 + (s[6] - '0');
  const int d = (s[8] - '0') * 10 + (s[9] - '0');
  if (m < 1 || m > 12 || d < 1 || d > 31) throw DataError("bad date: " + s);
  return days_from_civil(y, m, d);
}

inline std::string format_iso_date(std::int64_t days) {
  int y, m, d;
  civil_from_days(days, y, m, d);
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%04d-%02d-%02d", y, m, d);
  return buf;
}

}  // namespace nestfact
