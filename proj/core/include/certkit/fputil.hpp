#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>

namespace certkit {

// Monotone integer rank of a float: adjacent representable values differ by 1.
inline int64_t ulp_rank(float x) {
  uint32_t b;
  std::memcpy(&b, &x, sizeof b);
  if (b & 0x80000000u) return -static_cast<int64_t>(b & 0x7FFFFFFFu);
  return static_cast<int64_t>(b);
}

inline int64_t ulp_rank(double x) {
  uint64_t b;
  std::memcpy(&b, &x, sizeof b);
  if (b & 0x8000000000000000ull) return -static_cast<int64_t>(b & 0x7FFFFFFFFFFFFFFFull);
  return static_cast<int64_t>(b);
}

// Number of representable values between a and b (0 when equal; +0 and -0
// count as equal).  NaN operands give INT64_MAX.
template <class T>
int64_t ulps_between(T a, T b) {
  if (std::isnan(a) || std::isnan(b)) return std::numeric_limits<int64_t>::max();
  const int64_t ra = ulp_rank(a), rb = ulp_rank(b);
  return ra > rb ? ra - rb : rb - ra;
}

}  // namespace certkit
