#pragma once

#include <array>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace voxdiff {

// Scalar type for the tensor engine. Tests and oracles assume the 64-bit
// default; define VOXDIFF_REAL32 to trade precision for training speed.
#ifdef VOXDIFF_REAL32
using real = float;
#else
using real = double;
#endif

inline constexpr const char* kVersion = "voxdiff 0.1.0";

// log(1e-30); probability floor used by all log-space distribution code.
inline constexpr double kMinLogProb = -69.07755278982137;
inline constexpr double kMinProb = 1e-30;

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Bad arguments, violated preconditions, missing prerequisites. CLI exit 1.
struct UsageError : Error {
  using Error::Error;
};

// Malformed files, magic mismatches, non-finite payloads. CLI exit 2.
struct DataError : Error {
  using Error::Error;
};

// Surface extraction on a grid without any zero crossing.
struct EmptySurfaceError : Error {
  using Error::Error;
};

// Detokenize called on a map that still contains the mask index.
struct UnresolvedMaskError : Error {
  using Error::Error;
};

// Posterior conditioned on a state unreachable under the chain.
struct InconsistentStateError : Error {
  using Error::Error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw UsageError(msg);
}

inline void require_data(bool cond, const std::string& msg) {
  if (!cond) throw DataError(msg);
}

using Vec3 = std::array<double, 3>;
using Dims3 = std::array<int64_t, 3>;

inline int64_t volume(const Dims3& d) { return d[0] * d[1] * d[2]; }

}  // namespace voxdiff
