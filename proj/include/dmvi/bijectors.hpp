#pragma once

#include <cmath>
#include <stdexcept>
#include <string>

#include "dmvi/tensor.hpp"

namespace dmvi {

// Unconstraining maps. LogExp carries theta > 0 to xi = log(theta); the
// log-determinant of the inverse at xi is xi itself.
enum class BijectorKind { Identity, LogExp };

enum class BijectorDirection { Forward, Inverse };

inline double bijector_apply(BijectorKind kind, BijectorDirection dir, double x) {
  switch (kind) {
    case BijectorKind::Identity:
      return x;
    case BijectorKind::LogExp:
      if (dir == BijectorDirection::Forward) {
        if (!(x > 0.0))
          throw std::domain_error("LogExp forward requires theta > 0");
        return std::log(x);
      }
      return std::exp(x);
  }
  throw ConfigError("unknown bijector kind");
}

inline double bijector_log_det_inverse(BijectorKind kind, double xi) {
  switch (kind) {
    case BijectorKind::Identity:
      return 0.0;
    case BijectorKind::LogExp:
      return xi;  // log d/dxi exp(xi)
  }
  throw ConfigError("unknown bijector kind");
}

inline std::string bijector_name(BijectorKind kind) {
  return kind == BijectorKind::Identity ? "identity" : "log_exp";
}

}  // namespace dmvi
