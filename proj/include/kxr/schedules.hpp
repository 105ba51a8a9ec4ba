// Learning-rate schedules.
#pragma once

#include <cstdint>

#include "kxr/common.hpp"

namespace kxr {

// base * factor^floor(epoch / period)
inline double step_lr(int64_t epoch, double base, double factor, int64_t period) {
  if (epoch < 0) throw UsageError("step_lr: epoch must be >= 0");
  if (period < 1) throw UsageError("step_lr: period must be >= 1");
  if (!(base > 0)) throw UsageError("step_lr: base must be positive");
  return base * std::pow(factor, static_cast<double>(epoch / period));
}

// Triangular wave: lr(0) = lr_min, lr(period/2) = lr_max, period-exact.
inline double cyclical_lr(int64_t iter, double lr_min, double lr_max, int64_t period) {
  if (iter < 0) throw UsageError("cyclical_lr: iter must be >= 0");
  if (period < 2) throw UsageError("cyclical_lr: period must be >= 2");
  if (!(lr_min > 0 && lr_min < lr_max)) throw UsageError("cyclical_lr: need 0 < lr_min < lr_max");
  const int64_t phase = iter % period;
  const int64_t half = period / 2;
  const double span = lr_max - lr_min;
  if (phase <= half) return lr_min + span * static_cast<double>(phase) / static_cast<double>(half);
  return lr_max - span * static_cast<double>(phase - half) / static_cast<double>(period - half);
}

}  // namespace kxr
