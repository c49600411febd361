#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace oracle {

// Pearson correlation between slice i of a and slice k of b, (z, y, x) layout.
inline double slice_correlation(const std::vector<float>& a, const std::vector<float>& b, int64_t slice_size, int64_t i,
                                int64_t k) {
  double ma = 0, mb = 0;
  for (int64_t v = 0; v < slice_size; ++v) {
    ma += a[static_cast<size_t>(i * slice_size + v)];
    mb += b[static_cast<size_t>(k * slice_size + v)];
  }
  ma /= slice_size;
  mb /= slice_size;
  double sab = 0, saa = 0, sbb = 0;
  for (int64_t v = 0; v < slice_size; ++v) {
    const double da = a[static_cast<size_t>(i * slice_size + v)] - ma;
    const double db = b[static_cast<size_t>(k * slice_size + v)] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  return sab / std::sqrt(saa * sbb + 1e-300);
}

}  // namespace oracle
