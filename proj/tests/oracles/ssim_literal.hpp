#pragma once

#include <cmath>
#include <vector>

namespace oracle {

// SSIM straight from the definition: for every fully contained window,
// weighted local means, variances and covariance, then the mean of the map.
inline double ssim_literal(const std::vector<double>& a, const std::vector<double>& b, int h, int w, int win = 7,
                           double sigma = 1.5, double k1 = 0.01, double k2 = 0.03, double range = 1.0) {
  std::vector<double> g(static_cast<size_t>(win * win));
  const int r = win / 2;
  double gs = 0.0;
  for (int i = 0; i < win; ++i)
    for (int j = 0; j < win; ++j) {
      const double v = std::exp(-((i - r) * (i - r) + (j - r) * (j - r)) / (2.0 * sigma * sigma));
      g[static_cast<size_t>(i * win + j)] = v;
      gs += v;
    }
  for (auto& v : g) v /= gs;
  const double c1 = (k1 * range) * (k1 * range);
  const double c2 = (k2 * range) * (k2 * range);
  double total = 0.0;
  int count = 0;
  for (int y = 0; y + win <= h; ++y)
    for (int x = 0; x + win <= w; ++x) {
      double ma = 0, mb = 0;
      for (int i = 0; i < win; ++i)
        for (int j = 0; j < win; ++j) {
          const double wt = g[static_cast<size_t>(i * win + j)];
          ma += wt * a[static_cast<size_t>((y + i) * w + x + j)];
          mb += wt * b[static_cast<size_t>((y + i) * w + x + j)];
        }
      double va = 0, vb = 0, cov = 0;
      for (int i = 0; i < win; ++i)
        for (int j = 0; j < win; ++j) {
          const double wt = g[static_cast<size_t>(i * win + j)];
          const double da = a[static_cast<size_t>((y + i) * w + x + j)] - ma;
          const double db = b[static_cast<size_t>((y + i) * w + x + j)] - mb;
          va += wt * da * da;
          vb += wt * db * db;
          cov += wt * da * db;
        }
      total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++count;
    }
  return total / count;
}

}  // namespace oracle
