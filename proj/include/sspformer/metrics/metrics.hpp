#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "sspformer/core/errors.hpp"
#include "sspformer/core/ops.hpp"
#include "sspformer/core/tensor.hpp"

namespace sspf {

// 10*log10(peak^2/MSE); identical images report the +inf sentinel.
inline double psnr(const RealTensor& pred, const RealTensor& target, double peak = 1.0) {
  if (pred.shape != target.shape)
    throw ShapeError("psnr shapes differ: " + pred.shape.str() + " vs " + target.shape.str());
  if (peak <= 0.0) throw ContractError("psnr peak must be > 0");
  double mse = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred.data[i] - target.data[i];
    mse += d * d;
  }
  mse /= static_cast<double>(pred.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / mse);
}

namespace detail {
inline std::vector<double> gaussian_window(std::size_t n, double sigma) {
  std::vector<double> w(n);
  const double c = (static_cast<double>(n) - 1.0) / 2.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(i) - c;
    w[i] = std::exp(-d * d / (2.0 * sigma * sigma));
    sum += w[i];
  }
  for (auto& x : w) x /= sum;
  return w;
}
}  // namespace detail

// Mean SSIM over all fully-contained windows, Gaussian-weighted (sigma 1.5).
inline double ssim(const RealTensor& pred, const RealTensor& target, std::size_t window = 11, double k1 = 0.01,
                   double k2 = 0.03, double peak = 1.0) {
  if (pred.shape != target.shape)
    throw ShapeError("ssim shapes differ: " + pred.shape.str() + " vs " + target.shape.str());
  if (pred.rank() != 2) throw ShapeError("ssim expects [H,W], got " + pred.shape.str());
  const std::size_t h = pred.shape[0], w = pred.shape[1];
  if (h < window || w < window)
    throw ShapeError("ssim image " + pred.shape.str() + " smaller than window " + std::to_string(window));
  const std::vector<double> g = detail::gaussian_window(window, 1.5);
  const double c1 = (k1 * peak) * (k1 * peak);
  const double c2 = (k2 * peak) * (k2 * peak);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i0 = 0; i0 + window <= h; ++i0)
    for (std::size_t j0 = 0; j0 + window <= w; ++j0) {
      double mu_x = 0.0, mu_y = 0.0;
      for (std::size_t i = 0; i < window; ++i)
        for (std::size_t j = 0; j < window; ++j) {
          const double wt = g[i] * g[j];
          mu_x += wt * pred.at(i0 + i, j0 + j);
          mu_y += wt * target.at(i0 + i, j0 + j);
        }
      double var_x = 0.0, var_y = 0.0, cov = 0.0;
      for (std::size_t i = 0; i < window; ++i)
        for (std::size_t j = 0; j < window; ++j) {
          const double wt = g[i] * g[j];
          const double dx = pred.at(i0 + i, j0 + j) - mu_x;
          const double dy = target.at(i0 + i, j0 + j) - mu_y;
          var_x += wt * dx * dx;
          var_y += wt * dy * dy;
          cov += wt * dx * dy;
        }
      const double num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2);
      const double den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2);
      total += num / den;
      ++count;
    }
  return total / static_cast<double>(count);
}

// 2|A∩B| / (|A|+|B|); masks are tensors thresholded at 0.5. Both empty -> 1.
inline double dice(const RealTensor& pred_mask, const RealTensor& target_mask) {
  if (pred_mask.shape != target_mask.shape)
    throw ShapeError("dice shapes differ: " + pred_mask.shape.str() + " vs " + target_mask.shape.str());
  std::size_t a = 0, b = 0, both = 0;
  for (std::size_t i = 0; i < pred_mask.size(); ++i) {
    const bool pa = pred_mask.data[i] > 0.5;
    const bool pb = target_mask.data[i] > 0.5;
    a += pa ? 1 : 0;
    b += pb ? 1 : 0;
    both += (pa && pb) ? 1 : 0;
  }
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

namespace detail {
// Boundary pixels: in the mask with at least one 4-neighbor outside it
// (off-image counts as outside). Returned as (row, col) pairs.
inline std::vector<std::pair<std::size_t, std::size_t>> mask_boundary(const RealTensor& mask) {
  if (mask.rank() != 2) throw ShapeError("mask boundary expects [H,W], got " + mask.shape.str());
  const std::size_t h = mask.shape[0], w = mask.shape[1];
  std::vector<std::pair<std::size_t, std::size_t>> pts;
  auto inside = [&](long i, long j) {
    if (i < 0 || j < 0 || i >= static_cast<long>(h) || j >= static_cast<long>(w)) return false;
    return mask.at(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) > 0.5;
  };
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      if (!(mask.at(i, j) > 0.5)) continue;
      const long li = static_cast<long>(i), lj = static_cast<long>(j);
      if (!inside(li - 1, lj) || !inside(li + 1, lj) || !inside(li, lj - 1) || !inside(li, lj + 1))
        pts.emplace_back(i, j);
    }
  return pts;
}

inline void nearest_distances(const std::vector<std::pair<std::size_t, std::size_t>>& from,
                              const std::vector<std::pair<std::size_t, std::size_t>>& to,
                              std::vector<double>& out) {
  for (const auto& p : from) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& q : to) {
      const double di = static_cast<double>(p.first) - static_cast<double>(q.first);
      const double dj = static_cast<double>(p.second) - static_cast<double>(q.second);
      best = std::min(best, di * di + dj * dj);
    }
    out.push_back(std::sqrt(best));
  }
}
}  // namespace detail

// 95th percentile (linear interpolation) of the pooled symmetric
// boundary-to-boundary nearest Euclidean distances, in pixels.
inline double hd95(const RealTensor& pred_mask, const RealTensor& target_mask) {
  if (pred_mask.shape != target_mask.shape)
    throw ShapeError("hd95 shapes differ: " + pred_mask.shape.str() + " vs " + target_mask.shape.str());
  const auto ba = detail::mask_boundary(pred_mask);
  const auto bb = detail::mask_boundary(target_mask);
  if (ba.empty() || bb.empty()) throw ContractError("hd95 undefined for an empty mask");
  std::vector<double> dists;
  dists.reserve(ba.size() + bb.size());
  detail::nearest_distances(ba, bb, dists);
  detail::nearest_distances(bb, ba, dists);
  return quantile(std::move(dists), 0.95);
}

// Evaluation rows serialized as sample_id,task,metric,value. PSNR is dB, hd95
// pixels (unit spacing), dice and SSIM dimensionless.
struct MetricReport {
  struct Row {
    std::string sample_id;
    std::string task;
    std::string metric;
    double value;
  };
  std::vector<Row> rows;

  void add(std::string sample_id, std::string task, std::string metric, double value) {
    rows.push_back(Row{std::move(sample_id), std::move(task), std::move(metric), value});
  }

  void write_csv(std::ostream& os) const {
    os << "sample_id,task,metric,value\n";
    char buf[64];
    for (const auto& r : rows) {
      os << r.sample_id << ',' << r.task << ',' << r.metric << ',';
      if (std::isinf(r.value)) {
        os << (r.value > 0 ? "inf" : "-inf");
      } else {
        std::snprintf(buf, sizeof(buf), "%.17g", r.value);
        os << buf;
      }
      os << '\n';
    }
  }
};

}  // namespace sspf
